#include "chexopt/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>

#include "chexopt/error.hpp"
#include "chexopt/rng.hpp"

namespace chexopt::config {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kDataKeys = {"per_class", "image_size", "seed", "balance", "split"};
const std::set<std::string> kModelKeys = {"profile"};
const std::set<std::string> kOptimKeys = {
    "lr", "weight_decay", "beta1", "beta2", "eps", "exclude_norm_and_bias", "schedule", "eta_min",
    "ema", "ema_decay", "loss_scaling", "initial_scale", "growth_factor", "backoff_factor",
    "growth_interval", "emulate_half", "precision"};
const std::set<std::string> kTrainKeys = {"arm", "epochs", "batch_size", "seeds", "parallel",
                                          "crop_fraction", "tencrop", "augmentation"};
const std::set<std::string> kReportKeys = {"out_dir", "bootstrap_iterations", "bootstrap_seed",
                                           "formats"};

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

data::AugmentationPolicy read_policy(const json& j, data::AugmentationPolicy p, const std::string& where) {
  reject_unknown(j, {"hflip_p", "rotation_deg", "brightness", "contrast"}, where);
  read(j, "hflip_p", p.hflip_p, where);
  read(j, "rotation_deg", p.rotation_deg, where);
  read(j, "brightness", p.brightness, where);
  read(j, "contrast", p.contrast, where);
  return p;
}

json policy_json(const data::AugmentationPolicy& p) {
  return {{"hflip_p", p.hflip_p},
          {"rotation_deg", p.rotation_deg},
          {"brightness", p.brightness},
          {"contrast", p.contrast}};
}

}  // namespace

bool ReportSection::wants(const std::string& format) const {
  return std::find(formats.begin(), formats.end(), format) != formats.end();
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  auto number = [&](const std::string& s) -> std::uint64_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("seeds: '" + s + "' is not a non-negative integer (in '" + text + "')");
    return std::stoull(s);
  };
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, comma - start);
    const std::size_t dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(number(item));
    } else {
      const auto lo = number(item.substr(0, dots)), hi = number(item.substr(dots + 2));
      if (hi < lo) throw ConfigError("seeds: empty range '" + item + "'");
      for (auto s = lo; s <= hi; ++s) out.push_back(s);
    }
    start = comma + 1;
  }
  std::set<std::uint64_t> uniq(out.begin(), out.end());
  if (uniq.size() != out.size()) throw ConfigError("seeds: '" + text + "' repeats a seed");
  return out;
}

CliConfig CliConfig::from_json(const json& j) {
  reject_unknown(j, {"data", "model", "optim", "train", "report"}, "config");
  CliConfig c;

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, kDataKeys, "data");
    if (d.contains("per_class")) {
      const json& pc = d.at("per_class");
      if (pc.is_number_unsigned()) {
        c.data.per_class.fill(pc.get<std::size_t>());
      } else if (pc.is_array() && pc.size() == data::kNumClasses) {
        for (std::size_t k = 0; k < data::kNumClasses; ++k) {
          if (!pc[k].is_number_unsigned()) throw ConfigError("data.per_class: counts must be non-negative integers");
          c.data.per_class[k] = pc[k].get<std::size_t>();
        }
      } else if (pc.is_object()) {
        c.data.per_class.fill(0);
        for (auto it = pc.begin(); it != pc.end(); ++it) {
          if (!it.value().is_number_unsigned()) throw ConfigError("data.per_class: counts must be non-negative integers");
          c.data.per_class[data::class_index(it.key())] = it.value().get<std::size_t>();
        }
      } else {
        throw ConfigError("data.per_class: expected a count, a 5-element array or a class->count object");
      }
    }
    read(d, "image_size", c.data.image_size, "data");
    read(d, "seed", c.data.seed, "data");
    if (d.contains("balance")) {
      const json& b = d.at("balance");
      reject_unknown(b, {"target", "augmentation"}, "data.balance");
      if (b.contains("target") && !b.at("target").is_null()) {
        std::size_t t = 0;
        read(b, "target", t, "data.balance");
        c.data.balance_target = t;
      }
      if (b.contains("augmentation"))
        c.data.balance_augmentation = read_policy(b.at("augmentation"), c.data.balance_augmentation,
                                                  "data.balance.augmentation");
    }
    if (d.contains("split")) {
      const json& s = d.at("split");
      reject_unknown(s, {"train", "val", "test"}, "data.split");
      read(s, "train", c.data.split.train, "data.split");
      read(s, "val", c.data.split.val, "data.split");
      read(s, "test", c.data.split.test, "data.split");
    }
  }

  // model, optim and train map onto the flat TrainConfig document.
  json flat = json::object();
  if (j.contains("model")) {
    reject_unknown(j.at("model"), kModelKeys, "model");
    flat.update(j.at("model"));
  }
  if (j.contains("optim")) {
    reject_unknown(j.at("optim"), kOptimKeys, "optim");
    flat.update(j.at("optim"));
  }
  if (j.contains("train")) {
    json t = j.at("train");
    reject_unknown(t, kTrainKeys, "train");
    if (t.contains("seeds")) {
      const json& s = t.at("seeds");
      if (s.is_string()) {
        c.seeds = parse_seeds(s.get<std::string>());
      } else if (s.is_array()) {
        c.seeds.clear();
        for (const auto& v : s) {
          if (!v.is_number_unsigned()) throw ConfigError("train.seeds: expected non-negative integers");
          c.seeds.push_back(v.get<std::uint64_t>());
        }
      } else {
        throw ConfigError("train.seeds: expected \"0..8\" style text or an array");
      }
      t.erase("seeds");
    }
    if (t.contains("parallel")) {
      read(t, "parallel", c.parallel, "train");
      t.erase("parallel");
    }
    flat.update(t);
  }
  try {
    c.train = train::TrainConfig::from_json(flat);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model/optim/train: ") + e.what());
  }

  if (j.contains("report")) {
    const json& r = j.at("report");
    reject_unknown(r, kReportKeys, "report");
    std::string out = c.report.out_dir.string();
    read(r, "out_dir", out, "report");
    c.report.out_dir = out;
    read(r, "bootstrap_iterations", c.report.bootstrap_iterations, "report");
    read(r, "bootstrap_seed", c.report.bootstrap_seed, "report");
    read(r, "formats", c.report.formats, "report");
  }
  c.validate();
  return c;
}

void CliConfig::validate() const {
  if (data.image_size < 32) throw ConfigError("data.image_size must be >= 32");
  data.balance_augmentation.validate();
  data.split.validate();
  if (data.balance_target && *data.balance_target < 1) throw ConfigError("data.balance.target must be >= 1");
  train.validate();
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size()) throw ConfigError("train.seeds must be distinct");
  if (parallel < 1) throw ConfigError("train.parallel must be >= 1");
  if (report.bootstrap_iterations < 1) throw ConfigError("report.bootstrap_iterations must be >= 1");
  for (const auto& f : report.formats)
    if (f != "md" && f != "csv") throw ConfigError("report.formats: unknown format '" + f + "' (md, csv)");
}

CliConfig CliConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json CliConfig::to_json() const {
  const json t = train.to_json();
  json optim = json::object(), tr = json::object();
  for (const auto& k : kOptimKeys) optim[k] = t.at(k);
  for (const auto& k : kTrainKeys)
    if (t.contains(k)) tr[k] = t.at(k);
  tr["seeds"] = seeds;
  tr["parallel"] = parallel;
  json balance = {{"augmentation", policy_json(data.balance_augmentation)}};
  balance["target"] = data.balance_target ? json(*data.balance_target) : json(nullptr);
  return {
      {"data",
       {{"per_class", data.per_class},
        {"image_size", data.image_size},
        {"seed", data.seed},
        {"balance", balance},
        {"split", {{"train", data.split.train}, {"val", data.split.val}, {"test", data.split.test}}}}},
      {"model", {{"profile", t.at("profile")}}},
      {"optim", optim},
      {"train", tr},
      {"report",
       {{"out_dir", report.out_dir.string()},
        {"bootstrap_iterations", report.bootstrap_iterations},
        {"bootstrap_seed", report.bootstrap_seed},
        {"formats", report.formats}}},
  };
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace chexopt::config
