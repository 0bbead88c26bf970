#include "chexopt/train.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "chexopt/error.hpp"
#include "chexopt/rng.hpp"

namespace chexopt::train {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ComputePrecision p) { return p == ComputePrecision::F32 ? "f32" : "f64"; }

ComputePrecision precision_from_string(const std::string& s) {
  if (s == "f32") return ComputePrecision::F32;
  if (s == "f64") return ComputePrecision::F64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

namespace {

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

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TrainConfig TrainConfig::desk_benchmark() {
  TrainConfig c;
  c.epochs = 15;
  c.adamw.lr = 1e-3;
  c.ema_decay = 0.99;
  return c;
}

TrainConfig TrainConfig::ablated_baseline(const TrainConfig& proposed) {
  TrainConfig c = proposed;
  c.arm = "baseline";
  c.adamw.weight_decay = 0.0;
  c.cosine = false;
  c.use_ema = false;
  c.loss_scaling = false;
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (arm.empty()) throw ConfigError("train: arm name must not be empty");
  profile.validate();
  adamw.validate();
  if (cosine) optim::CosineSchedule{adamw.lr, eta_min, static_cast<double>(epochs)}.validate();
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in [0,1)");
  if (!(scaler.scale > 0.0) || !std::isfinite(scaler.scale))
    throw ConfigError("train: initial loss scale must be positive");
  if (!(scaler.growth >= 1.0)) throw ConfigError("train: scaler growth must be >= 1");
  if (!(scaler.backoff > 0.0 && scaler.backoff < 1.0))
    throw ConfigError("train: scaler backoff must lie in (0,1)");
  if (scaler.growth_interval < 1) throw ConfigError("train: scaler growth_interval must be >= 1");
  augmentation.validate();
  if (!(crop_fraction > 0.0 && crop_fraction <= 1.0))
    throw ConfigError("train: crop_fraction must lie in (0,1]");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  if (!cosine) return adamw.lr;
  return optim::cosine_lr(static_cast<double>(epoch),
                          {adamw.lr, eta_min, static_cast<double>(epochs)});
}

json TrainConfig::to_json() const {
  return {
      {"arm", arm},
      {"profile", profile.to_json()},
      {"epochs", epochs},
      {"batch_size", batch_size},
      {"lr", adamw.lr},
      {"weight_decay", adamw.weight_decay},
      {"beta1", adamw.beta1},
      {"beta2", adamw.beta2},
      {"eps", adamw.eps},
      {"exclude_norm_and_bias", adamw.exclude_norm_and_bias},
      {"schedule", cosine ? "cosine" : "constant"},
      {"eta_min", eta_min},
      {"ema", use_ema},
      {"ema_decay", ema_decay},
      {"loss_scaling", loss_scaling},
      {"initial_scale", scaler.scale},
      {"growth_factor", scaler.growth},
      {"backoff_factor", scaler.backoff},
      {"growth_interval", scaler.growth_interval},
      {"emulate_half", scaler.emulate_half},
      {"augmentation",
       {{"hflip_p", augmentation.hflip_p},
        {"rotation_deg", augmentation.rotation_deg},
        {"brightness", augmentation.brightness},
        {"contrast", augmentation.contrast}}},
      {"crop_fraction", crop_fraction},
      {"tencrop", tencrop},
      {"precision", to_string(precision)},
      {"seed", seed},
  };
}

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  static const std::set<std::string> keys = {
      "arm", "profile", "epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "eps",
      "exclude_norm_and_bias", "schedule", "eta_min", "ema", "ema_decay", "loss_scaling",
      "initial_scale", "growth_factor", "backoff_factor", "growth_interval", "emulate_half",
      "augmentation", "crop_fraction", "tencrop", "precision", "seed"};
  const std::string w = "train config";
  reject_unknown(j, keys, w);
  TrainConfig c = base;
  read(j, "arm", c.arm, w);
  if (j.contains("profile")) {
    const json& p = j.at("profile");
    if (p.is_string()) {
      c.profile = model::NetworkProfile::by_name(p.get<std::string>());
    } else if (p.is_object() && p.contains("base")) {
      // {"base": "desk", "input_size": 32}: a named profile with overrides.
      if (!p.at("base").is_string()) throw ConfigError(w + ".profile.base: expected a profile name");
      json merged = model::NetworkProfile::by_name(p.at("base").get<std::string>()).to_json();
      for (auto it = p.begin(); it != p.end(); ++it)
        if (it.key() != "base") merged[it.key()] = it.value();
      c.profile = model::NetworkProfile::from_json(merged);
    } else {
      c.profile = model::NetworkProfile::from_json(p);
    }
  }
  read(j, "epochs", c.epochs, w);
  read(j, "batch_size", c.batch_size, w);
  read(j, "lr", c.adamw.lr, w);
  read(j, "weight_decay", c.adamw.weight_decay, w);
  read(j, "beta1", c.adamw.beta1, w);
  read(j, "beta2", c.adamw.beta2, w);
  read(j, "eps", c.adamw.eps, w);
  read(j, "exclude_norm_and_bias", c.adamw.exclude_norm_and_bias, w);
  if (j.contains("schedule")) {
    std::string s;
    read(j, "schedule", s, w);
    if (s != "cosine" && s != "constant")
      throw ConfigError(w + ".schedule: expected cosine or constant, got '" + s + "'");
    c.cosine = s == "cosine";
  }
  read(j, "eta_min", c.eta_min, w);
  read(j, "ema", c.use_ema, w);
  read(j, "ema_decay", c.ema_decay, w);
  read(j, "loss_scaling", c.loss_scaling, w);
  read(j, "initial_scale", c.scaler.scale, w);
  read(j, "growth_factor", c.scaler.growth, w);
  read(j, "backoff_factor", c.scaler.backoff, w);
  read(j, "growth_interval", c.scaler.growth_interval, w);
  read(j, "emulate_half", c.scaler.emulate_half, w);
  if (j.contains("augmentation")) {
    const json& a = j.at("augmentation");
    const std::string wa = w + ".augmentation";
    reject_unknown(a, {"hflip_p", "rotation_deg", "brightness", "contrast"}, wa);
    read(a, "hflip_p", c.augmentation.hflip_p, wa);
    read(a, "rotation_deg", c.augmentation.rotation_deg, wa);
    read(a, "brightness", c.augmentation.brightness, wa);
    read(a, "contrast", c.augmentation.contrast, wa);
  }
  read(j, "crop_fraction", c.crop_fraction, w);
  read(j, "tencrop", c.tencrop, w);
  if (j.contains("precision")) {
    std::string s;
    read(j, "precision", s, w);
    c.precision = precision_from_string(s);
  }
  read(j, "seed", c.seed, w);
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json(const json& j) { return from_json(j, TrainConfig{}); }

TrainState TrainState::make(const TrainConfig& cfg) {
  TrainState st;
  st.net = model::build_network(cfg.profile, derive_seed(cfg.seed, "init"));
  st.params = st.net.parameters();
  st.opt = optim::OptimizerState::make(st.params);
  if (cfg.use_ema) st.ema = optim::EmaState::make(st.params, cfg.ema_decay);
  if (cfg.loss_scaling) st.scaler = cfg.scaler;
  return st;
}

// ---------------------------------------------------------------------------
// Training

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, "shuffle", epoch));
  shuffle(order.begin(), order.end(), rng);
  return order;
}

std::uint64_t augment_seed(std::uint64_t seed, std::size_t epoch, std::size_t position) {
  return derive_seed(seed, "augment", (static_cast<std::uint64_t>(epoch) << 32) + position);
}

data::Image train_view(const data::Image& img, const TrainConfig& cfg, std::uint64_t sample_seed) {
  std::mt19937_64 rng(sample_seed);
  data::Image a = data::apply_augmentation(img, cfg.augmentation, rng);
  const std::size_t cw = data::crop_size(a.width, cfg.crop_fraction);
  const std::size_t ch = data::crop_size(a.height, cfg.crop_fraction);
  const std::size_t x0 = uniform_index(rng, a.width - cw + 1);
  const std::size_t y0 = uniform_index(rng, a.height - ch + 1);
  return data::crop(a, x0, y0, cw, ch);
}

namespace {
const data::Image& pixels(const SampleRecord& r) {
  if (!r.image) throw ConfigError("sample '" + r.id + "' has no pixels loaded");
  return *r.image;
}
}  // namespace

Batch train_batch(std::span<const SampleRecord* const> train, std::span<const std::size_t> order,
                  std::size_t index, const TrainConfig& cfg, std::size_t epoch) {
  const std::size_t begin = index * cfg.batch_size;
  if (begin >= order.size()) throw ConfigError("train_batch: batch index out of range");
  const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
  std::vector<data::Image> views;
  Batch b;
  views.reserve(end - begin);
  for (std::size_t pos = begin; pos < end; ++pos) {
    const SampleRecord& r = *train[order[pos]];
    views.push_back(train_view(pixels(r), cfg, augment_seed(cfg.seed, epoch, pos)));
    b.labels.push_back(r.label);
  }
  std::vector<const data::Image*> ptrs;
  for (const auto& v : views) ptrs.push_back(&v);
  b.x = data::to_batch(ptrs);
  return b;
}

EpochStats train_one_epoch(TrainState& st, std::span<const SampleRecord* const> train,
                           const TrainConfig& cfg, double lr, std::size_t epoch) {
  if (train.empty()) throw ConfigError("train_one_epoch: empty training split");
  PrecisionGuard precision(cfg.precision);
  const auto order = epoch_order(train.size(), cfg.seed, epoch);
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;

  EpochStats s;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t bi = 0; bi < batches; ++bi) {
    Batch b = train_batch(train, order, bi, cfg, epoch);
    Tensor logits = st.net.forward(b.x, true);
    Tensor loss = model::cross_entropy(logits, b.labels);
    const double lv = loss.item();

    const std::size_t k = logits.dim(1);
    for (std::size_t n = 0; n < b.labels.size(); ++n) {
      const auto row = logits.data().subspan(n * k, k);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == b.labels[n]) ++correct;
    }

    if (st.scaler) {
      const auto r = optim::scaled_step(loss, st.params, st.opt, cfg.adamw, lr, *st.scaler,
                                        st.ema ? &*st.ema : nullptr);
      if (!r.stepped) ++s.skipped_steps;
    } else {
      for (auto& p : st.params) p.tensor.zero_grad();
      backward(loss);
      optim::adamw_step(st.params, st.opt, cfg.adamw, lr);
      if (st.ema) optim::ema_update(*st.ema, st.params);
    }
    loss_sum += lv * static_cast<double>(b.labels.size());
    ++s.steps;
  }
  s.mean_loss = loss_sum / static_cast<double>(train.size());
  s.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(const LogitFn& logits, std::span<const SampleRecord* const> records,
                    const EvalOptions& opt) {
  if (records.empty()) throw ConfigError("evaluate: empty split");
  const std::size_t C = data::kNumClasses;
  const auto& names = data::class_names();
  EvalResult out;
  out.confusion = metrics::ConfusionMatrix(C, std::vector<std::string>(names.begin(), names.end()));
  const std::size_t group = std::max<std::size_t>(1, opt.images_per_batch);
  double loss_sum = 0;

  for (std::size_t start = 0; start < records.size(); start += group) {
    const std::size_t stop = std::min(records.size(), start + group);
    std::vector<data::Image> views;
    std::vector<std::size_t> per_sample;
    for (std::size_t i = start; i < stop; ++i) {
      const data::Image& img = pixels(*records[i]);
      if (opt.tencrop) {
        auto v = data::tencrop(img, opt.crop_fraction);
        per_sample.push_back(v.size());
        std::move(v.begin(), v.end(), std::back_inserter(views));
      } else {
        const std::size_t cw = data::crop_size(img.width, opt.crop_fraction);
        const std::size_t ch = data::crop_size(img.height, opt.crop_fraction);
        views.push_back(data::crop(img, (img.width - cw) / 2, (img.height - ch) / 2, cw, ch));
        per_sample.push_back(1);
      }
    }
    std::vector<const data::Image*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v);
    Tensor z = logits(data::to_batch(ptrs));
    if (z.rank() != 2 || z.dim(0) != views.size() || z.dim(1) != C) {
      throw ShapeError("evaluate: expected logits (" + std::to_string(views.size()) + ", " +
                       std::to_string(C) + "), got " + shape_str(z.shape()));
    }

    std::size_t row = 0;
    for (std::size_t i = start; i < stop; ++i) {
      std::vector<double> p(C, 0.0);
      const std::size_t nv = per_sample[i - start];
      for (std::size_t v = 0; v < nv; ++v, ++row) {
        const auto s = model::softmax(z.data().subspan(row * C, C));
        for (std::size_t k = 0; k < C; ++k) p[k] += s[k];
      }
      for (double& x : p) x /= static_cast<double>(nv);
      const auto pred = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
      const std::size_t y = records[i]->label;
      loss_sum += -std::log(std::max(p[y], std::numeric_limits<double>::min()));
      out.confusion.add(y, pred);
      out.ids.push_back(records[i]->id);
      out.predictions.push_back(pred);
      out.probabilities.push_back(std::move(p));
    }
  }
  out.macro = metrics::macro_metrics(out.confusion);
  out.loss = loss_sum / static_cast<double>(records.size());
  return out;
}

EvalResult validate(model::Network& net, std::span<const SampleRecord* const> records,
                    const EvalOptions& opt, optim::EmaState* ema) {
  NoGradGuard no_grad;
  std::optional<optim::EmaSwap> swap;
  if (ema) swap.emplace(*ema, net.parameters());
  return evaluate([&](const Tensor& x) { return net.forward(x, false); }, records, opt);
}

// ---------------------------------------------------------------------------
// Checkpoints

const std::vector<double>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, v] : blobs)
    if (n == name) return &v;
  return nullptr;
}

std::uint64_t profile_fingerprint(const model::NetworkProfile& profile) {
  return fnv1a(profile.to_json().dump());
}

namespace {

constexpr char kMagic[5] = {'C', 'H', 'X', 'O', '1'};

struct Writer {
  std::vector<unsigned char> out;
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }
};

struct Reader {
  std::span<const unsigned char> in;
  std::size_t pos = 0;
  std::string source;

  void need(std::size_t n, const char* what) {
    if (in.size() - pos < n)
      throw ParseError(source + ": truncated checkpoint while reading " + what, pos);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[pos++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[pos++]) << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in.data() + pos), n);
    pos += n;
    return s;
  }
};

std::uint64_t fnv_bytes(std::span<const unsigned char> b) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.bytes(std::string_view(kMagic, 5));
  w.u32(Checkpoint::kVersion);
  w.u64(ck.fingerprint);
  w.u64(ck.epoch);
  w.f64(ck.val_macro_f1);
  const std::string meta = ck.meta.dump();
  w.u64(meta.size());
  w.bytes(meta);
  w.u64(ck.blobs.size());
  for (const auto& [name, values] : ck.blobs) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u64(values.size());
    for (double v : values) w.f64(v);
  }
  w.u64(fnv_bytes(w.out));
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes, const std::string& source) {
  Reader r{bytes, 0, source};
  if (r.str(5, "magic") != std::string_view(kMagic, 5))
    throw ParseError(source + ": not a checkpoint (bad magic)", 0);
  const std::uint32_t version = r.u32("version");
  if (version != Checkpoint::kVersion) {
    throw ParseError(source + ": unsupported checkpoint version " + std::to_string(version), 5);
  }
  Checkpoint ck;
  ck.fingerprint = r.u64("fingerprint");
  ck.epoch = r.u64("epoch");
  ck.val_macro_f1 = r.f64("validation F1");
  const std::uint64_t meta_len = r.u64("metadata length");
  const std::size_t meta_at = r.pos;
  const std::string meta = r.str(meta_len, "metadata");
  try {
    ck.meta = json::parse(meta);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": metadata is not JSON", meta_at + e.byte);
  }
  const std::uint64_t nblobs = r.u64("blob count");
  for (std::uint64_t b = 0; b < nblobs; ++b) {
    const std::uint32_t name_len = r.u32("blob name length");
    std::string name = r.str(name_len, "blob name");
    const std::uint64_t count = r.u64("blob length");
    if (count > (bytes.size() - r.pos) / 8)
      throw ParseError(source + ": blob '" + name + "' runs past the end of the file", r.pos);
    std::vector<double> v(count);
    for (auto& x : v) x = r.f64("blob data");
    ck.blobs.emplace_back(std::move(name), std::move(v));
  }
  const std::size_t body = r.pos;
  const std::uint64_t sum = r.u64("checksum");
  if (sum != fnv_bytes(bytes.first(body))) throw ParseError(source + ": checksum mismatch", body);
  if (r.pos != bytes.size()) throw ParseError(source + ": trailing bytes after checksum", r.pos);
  return ck;
}

void write_checkpoint(const Checkpoint& ck, const fs::path& path) {
  const auto bytes = encode_checkpoint(ck);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

Checkpoint capture(TrainState& st, std::uint64_t epoch, double val_macro_f1) {
  Checkpoint ck;
  ck.fingerprint = profile_fingerprint(st.net.profile());
  ck.epoch = epoch;
  ck.val_macro_f1 = val_macro_f1;
  auto add = [&](const std::string& name, std::span<const double> v) {
    ck.blobs.emplace_back(name, std::vector<double>(v.begin(), v.end()));
  };
  for (const auto& p : st.params) add("param/" + p.name, p.tensor.data());
  for (const auto& b : st.net.buffers()) add("buffer/" + b.name, b.tensor.data());
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    add("adam_m/" + st.params[i].name, st.opt.m[i]);
    add("adam_v/" + st.params[i].name, st.opt.v[i]);
  }
  ck.meta["profile"] = st.net.profile().to_json();
  ck.meta["optimizer_t"] = st.opt.t;
  if (st.ema) {
    for (std::size_t i = 0; i < st.params.size(); ++i) add("ema/" + st.params[i].name, st.ema->shadow[i]);
    ck.meta["ema"] = {{"decay", st.ema->decay}, {"updates", st.ema->updates}};
  }
  if (st.scaler) ck.meta["scaler"] = {{"scale", st.scaler->scale}, {"successes", st.scaler->successes}};
  return ck;
}

void restore(TrainState& st, const Checkpoint& ck) {
  const std::uint64_t want = profile_fingerprint(st.net.profile());
  if (ck.fingerprint != want) {
    std::ostringstream os;
    os << "checkpoint fingerprint " << std::hex << ck.fingerprint
       << " does not match the configured profile '" << st.net.profile().name << "' (" << want << ")";
    throw ConfigError(os.str());
  }
  auto load = [&](const std::string& name, std::span<double> dst) {
    const auto* v = ck.find(name);
    if (!v) throw ConfigError("checkpoint has no blob '" + name + "'");
    if (v->size() != dst.size()) {
      throw ShapeError("checkpoint blob '" + name + "' has " + std::to_string(v->size()) +
                       " values, model expects " + std::to_string(dst.size()));
    }
    std::copy(v->begin(), v->end(), dst.begin());
  };
  for (auto& p : st.params) load("param/" + p.name, p.tensor.data());
  for (auto& b : st.net.buffers()) load("buffer/" + b.name, b.tensor.data());
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    load("adam_m/" + st.params[i].name, st.opt.m[i]);
    load("adam_v/" + st.params[i].name, st.opt.v[i]);
  }
  st.opt.t = ck.meta.value("optimizer_t", std::uint64_t{0});
  if (st.ema) {
    if (!ck.meta.contains("ema")) throw ConfigError("checkpoint carries no EMA shadow");
    for (std::size_t i = 0; i < st.params.size(); ++i) load("ema/" + st.params[i].name, st.ema->shadow[i]);
    st.ema->updates = ck.meta["ema"].value("updates", std::uint64_t{0});
  }
  if (st.scaler && ck.meta.contains("scaler")) {
    st.scaler->scale = ck.meta["scaler"].at("scale").get<double>();
    st.scaler->successes = ck.meta["scaler"].at("successes").get<std::uint64_t>();
  }
}

// ---------------------------------------------------------------------------
// Summaries

namespace {

json epoch_to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},
          {"lr", e.lr},
          {"train_loss", e.train.mean_loss},
          {"train_accuracy", e.train.train_accuracy},
          {"steps", e.train.steps},
          {"skipped_steps", e.train.skipped_steps},
          {"val_loss", e.val_loss},
          {"val_accuracy", e.val_accuracy},
          {"val_macro_f1", e.val_macro_f1},
          {"checkpointed", e.checkpointed}};
}

EpochRecord epoch_from_json(const json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.train.mean_loss = j.at("train_loss").get<double>();
  e.train.train_accuracy = j.at("train_accuracy").get<double>();
  e.train.steps = j.at("steps").get<std::size_t>();
  e.train.skipped_steps = j.at("skipped_steps").get<std::size_t>();
  e.val_loss = j.at("val_loss").get<double>();
  e.val_accuracy = j.at("val_accuracy").get<double>();
  e.val_macro_f1 = j.at("val_macro_f1").get<double>();
  e.checkpointed = j.at("checkpointed").get<bool>();
  return e;
}

}  // namespace

json RunSummary::to_json() const {
  const json cfg = config.is_object() ? config : json::object();
  json hist = json::array();
  for (const auto& e : history) hist.push_back(epoch_to_json(e));
  std::size_t skipped = 0;
  for (const auto& e : history) skipped += e.train.skipped_steps;
  json j = {
      {"arm", arm},
      {"seed", seed},
      {"epochs", epochs},
      {"completed", completed},
      {"best_epoch", best_epoch},
      {"best_val_macro_f1", best_val_macro_f1},
      {"skipped_steps", skipped},
      {"history", hist},
      {"id_audit",
       {{"train", audit.train},
        {"val", audit.val},
        {"test", audit.test},
        {"overlap", audit.overlap},
        {"passed", audit.passed()}}},
      {"augmented_cross_split", leakage_cross_split},
      {"evaluation",
       {{"tencrop_averaging", "probabilities"},
        {"weights", cfg.value("ema", false) ? "ema" : "raw"},
        {"checkpoint", "best validation macro-F1, earliest epoch on ties"}}},
      {"config", cfg},
  };
  if (completed) {
    const auto pc = metrics::per_class_metrics(test_confusion);
    json per = json::array();
    for (std::size_t k = 0; k < pc.size(); ++k) {
      per.push_back({{"class", test_confusion.names()[k]},
                     {"accuracy", pc[k].accuracy},
                     {"precision", pc[k].precision},
                     {"recall", pc[k].recall},
                     {"f1", pc[k].f1},
                     {"support", pc[k].support}});
    }
    j["test"] = {{"accuracy", test.accuracy},
                 {"macro_precision", test.precision},
                 {"macro_recall", test.recall},
                 {"macro_f1", test.f1},
                 {"loss", test_loss},
                 {"per_class", per},
                 {"confusion", test_confusion.cells()}};
  }
  return j;
}

RunSummary RunSummary::from_json(const json& j) {
  RunSummary s;
  try {
    s.arm = j.at("arm").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.epochs = j.at("epochs").get<std::size_t>();
    s.completed = j.at("completed").get<bool>();
    s.best_epoch = j.at("best_epoch").get<std::size_t>();
    s.best_val_macro_f1 = j.at("best_val_macro_f1").get<double>();
    for (const auto& e : j.at("history")) s.history.push_back(epoch_from_json(e));
    const auto& a = j.at("id_audit");
    s.audit = {a.at("train").get<std::size_t>(), a.at("val").get<std::size_t>(),
               a.at("test").get<std::size_t>(), a.at("overlap").get<std::size_t>()};
    s.leakage_cross_split = j.value("augmented_cross_split", std::size_t{0});
    s.config = j.contains("config") && j.at("config").is_object() ? j.at("config") : json::object();
    if (j.contains("test")) {
      const auto& t = j.at("test");
      s.test.accuracy = t.at("accuracy").get<double>();
      s.test.precision = t.at("macro_precision").get<double>();
      s.test.recall = t.at("macro_recall").get<double>();
      s.test.f1 = t.at("macro_f1").get<double>();
      s.test_loss = t.value("loss", 0.0);
      if (t.contains("confusion") && !t.at("confusion").empty()) {
        const auto& names = data::class_names();
        s.test_confusion = metrics::ConfusionMatrix::from_counts(
            data::kNumClasses, t.at("confusion").get<std::vector<std::uint64_t>>(),
            std::vector<std::string>(names.begin(), names.end()));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run summary: ") + e.what());
  }
  return s;
}

RunSummary load_summary(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "summary.json" : path;
  std::ifstream f(file);
  if (!f) throw IoError("cannot open run summary " + file.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError(file.string() + ": " + e.what(), e.byte);
  }
  return RunSummary::from_json(j);
}

// ---------------------------------------------------------------------------
// Runs

namespace {

std::string metrics_csv(const std::vector<EpochRecord>& hist) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,train_accuracy,skipped_steps,val_loss,val_accuracy,val_macro_f1,"
        "checkpointed\n";
  for (const auto& e : hist) {
    os << e.epoch << ',' << fmt17(e.lr) << ',' << fixed6(e.train.mean_loss) << ','
       << fixed6(e.train.train_accuracy) << ',' << e.train.skipped_steps << ','
       << fixed6(e.val_loss) << ',' << fixed6(e.val_accuracy) << ',' << fixed6(e.val_macro_f1)
       << ',' << (e.checkpointed ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string lr_trace_csv(const std::vector<EpochRecord>& hist) {
  std::ostringstream os;
  os << "t,lr\n";
  for (const auto& e : hist) os << e.epoch - 1 << ',' << fmt17(e.lr) << '\n';
  return os.str();
}

std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu.ckpt", epoch);
  return buf;
}

}  // namespace

RunSummary run_experiment(const TrainConfig& cfg, const data::DatasetManifest& manifest,
                          const fs::path& run_dir, const RunOptions& opts) {
  cfg.validate();
  std::vector<const SampleRecord*> train, val, test;
  for (const auto& r : manifest.records) {
    switch (r.split) {
      case data::Split::Train: train.push_back(&r); break;
      case data::Split::Val: val.push_back(&r); break;
      case data::Split::Test: test.push_back(&r); break;
      case data::Split::Unassigned:
        throw ConfigError("run_experiment: record '" + r.id + "' has no split; run split first");
    }
  }
  if (train.empty() || val.empty() || test.empty())
    throw ConfigError("run_experiment: train, val and test splits must all be non-empty");

  RunSummary sum;
  sum.arm = cfg.arm;
  sum.seed = cfg.seed;
  sum.epochs = cfg.epochs;
  sum.config = cfg.to_json();
  sum.leakage_cross_split = data::leakage_report(manifest).cross_split;

  std::unordered_set<std::string> train_ids;
  for (const auto* r : train) train_ids.insert(r->id);
  sum.audit.train = train.size();

  std::error_code ec;
  fs::create_directories(run_dir / "checkpoints", ec);
  if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());

  PrecisionGuard precision(cfg.precision);
  TrainState st = TrainState::make(cfg);
  const EvalOptions eval{cfg.tencrop, cfg.crop_fraction};
  optim::EmaState* ema = st.ema ? &*st.ema : nullptr;

  auto audit_ids = [&](const EvalResult& r, std::size_t& seen) {
    seen = r.ids.size();
    for (const auto& id : r.ids)
      if (train_ids.count(id)) ++sum.audit.overlap;
  };

  std::size_t start = 0;
  const fs::path resume_path = run_dir / "resume.ckpt";
  if (opts.resume && fs::exists(resume_path)) {
    const Checkpoint ck = read_checkpoint(resume_path);
    if (ck.meta.value("config", json()) != sum.config)
      throw ConfigError(resume_path.string() + " was written under a different configuration");
    restore(st, ck);
    for (const auto& e : ck.meta.at("history")) sum.history.push_back(epoch_from_json(e));
    sum.best_epoch = ck.meta.at("best_epoch").get<std::size_t>();
    sum.best_val_macro_f1 = ck.meta.at("best_val_macro_f1").get<double>();
    sum.audit.overlap = ck.meta.value("audit_overlap", std::size_t{0});
    start = ck.epoch;
  } else {
    // A fresh run must not pick up checkpoints of an earlier one.
    for (const auto& entry : fs::directory_iterator(run_dir / "checkpoints"))
      if (entry.path().extension() == ".ckpt") fs::remove(entry.path());
    fs::remove(resume_path);
  }

  for (std::size_t e = start; e < cfg.epochs; ++e) {
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr = cfg.lr_at(e);
    rec.train = train_one_epoch(st, train, cfg, rec.lr, e);
    const EvalResult v = validate(st.net, val, eval, ema);
    audit_ids(v, sum.audit.val);
    rec.val_loss = v.loss;
    rec.val_accuracy = v.macro.accuracy;
    rec.val_macro_f1 = v.macro.f1;
    if (sum.best_epoch == 0 || rec.val_macro_f1 > sum.best_val_macro_f1) {
      sum.best_epoch = rec.epoch;
      sum.best_val_macro_f1 = rec.val_macro_f1;
      rec.checkpointed = true;
      Checkpoint ck = capture(st, rec.epoch, rec.val_macro_f1);
      ck.meta["config"] = sum.config;
      write_checkpoint(ck, run_dir / "checkpoints" / checkpoint_name(rec.epoch));
    }
    sum.history.push_back(rec);

    Checkpoint resume = capture(st, rec.epoch, rec.val_macro_f1);
    resume.meta["config"] = sum.config;
    json hist = json::array();
    for (const auto& h : sum.history) hist.push_back(epoch_to_json(h));
    resume.meta["history"] = hist;
    resume.meta["best_epoch"] = sum.best_epoch;
    resume.meta["best_val_macro_f1"] = sum.best_val_macro_f1;
    resume.meta["audit_overlap"] = sum.audit.overlap;
    write_checkpoint(resume, resume_path);
    write_text(run_dir / "metrics.csv", metrics_csv(sum.history));
    write_text(run_dir / "lr_trace.csv", lr_trace_csv(sum.history));
    if (opts.on_epoch) opts.on_epoch(rec);
    if (opts.stop_after_epoch && rec.epoch == *opts.stop_after_epoch && rec.epoch < cfg.epochs)
      return sum;
  }
  sum.audit.val = val.size();

  restore(st, read_checkpoint(run_dir / "checkpoints" / checkpoint_name(sum.best_epoch)));
  const EvalResult t = validate(st.net, test, eval, ema);
  audit_ids(t, sum.audit.test);
  sum.test_confusion = t.confusion;
  sum.test = t.macro;
  sum.test_loss = t.loss;
  sum.completed = true;

  if (!sum.audit.passed()) {
    throw ConfigError("id audit failed: " + std::to_string(sum.audit.overlap) +
                      " training ids were evaluated outside the training split");
  }
  write_text(run_dir / "confusion_matrix.txt", metrics::confusion_text(t.confusion));
  write_text(run_dir / "per_class.csv", metrics::per_class_csv(t.confusion));
  write_text(run_dir / "summary.json", sum.to_json().dump(2) + "\n");
  return sum;
}

// ---------------------------------------------------------------------------
// Multi-run comparison

void ExperimentPlan::validate() const {
  if (seeds.size() < 2) throw ConfigError("experiment plan: at least two seeds are required");
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size()) throw ConfigError("experiment plan: seeds must be distinct");
  if (proposed.arm == baseline.arm)
    throw ConfigError("experiment plan: the two arms need distinct names");
  proposed.validate();
  baseline.validate();
}

ComparisonReport compare_runs(const std::vector<RunSummary>& baseline,
                              const std::vector<RunSummary>& proposed,
                              std::uint64_t bootstrap_seed, std::size_t bootstrap_iterations) {
  auto by_seed = [](const std::vector<RunSummary>& runs, const char* arm) {
    std::map<std::uint64_t, const RunSummary*> m;
    for (const auto& r : runs) {
      if (!r.completed) {
        throw ConfigError(std::string(arm) + " run for seed " + std::to_string(r.seed) +
                          " did not complete");
      }
      if (!m.emplace(r.seed, &r).second) {
        throw ConfigError(std::string(arm) + " arm has seed " + std::to_string(r.seed) + " twice");
      }
    }
    return m;
  };
  const auto b = by_seed(baseline, "baseline");
  const auto p = by_seed(proposed, "proposed");
  if (b.size() < 2 || p.size() < 2)
    throw ConfigError("compare: each arm needs at least 2 runs (n >= 2) for a paired test");
  std::vector<std::uint64_t> bs, ps;
  for (const auto& kv : b) bs.push_back(kv.first);
  for (const auto& kv : p) ps.push_back(kv.first);
  if (bs != ps) throw ConfigError("compare: the arms were run on different seed sets; pairing is undefined");

  ComparisonReport rep;
  rep.seeds = bs;
  using Get = double (*)(const metrics::MacroMetrics&);
  const std::pair<const char*, Get> cols[] = {
      {"Accuracy (%)", [](const metrics::MacroMetrics& m) { return m.accuracy; }},
      {"Precision (%)", [](const metrics::MacroMetrics& m) { return m.precision; }},
      {"Recall (%)", [](const metrics::MacroMetrics& m) { return m.recall; }},
      {"F1-Score (%)", [](const metrics::MacroMetrics& m) { return m.f1; }},
  };
  for (std::size_t c = 0; c < std::size(cols); ++c) {
    std::vector<double> xb, xp;
    for (auto s : bs) {
      xb.push_back(100.0 * cols[c].second(b.at(s)->test));
      xp.push_back(100.0 * cols[c].second(p.at(s)->test));
    }
    rep.rows.push_back(metrics::compare_metric(cols[c].first, xb, xp,
                                               derive_seed(bootstrap_seed, "bootstrap", c),
                                               bootstrap_iterations));
    rep.degenerate = rep.degenerate || rep.rows.back().degenerate;
  }
  const std::string bname = baseline.front().arm, pname = proposed.front().arm;
  rep.markdown = metrics::comparison_markdown(rep.rows, bs.size(), bname, pname);

  std::ostringstream csv;
  csv << "arm,seed,accuracy,precision,recall,f1,best_epoch,best_val_macro_f1\n";
  for (const auto* arm : {&b, &p}) {
    for (const auto& [seed, r] : *arm) {
      csv << r->arm << ',' << seed << ',' << fixed6(r->test.accuracy) << ','
          << fixed6(r->test.precision) << ',' << fixed6(r->test.recall) << ','
          << fixed6(r->test.f1) << ',' << r->best_epoch << ',' << fixed6(r->best_val_macro_f1)
          << '\n';
    }
  }
  rep.per_run_csv = csv.str();
  return rep;
}

void write_report(const ComparisonReport& r, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir.string() + ": " + ec.message());
  write_text(dir / "table7.md", r.markdown);
  write_text(dir / "per_run.csv", r.per_run_csv);
}

std::size_t worker_cap(std::size_t requested) {
  std::size_t n = std::max<std::size_t>(1, requested);
  if (const char* env = std::getenv("CHEXOPT_THREADS")) {
    char* end = nullptr;
    const unsigned long long cap = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0' || cap == 0)
      throw ConfigError(std::string("CHEXOPT_THREADS must be a positive integer, got '") + env + "'");
    n = std::min<std::size_t>(n, cap);
  }
  return n;
}

void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; !failed && (i = next++) < n;) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!first) first = std::current_exception();
            failed = true;
          }
        }
      });
    }
  }
  if (first) std::rethrow_exception(first);
}

ComparisonReport multi_run_compare(const ExperimentPlan& plan, const data::DatasetManifest& manifest,
                                   const RunOptions& opts) {
  plan.validate();
  struct Job {
    TrainConfig cfg;
    fs::path dir;
  };
  std::vector<Job> jobs;
  for (const TrainConfig* arm : {&plan.baseline, &plan.proposed}) {
    for (auto s : plan.seeds) {
      Job j{*arm, plan.out_dir / arm->arm / ("seed_" + std::to_string(s))};
      j.cfg.seed = s;
      jobs.push_back(std::move(j));
    }
  }
  std::vector<RunSummary> results(jobs.size());
  parallel_for(jobs.size(), worker_cap(plan.parallel), [&](std::size_t i) {
    results[i] = run_experiment(jobs[i].cfg, manifest, jobs[i].dir, {opts.resume, {}, {}});
  });
  const std::size_t n = plan.seeds.size();
  std::vector<RunSummary> b(results.begin(), results.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<RunSummary> p(results.begin() + static_cast<std::ptrdiff_t>(n), results.end());
  ComparisonReport rep = compare_runs(b, p, plan.bootstrap_seed);
  write_report(rep, plan.out_dir);
  return rep;
}

}  // namespace chexopt::train
