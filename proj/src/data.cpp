#include "chexopt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "chexopt/error.hpp"
#include "chexopt/rng.hpp"

namespace chexopt::data {

namespace fs = std::filesystem;

const std::array<std::string, kNumClasses>& class_names() {
  static const std::array<std::string, kNumClasses> names = {
      "Cardiomegaly", "COVID-19", "Normal", "Pneumonia", "Tuberculosis"};
  return names;
}

std::size_t class_index(const std::string& name) {
  const auto& names = class_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw ConfigError("unknown class '" + name + "'");
}

namespace {
const std::array<std::string, kNumClasses> kSlugs = {"cardiomegaly", "covid19", "normal",
                                                     "pneumonia", "tuberculosis"};
}

Image Image::filled(std::size_t w, std::size_t h, double v) {
  return Image{w, h, std::vector<double>(w * h, v)};
}

std::string to_string(Origin o) { return o == Origin::Original ? "original" : "augmented"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: break;
  }
  return "unassigned";
}

Origin origin_from_string(const std::string& s) {
  if (s == "original") return Origin::Original;
  if (s == "augmented") return Origin::Augmented;
  throw ConfigError("unknown origin '" + s + "'");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "unassigned") return Split::Unassigned;
  throw ConfigError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------------------
// Manifest

std::array<std::size_t, kNumClasses> DatasetManifest::counts() const {
  std::array<std::size_t, kNumClasses> c{};
  for (const auto& r : records) ++c.at(r.label);
  return c;
}

std::array<std::size_t, kNumClasses> DatasetManifest::counts(Split split) const {
  std::array<std::size_t, kNumClasses> c{};
  for (const auto& r : records)
    if (r.split == split) ++c.at(r.label);
  return c;
}

void DatasetManifest::validate() const {
  std::unordered_map<std::string, const SampleRecord*> by_id;
  for (const auto& r : records) {
    if (r.id.empty()) throw ConfigError("manifest: record with empty id");
    if (!by_id.emplace(r.id, &r).second) throw ConfigError("manifest: duplicate id '" + r.id + "'");
    if (r.label >= kNumClasses) throw ConfigError("manifest: label out of range in '" + r.id + "'");
  }
  for (const auto& r : records) {
    if (r.origin == Origin::Original) {
      if (!r.parent.empty()) throw ConfigError("manifest: original '" + r.id + "' has a parent");
      continue;
    }
    auto it = by_id.find(r.parent);
    if (r.parent.empty() || it == by_id.end() || it->second->origin != Origin::Original) {
      throw ConfigError("manifest: augmented '" + r.id + "' must link to an original parent");
    }
  }
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["image_size"] = image_size;
  j["classes"] = class_names();
  nlohmann::json counts_j = nlohmann::json::object();
  const auto c = counts();
  for (std::size_t k = 0; k < kNumClasses; ++k) counts_j[class_names()[k]] = c[k];
  j["counts"] = counts_j;
  auto& recs = j["records"] = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json e = {{"id", r.id},
                        {"path", r.path},
                        {"label", class_names()[r.label]},
                        {"origin", to_string(r.origin)},
                        {"split", to_string(r.split)}};
    e["parent"] = r.parent.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.parent);
    recs.push_back(std::move(e));
  }
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  static const std::set<std::string> top = {"seed", "image_size", "classes", "counts", "records"};
  static const std::set<std::string> rec = {"id", "path", "label", "origin", "split", "parent"};
  if (!j.is_object()) throw ConfigError("manifest: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!top.count(it.key())) throw ConfigError("manifest: unknown key '" + it.key() + "'");
  DatasetManifest m;
  try {
    m.seed = j.value("seed", std::uint64_t{0});
    m.image_size = j.value("image_size", std::size_t{0});
    if (j.contains("classes") &&
        j.at("classes").get<std::vector<std::string>>() !=
            std::vector<std::string>(class_names().begin(), class_names().end())) {
      throw ConfigError("manifest: class list differs from the built-in label order");
    }
    for (const auto& e : j.at("records")) {
      for (auto it = e.begin(); it != e.end(); ++it)
        if (!rec.count(it.key())) throw ConfigError("manifest record: unknown key '" + it.key() + "'");
      SampleRecord r;
      r.id = e.at("id").get<std::string>();
      r.path = e.value("path", std::string{});
      r.label = class_index(e.at("label").get<std::string>());
      r.origin = origin_from_string(e.value("origin", std::string{"original"}));
      r.split = split_from_string(e.value("split", std::string{"unassigned"}));
      if (e.contains("parent") && !e.at("parent").is_null()) r.parent = e.at("parent").get<std::string>();
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("manifest: ") + ex.what());
  }
  if (j.contains("counts")) {
    const auto c = m.counts();
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      const auto& cj = j.at("counts");
      if (cj.contains(class_names()[k]) && cj.at(class_names()[k]).get<std::size_t>() != c[k]) {
        throw ConfigError("manifest: stored count for " + class_names()[k] +
                          " disagrees with its records");
      }
    }
  }
  m.validate();
  return m;
}

fs::path save_manifest(DatasetManifest& m, const fs::path& dir) {
  std::error_code ec;
  for (const auto& slug : kSlugs) {
    fs::create_directories(dir / "images" / slug, ec);
    if (ec) throw IoError("cannot create " + (dir / "images" / slug).string() + ": " + ec.message());
  }
  for (auto& r : m.records) {
    if (r.image && r.path.empty()) {
      r.path = "images/" + kSlugs.at(r.label) + "/" + r.id + ".pgm";
      write_pgm(*r.image, dir / r.path);
    }
  }
  const fs::path out = dir / "manifest.json";
  std::ofstream f(out);
  if (!f) throw IoError("cannot write " + out.string());
  f << m.to_json().dump(1) << '\n';
  if (!f) throw IoError("write failed for " + out.string());
  return out;
}

DatasetManifest load_manifest(const fs::path& path, bool load_images) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream f(file);
  if (!f) throw IoError("cannot open manifest " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("manifest " + file.string() + ": " + e.what(), e.byte);
  }
  DatasetManifest m = DatasetManifest::from_json(j);
  if (load_images) {
    const fs::path base = file.parent_path();
    for (auto& r : m.records) {
      if (r.path.empty()) throw IoError("manifest record '" + r.id + "' has no image path");
      r.image = std::make_shared<Image>(read_pgm(base / r.path));
    }
  }
  return m;
}

void AugmentationPolicy::validate() const {
  if (!(hflip_p >= 0 && hflip_p <= 1)) throw ConfigError("augmentation: hflip probability must lie in [0,1]");
  if (!(rotation_deg >= 0 && rotation_deg <= 180)) throw ConfigError("augmentation: rotation range must lie in [0,180]");
  if (!(brightness >= 0 && brightness < 1)) throw ConfigError("augmentation: brightness range must lie in [0,1)");
  if (!(contrast >= 0 && contrast < 1)) throw ConfigError("augmentation: contrast range must lie in [0,1)");
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

double smooth_inside(double d, double softness) {
  // 1 inside the unit contour, 0 outside, linear ramp of width `softness`.
  return std::clamp((1.0 + softness * 0.5 - d) / softness, 0.0, 1.0);
}

double ellipse_d(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Image synthesize_image(std::size_t label, std::size_t image_size, std::uint64_t sample_seed) {
  if (image_size < 32) throw ConfigError("generate: image_size must be >= 32");
  if (label >= kNumClasses) throw ConfigError("generate: label out of range");
  std::mt19937_64 rng(sample_seed);
  const double S = static_cast<double>(image_size);
  auto jit = [&](double amount) { return uniform(rng, -amount, amount); };

  // Shared anatomy: two darker lung fields, rib bands, a heart shadow.
  const double lung_dx = 0.18 * S + jit(0.02 * S);
  const double lung_cy = 0.50 * S + jit(0.03 * S);
  const double lung_rx = 0.16 * S * (1 + jit(0.06));
  const double lung_ry = 0.32 * S * (1 + jit(0.06));
  const double rib_period = S / 7.0 * (1 + jit(0.1));
  const double rib_phase = uniform(rng, 0, rib_period);
  const double rib_amp = 30 + jit(5);
  const double heart_cx = 0.5 * S + jit(0.03 * S);
  const double heart_cy = 0.64 * S + jit(0.02 * S);
  double heart_rx = 0.12 * S * (1 + jit(0.08));
  double heart_ry = 0.11 * S * (1 + jit(0.08));

  // Class motif parameters, drawn in a fixed order.
  const double side = uniform01(rng) < 0.5 ? -1.0 : 1.0;
  const double m1 = jit(0.03 * S), m2 = jit(0.03 * S), m3 = jit(0.03 * S), m4 = jit(0.03 * S);
  const double amp = 65 + jit(10);
  if (label == 0) {
    heart_rx *= 1.75;
    heart_ry *= 1.6;
  }

  Image img = Image::filled(image_size, image_size, 0.0);
  std::normal_distribution<double> noise(0.0, 8.0);
  for (std::size_t yi = 0; yi < image_size; ++yi) {
    for (std::size_t xi = 0; xi < image_size; ++xi) {
      const double x = static_cast<double>(xi) + 0.5, y = static_cast<double>(yi) + 0.5;
      const double left = smooth_inside(ellipse_d(x, y, 0.5 * S - lung_dx, lung_cy, lung_rx, lung_ry), 0.25);
      const double right = smooth_inside(ellipse_d(x, y, 0.5 * S + lung_dx, lung_cy, lung_rx, lung_ry), 0.25);
      const double lung = std::max(left, right);
      const double bend = 0.12 * std::fabs(x - 0.5 * S);
      const double rib = std::pow(std::max(0.0, std::sin(2 * std::numbers::pi * (y + bend + rib_phase) / rib_period)), 2);
      double v = 120.0 - 60.0 * lung + rib_amp * rib * lung;
      const double heart = smooth_inside(ellipse_d(x, y, heart_cx, heart_cy, heart_rx, heart_ry), 0.3);
      v += (150.0 - v) * heart;

      switch (label) {
        case 1: {  // bilateral peripheral opacities
          const double sx = 0.05 * S, sy = 0.07 * S;
          for (double s : {-1.0, 1.0}) {
            const double cx = 0.5 * S + s * (0.27 * S) + (s < 0 ? m1 : m2);
            const double cy = 0.58 * S + (s < 0 ? m3 : m4);
            const double dx = (x - cx) / sx, dy = (y - cy) / sy;
            v += amp * std::exp(-0.5 * (dx * dx + dy * dy));
          }
          break;
        }
        case 3: {  // lobar wedge in one lower lung
          const double apex_x = 0.5 * S + side * (0.08 * S) + m1;
          const double apex_y = 0.50 * S + m2;
          const double dx = side * (x - apex_x), dy = y - apex_y;
          const double in_lung = side < 0 ? left : right;
          if (dx > 0 && dy > 0 && dy > 0.35 * dx && dy < 1.6 * dx + 0.02 * S) v += amp * in_lung;
          break;
        }
        case 4: {  // apical cavity ring
          const double cx = 0.5 * S + side * lung_dx + m1;
          const double cy = 0.26 * S + m2;
          const double r = 0.075 * S, thick = 0.028 * S;
          const double d = std::hypot(x - cx, y - cy);
          const double ring = std::exp(-0.5 * std::pow((d - r) / (0.5 * thick), 2));
          v += (amp + 10) * ring;
          if (d < r - thick) v -= 15;
          break;
        }
        default:
          break;
      }
      v += noise(rng);
      img.at(xi, yi) = std::clamp(std::round(v), 0.0, 255.0);
    }
  }
  return img;
}

DatasetManifest generate_synthetic(const std::array<std::size_t, kNumClasses>& n_per_class,
                                   std::size_t image_size, std::uint64_t seed) {
  if (image_size < 32) throw ConfigError("generate: image_size must be >= 32");
  DatasetManifest m;
  m.seed = seed;
  m.image_size = image_size;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t i = 0; i < n_per_class[c]; ++i) {
      SampleRecord r;
      char buf[32];
      std::snprintf(buf, sizeof buf, "-%06zu", i);
      r.id = kSlugs[c] + buf;
      r.label = c;
      r.image = std::make_shared<Image>(
          synthesize_image(c, image_size, derive_seed(seed, "data", c * 100000000ULL + i)));
      m.records.push_back(std::move(r));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Balancing

std::vector<SampleRecord> undersample(std::span<const SampleRecord> records, std::size_t target,
                                      std::uint64_t seed) {
  if (records.size() < target) {
    throw ConfigError("undersample: class has " + std::to_string(records.size()) +
                      " records, fewer than target " + std::to_string(target) + "; augment instead");
  }
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (target < records.size()) {
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates: the first `target` slots are a uniform sample.
    for (std::size_t i = 0; i < target; ++i) {
      const std::size_t j = i + uniform_index(rng, idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(target);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<SampleRecord> out;
  out.reserve(target);
  for (std::size_t i : idx) out.push_back(records[i]);
  return out;
}

Image hflip(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(x, y) = img.at(img.width - 1 - x, y);
  return out;
}

Image rotate(const Image& img, double degrees) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = (static_cast<double>(img.width) - 1) / 2;
  const double cy = (static_cast<double>(img.height) - 1) / 2;
  const auto W = static_cast<long>(img.width), H = static_cast<long>(img.height);
  auto sample = [&](long x, long y) {
    return (x < 0 || y < 0 || x >= W || y >= H) ? 0.0
                                                 : img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  Image out = Image::filled(img.width, img.height, 0.0);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      // Inverse map from output pixel to source.
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const auto x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      if (x0 < -1 || y0 < -1 || x0 >= W || y0 >= H) continue;
      out.at(x, y) = (1 - ax) * (1 - ay) * sample(x0, y0) + ax * (1 - ay) * sample(x0 + 1, y0) +
                     (1 - ax) * ay * sample(x0, y0 + 1) + ax * ay * sample(x0 + 1, y0 + 1);
    }
  }
  return out;
}

Image apply_augmentation(const Image& img, const AugmentationPolicy& policy, std::mt19937_64& rng) {
  // Every draw happens regardless of the policy so streams stay aligned.
  const bool flip = uniform01(rng) < policy.hflip_p;
  const double angle = uniform(rng, -policy.rotation_deg, policy.rotation_deg);
  const double bright = uniform(rng, 1 - policy.brightness, 1 + policy.brightness);
  const double contr = uniform(rng, 1 - policy.contrast, 1 + policy.contrast);

  Image out = flip ? hflip(img) : img;
  if (angle != 0.0) out = rotate(out, angle);
  if (bright != 1.0)
    for (auto& v : out.px) v *= bright;
  if (contr != 1.0) {
    double mean = 0.0;
    for (double v : out.px) mean += v;
    mean /= static_cast<double>(out.px.size());
    for (auto& v : out.px) v = mean + contr * (v - mean);
  }
  for (auto& v : out.px) v = std::clamp(v, 0.0, 255.0);
  return out;
}

std::vector<SampleRecord> augment_to_target(std::span<const SampleRecord> records,
                                            std::size_t target, const AugmentationPolicy& policy,
                                            std::uint64_t seed) {
  if (records.empty()) throw ConfigError("augment_to_target: class has no records");
  if (records.size() > target) {
    throw ConfigError("augment_to_target: class has " + std::to_string(records.size()) +
                      " records, more than target " + std::to_string(target));
  }
  std::vector<SampleRecord> out(records.begin(), records.end());
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, "order"));
  shuffle(order.begin(), order.end(), rng);

  const std::size_t needed = target - records.size();
  for (std::size_t k = 0; k < needed; ++k) {
    const SampleRecord& parent = records[order[k % order.size()]];
    SampleRecord child;
    child.id = parent.id + "-aug" + std::to_string(k / order.size() + 1);
    child.label = parent.label;
    child.origin = Origin::Augmented;
    child.parent = parent.id;
    if (parent.image) {
      std::mt19937_64 arng(derive_seed(seed, "augment", k));
      Image a = apply_augmentation(*parent.image, policy, arng);
      for (auto& v : a.px) v = std::round(v);  // stored as 8-bit
      child.image = std::make_shared<Image>(std::move(a));
    }
    out.push_back(std::move(child));
  }
  return out;
}

DatasetManifest balance_dataset(const DatasetManifest& m, std::size_t target,
                                const AugmentationPolicy& policy, std::uint64_t seed) {
  if (target < 1) throw ConfigError("balance: target must be >= 1");
  policy.validate();
  std::array<std::vector<SampleRecord>, kNumClasses> by_class;
  for (const auto& r : m.records) {
    if (r.origin != Origin::Original) throw ConfigError("balance: input must hold originals only");
    by_class.at(r.label).push_back(r);
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (by_class[c].empty()) throw ConfigError("balance: class " + class_names()[c] + " is empty");
  }

  std::unordered_set<std::string> kept;
  std::vector<SampleRecord> added;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto& recs = by_class[c];
    if (recs.size() > target) {
      for (auto& r : undersample(recs, target, derive_seed(seed, "undersample", c))) kept.insert(r.id);
    } else {
      for (auto& r : recs) kept.insert(r.id);
      if (recs.size() < target) {
        auto full = augment_to_target(recs, target, policy, derive_seed(seed, "augment", c));
        for (std::size_t i = recs.size(); i < full.size(); ++i) added.push_back(std::move(full[i]));
      }
    }
  }

  DatasetManifest out;
  out.seed = seed;
  out.image_size = m.image_size;
  for (const auto& r : m.records)
    if (kept.count(r.id)) out.records.push_back(r);
  for (auto& r : added) out.records.push_back(std::move(r));
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

void SplitFractions::validate() const {
  if (!(train >= 0 && val >= 0 && test >= 0) || std::fabs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split: fractions must be non-negative and sum to 1");
  }
}

std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
  const double dn = static_cast<double>(n);
  const auto ntrain = std::min(n, static_cast<std::size_t>(std::llround(f.train * dn)));
  const auto nval = std::min(n - ntrain, static_cast<std::size_t>(std::llround(f.val * dn)));
  return {ntrain, nval, n - ntrain - nval};
}

DatasetManifest stratified_split(const DatasetManifest& m, const SplitFractions& f,
                                 std::uint64_t seed) {
  f.validate();
  DatasetManifest out = m;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < out.records.size(); ++i)
      if (out.records[i].label == c) idx.push_back(i);
    std::mt19937_64 rng(derive_seed(seed, "split", c));
    shuffle(idx.begin(), idx.end(), rng);
    const auto n = split_counts(idx.size(), f);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.records[idx[k]].split = k < n[0] ? Split::Train : k < n[0] + n[1] ? Split::Val : Split::Test;
    }
  }
  return out;
}

nlohmann::json LeakageReport::to_json() const {
  return {{"augmented", augmented}, {"cross_split", cross_split}, {"by_pair", by_pair}};
}

LeakageReport leakage_report(const DatasetManifest& m) {
  std::unordered_map<std::string, Split> split_of;
  for (const auto& r : m.records) split_of[r.id] = r.split;
  LeakageReport rep;
  for (const auto& r : m.records) {
    if (r.origin != Origin::Augmented) continue;
    ++rep.augmented;
    auto it = split_of.find(r.parent);
    if (it == split_of.end() || it->second == r.split) continue;
    ++rep.cross_split;
    ++rep.by_pair[to_string(it->second) + "->" + to_string(r.split)];
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Crops

std::size_t crop_size(std::size_t side, double fraction) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(side)));
}

Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  if (x0 + w > img.width || y0 + h > img.height) throw ConfigError("crop: window exceeds the image");
  Image out = Image::filled(w, h, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
  return out;
}

std::vector<Image> tencrop(const Image& img, double crop_fraction) {
  if (img.width != img.height) throw ConfigError("tencrop: image must be square");
  const std::size_t side = img.width;
  const std::size_t c = crop_size(side, crop_fraction);
  if (c > side || c == 0) {
    throw ConfigError("tencrop: crop " + std::to_string(c) + " does not fit a " +
                      std::to_string(side) + "-pixel image");
  }
  const std::size_t far = side - c, mid = (side - c) / 2;
  std::vector<Image> views;
  views.reserve(10);
  views.push_back(crop(img, 0, 0, c, c));
  views.push_back(crop(img, far, 0, c, c));
  views.push_back(crop(img, 0, far, c, c));
  views.push_back(crop(img, far, far, c, c));
  views.push_back(crop(img, mid, mid, c, c));
  for (std::size_t i = 0; i < 5; ++i) views.push_back(hflip(views[i]));
  return views;
}

// ---------------------------------------------------------------------------
// PGM

Image parse_pgm(std::span<const unsigned char> bytes, const std::string& source) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> ParseError {
    return ParseError(source + ": " + msg, pos);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail(std::string("expected ") + what);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 20) throw fail(std::string(what) + " is too large");
      ++pos;
    }
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("missing P5 magic");
  pos = 2;
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("expected whitespace after magic");
  const std::size_t w = number("width");
  const std::size_t h = number("height");
  const std::size_t maxval = number("maxval");
  if (w == 0 || h == 0) throw fail("zero image dimension");
  if (maxval != 255) throw fail("maxval " + std::to_string(maxval) + " unsupported (only 255)");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("expected one whitespace byte before pixels");
  ++pos;
  if (bytes.size() - pos < w * h) {
    throw fail("truncated payload: " + std::to_string(bytes.size() - pos) + " of " +
               std::to_string(w * h) + " pixel bytes");
  }
  Image img = Image::filled(w, h, 0.0);
  for (std::size_t i = 0; i < w * h; ++i) img.px[i] = bytes[pos + i];
  return img;
}

Image read_pgm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_pgm(bytes, path.string());
}

std::vector<unsigned char> encode_pgm(const Image& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + img.px.size());
  for (double v : img.px) out.push_back(static_cast<unsigned char>(std::clamp(std::round(v), 0.0, 255.0)));
  return out;
}

void write_pgm(const Image& img, const fs::path& path) {
  const auto bytes = encode_pgm(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write image " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

Tensor to_batch(std::span<const Image* const> images) {
  if (images.empty()) throw ShapeError("to_batch: no images");
  const std::size_t h = images[0]->height, w = images[0]->width;
  std::vector<double> v(images.size() * 3 * h * w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.height != h || img.width != w) throw ShapeError("to_batch: images differ in size");
    for (std::size_t c = 0; c < 3; ++c) {
      double* dst = v.data() + (n * 3 + c) * h * w;
      for (std::size_t i = 0; i < h * w; ++i) dst[i] = (img.px[i] / 255.0 - 0.5) / 0.25;
    }
  }
  return Tensor::from({images.size(), 3, h, w}, std::move(v));
}

}  // namespace chexopt::data
