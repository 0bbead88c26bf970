#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "chexopt/tensor.hpp"

namespace chexopt::data {

constexpr std::size_t kNumClasses = 5;

// Label order used everywhere (confusion matrices, reports).
const std::array<std::string, kNumClasses>& class_names();
std::size_t class_index(const std::string& name);

// Grayscale image, row-major, values in [0,255].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> px;

  static Image filled(std::size_t w, std::size_t h, double v);
  double& at(std::size_t x, std::size_t y) { return px[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return px[y * width + x]; }
  bool operator==(const Image&) const = default;
};

enum class Origin { Original, Augmented };
enum class Split { Unassigned, Train, Val, Test };

std::string to_string(Origin o);
std::string to_string(Split s);
Origin origin_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct SampleRecord {
  std::string id;
  std::string path;                     // relative to the manifest directory; may be empty
  std::shared_ptr<const Image> image;   // in-memory pixels; may be null
  std::size_t label = 0;
  Origin origin = Origin::Original;
  Split split = Split::Unassigned;
  std::string parent;                   // set iff augmented
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::uint64_t seed = 0;
  std::size_t image_size = 0;

  std::array<std::size_t, kNumClasses> counts() const;
  std::array<std::size_t, kNumClasses> counts(Split split) const;
  // Unique ids, labels in range, augmented records point at an original.
  void validate() const;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

// Writes images that have pixels but no path to <dir>/images/<class>/<id>.pgm, then
// manifest.json. Returns the manifest path.
std::filesystem::path save_manifest(DatasetManifest& m, const std::filesystem::path& dir);
// Loads manifest.json (or the given file) and, if asked, every referenced image.
DatasetManifest load_manifest(const std::filesystem::path& path, bool load_images = true);

struct AugmentationPolicy {
  double hflip_p = 0.5;
  double rotation_deg = 15.0;
  double brightness = 0.10;
  double contrast = 0.10;

  static AugmentationPolicy identity() { return {0.0, 0.0, 0.0, 0.0}; }
  void validate() const;
};

DatasetManifest generate_synthetic(const std::array<std::size_t, kNumClasses>& n_per_class,
                                   std::size_t image_size, std::uint64_t seed);
// One synthetic image for (class, sample index); what generate_synthetic draws.
Image synthesize_image(std::size_t label, std::size_t image_size, std::uint64_t sample_seed);

// Exactly `target` distinct records, kept in their input order.
std::vector<SampleRecord> undersample(std::span<const SampleRecord> records, std::size_t target,
                                      std::uint64_t seed);

Image hflip(const Image& img);
// Bilinear rotation about the image centre, zero outside the frame.
Image rotate(const Image& img, double degrees);
Image apply_augmentation(const Image& img, const AugmentationPolicy& policy, std::mt19937_64& rng);

// Originals followed by augmented copies, round-robin over a seeded order of
// the originals, until exactly `target` records.
std::vector<SampleRecord> augment_to_target(std::span<const SampleRecord> records,
                                            std::size_t target, const AugmentationPolicy& policy,
                                            std::uint64_t seed);

DatasetManifest balance_dataset(const DatasetManifest& m, std::size_t target,
                                const AugmentationPolicy& policy, std::uint64_t seed);

struct SplitFractions {
  double train = 0.70;
  double val = 0.10;
  double test = 0.20;
  void validate() const;
};

// Per-class counts for n records: round(train n), round(val n), remainder.
std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f);

DatasetManifest stratified_split(const DatasetManifest& m, const SplitFractions& f,
                                 std::uint64_t seed);

struct LeakageReport {
  std::size_t augmented = 0;
  std::size_t cross_split = 0;  // augmented children in a different split from their parent
  std::map<std::string, std::size_t> by_pair;  // "train->test" style counts
  nlohmann::json to_json() const;
};

LeakageReport leakage_report(const DatasetManifest& m);

std::size_t crop_size(std::size_t side, double fraction);
Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h);
// TL, TR, BL, BR, C, then the mirror of each.
std::vector<Image> tencrop(const Image& img, double crop_fraction = 0.875);

Image read_pgm(const std::filesystem::path& path);
Image parse_pgm(std::span<const unsigned char> bytes, const std::string& source = "<memory>");
void write_pgm(const Image& img, const std::filesystem::path& path);
std::vector<unsigned char> encode_pgm(const Image& img);

// Stacks images into (N,3,H,W), replicating the gray channel and mapping
// [0,255] to roughly zero mean, unit scale.
Tensor to_batch(std::span<const Image* const> images);

}  // namespace chexopt::data
