#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "chexopt/data.hpp"
#include "chexopt/train.hpp"

namespace chexopt::config {

struct DataSection {
  std::array<std::size_t, data::kNumClasses> per_class{500, 500, 500, 500, 500};
  std::size_t image_size = 64;
  std::uint64_t seed = 0;
  std::optional<std::size_t> balance_target;
  data::AugmentationPolicy balance_augmentation;
  data::SplitFractions split;
};

struct ReportSection {
  std::filesystem::path out_dir = "runs";
  std::size_t bootstrap_iterations = 10000;
  std::uint64_t bootstrap_seed = 0;
  std::vector<std::string> formats{"md", "csv"};

  bool wants(const std::string& format) const;
};

// The experiment document: data, model, optim, train and report sections.
// Missing keys take the defaults below; unknown keys throw ConfigError.
struct CliConfig {
  DataSection data;
  train::TrainConfig train;  // model + optim + train sections
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8};
  std::size_t parallel = 1;
  ReportSection report;

  static CliConfig from_json(const nlohmann::json& j);
  static CliConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
};

// "4", "0..8", "1,3,5" or a mix such as "0..2,7".
std::vector<std::uint64_t> parse_seeds(const std::string& text);

// FNV-1a of a file's bytes, printed by subcommands as a reproducibility hash.
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

}  // namespace chexopt::config
