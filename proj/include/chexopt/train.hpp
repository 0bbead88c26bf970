#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chexopt/data.hpp"
#include "chexopt/metrics.hpp"
#include "chexopt/model.hpp"
#include "chexopt/optim.hpp"
#include "chexopt/tensor.hpp"

namespace chexopt::train {

using data::SampleRecord;

std::string to_string(ComputePrecision p);
ComputePrecision precision_from_string(const std::string& s);

struct TrainConfig {
  std::string arm = "proposed";
  model::NetworkProfile profile = model::NetworkProfile::desk();
  std::size_t epochs = 50;
  std::size_t batch_size = 32;

  optim::AdamWConfig adamw;     // adamw.lr is eta_max of the schedule
  bool cosine = true;           // false: constant adamw.lr
  double eta_min = 0.0;

  bool use_ema = true;
  double ema_decay = 0.999;

  bool loss_scaling = true;
  optim::LossScalerState scaler{.emulate_half = true};

  data::AugmentationPolicy augmentation;
  double crop_fraction = 0.875;  // random crop for training, TenCrop size for evaluation
  bool tencrop = true;
  ComputePrecision precision = ComputePrecision::F32;

  std::uint64_t seed = 0;

  // Desk defaults: 15 epochs, and the lr / EMA horizon scaled to the
  // ~800 optimizer steps such a run takes.
  static TrainConfig desk_benchmark();
  // Same network and data handling with the optimization stack removed:
  // plain Adam, constant lr, no EMA, no loss scaling.
  static TrainConfig ablated_baseline(const TrainConfig& proposed);

  void validate() const;
  double lr_at(std::size_t epoch) const;

  nlohmann::json to_json() const;
  // Keys missing from j keep the defaults of `base`; unknown keys throw.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j);
};

// Everything a run mutates.
struct TrainState {
  model::Network net;
  std::vector<model::NamedTensor> params;
  optim::OptimizerState opt;
  std::optional<optim::EmaState> ema;
  std::optional<optim::LossScalerState> scaler;

  static TrainState make(const TrainConfig& cfg);
};

struct EpochStats {
  double mean_loss = 0;
  double train_accuracy = 0;
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;
};

// Seeded visiting order of the training split for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);
// Seed of the augmentation draw for the sample at `position` of an epoch.
std::uint64_t augment_seed(std::uint64_t seed, std::size_t epoch, std::size_t position);
// Augmentation followed by a random crop.
data::Image train_view(const data::Image& img, const TrainConfig& cfg, std::uint64_t sample_seed);

struct Batch {
  Tensor x;
  std::vector<std::size_t> labels;
};
// Batch `index` of an epoch, as train_one_epoch builds it.
Batch train_batch(std::span<const SampleRecord* const> train, std::span<const std::size_t> order,
                  std::size_t index, const TrainConfig& cfg, std::size_t epoch);

EpochStats train_one_epoch(TrainState& st, std::span<const SampleRecord* const> train,
                           const TrainConfig& cfg, double lr, std::size_t epoch);

struct EvalOptions {
  bool tencrop = true;
  double crop_fraction = 0.875;
  std::size_t images_per_batch = 4;
};

struct EvalResult {
  metrics::ConfusionMatrix confusion;
  metrics::MacroMetrics macro;
  double loss = 0;  // mean -log of the averaged probability of the true class
  std::vector<std::string> ids;
  std::vector<std::size_t> predictions;
  std::vector<std::vector<double>> probabilities;
};

using LogitFn = std::function<Tensor(const Tensor& batch)>;

// Per sample: softmax of every view, averaged, argmax (first on ties).
EvalResult evaluate(const LogitFn& logits, std::span<const SampleRecord* const> records,
                    const EvalOptions& opt);
// Evaluation mode, no tape; EMA weights swapped in for the call when given.
EvalResult validate(model::Network& net, std::span<const SampleRecord* const> records,
                    const EvalOptions& opt, optim::EmaState* ema = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint64_t fingerprint = 0;
  std::uint64_t epoch = 0;
  double val_macro_f1 = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, std::vector<double>>> blobs;

  const std::vector<double>* find(const std::string& name) const;
};

std::uint64_t profile_fingerprint(const model::NetworkProfile& profile);

// Little-endian container: "CHXO1", version, fingerprint, epoch, F1,
// metadata JSON, named float64 blobs, FNV-1a checksum of everything before it.
std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes,
                             const std::string& source = "<memory>");
void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint capture(TrainState& st, std::uint64_t epoch, double val_macro_f1);
// Throws ConfigError on a fingerprint mismatch, ShapeError on a blob of the
// wrong size.
void restore(TrainState& st, const Checkpoint& ck);

// ---------------------------------------------------------------------------
// Runs

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  EpochStats train;
  double val_loss = 0;
  double val_accuracy = 0;
  double val_macro_f1 = 0;
  bool checkpointed = false;
};

struct IdAudit {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
  std::size_t overlap = 0;  // train ids seen during validation or testing
  bool passed() const { return overlap == 0; }
};

struct RunSummary {
  std::string arm;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  bool completed = false;
  std::size_t best_epoch = 0;
  double best_val_macro_f1 = 0;
  std::vector<EpochRecord> history;
  metrics::ConfusionMatrix test_confusion;
  metrics::MacroMetrics test;
  double test_loss = 0;
  IdAudit audit;
  std::size_t leakage_cross_split = 0;
  nlohmann::json config;

  nlohmann::json to_json() const;
  static RunSummary from_json(const nlohmann::json& j);
};

struct RunOptions {
  bool resume = false;
  std::optional<std::size_t> stop_after_epoch;  // simulate an interruption
  std::function<void(const EpochRecord&)> on_epoch;
};

// Writes checkpoints/epoch_XXX.ckpt on strict improvement, resume.ckpt after
// every epoch, metrics.csv, lr_trace.csv and, once complete,
// confusion_matrix.txt, per_class.csv and summary.json.
RunSummary run_experiment(const TrainConfig& cfg, const data::DatasetManifest& manifest,
                          const std::filesystem::path& run_dir, const RunOptions& opts = {});

RunSummary load_summary(const std::filesystem::path& run_dir_or_file);

struct ExperimentPlan {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8};
  TrainConfig proposed = TrainConfig::desk_benchmark();
  TrainConfig baseline = TrainConfig::ablated_baseline(TrainConfig::desk_benchmark());
  std::filesystem::path out_dir;
  std::size_t parallel = 1;
  std::uint64_t bootstrap_seed = 0;

  void validate() const;
};

struct ComparisonReport {
  std::vector<metrics::ComparisonRow> rows;
  std::vector<std::uint64_t> seeds;
  bool degenerate = false;
  std::string markdown;
  std::string per_run_csv;
};

// Pairs runs by seed; throws ConfigError for mismatched seed sets or fewer
// than two runs per arm. Zero-variance metrics are flagged, not thrown.
ComparisonReport compare_runs(const std::vector<RunSummary>& baseline,
                              const std::vector<RunSummary>& proposed,
                              std::uint64_t bootstrap_seed = 0,
                              std::size_t bootstrap_iterations = 10000);
void write_report(const ComparisonReport& r, const std::filesystem::path& dir);

// min(requested, CHEXOPT_THREADS) when the variable is set, at least 1.
std::size_t worker_cap(std::size_t requested);

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first
// failure after all workers stop.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

// Every (arm, seed) run under out_dir/<arm>/seed_<s>, then table7.md and per_run.csv.
ComparisonReport multi_run_compare(const ExperimentPlan& plan,
                                   const data::DatasetManifest& manifest,
                                   const RunOptions& opts = {});

}  // namespace chexopt::train
