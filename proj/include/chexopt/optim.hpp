#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chexopt/model.hpp"
#include "chexopt/tensor.hpp"

namespace chexopt::optim {

using model::NamedTensor;

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Skip decay for parameters marked non-decayable (norm scale/shift, biases).
  bool exclude_norm_and_bias = false;

  void validate() const;
};

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  static OptimizerState make(std::span<const NamedTensor> params);
};

// One AdamW step using each parameter's accumulated grad. The decay term
// uses lr_now and the pre-update value.
void adamw_step(std::span<NamedTensor> params, OptimizerState& state, const AdamWConfig& cfg,
                double lr_now);

struct CosineSchedule {
  double eta_max = 1e-4;
  double eta_min = 0.0;
  double total = 50.0;

  void validate() const;
};

// eta_min + 0.5 (1 + cos(pi t / T)) (eta_max - eta_min); t must lie in [0, T].
double cosine_lr(double t, const CosineSchedule& sched);

struct EmaState {
  double decay = 0.999;
  std::vector<std::vector<double>> shadow;
  std::uint64_t updates = 0;
  bool applied = false;

  // Shadow starts as an exact copy of the parameters.
  static EmaState make(std::span<const NamedTensor> params, double decay);
};

void ema_update(EmaState& ema, std::span<const NamedTensor> params);

// Swaps shadow weights into the model until restore() or destruction.
class EmaSwap {
 public:
  EmaSwap(EmaState& ema, std::vector<NamedTensor> params);
  ~EmaSwap();
  EmaSwap(const EmaSwap&) = delete;
  EmaSwap& operator=(const EmaSwap&) = delete;

  void restore();

 private:
  EmaState* ema_;
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> saved_;
};

EmaSwap ema_apply(EmaState& ema, std::vector<NamedTensor> params);

struct LossScalerState {
  double scale = 65536.0;
  double growth = 2.0;
  double backoff = 0.5;
  std::uint64_t growth_interval = 200;
  std::uint64_t successes = 0;
  // Round scaled gradients to binary16 before unscaling.
  bool emulate_half = false;
};

struct StepResult {
  bool stepped = false;
  double scale = 0.0;
};

// Zeroes grads, back-propagates loss * scale, unscales, then either steps
// (and updates the EMA when given) or skips on a non-finite gradient.
StepResult scaled_step(const Tensor& loss, std::span<NamedTensor> params, OptimizerState& state,
                       const AdamWConfig& cfg, double lr_now, LossScalerState& scaler,
                       EmaState* ema = nullptr);

}  // namespace chexopt::optim
