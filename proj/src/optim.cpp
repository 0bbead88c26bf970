#include "chexopt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "chexopt/error.hpp"
#include "chexopt/ops.hpp"

namespace chexopt::optim {

void AdamWConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("adamw: lr must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("adamw: weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adamw: beta1 must lie in [0,1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adamw: beta2 must lie in [0,1)");
  if (!(eps > 0)) throw ConfigError("adamw: eps must be > 0");
}

OptimizerState OptimizerState::make(std::span<const NamedTensor> params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adamw_step(std::span<NamedTensor> params, OptimizerState& state, const AdamWConfig& cfg,
                double lr_now) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state holds " + std::to_string(state.m.size()) +
                     " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.tensor.has_grad() || state.m[i].size() != p.tensor.numel() ||
        state.v[i].size() != p.tensor.numel()) {
      throw ShapeError("adamw_step: grad/state shape mismatch for '" + p.name + "' " +
                       shape_str(p.tensor.shape()));
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const double lambda = (cfg.exclude_norm_and_bias && !p.decayable) ? 0.0 : cfg.weight_decay;
    auto theta = p.tensor.data();
    auto g = std::as_const(p.tensor).grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      const double pre = theta[k];
      theta[k] = pre - lr_now * mhat / (std::sqrt(vhat) + cfg.eps) - lr_now * lambda * pre;
    }
  }
}

void CosineSchedule::validate() const {
  if (!(eta_min <= eta_max)) throw ConfigError("cosine schedule: eta_min must be <= eta_max");
  if (!(total >= 1)) throw ConfigError("cosine schedule: T must be >= 1");
}

double cosine_lr(double t, const CosineSchedule& sched) {
  if (!(t >= 0 && t <= sched.total)) {
    throw ConfigError("cosine_lr: t = " + std::to_string(t) + " outside [0, " +
                      std::to_string(sched.total) + "]");
  }
  return sched.eta_min +
         0.5 * (1.0 + std::cos(std::numbers::pi * t / sched.total)) * (sched.eta_max - sched.eta_min);
}

EmaState EmaState::make(std::span<const NamedTensor> params, double decay) {
  if (!(decay >= 0 && decay < 1)) throw ConfigError("ema: decay must lie in [0,1)");
  EmaState e;
  e.decay = decay;
  for (const auto& p : params) e.shadow.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return e;
}

namespace {
void check_shapes(const std::vector<std::vector<double>>& shadow,
                  std::span<const NamedTensor> params, const char* who) {
  if (shadow.size() != params.size()) {
    throw ShapeError(std::string(who) + ": shadow holds " + std::to_string(shadow.size()) +
                     " tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (shadow[i].size() != params[i].tensor.numel()) {
      throw ShapeError(std::string(who) + ": shape drift in '" + params[i].name + "'");
    }
  }
}
}  // namespace

void ema_update(EmaState& ema, std::span<const NamedTensor> params) {
  if (ema.applied) throw AutodiffError("ema_update: shadow weights are currently swapped in");
  check_shapes(ema.shadow, params, "ema_update");
  const double a = ema.decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].tensor.data();
    auto& s = ema.shadow[i];
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = a * s[k] + (1.0 - a) * theta[k];
  }
  ++ema.updates;
}

EmaSwap::EmaSwap(EmaState& ema, std::vector<NamedTensor> params)
    : ema_(&ema), params_(std::move(params)) {
  if (ema.applied) throw AutodiffError("ema_apply: shadow already applied; restore first");
  check_shapes(ema.shadow, params_, "ema_apply");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto d = params_[i].tensor.data();
    saved_.emplace_back(d.begin(), d.end());
    params_[i].tensor.assign(ema.shadow[i]);
  }
  ema.applied = true;
}

EmaSwap::~EmaSwap() { restore(); }

void EmaSwap::restore() {
  if (!ema_) return;
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.assign(saved_[i]);
  ema_->applied = false;
  ema_ = nullptr;
}

EmaSwap ema_apply(EmaState& ema, std::vector<NamedTensor> params) {
  return EmaSwap(ema, std::move(params));
}

StepResult scaled_step(const Tensor& loss, std::span<NamedTensor> params, OptimizerState& state,
                       const AdamWConfig& cfg, double lr_now, LossScalerState& scaler,
                       EmaState* ema) {
  for (auto& p : params) p.tensor.zero_grad();
  backward(ops::scale(loss, scaler.scale));

  bool finite = true;
  const double inv = 1.0 / scaler.scale;
  for (auto& p : params) {
    for (double& g : p.tensor.grad()) {
      if (scaler.emulate_half) g = round_to_half(g);
      if (!std::isfinite(g)) finite = false;
      g *= inv;
    }
  }

  StepResult r;
  if (!finite) {
    scaler.scale *= scaler.backoff;
    scaler.successes = 0;
    r.stepped = false;
  } else {
    adamw_step(params, state, cfg, lr_now);
    if (ema) ema_update(*ema, params);
    if (++scaler.successes >= scaler.growth_interval) {
      scaler.scale *= scaler.growth;
      scaler.successes = 0;
    }
    r.stepped = true;
  }
  r.scale = scaler.scale;
  return r;
}

}  // namespace chexopt::optim
