#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "chexopt/error.hpp"
#include "chexopt/model.hpp"
#include "chexopt/ops.hpp"
#include "chexopt/optim.hpp"

using namespace chexopt;
using namespace chexopt::optim;

namespace {

std::vector<NamedTensor> random_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<NamedTensor> ps;
  for (std::size_t n : {7u, 3u, 12u}) {
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    ps.push_back({"p" + std::to_string(n), Tensor::from({n}, v, true), n != 3});
  }
  return ps;
}

void set_random_grads(std::vector<NamedTensor>& ps, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 1);
  for (auto& p : ps)
    for (auto& g : p.tensor.grad()) g = d(rng);
}

// Textbook Adam, written independently of adamw_step.
struct ReferenceAdam {
  double lr, b1, b2, eps;
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& x, const std::vector<double>& g) {
    if (m.empty()) m.assign(x.size(), 0.0), v.assign(x.size(), 0.0);
    ++t;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      double mh = m[i] / (1 - std::pow(b1, t));
      double vh = v[i] / (1 - std::pow(b2, t));
      x[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

}  // namespace

TEST(AdamW, ZeroGradientIsPureDecay) {
  auto ps = random_params(1);
  std::vector<std::vector<double>> before;
  for (auto& p : ps) {
    before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    p.tensor.zero_grad();
  }
  auto st = OptimizerState::make(ps);
  AdamWConfig cfg;
  cfg.weight_decay = 0.01;
  adamw_step(ps, st, cfg, 0.1);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t k = 0; k < before[i].size(); ++k)
      EXPECT_EQ(ps[i].tensor.data()[k], before[i][k] - 0.1 * 0.01 * before[i][k]);
  EXPECT_EQ(st.t, 1u);
}

TEST(AdamW, HandComputedFirstStep) {
  std::vector<NamedTensor> ps = {{"theta", Tensor::from({1}, {1.0}, true), true}};
  ps[0].tensor.grad()[0] = 1.0;
  auto st = OptimizerState::make(ps);
  AdamWConfig cfg;
  adamw_step(ps, st, cfg, cfg.lr);
  EXPECT_NEAR(ps[0].tensor.data()[0], 1.0 - 1e-4 / (1 + 1e-8) - 1e-9, 1e-15);
  EXPECT_NEAR(ps[0].tensor.data()[0], 0.99990000, 1e-8);
}

TEST(AdamW, NoDecayMatchesReferenceAdam) {
  auto ps = random_params(2);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.lr = 3e-3;
  auto st = OptimizerState::make(ps);
  std::vector<ReferenceAdam> ref(ps.size(), ReferenceAdam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, {}, {}});
  std::vector<std::vector<double>> x;
  for (auto& p : ps) x.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  std::mt19937_64 rng(3);
  for (int step = 0; step < 100; ++step) {
    set_random_grads(ps, rng);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      std::vector<double> g(ps[i].tensor.grad().begin(), ps[i].tensor.grad().end());
      ref[i].step(x[i], g);
    }
    adamw_step(ps, st, cfg, cfg.lr);
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t k = 0; k < x[i].size(); ++k)
        ASSERT_NEAR(ps[i].tensor.data()[k], x[i][k], 1e-14) << "step " << step;
  }
}

TEST(AdamW, DecayContributionIndependentOfGradient) {
  for (double gscale : {0.0, 1.0, 1e3}) {
    auto a = random_params(4), b = random_params(4);
    std::mt19937_64 ra(5), rb(5);
    set_random_grads(a, ra);
    set_random_grads(b, rb);
    for (auto* ps : {&a, &b})
      for (auto& p : *ps)
        for (auto& g : p.tensor.grad()) g *= gscale;
    AdamWConfig with, without;
    with.weight_decay = 0.05;
    without.weight_decay = 0.0;
    auto sa = OptimizerState::make(a), sb = OptimizerState::make(b);
    std::vector<std::vector<double>> pre;
    for (auto& p : a) pre.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    adamw_step(a, sa, with, 0.2);
    adamw_step(b, sb, without, 0.2);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < pre[i].size(); ++k)
        EXPECT_NEAR(a[i].tensor.data()[k] - b[i].tensor.data()[k], -0.2 * 0.05 * pre[i][k], 1e-15);
  }
}

TEST(AdamW, ExcludeFlagSkipsNonDecayable) {
  auto ps = random_params(6);
  for (auto& p : ps) p.tensor.zero_grad();
  std::vector<double> bias_before(ps[1].tensor.data().begin(), ps[1].tensor.data().end());
  auto st = OptimizerState::make(ps);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  cfg.exclude_norm_and_bias = true;
  adamw_step(ps, st, cfg, 0.5);
  EXPECT_TRUE(bit_equal(ps[1].tensor.data(), bias_before));
  EXPECT_NE(ps[0].tensor.data()[0], random_params(6)[0].tensor.data()[0]);
}

TEST(AdamW, ShapeMismatchAndValidation) {
  auto ps = random_params(7);
  for (auto& p : ps) p.tensor.zero_grad();
  auto st = OptimizerState::make(ps);
  st.m[1].pop_back();
  EXPECT_THROW(adamw_step(ps, st, AdamWConfig{}, 1e-4), ShapeError);
  auto other = OptimizerState::make(std::span(ps).first(2));
  EXPECT_THROW(adamw_step(ps, other, AdamWConfig{}, 1e-4), ShapeError);
  AdamWConfig bad;
  bad.beta2 = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(AdamW, SecondMomentNonNegative) {
  auto ps = random_params(8);
  auto st = OptimizerState::make(ps);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 20; ++i) {
    set_random_grads(ps, rng);
    adamw_step(ps, st, AdamWConfig{}, 1e-3);
  }
  for (auto& v : st.v)
    for (double x : v) EXPECT_GE(x, 0.0);
  EXPECT_EQ(st.t, 20u);
}

TEST(Cosine, Endpoints) {
  CosineSchedule s;
  EXPECT_EQ(cosine_lr(0, s), 1e-4);
  EXPECT_NEAR(cosine_lr(50, s), 0.0, 1e-20);
  EXPECT_NEAR(cosine_lr(25, s), 5e-5, 1e-18);
  EXPECT_THROW(cosine_lr(-1, s), ConfigError);
  EXPECT_THROW(cosine_lr(51, s), ConfigError);
}

TEST(Cosine, MonotoneAndSymmetric) {
  CosineSchedule s{1e-3, 1e-5, 50};
  for (int t = 0; t <= 50; ++t) {
    if (t > 0) {
      EXPECT_LE(cosine_lr(t, s), cosine_lr(t - 1, s));
    }
    EXPECT_NEAR(cosine_lr(t, s) + cosine_lr(50 - t, s), s.eta_max + s.eta_min, 1e-15);
  }
  CosineSchedule bad{1e-5, 1e-3, 50};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Ema, FixedPointAndSingleStep) {
  std::vector<NamedTensor> ps = {{"w", Tensor::from({3}, {0.5, -2.0, 7.0}, true), true}};
  auto e = EmaState::make(ps, 0.999);
  ema_update(e, ps);
  EXPECT_TRUE(bit_equal(e.shadow[0], ps[0].tensor.data()));

  std::vector<NamedTensor> one = {{"w", Tensor::from({1}, {1.0}, true), true}};
  auto z = EmaState::make(one, 0.999);
  z.shadow[0][0] = 0.0;
  ema_update(z, one);
  EXPECT_NEAR(z.shadow[0][0], 0.001, 1e-15);
  EXPECT_THROW(EmaState::make(one, 1.0), ConfigError);
}

TEST(Ema, GeometricDecay) {
  std::vector<NamedTensor> target = {{"w", Tensor::from({1}, {3.0}, true), true}};
  auto e = EmaState::make(target, 0.999);
  e.shadow[0][0] = -1.0;
  for (int k = 0; k < 100; ++k) ema_update(e, target);
  EXPECT_NEAR(std::fabs(e.shadow[0][0] - 3.0), std::pow(0.999, 100) * 4.0, 1e-12);
}

TEST(Ema, ShadowStaysInConvexHull) {
  auto ps = random_params(10);
  auto e = EmaState::make(ps, 0.9);
  std::vector<std::vector<double>> lo, hi;
  for (auto& p : ps) lo.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  hi = lo;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(-5, 5);
  for (int step = 0; step < 50; ++step) {
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t k = 0; k < ps[i].tensor.numel(); ++k) {
        double v = d(rng);
        ps[i].tensor.data()[k] = v;
        lo[i][k] = std::min(lo[i][k], v);
        hi[i][k] = std::max(hi[i][k], v);
      }
    ema_update(e, ps);
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t k = 0; k < lo[i].size(); ++k) {
        EXPECT_GE(e.shadow[i][k], lo[i][k]);
        EXPECT_LE(e.shadow[i][k], hi[i][k]);
      }
  }
}

TEST(Ema, ApplyRestoreRoundTrip) {
  auto net = model::build_network(model::NetworkProfile::desk(), 3);
  auto params = net.parameters();
  auto e = EmaState::make(params, 0.5);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> d(0, 0.01);
  for (auto& s : e.shadow)
    for (auto& v : s) v += d(rng);
  auto shadow_copy = e.shadow;

  std::vector<std::vector<double>> before;
  for (auto& p : params) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

  std::mt19937_64 xr(13);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> xv(2 * 3 * 64 * 64);
  for (auto& v : xv) v = u(xr);
  Tensor x = Tensor::from({2, 3, 64, 64}, xv);

  Tensor swapped_out;
  {
    auto swap = ema_apply(e, params);
    EXPECT_THROW(ema_apply(e, params), AutodiffError);
    NoGradGuard g;
    swapped_out = net.forward(x, false);
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_TRUE(bit_equal(params[i].tensor.data(), before[i])) << params[i].name;
  for (std::size_t i = 0; i < shadow_copy.size(); ++i) EXPECT_TRUE(bit_equal(e.shadow[i], shadow_copy[i]));

  // A fresh network loaded with the shadow gives the same logits.
  auto fresh = model::build_network(model::NetworkProfile::desk(), 99);
  auto fp = fresh.parameters();
  for (std::size_t i = 0; i < fp.size(); ++i) fp[i].tensor.assign(shadow_copy[i]);
  NoGradGuard g;
  Tensor ref = fresh.forward(x, false);
  EXPECT_TRUE(bit_equal(ref.data(), swapped_out.data()));
}

namespace {

// loss = sum(w * c) for a fixed c, optionally poisoned with +inf.
Tensor linear_loss(NamedTensor& w, const std::vector<double>& c) {
  return ops::sum(ops::mul(w.tensor, Tensor::from({c.size()}, c)));
}

}  // namespace

TEST(LossScaler, MatchesUnscaledStep) {
  std::vector<NamedTensor> a = {{"w", Tensor::from({4}, {0.1, -0.2, 0.3, 0.7}, true), true}};
  std::vector<NamedTensor> b = {{"w", Tensor::from({4}, {0.1, -0.2, 0.3, 0.7}, true), true}};
  std::vector<double> c = {1.5, -2.0, 0.25, 3.0};
  auto sa = OptimizerState::make(a), sb = OptimizerState::make(b);
  LossScalerState scaler;
  AdamWConfig cfg;
  for (int step = 0; step < 5; ++step) {
    auto r = scaled_step(linear_loss(a[0], c), a, sa, cfg, cfg.lr, scaler);
    EXPECT_TRUE(r.stepped);
    b[0].tensor.zero_grad();
    backward(linear_loss(b[0], c));
    adamw_step(b, sb, cfg, cfg.lr);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a[0].tensor.data()[k], b[0].tensor.data()[k], 1e-12);
  }
}

TEST(LossScaler, NonFiniteGradientSkips) {
  std::vector<NamedTensor> ps = {{"w", Tensor::from({3}, {0.1, 0.2, 0.3}, true), true}};
  auto st = OptimizerState::make(ps);
  AdamWConfig cfg;
  LossScalerState scaler;
  // One good step so the moments are non-trivial.
  scaled_step(linear_loss(ps[0], {1, 2, 3}), ps, st, cfg, cfg.lr, scaler);
  auto e = EmaState::make(ps, 0.9);

  const auto theta = std::vector<double>(ps[0].tensor.data().begin(), ps[0].tensor.data().end());
  const auto m = st.m, v = st.v;
  const auto t = st.t;
  const auto shadow = e.shadow;
  const double inf = std::numeric_limits<double>::infinity();
  auto r = scaled_step(linear_loss(ps[0], {1, inf, 3}), ps, st, cfg, cfg.lr, scaler, &e);
  EXPECT_FALSE(r.stepped);
  EXPECT_EQ(r.scale, 32768.0);
  EXPECT_EQ(scaler.successes, 0u);
  EXPECT_TRUE(bit_equal(ps[0].tensor.data(), theta));
  EXPECT_TRUE(bit_equal(st.m[0], m[0]));
  EXPECT_TRUE(bit_equal(st.v[0], v[0]));
  EXPECT_EQ(st.t, t);
  EXPECT_TRUE(bit_equal(e.shadow[0], shadow[0]));
  EXPECT_EQ(e.updates, 0u);
}

TEST(LossScaler, GrowsAfterInterval) {
  std::vector<NamedTensor> ps = {{"w", Tensor::from({2}, {0.1, 0.2}, true), true}};
  auto st = OptimizerState::make(ps);
  LossScalerState scaler;
  for (int i = 0; i < 199; ++i) scaled_step(linear_loss(ps[0], {1, 1}), ps, st, AdamWConfig{}, 1e-4, scaler);
  EXPECT_EQ(scaler.scale, 65536.0);
  auto r = scaled_step(linear_loss(ps[0], {1, 1}), ps, st, AdamWConfig{}, 1e-4, scaler);
  EXPECT_EQ(r.scale, 131072.0);
  EXPECT_EQ(scaler.successes, 0u);
}

TEST(LossScaler, HalfEmulationOverflowBacksOff) {
  // 1.0 * 2^16 exceeds the binary16 range, so the emulated step overflows.
  std::vector<NamedTensor> ps = {{"w", Tensor::from({1}, {0.5}, true), true}};
  auto st = OptimizerState::make(ps);
  LossScalerState scaler;
  scaler.emulate_half = true;
  auto r = scaled_step(linear_loss(ps[0], {1.0}), ps, st, AdamWConfig{}, 1e-4, scaler);
  EXPECT_FALSE(r.stepped);
  EXPECT_EQ(ps[0].tensor.data()[0], 0.5);
  r = scaled_step(linear_loss(ps[0], {1.0}), ps, st, AdamWConfig{}, 1e-4, scaler);
  EXPECT_TRUE(r.stepped);
  EXPECT_EQ(r.scale, 32768.0);
}
