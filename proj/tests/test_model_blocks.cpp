#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "chexopt/error.hpp"
#include "chexopt/gradcheck.hpp"
#include "chexopt/model.hpp"
#include "chexopt/ops.hpp"
#include "gradient_suite.hpp"

using namespace chexopt;
using namespace chexopt::model;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

void fill(Tensor& t, double v) {
  for (auto& x : t.data()) x = v;
}

// Zeroes every weight feeding the residual branch so only the skip remains.
void zero_branch(ConvBn& c) {
  fill(c.weight, 0.0);
  fill(c.beta, 0.0);
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double silu(double v) { return v * sigmoid(v); }

}  // namespace

TEST(SqueezeExcite, SaturatedGateIsIdentity) {
  std::mt19937_64 rng(1);
  auto se = SqueezeExcite::make(8, 0.25, rng);
  fill(se.expand_b, 100.0);
  Tensor x = random_tensor({2, 8, 3, 3}, 2);
  Tensor y = se_block(x, se);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-8);
}

TEST(SqueezeExcite, ZeroWeightsHalveInput) {
  std::mt19937_64 rng(1);
  auto se = SqueezeExcite::make(8, 0.25, rng);
  fill(se.reduce_w, 0.0);
  fill(se.expand_w, 0.0);
  Tensor x = random_tensor({2, 8, 3, 3}, 3);
  Tensor y = se_block(x, se);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], 0.5 * x.data()[i]);
}

TEST(SqueezeExcite, MatchesStraightLineOracle) {
  std::mt19937_64 rng(4);
  const std::size_t N = 2, C = 12, H = 4, W = 3;
  auto se = SqueezeExcite::make(C, 0.25, rng);
  const std::size_t hid = se.reduce_b.numel();
  ASSERT_EQ(hid, 3u);
  for (auto* t : {&se.reduce_b, &se.expand_b}) {
    auto r = random_tensor(t->shape(), 5);
    std::copy(r.data().begin(), r.data().end(), t->data().begin());
  }
  Tensor x = random_tensor({N, C, H, W}, 6);
  Tensor y = se_block(x, se);
  const auto xd = x.data();
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> s(C, 0.0), h(hid, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < H * W; ++i) s[c] += xd[(n * C + c) * H * W + i];
      s[c] /= static_cast<double>(H * W);
    }
    for (std::size_t j = 0; j < hid; ++j) {
      double a = se.reduce_b.data()[j];
      for (std::size_t c = 0; c < C; ++c) a += s[c] * se.reduce_w.data()[c * hid + j];
      h[j] = silu(a);
    }
    for (std::size_t c = 0; c < C; ++c) {
      double a = se.expand_b.data()[c];
      for (std::size_t j = 0; j < hid; ++j) a += h[j] * se.expand_w.data()[j * C + c];
      const double gate = sigmoid(a);
      EXPECT_GT(gate, 0.0);
      EXPECT_LT(gate, 1.0);
      for (std::size_t i = 0; i < H * W; ++i) {
        const std::size_t k = (n * C + c) * H * W + i;
        EXPECT_NEAR(y.data()[k], xd[k] * gate, 1e-12);
      }
    }
  }
}

TEST(SqueezeExcite, RatioBounds) {
  EXPECT_THROW(SqueezeExcite::hidden_channels(8, 0.0), ConfigError);
  EXPECT_THROW(SqueezeExcite::hidden_channels(8, -0.1), ConfigError);
  EXPECT_THROW(SqueezeExcite::hidden_channels(8, 1.5), ConfigError);
  EXPECT_EQ(SqueezeExcite::hidden_channels(8, 0.25), 2u);
  EXPECT_EQ(SqueezeExcite::hidden_channels(10, 0.25), 3u);
  EXPECT_EQ(SqueezeExcite::hidden_channels(2, 0.25), 1u);
}

TEST(FusedMBConv, ZeroBranchIsSkip) {
  std::mt19937_64 rng(7);
  for (int expansion : {1, 4}) {
    auto layer = FusedMBConvLayer::make(6, 6, expansion, 1, rng);
    zero_branch(layer.conv);
    for (auto& p : layer.project) zero_branch(p);
    Tensor x = random_tensor({2, 6, 5, 5}, 8);
    for (bool training : {false, true}) {
      Tensor y = fused_mbconv(x, layer, training);
      for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
    }
  }
}

TEST(FusedMBConv, StrideTwoHalvesSpatial) {
  std::mt19937_64 rng(9);
  auto layer = FusedMBConvLayer::make(4, 8, 4, 2, rng);
  EXPECT_FALSE(layer.residual);
  Tensor y = fused_mbconv(random_tensor({1, 4, 8, 8}, 10), layer, false);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 4, 4}));
}

TEST(FusedMBConv, IdentityKernelGivesSkipPlusSilu) {
  std::mt19937_64 rng(11);
  auto layer = FusedMBConvLayer::make(1, 1, 1, 1, rng);
  fill(layer.conv.weight, 0.0);
  layer.conv.weight.data()[4] = 1.0;
  // Eval-mode norm with running var 1 - eps is the identity map.
  fill(layer.conv.stats.running_var, 1.0 - layer.conv.stats.eps);
  Tensor x = random_tensor({1, 1, 6, 6}, 12, -3.0, 3.0);
  Tensor y = fused_mbconv(x, layer, false);
  ASSERT_TRUE(layer.residual);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    EXPECT_NEAR(y.data()[i], v + silu(v), 1e-12);
  }
}

TEST(FusedMBConv, BadExpansion) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(FusedMBConvLayer::make(4, 4, 6, 1, rng), ConfigError);
  EXPECT_THROW(MBConvLayer::make(4, 4, 1, 1, 0.25, rng), ConfigError);
}

TEST(MBConv, ZeroBranchIsSkip) {
  std::mt19937_64 rng(13);
  for (double ratio : {0.0, 0.25}) {
    auto layer = MBConvLayer::make(8, 8, 4, 1, ratio, rng);
    zero_branch(layer.expand);
    zero_branch(layer.depthwise);
    zero_branch(layer.project);
    Tensor x = random_tensor({2, 8, 4, 4}, 14);
    Tensor y = mbconv(x, layer, true);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(MBConv, ZeroRatioHasNoGateStage) {
  std::mt19937_64 a(15), b(15);
  auto with_se = MBConvLayer::make(8, 8, 4, 1, 0.25, a);
  auto without = MBConvLayer::make(8, 8, 4, 1, 0.0, b);
  EXPECT_EQ(with_se.se.size(), 1u);
  EXPECT_TRUE(without.se.empty());
  // Same weights, SE removed by hand: identical output to the ratio-0 layer.
  without.expand = with_se.expand;
  without.depthwise = with_se.depthwise;
  without.project = with_se.project;
  Tensor x = random_tensor({1, 8, 4, 4}, 16);
  Tensor ref = with_se.depthwise.forward(with_se.expand.forward(x, false), false);
  ref = ops::add(x, with_se.project.forward(ref, false));
  Tensor y = mbconv(x, without, false);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.data()[i], ref.data()[i]);
}

TEST(MBConv, DeskStageFourFirstLayerShape) {
  auto p = NetworkProfile::desk();
  const auto& st = p.stages[4];
  EXPECT_EQ(st.kind, BlockKind::MBConv);
  std::mt19937_64 rng(17);
  auto layer = MBConvLayer::make(24, st.out_channels, st.expansion, st.stride, st.se_ratio, rng);
  Tensor y = mbconv(random_tensor({1, 24, 8, 8}, 18), layer, false);
  EXPECT_EQ(y.shape(), (Shape{1, 32, 4, 4}));
}

TEST(Profiles, FullTable4MatchesTable) {
  auto p = NetworkProfile::full_table4();
  const std::vector<std::size_t> ch = {24, 24, 48, 64, 128, 160, 256, 1280};
  const std::vector<std::size_t> layers = {1, 2, 4, 4, 6, 9, 15, 1};
  const std::vector<std::size_t> strides = {2, 1, 2, 2, 2, 1, 2, 1};
  const std::vector<double> se = {0, 0, 0, 0, 0.25, 0.25, 0.25, 0};
  ASSERT_EQ(p.stages.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(p.stages[i].out_channels, ch[i]) << i;
    EXPECT_EQ(p.stages[i].layers, layers[i]) << i;
    EXPECT_EQ(p.stages[i].stride, strides[i]) << i;
    EXPECT_EQ(p.stages[i].se_ratio, se[i]) << i;
  }
  EXPECT_EQ(p.input_size, 224u);
  EXPECT_EQ(p.feature_dim, 1280u);
  EXPECT_EQ(p.num_classes, 5u);
}

TEST(Profiles, JsonRoundTripAndUnknownKey) {
  auto p = NetworkProfile::desk();
  EXPECT_EQ(NetworkProfile::from_json(p.to_json()), p);
  auto j = p.to_json();
  j["stages"][1]["dropout"] = 0.2;
  EXPECT_THROW(NetworkProfile::from_json(j), ConfigError);
  EXPECT_THROW(NetworkProfile::by_name("tiny"), ConfigError);
}

TEST(Profiles, StrideBelowOnePixelNamesStage) {
  auto p = NetworkProfile::desk();
  p.input_size = 8;
  try {
    p.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage"), std::string::npos) << e.what();
  }
}

TEST(Network, FullTable4ShapeTrace) {
  auto net = build_network(NetworkProfile::full_table4(), 1);
  NoGradGuard guard;
  Tensor x = random_tensor({1, 3, 224, 224}, 2);
  auto shapes = net.stage_shapes(x);
  const std::vector<std::size_t> ch = {24, 24, 48, 64, 128, 160, 256, 1280};
  const std::vector<std::size_t> sp = {112, 112, 56, 28, 14, 14, 7, 7};
  ASSERT_EQ(shapes.size(), ch.size());
  for (std::size_t i = 0; i < ch.size(); ++i) EXPECT_EQ(shapes[i], (Shape{1, ch[i], sp[i], sp[i]})) << i;
  EXPECT_EQ(net.features(x, false).shape(), (Shape{1, 1280}));
  EXPECT_EQ(net.forward(x, false).shape(), (Shape{1, 5}));
  EXPECT_EQ(net.head_weight().shape(), (Shape{1280, 5}));
}

TEST(Network, DeskShapes) {
  auto net = build_network(NetworkProfile::desk(), 1);
  Tensor x = random_tensor({1, 3, 64, 64}, 2);
  EXPECT_EQ(net.features(x, false).shape(), (Shape{1, 160}));
  EXPECT_EQ(net.forward(x, false).shape(), (Shape{1, 5}));
  EXPECT_GT(net.parameter_count(), 0u);
}

TEST(Network, SameSeedBitIdentical) {
  auto a = build_network(NetworkProfile::desk(), 42);
  auto b = build_network(NetworkProfile::desk(), 42);
  auto c = build_network(NetworkProfile::desk(), 43);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    auto da = pa[i].tensor.data(), db = pb[i].tensor.data(), dc = pc[i].tensor.data();
    EXPECT_EQ(std::memcmp(da.data(), db.data(), da.size_bytes()), 0) << pa[i].name;
    any_diff |= std::memcmp(da.data(), dc.data(), da.size_bytes()) != 0;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Network, BiasesAndNormShiftStartAtZero) {
  auto net = build_network(NetworkProfile::desk(), 5);
  for (auto& p : net.parameters()) {
    const bool zero_init = p.name.ends_with("bias") || p.name.ends_with("_b") ||
                           p.name.ends_with("beta");
    if (!zero_init) continue;
    EXPECT_FALSE(p.decayable) << p.name;
    for (double v : p.tensor.data()) EXPECT_EQ(v, 0.0) << p.name;
  }
}

TEST(HeInit, MonteCarloStd) {
  Tensor t = he_init({100000}, 2, std::uint64_t{3});
  double mean = 0.0, sq = 0.0;
  for (double v : t.data()) mean += v;
  mean /= 1e5;
  for (double v : t.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / (1e5 - 1));
  EXPECT_NEAR(sd, 1.0, 0.02);
  EXPECT_THROW(he_init({3}, 0, std::uint64_t{1}), ConfigError);
}

TEST(HeInit, ReproducibleFirstValues) {
  Tensor a = he_init({5}, 9, std::uint64_t{77});
  Tensor b = he_init({5}, 9, std::uint64_t{77});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Softmax, Examples) {
  for (double p : softmax(std::vector<double>(5, 0.0))) EXPECT_DOUBLE_EQ(p, 0.2);

  std::vector<double> z = {1, 2, 3, 4, 5};
  auto p = softmax(z);
  const double expected[] = {0.01166, 0.03168, 0.08612, 0.23412, 0.63641};
  double total = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(p[i], expected[i], 1e-5);
    total += p[i];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);

  std::vector<double> shifted = z;
  for (auto& v : shifted) v += 1000.0;
  auto q = softmax(shifted);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(q[i], p[i], 1e-12);

  EXPECT_THROW(softmax(std::vector<double>{1.0, NAN}), ConfigError);
  EXPECT_THROW(softmax(std::vector<double>{1.0, INFINITY}), ConfigError);
}

TEST(Softmax, ArgmaxShiftInvariant) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> d(-20, 20);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> z(5);
    for (auto& v : z) v = d(rng);
    const double c = d(rng) * 50.0;
    auto p = softmax(z);
    std::vector<double> zs = z;
    for (auto& v : zs) v += c;
    auto q = softmax(zs);
    EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(),
              std::max_element(q.begin(), q.end()) - q.begin());
  }
}

TEST(CrossEntropy, Examples) {
  std::vector<std::size_t> y0 = {0};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 5}), y0).item(), std::log(5.0), 1e-12);

  Tensor sat = Tensor::zeros({1, 5});
  sat.data()[2] = 50.0;
  std::vector<std::size_t> y2 = {2};
  const double l = cross_entropy(sat, y2).item();
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-20);

  Tensor z = Tensor::from({1, 5}, {1, 2, 3, 4, 5});
  EXPECT_NEAR(cross_entropy(z, y0).item(), 4.4519, 1e-3);

  std::vector<std::size_t> bad = {5};
  EXPECT_THROW(cross_entropy(z, bad), ConfigError);
}

TEST(CrossEntropy, EqualsNegativeLogSoftmax) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor z = random_tensor({1, 5}, seed, -10.0, 10.0);
    std::vector<std::size_t> y = {seed % 5};
    Tensor ls = ops::log_softmax(z);
    EXPECT_NEAR(cross_entropy(z, y).item(), -ls.data()[seed % 5], 1e-12);
  }
}

TEST(CrossEntropy, BatchMeanIsNonNegative) {
  Tensor z = random_tensor({6, 5}, 31, -5.0, 5.0);
  std::vector<std::size_t> y = {0, 1, 2, 3, 4, 0};
  double manual = 0.0;
  for (std::size_t n = 0; n < 6; ++n) {
    std::vector<double> row(z.data().begin() + n * 5, z.data().begin() + n * 5 + 5);
    manual -= std::log(softmax(row)[y[n]]);
  }
  const double l = cross_entropy(z, y).item();
  EXPECT_GE(l, 0.0);
  EXPECT_NEAR(l, manual / 6.0, 1e-12);
}

TEST(Network, DeskGradientMatchesFiniteDifferences) {
  for (const auto& c : testsupport::run_network_gradient_suite(1, 1, 1e-4)) {
    EXPECT_TRUE(c.pass) << c.name << " seed " << c.seed << " rel err " << c.max_rel_err;
  }
}
