#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "chexopt/ops.hpp"
#include "chexopt/tensor.hpp"

namespace chexopt::model {

enum class BlockKind { ConvStem, FusedMBConv, MBConv, Conv1x1Gap };

std::string to_string(BlockKind kind);
BlockKind block_kind_from_string(const std::string& s);

// One row of the architecture table.
struct StageSpec {
  BlockKind kind = BlockKind::ConvStem;
  int expansion = 1;
  std::size_t layers = 1;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  double se_ratio = 0.0;  // 0 = no squeeze-excitation

  bool operator==(const StageSpec&) const = default;
};

struct NetworkProfile {
  std::string name;
  std::size_t input_size = 224;
  std::vector<StageSpec> stages;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 5;

  // EfficientNetV2-M stage table at 224x224: 1280-wide features.
  static NetworkProfile full_table4();
  // Same stage structure at reduced width and depth for CPU training.
  static NetworkProfile desk();
  static NetworkProfile by_name(const std::string& name);

  static NetworkProfile from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  // Throws ConfigError on an inconsistent table. Also walks the stride
  // pattern from input_size and rejects a stride-2 stage that would have
  // to downsample a 1x1 map.
  void validate() const;

  bool operator==(const NetworkProfile&) const = default;
};

// Parameter with a stable name; `decayable` is false for norm scale/shift
// and bias vectors.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decayable = true;
};

// Samples normal(0, sqrt(2/fan_in)).
Tensor he_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng);
Tensor he_init(Shape shape, std::size_t fan_in, std::uint64_t seed);

enum class ConvKind { Full, Depthwise, Pointwise };

// Convolution followed by batchnorm and optionally SiLU.
struct ConvBn {
  ConvKind kind = ConvKind::Full;
  std::size_t stride = 1;
  bool activation = true;
  Tensor weight;
  Tensor gamma;
  Tensor beta;
  ops::BatchNormStats stats;

  static ConvBn make(ConvKind kind, std::size_t in, std::size_t out, std::size_t kernel,
                     std::size_t stride, bool activation, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, bool training);
};

struct SqueezeExcite {
  Tensor reduce_w;  // (C, hidden)
  Tensor reduce_b;  // (hidden)
  Tensor expand_w;  // (hidden, C)
  Tensor expand_b;  // (C)

  static std::size_t hidden_channels(std::size_t channels, double ratio);
  static SqueezeExcite make(std::size_t channels, double ratio, std::mt19937_64& rng);
};

// Channel recalibration: x * sigmoid(W2 silu(W1 gap(x) + b1) + b2).
Tensor se_block(const Tensor& x, const SqueezeExcite& se);
// The (N,C) gate values se_block multiplies by.
Tensor se_gates(const Tensor& x, const SqueezeExcite& se);

struct FusedMBConvLayer {
  int expansion = 1;
  bool residual = false;
  ConvBn conv;                  // 3x3, expands when expansion > 1
  std::vector<ConvBn> project;  // 1x1 projection, present iff expansion > 1

  static FusedMBConvLayer make(std::size_t in, std::size_t out, int expansion,
                               std::size_t stride, std::mt19937_64& rng);
};

struct MBConvLayer {
  int expansion = 4;
  bool residual = false;
  ConvBn expand;     // 1x1
  ConvBn depthwise;  // 3x3 depthwise, carries the stride
  std::vector<SqueezeExcite> se;  // empty when se_ratio == 0
  ConvBn project;    // 1x1, no activation

  static MBConvLayer make(std::size_t in, std::size_t out, int expansion, std::size_t stride,
                          double se_ratio, std::mt19937_64& rng);
};

Tensor fused_mbconv(const Tensor& x, FusedMBConvLayer& layer, bool training);
Tensor mbconv(const Tensor& x, MBConvLayer& layer, bool training);

using Block = std::variant<FusedMBConvLayer, MBConvLayer>;

class Network {
 public:
  Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  // Deep copy with independent parameter storage.
  Network clone() const;

  const NetworkProfile& profile() const { return profile_; }

  // (N,3,S,S) -> (N, feature_dim)
  Tensor features(const Tensor& x, bool training);
  // (N,3,S,S) -> (N, num_classes) logits
  Tensor forward(const Tensor& x, bool training);

  // Output shape after each stage (stem first, aggregation stage last,
  // aggregation reported before pooling).
  std::vector<Shape> stage_shapes(const Tensor& x);

  std::vector<NamedTensor> parameters();
  std::vector<NamedTensor> buffers();
  std::size_t parameter_count();

  Tensor& head_weight() { return head_w_; }
  Tensor& head_bias() { return head_b_; }
  std::vector<Block>& blocks() { return blocks_; }

  friend Network build_network(const NetworkProfile& profile, std::uint64_t seed);

 private:
  Tensor run(const Tensor& x, bool training, std::vector<Shape>* trace);

  NetworkProfile profile_;
  ConvBn stem_;
  std::vector<Block> blocks_;
  std::vector<std::size_t> block_stage_;  // stage index of each block
  ConvBn head_conv_;
  Tensor head_w_;  // (feature_dim, num_classes)
  Tensor head_b_;  // (num_classes)
};

Network build_network(const NetworkProfile& profile, std::uint64_t seed);

// Numerically stable softmax of one logit vector; throws on non-finite input.
std::vector<double> softmax(std::span<const double> z);

// Mean over the batch of -log softmax(z_n)[y_n], recorded on the tape.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace chexopt::model
