#include "chexopt/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "chexopt/error.hpp"

namespace chexopt::model {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::ConvStem: return "conv-stem";
    case BlockKind::FusedMBConv: return "fused-mbconv";
    case BlockKind::MBConv: return "mbconv";
    case BlockKind::Conv1x1Gap: return "conv1x1-gap";
  }
  return "?";
}

BlockKind block_kind_from_string(const std::string& s) {
  if (s == "conv-stem") return BlockKind::ConvStem;
  if (s == "fused-mbconv") return BlockKind::FusedMBConv;
  if (s == "mbconv") return BlockKind::MBConv;
  if (s == "conv1x1-gap") return BlockKind::Conv1x1Gap;
  throw ConfigError("unknown block kind '" + s + "'");
}

namespace {
NetworkProfile make_profile(std::string name, std::size_t input, const std::vector<std::size_t>& channels,
                            const std::vector<std::size_t>& layers) {
  // Block kinds, expansions, strides and SE ratios are shared by both presets.
  static const BlockKind kinds[] = {BlockKind::ConvStem, BlockKind::FusedMBConv,
                                    BlockKind::FusedMBConv, BlockKind::FusedMBConv,
                                    BlockKind::MBConv,      BlockKind::MBConv,
                                    BlockKind::MBConv,      BlockKind::Conv1x1Gap};
  static const int expansions[] = {1, 1, 4, 4, 4, 6, 6, 1};
  static const std::size_t strides[] = {2, 1, 2, 2, 2, 1, 2, 1};
  static const double se[] = {0, 0, 0, 0, 0.25, 0.25, 0.25, 0};
  NetworkProfile p;
  p.name = std::move(name);
  p.input_size = input;
  for (std::size_t i = 0; i < 8; ++i) {
    p.stages.push_back({kinds[i], expansions[i], layers[i], channels[i], strides[i], se[i]});
  }
  p.feature_dim = channels.back();
  p.num_classes = 5;
  return p;
}
}  // namespace

NetworkProfile NetworkProfile::full_table4() {
  return make_profile("full-table4", 224, {24, 24, 48, 64, 128, 160, 256, 1280},
                      {1, 2, 4, 4, 6, 9, 15, 1});
}

NetworkProfile NetworkProfile::desk() {
  return make_profile("desk", 64, {8, 8, 16, 24, 32, 40, 64, 160}, {1, 1, 2, 2, 2, 2, 2, 1});
}

NetworkProfile NetworkProfile::by_name(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "full-table4") return full_table4();
  throw ConfigError("unknown network profile '" + name + "' (expected desk or full-table4)");
}

namespace {
void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type");
  }
}
}  // namespace

NetworkProfile NetworkProfile::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"name", "input_size", "num_classes", "stages"}, "profile");
  NetworkProfile p;
  p.name = get_or<std::string>(j, "name", "custom", "profile");
  p.input_size = get_or<std::size_t>(j, "input_size", 64, "profile");
  p.num_classes = get_or<std::size_t>(j, "num_classes", 5, "profile");
  if (!j.contains("stages") || !j.at("stages").is_array()) {
    throw ConfigError("profile: 'stages' array is required");
  }
  std::size_t i = 0;
  for (const auto& s : j.at("stages")) {
    const std::string where = "profile.stages[" + std::to_string(i++) + "]";
    reject_unknown(s, {"block_kind", "expansion", "layers", "out_channels", "stride", "se_ratio"},
                   where);
    StageSpec st;
    st.kind = block_kind_from_string(get_or<std::string>(s, "block_kind", "", where));
    st.expansion = get_or<int>(s, "expansion", 1, where);
    st.layers = get_or<std::size_t>(s, "layers", 1, where);
    st.out_channels = get_or<std::size_t>(s, "out_channels", 0, where);
    st.stride = get_or<std::size_t>(s, "stride", 1, where);
    st.se_ratio = get_or<double>(s, "se_ratio", 0.0, where);
    p.stages.push_back(st);
  }
  if (!p.stages.empty()) p.feature_dim = p.stages.back().out_channels;
  p.validate();
  return p;
}

nlohmann::json NetworkProfile::to_json() const {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : this->stages) {
    stages.push_back({{"block_kind", to_string(s.kind)},
                      {"expansion", s.expansion},
                      {"layers", s.layers},
                      {"out_channels", s.out_channels},
                      {"stride", s.stride},
                      {"se_ratio", s.se_ratio}});
  }
  return {{"name", name}, {"input_size", input_size}, {"num_classes", num_classes},
          {"stages", stages}};
}

void NetworkProfile::validate() const {
  if (stages.size() < 2) throw ConfigError("profile '" + name + "': needs a stem and an aggregation stage");
  if (stages.front().kind != BlockKind::ConvStem) throw ConfigError("profile '" + name + "': stage 0 must be conv-stem");
  if (stages.back().kind != BlockKind::Conv1x1Gap) throw ConfigError("profile '" + name + "': last stage must be conv1x1-gap");
  if (num_classes < 1) throw ConfigError("profile '" + name + "': num_classes must be >= 1");
  if (input_size < 1) throw ConfigError("profile '" + name + "': input_size must be >= 1");
  std::size_t spatial = input_size;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "profile '" + name + "' stage " + std::to_string(i);
    if (s.stride != 1 && s.stride != 2) throw ConfigError(where + ": stride must be 1 or 2");
    if (s.layers < 1) throw ConfigError(where + ": layers must be >= 1");
    if (s.out_channels < 1) throw ConfigError(where + ": out_channels must be >= 1");
    if (s.se_ratio < 0.0 || s.se_ratio > 1.0) throw ConfigError(where + ": se_ratio must lie in [0,1]");
    if (i > 0 && i + 1 < stages.size() &&
        (s.kind == BlockKind::ConvStem || s.kind == BlockKind::Conv1x1Gap)) {
      throw ConfigError(where + ": stem/aggregation kinds only allowed at the ends");
    }
    if (s.kind == BlockKind::FusedMBConv && s.expansion != 1 && s.expansion != 4) {
      throw ConfigError(where + ": fused-mbconv expansion must be 1 or 4");
    }
    if (s.kind == BlockKind::MBConv && s.expansion != 4 && s.expansion != 6) {
      throw ConfigError(where + ": mbconv expansion must be 4 or 6");
    }
    if (s.kind == BlockKind::FusedMBConv && s.se_ratio != 0.0) {
      throw ConfigError(where + ": fused-mbconv stages carry no squeeze-excitation");
    }
    if ((s.kind == BlockKind::ConvStem || s.kind == BlockKind::Conv1x1Gap) && s.layers != 1) {
      throw ConfigError(where + ": stem/aggregation stages have exactly one layer");
    }
    if (s.stride == 2) {
      if (spatial < 2) {
        throw ConfigError(where + ": stride 2 would reduce the " + std::to_string(spatial) + "x" +
                          std::to_string(spatial) + " map below 1x1");
      }
      spatial = (spatial + 1) / 2;
    }
  }
  if (feature_dim != stages.back().out_channels) {
    throw ConfigError("profile '" + name + "': feature_dim must equal the aggregation width");
  }
}

// ---------------------------------------------------------------------------

Tensor he_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  if (fan_in < 1) throw ConfigError("he_init: fan_in must be >= 1");
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor he_init(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return he_init(std::move(shape), fan_in, rng);
}

ConvBn ConvBn::make(ConvKind kind, std::size_t in, std::size_t out, std::size_t kernel,
                    std::size_t stride, bool activation, std::mt19937_64& rng) {
  ConvBn c;
  c.kind = kind;
  c.stride = stride;
  c.activation = activation;
  const std::size_t per_group_in = kind == ConvKind::Depthwise ? 1 : in;
  c.weight = he_init({out, per_group_in, kernel, kernel}, per_group_in * kernel * kernel, rng);
  c.gamma = Tensor::full({out}, 1.0, true);
  c.beta = Tensor::zeros({out}, true);
  c.stats = ops::BatchNormStats::make(out);
  return c;
}

Tensor ConvBn::forward(const Tensor& x, bool training) {
  Tensor y;
  switch (kind) {
    case ConvKind::Full: y = ops::conv2d(x, weight, stride); break;
    case ConvKind::Depthwise: y = ops::depthwise_conv2d(x, weight, stride); break;
    case ConvKind::Pointwise: y = ops::pointwise_conv2d(x, weight, stride); break;
  }
  y = ops::batch_norm(y, gamma, beta, stats, training);
  return activation ? ops::silu(y) : y;
}

std::size_t SqueezeExcite::hidden_channels(std::size_t channels, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0) {
    throw ConfigError("se_block: ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  // ceil with a tolerance so 0.25*8 stays 2 despite rounding in the ratio.
  const double raw = ratio * static_cast<double>(channels);
  auto hidden = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::max<std::size_t>(hidden, 1);
}

SqueezeExcite SqueezeExcite::make(std::size_t channels, double ratio, std::mt19937_64& rng) {
  const std::size_t hidden = hidden_channels(channels, ratio);
  SqueezeExcite se;
  se.reduce_w = he_init({channels, hidden}, channels, rng);
  se.reduce_b = Tensor::zeros({hidden}, true);
  se.expand_w = he_init({hidden, channels}, hidden, rng);
  se.expand_b = Tensor::zeros({channels}, true);
  return se;
}

Tensor se_gates(const Tensor& x, const SqueezeExcite& se) {
  Tensor squeezed = ops::global_avg_pool(x);
  Tensor h = ops::silu(ops::add_bias(ops::matmul(squeezed, se.reduce_w), se.reduce_b));
  return ops::sigmoid(ops::add_bias(ops::matmul(h, se.expand_w), se.expand_b));
}

Tensor se_block(const Tensor& x, const SqueezeExcite& se) {
  return ops::mul_channels(x, se_gates(x, se));
}

FusedMBConvLayer FusedMBConvLayer::make(std::size_t in, std::size_t out, int expansion,
                                        std::size_t stride, std::mt19937_64& rng) {
  if (expansion != 1 && expansion != 4) {
    throw ConfigError("fused_mbconv: expansion must be 1 or 4, got " + std::to_string(expansion));
  }
  FusedMBConvLayer l;
  l.expansion = expansion;
  l.residual = stride == 1 && in == out;
  if (expansion == 1) {
    l.conv = ConvBn::make(ConvKind::Full, in, out, 3, stride, true, rng);
  } else {
    const std::size_t hidden = in * static_cast<std::size_t>(expansion);
    l.conv = ConvBn::make(ConvKind::Full, in, hidden, 3, stride, true, rng);
    l.project.push_back(ConvBn::make(ConvKind::Pointwise, hidden, out, 1, 1, false, rng));
  }
  return l;
}

MBConvLayer MBConvLayer::make(std::size_t in, std::size_t out, int expansion,
                              std::size_t stride, double se_ratio, std::mt19937_64& rng) {
  if (expansion != 4 && expansion != 6) {
    throw ConfigError("mbconv: expansion must be 4 or 6, got " + std::to_string(expansion));
  }
  MBConvLayer l;
  l.expansion = expansion;
  l.residual = stride == 1 && in == out;
  const std::size_t hidden = in * static_cast<std::size_t>(expansion);
  l.expand = ConvBn::make(ConvKind::Pointwise, in, hidden, 1, 1, true, rng);
  l.depthwise = ConvBn::make(ConvKind::Depthwise, hidden, hidden, 3, stride, true, rng);
  if (se_ratio > 0.0) l.se.push_back(SqueezeExcite::make(hidden, se_ratio, rng));
  l.project = ConvBn::make(ConvKind::Pointwise, hidden, out, 1, 1, false, rng);
  return l;
}

Tensor fused_mbconv(const Tensor& x, FusedMBConvLayer& layer, bool training) {
  Tensor y = layer.conv.forward(x, training);
  if (!layer.project.empty()) y = layer.project.front().forward(y, training);
  return layer.residual ? ops::add(x, y) : y;
}

Tensor mbconv(const Tensor& x, MBConvLayer& layer, bool training) {
  Tensor y = layer.expand.forward(x, training);
  y = layer.depthwise.forward(y, training);
  if (!layer.se.empty()) y = se_block(y, layer.se.front());
  y = layer.project.forward(y, training);
  return layer.residual ? ops::add(x, y) : y;
}

// ---------------------------------------------------------------------------

Network build_network(const NetworkProfile& profile, std::uint64_t seed) {
  profile.validate();
  std::mt19937_64 rng(seed);
  Network net;
  net.profile_ = profile;
  const auto& stem = profile.stages.front();
  net.stem_ = ConvBn::make(ConvKind::Full, 3, stem.out_channels, 3, stem.stride, true, rng);
  std::size_t channels = stem.out_channels;
  for (std::size_t si = 1; si + 1 < profile.stages.size(); ++si) {
    const auto& st = profile.stages[si];
    for (std::size_t l = 0; l < st.layers; ++l) {
      const std::size_t stride = l == 0 ? st.stride : 1;
      if (st.kind == BlockKind::FusedMBConv) {
        net.blocks_.emplace_back(
            FusedMBConvLayer::make(channels, st.out_channels, st.expansion, stride, rng));
      } else {
        net.blocks_.emplace_back(
            MBConvLayer::make(channels, st.out_channels, st.expansion, stride, st.se_ratio, rng));
      }
      net.block_stage_.push_back(si);
      channels = st.out_channels;
    }
  }
  const auto& agg = profile.stages.back();
  net.head_conv_ = ConvBn::make(ConvKind::Pointwise, channels, agg.out_channels, 1, agg.stride,
                                true, rng);
  net.head_w_ = he_init({profile.feature_dim, profile.num_classes}, profile.feature_dim, rng);
  net.head_b_ = Tensor::zeros({profile.num_classes}, true);
  return net;
}

Tensor Network::run(const Tensor& x, bool training, std::vector<Shape>* trace) {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw ShapeError("network: expected (N,3,H,W) input, got " + shape_str(x.shape()));
  }
  Tensor y = stem_.forward(x, training);
  if (trace) trace->push_back(y.shape());
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    y = std::visit(
        [&](auto& layer) -> Tensor {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, FusedMBConvLayer>) {
            return fused_mbconv(y, layer, training);
          } else {
            return mbconv(y, layer, training);
          }
        },
        blocks_[b]);
    const bool stage_end = b + 1 == blocks_.size() || block_stage_[b + 1] != block_stage_[b];
    if (trace && stage_end) trace->push_back(y.shape());
  }
  y = head_conv_.forward(y, training);
  if (trace) trace->push_back(y.shape());
  return ops::global_avg_pool(y);
}

Tensor Network::features(const Tensor& x, bool training) { return run(x, training, nullptr); }

Tensor Network::forward(const Tensor& x, bool training) {
  return ops::add_bias(ops::matmul(features(x, training), head_w_), head_b_);
}

std::vector<Shape> Network::stage_shapes(const Tensor& x) {
  std::vector<Shape> trace;
  NoGradGuard guard;
  run(x, false, &trace);
  return trace;
}

namespace {
void add_convbn(std::vector<NamedTensor>& out, const std::string& prefix, ConvBn& c) {
  out.push_back({prefix + ".weight", c.weight, true});
  out.push_back({prefix + ".bn.gamma", c.gamma, false});
  out.push_back({prefix + ".bn.beta", c.beta, false});
}
void add_bn_buffers(std::vector<NamedTensor>& out, const std::string& prefix, ConvBn& c) {
  out.push_back({prefix + ".bn.running_mean", c.stats.running_mean, false});
  out.push_back({prefix + ".bn.running_var", c.stats.running_var, false});
}

template <class Fn>
void for_each_convbn(ConvBn& stem, std::vector<Block>& blocks, ConvBn& head, Fn&& fn) {
  fn("stem", stem);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b);
    if (auto* f = std::get_if<FusedMBConvLayer>(&blocks[b])) {
      fn(p + ".conv", f->conv);
      if (!f->project.empty()) fn(p + ".project", f->project.front());
    } else {
      auto& m = std::get<MBConvLayer>(blocks[b]);
      fn(p + ".expand", m.expand);
      fn(p + ".depthwise", m.depthwise);
      fn(p + ".project", m.project);
    }
  }
  fn("head.conv", head);
}
}  // namespace

std::vector<NamedTensor> Network::parameters() {
  std::vector<NamedTensor> out;
  for_each_convbn(stem_, blocks_, head_conv_,
                  [&](const std::string& p, ConvBn& c) { add_convbn(out, p, c); });
  // SE parameters are appended per block so the order stays stable.
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (auto* m = std::get_if<MBConvLayer>(&blocks_[b]); m && !m->se.empty()) {
      const std::string p = "blocks." + std::to_string(b) + ".se";
      auto& se = m->se.front();
      out.push_back({p + ".reduce_w", se.reduce_w, true});
      out.push_back({p + ".reduce_b", se.reduce_b, false});
      out.push_back({p + ".expand_w", se.expand_w, true});
      out.push_back({p + ".expand_b", se.expand_b, false});
    }
  }
  out.push_back({"head.fc.weight", head_w_, true});
  out.push_back({"head.fc.bias", head_b_, false});
  return out;
}

std::vector<NamedTensor> Network::buffers() {
  std::vector<NamedTensor> out;
  for_each_convbn(stem_, blocks_, head_conv_,
                  [&](const std::string& p, ConvBn& c) { add_bn_buffers(out, p, c); });
  return out;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Network Network::clone() const {
  auto& self = const_cast<Network&>(*this);
  Network copy = build_network(profile_, 0);
  auto src = self.parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.assign(src[i].tensor.data());
  auto sb = self.buffers();
  auto db = copy.buffers();
  for (std::size_t i = 0; i < sb.size(); ++i) db[i].tensor.assign(sb[i].tensor.data());
  return copy;
}

// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> z) {
  if (z.empty()) throw ConfigError("softmax: empty logit vector");
  for (double v : z) {
    if (!std::isfinite(v)) throw ConfigError("softmax: non-finite logit");
  }
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be (N,C), got " + shape_str(logits.shape()));
  }
  const std::size_t C = logits.dim(1);
  for (std::size_t y : labels) {
    if (y >= C) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                        std::to_string(C) + ")");
    }
  }
  return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits), labels)), -1.0);
}

}  // namespace chexopt::model
