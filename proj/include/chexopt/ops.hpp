#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "chexopt/tensor.hpp"

namespace chexopt::ops {

enum class OpKind {
  Conv2d,
  DepthwiseConv2d,
  PointwiseConv2d,
  MatMul,
  Add,
  AddBias,
  Mul,
  MulChannels,
  Scale,
  Silu,
  Sigmoid,
  BatchNorm,
  GlobalAvgPool,
  Reshape,
  Mean,
  Sum,
  LogSoftmax,
  Pick,
};

std::string_view op_name(OpKind kind);

// Convolutions take NCHW input and (Cout, Cin/groups, k, k) weights with an
// odd square kernel. Zero padding (k-1)/2 keeps the spatial size at stride 1
// and gives ceil(H/2) at stride 2.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1);
Tensor pointwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1);

// (M,K) x (K,N) -> (M,N)
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
// bias of shape (C) broadcast over (N,C) or (N,C,H,W)
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
// gates of shape (N,C) broadcast over the spatial dims of (N,C,H,W)
Tensor mul_channels(const Tensor& x, const Tensor& gates);
Tensor scale(const Tensor& x, double factor);

Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Per-channel running statistics owned by a batchnorm layer. They are
// buffers, not trainable parameters.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running <- momentum*running + (1-momentum)*batch
  double eps = 1e-3;

  static BatchNormStats make(std::size_t channels);
};

// Training mode normalizes with batch statistics and updates `stats`;
// eval mode normalizes with the running averages.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, bool training);

Tensor global_avg_pool(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x);

// Row-wise log-softmax over the last axis of an (N,C) tensor.
Tensor log_softmax(const Tensor& z);
// out[n] = x[n, labels[n]] for an (N,C) tensor.
Tensor pick(const Tensor& x, std::span<const std::size_t> labels);

}  // namespace chexopt::ops
