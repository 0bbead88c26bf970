#include "chexopt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

#include "chexopt/error.hpp"
#include "gemm.hpp"

namespace chexopt::ops {

using detail::TensorImpl;

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Conv2d: return "conv2d";
    case OpKind::DepthwiseConv2d: return "depthwise-conv2d";
    case OpKind::PointwiseConv2d: return "pointwise-conv2d";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add-bias";
    case OpKind::Mul: return "mul";
    case OpKind::MulChannels: return "mul-channels";
    case OpKind::Scale: return "scale";
    case OpKind::Silu: return "silu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::GlobalAvgPool: return "global-avg-pool";
    case OpKind::Reshape: return "reshape";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::LogSoftmax: return "log-softmax";
    case OpKind::Pick: return "pick";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

void expect_rank(OpKind kind, const Tensor& t, std::size_t rank, const char* what) {
  if (!t.defined()) shape_fail(kind, std::string(what) + " is undefined");
  if (t.rank() != rank) {
    shape_fail(kind, std::string(what) + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

bool wants_tape(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class Fn>
void record(OpKind kind, std::initializer_list<const Tensor*> inputs, const Tensor& out,
            Fn&& fn) {
  TapeNode node;
  node.kind = op_name(kind);
  for (const Tensor* t : inputs) node.inputs.push_back(t->shared());
  node.output = out.shared();
  out.impl()->requires_grad = true;
  node.backward = std::forward<Fn>(fn);
  Tape::current().record(std::move(node));
}

std::size_t out_extent(std::size_t in, std::size_t stride) { return (in + stride - 1) / stride; }

// --- im2col helpers for a single sample -------------------------------------

struct ConvGeom {
  std::size_t cin, h, w, k, pad, stride, ho, wo;
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t P = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t P = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void check_conv_common(OpKind kind, const Tensor& x, const Tensor& w, std::size_t stride) {
  expect_rank(kind, x, 4, "input");
  expect_rank(kind, w, 4, "weight");
  if (stride != 1 && stride != 2) {
    shape_fail(kind, "stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    shape_fail(kind, "kernel must be square with odd extent, got " + shape_str(w.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  constexpr OpKind kind = OpKind::Conv2d;
  check_conv_common(kind, x, w, stride);
  const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin) {
    shape_fail(kind, "weight expects " + std::to_string(w.dim(1)) + " input channels, input " +
                         shape_str(x.shape()) + " has " + std::to_string(Cin));
  }
  const ConvGeom g{Cin, H, W, k, (k - 1) / 2, stride, out_extent(H, stride),
                   out_extent(W, stride)};
  const std::size_t K = Cin * k * k, P = g.ho * g.wo;

  std::vector<double> out(N * Cout * P, 0.0);
  std::vector<double> cols(K * P);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    im2col(xd + n * Cin * H * W, g, cols.data());
    detail::gemm_nn(Cout, P, K, wd, cols.data(), out.data() + n * Cout * P);
  }
  Tensor result = make_result({N, Cout, g.ho, g.wo}, std::move(out));

  if (wants_tape({&x, &w})) {
    TensorImpl* xi = x.impl();
    TensorImpl* wi = w.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x, &w}, result, [=] {
      std::vector<double> colbuf(K * P), dcols(K * P);
      for (std::size_t n = 0; n < N; ++n) {
        const double* dout = oi->grad.data() + n * Cout * P;
        if (wi->requires_grad) {
          im2col(xi->data.data() + n * Cin * H * W, g, colbuf.data());
          detail::gemm_nt(Cout, K, P, dout, colbuf.data(), wi->grad.data());
        }
        if (xi->requires_grad) {
          std::fill(dcols.begin(), dcols.end(), 0.0);
          detail::gemm_tn(K, P, Cout, wi->data.data(), dout, dcols.data());
          col2im_add(dcols.data(), g, xi->grad.data() + n * Cin * H * W);
        }
      }
    });
  }
  return result;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  constexpr OpKind kind = OpKind::DepthwiseConv2d;
  check_conv_common(kind, x, w, stride);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t k = w.dim(2);
  if (w.dim(0) != C || w.dim(1) != 1) {
    shape_fail(kind, "weight must be (" + std::to_string(C) + ",1,k,k), got " +
                         shape_str(w.shape()));
  }
  const std::size_t pad = (k - 1) / 2;
  const std::size_t Ho = out_extent(H, stride), Wo = out_extent(W, stride);

  // Valid output column range for kernel column kx: ix = ox*s + kx - pad in [0, W).
  auto ox_range = [=](std::size_t kx, std::size_t& lo, std::size_t& hi) {
    const long off = static_cast<long>(kx) - static_cast<long>(pad);
    long l = off >= 0 ? 0 : (-off + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long h = (static_cast<long>(W) - 1 - off) / static_cast<long>(stride) + 1;  // exclusive
    if (static_cast<long>(W) - 1 - off < 0) h = 0;
    lo = static_cast<std::size_t>(std::max(l, 0L));
    hi = static_cast<std::size_t>(std::clamp(h, 0L, static_cast<long>(Wo)));
  };

  std::vector<double> out(N * C * Ho * Wo, 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = xd + (n * C + c) * H * W;
      double* oc = out.data() + (n * C + c) * Ho * Wo;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = wd[(c * k + ky) * k + kx];
          std::size_t lo, hi;
          ox_range(kx, lo, hi);
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            // Unsigned wrap-around is intended: base + ox*stride >= 0 on [lo, hi).
            const std::size_t base = static_cast<std::size_t>(iy) * W + kx - pad;
            double* dst = oc + oy * Wo;
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += wv * xc[base + ox * stride];
          }
        }
      }
    }
  }
  Tensor result = make_result({N, C, Ho, Wo}, std::move(out));

  if (wants_tape({&x, &w})) {
    TensorImpl* xi = x.impl();
    TensorImpl* wi = w.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x, &w}, result, [=] {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* xc = xi->data.data() + (n * C + c) * H * W;
          const double* gc = oi->grad.data() + (n * C + c) * Ho * Wo;
          double* dxc = xi->requires_grad ? xi->grad.data() + (n * C + c) * H * W : nullptr;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t widx = (c * k + ky) * k + kx;
              const double wv = wi->data[widx];
              std::size_t lo, hi;
              ox_range(kx, lo, hi);
              double wacc = 0.0;
              for (std::size_t oy = 0; oy < Ho; ++oy) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                const std::size_t base = static_cast<std::size_t>(iy) * W + kx - pad;
                const double* g = gc + oy * Wo;
                for (std::size_t ox = lo; ox < hi; ++ox) {
                  wacc += g[ox] * xc[base + ox * stride];
                }
                if (dxc) {
                  for (std::size_t ox = lo; ox < hi; ++ox) dxc[base + ox * stride] += wv * g[ox];
                }
              }
              if (wi->requires_grad) wi->grad[widx] += wacc;
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor pointwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  constexpr OpKind kind = OpKind::PointwiseConv2d;
  check_conv_common(kind, x, w, stride);
  const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0);
  if (w.dim(1) != Cin || w.dim(2) != 1) {
    shape_fail(kind, "weight must be (Cout," + std::to_string(Cin) + ",1,1), got " +
                         shape_str(w.shape()));
  }
  const std::size_t Ho = out_extent(H, stride), Wo = out_extent(W, stride);
  const std::size_t P = Ho * Wo;

  // Strided input is gathered into a dense (Cin, Ho*Wo) block per sample.
  auto gather = [=](const double* src, double* dst) {
    for (std::size_t c = 0; c < Cin; ++c)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox)
          dst[(c * Ho + oy) * Wo + ox] = src[(c * H + oy * stride) * W + ox * stride];
  };

  std::vector<double> out(N * Cout * P, 0.0);
  std::vector<double> buf(stride == 1 ? 0 : Cin * P);
  const double* xd = x.data().data();
  for (std::size_t n = 0; n < N; ++n) {
    const double* xn = xd + n * Cin * H * W;
    if (stride != 1) {
      gather(xn, buf.data());
      xn = buf.data();
    }
    detail::gemm_nn(Cout, P, Cin, w.data().data(), xn, out.data() + n * Cout * P);
  }
  Tensor result = make_result({N, Cout, Ho, Wo}, std::move(out));

  if (wants_tape({&x, &w})) {
    TensorImpl* xi = x.impl();
    TensorImpl* wi = w.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x, &w}, result, [=] {
      std::vector<double> xs(stride == 1 ? 0 : Cin * P), dxs(Cin * P);
      for (std::size_t n = 0; n < N; ++n) {
        const double* dout = oi->grad.data() + n * Cout * P;
        const double* xn = xi->data.data() + n * Cin * H * W;
        if (stride != 1) {
          gather(xn, xs.data());
          xn = xs.data();
        }
        if (wi->requires_grad) detail::gemm_nt(Cout, Cin, P, dout, xn, wi->grad.data());
        if (xi->requires_grad) {
          double* dx = xi->grad.data() + n * Cin * H * W;
          if (stride == 1) {
            detail::gemm_tn(Cin, P, Cout, wi->data.data(), dout, dx);
          } else {
            std::fill(dxs.begin(), dxs.end(), 0.0);
            detail::gemm_tn(Cin, P, Cout, wi->data.data(), dout, dxs.data());
            for (std::size_t c = 0; c < Cin; ++c)
              for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox)
                  dx[(c * H + oy * stride) * W + ox * stride] += dxs[(c * Ho + oy) * Wo + ox];
          }
        }
      }
    });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  constexpr OpKind kind = OpKind::MatMul;
  expect_rank(kind, a, 2, "lhs");
  expect_rank(kind, b, 2, "rhs");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) {
    shape_fail(kind, "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(M * N, 0.0);
  detail::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  Tensor result = make_result({M, N}, std::move(out));
  if (wants_tape({&a, &b})) {
    TensorImpl* ai = a.impl();
    TensorImpl* bi = b.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&a, &b}, result, [=] {
      // dA = dC * B^T, dB = A^T * dC
      if (ai->requires_grad) detail::gemm_nt(M, K, N, oi->grad.data(), bi->data.data(), ai->grad.data());
      if (bi->requires_grad) detail::gemm_tn(K, N, M, ai->data.data(), oi->grad.data(), bi->grad.data());
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  constexpr OpKind kind = OpKind::Add;
  if (a.shape() != b.shape()) {
    shape_fail(kind, "operands differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  Tensor result = make_result(a.shape(), std::move(out));
  if (wants_tape({&a, &b})) {
    TensorImpl* ai = a.impl();
    TensorImpl* bi = b.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&a, &b}, result, [=] {
      const std::size_t n = oi->grad.size();
      if (ai->requires_grad)
        for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  constexpr OpKind kind = OpKind::AddBias;
  if (x.rank() != 2 && x.rank() != 4) {
    shape_fail(kind, "input must be (N,C) or (N,C,H,W), got " + shape_str(x.shape()));
  }
  expect_rank(kind, bias, 1, "bias");
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (bias.dim(0) != C) {
    shape_fail(kind, "bias " + shape_str(bias.shape()) + " does not match channels of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) out[(n * C + c) * inner + i] += bd[c];
  Tensor result = make_result(x.shape(), std::move(out));
  if (wants_tape({&x, &bias})) {
    TensorImpl* xi = x.impl();
    TensorImpl* bi = bias.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x, &bias}, result, [=] {
      if (xi->requires_grad)
        for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
      if (bi->requires_grad) {
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += oi->grad[(n * C + c) * inner + i];
            bi->grad[c] += acc;
          }
      }
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  constexpr OpKind kind = OpKind::Mul;
  if (a.shape() != b.shape()) {
    shape_fail(kind, "operands differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor result = make_result(a.shape(), std::move(out));
  if (wants_tape({&a, &b})) {
    TensorImpl* ai = a.impl();
    TensorImpl* bi = b.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&a, &b}, result, [=] {
      const std::size_t n = oi->grad.size();
      if (ai->requires_grad)
        for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
    });
  }
  return result;
}

Tensor mul_channels(const Tensor& x, const Tensor& gates) {
  constexpr OpKind kind = OpKind::MulChannels;
  expect_rank(kind, x, 4, "input");
  expect_rank(kind, gates, 2, "gates");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gates.dim(0) != N || gates.dim(1) != C) {
    shape_fail(kind, "gates " + shape_str(gates.shape()) + " do not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  auto xd = x.data();
  auto gd = gates.data();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = xd[nc * HW + i] * gd[nc];
  Tensor result = make_result(x.shape(), std::move(out));
  if (wants_tape({&x, &gates})) {
    TensorImpl* xi = x.impl();
    TensorImpl* gi = gates.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x, &gates}, result, [=] {
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* g = oi->grad.data() + nc * HW;
        if (xi->requires_grad) {
          const double s = gi->data[nc];
          for (std::size_t i = 0; i < HW; ++i) xi->grad[nc * HW + i] += g[i] * s;
        }
        if (gi->requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < HW; ++i) acc += g[i] * xi->data[nc * HW + i];
          gi->grad[nc] += acc;
        }
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  Tensor result = make_result(x.shape(), std::move(out));
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(OpKind::Scale, {&x}, result, [=] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * factor;
    });
  }
  return result;
}

namespace {
inline double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * sigmoid_scalar(xd[i]);
  Tensor result = make_result(x.shape(), std::move(out));
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(OpKind::Silu, {&x}, result, [=] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const double v = xi->data[i];
        const double s = sigmoid_scalar(v);
        xi->grad[i] += oi->grad[i] * s * (1.0 + v * (1.0 - s));
      }
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xd[i]);
  Tensor result = make_result(x.shape(), std::move(out));
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(OpKind::Sigmoid, {&x}, result, [=] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const double s = oi->data[i];
        xi->grad[i] += oi->grad[i] * s * (1.0 - s);
      }
    });
  }
  return result;
}

BatchNormStats BatchNormStats::make(std::size_t channels) {
  BatchNormStats s;
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0);
  return s;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, bool training) {
  constexpr OpKind kind = OpKind::BatchNorm;
  expect_rank(kind, x, 4, "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const Tensor* per_channel[] = {&gamma, &beta, &stats.running_mean, &stats.running_var};
  for (const Tensor* p : per_channel) {
    if (!p->defined() || p->rank() != 1 || p->dim(0) != C) {
      shape_fail(kind, "per-channel parameter must have shape (" + std::to_string(C) +
                           "), input " + shape_str(x.shape()));
    }
  }
  const std::size_t m = N * HW;
  if (training && m < 2) {
    shape_fail(kind, "training mode needs more than one value per channel, input " +
                         shape_str(x.shape()));
  }
  auto xd = x.data();
  std::vector<double> mu(C), invstd(C);
  if (training) {
    auto rm = stats.running_mean.data();
    auto rv = stats.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) s += xd[(n * C + c) * HW + i];
      const double mean_c = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = xd[(n * C + c) * HW + i] - mean_c;
          v += d * d;
        }
      const double var_c = v / static_cast<double>(m);
      mu[c] = mean_c;
      invstd[c] = 1.0 / std::sqrt(var_c + stats.eps);
      const double unbiased = v / static_cast<double>(m - 1);
      rm[c] = stats.momentum * rm[c] + (1.0 - stats.momentum) * mean_c;
      rv[c] = stats.momentum * rv[c] + (1.0 - stats.momentum) * unbiased;
    }
  } else {
    auto rm = stats.running_mean.data();
    auto rv = stats.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(rv[c] + stats.eps);
    }
  }
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double a = gd[c] * invstd[c];
      const double b = bd[c] - mu[c] * a;
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) out[base + i] = xd[base + i] * a + b;
    }
  Tensor result = make_result(x.shape(), std::move(out));

  if (wants_tape({&x, &gamma, &beta})) {
    TensorImpl* xi = x.impl();
    TensorImpl* gi = gamma.impl();
    TensorImpl* bi = beta.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x, &gamma, &beta}, result, [=] {
      const double md = static_cast<double>(m);
      for (std::size_t c = 0; c < C; ++c) {
        double dsum = 0.0, dxhat_sum = 0.0;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < HW; ++i) {
            const std::size_t idx = (n * C + c) * HW + i;
            const double xhat = (xi->data[idx] - mu[c]) * invstd[c];
            dsum += oi->grad[idx];
            dxhat_sum += oi->grad[idx] * xhat;
          }
        if (gi->requires_grad) gi->grad[c] += dxhat_sum;
        if (bi->requires_grad) bi->grad[c] += dsum;
        if (!xi->requires_grad) continue;
        const double g = gi->data[c];
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < HW; ++i) {
            const std::size_t idx = (n * C + c) * HW + i;
            if (training) {
              const double xhat = (xi->data[idx] - mu[c]) * invstd[c];
              xi->grad[idx] += g * invstd[c] / md * (md * oi->grad[idx] - dsum - xhat * dxhat_sum);
            } else {
              xi->grad[idx] += oi->grad[idx] * g * invstd[c];
            }
          }
      }
    });
  }
  return result;
}

Tensor global_avg_pool(const Tensor& x) {
  constexpr OpKind kind = OpKind::GlobalAvgPool;
  expect_rank(kind, x, 4, "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) shape_fail(kind, "empty spatial extent " + shape_str(x.shape()));
  std::vector<double> out(N * C);
  auto xd = x.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += xd[nc * HW + i];
    out[nc] = s / static_cast<double>(HW);
  }
  Tensor result = make_result({N, C}, std::move(out));
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x}, result, [=] {
      const double inv = 1.0 / static_cast<double>(HW);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double g = oi->grad[nc] * inv;
        for (std::size_t i = 0; i < HW; ++i) xi->grad[nc * HW + i] += g;
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_fail(OpKind::Reshape, "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor result = make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(OpKind::Reshape, {&x}, result, [=] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = make_result({}, {s});
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(OpKind::Sum, {&x}, result, [=] {
      const double g = oi->grad[0];
      for (auto& v : xi->grad) v += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) shape_fail(OpKind::Mean, "empty input");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  Tensor result = make_result({}, {s / n});
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(OpKind::Mean, {&x}, result, [=] {
      const double g = oi->grad[0] / n;
      for (auto& v : xi->grad) v += g;
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& z) {
  constexpr OpKind kind = OpKind::LogSoftmax;
  expect_rank(kind, z, 2, "logits");
  const std::size_t N = z.dim(0), C = z.dim(1);
  if (C == 0) shape_fail(kind, "no classes in " + shape_str(z.shape()));
  auto zd = z.data();
  std::vector<double> out(N * C);
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = zd.data() + n * C;
    const double mx = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = row[c] - lse;
  }
  Tensor result = make_result(z.shape(), std::move(out));
  if (wants_tape({&z})) {
    TensorImpl* zi = z.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&z}, result, [=] {
      for (std::size_t n = 0; n < N; ++n) {
        double gs = 0.0;
        for (std::size_t c = 0; c < C; ++c) gs += oi->grad[n * C + c];
        for (std::size_t c = 0; c < C; ++c) {
          const double p = std::exp(oi->data[n * C + c]);
          zi->grad[n * C + c] += oi->grad[n * C + c] - p * gs;
        }
      }
    });
  }
  return result;
}

Tensor pick(const Tensor& x, std::span<const std::size_t> labels) {
  constexpr OpKind kind = OpKind::Pick;
  expect_rank(kind, x, 2, "input");
  const std::size_t N = x.dim(0), C = x.dim(1);
  if (labels.size() != N) {
    shape_fail(kind, std::to_string(labels.size()) + " labels for input " + shape_str(x.shape()));
  }
  std::vector<std::size_t> idx(labels.begin(), labels.end());
  std::vector<double> out(N);
  auto xd = x.data();
  for (std::size_t n = 0; n < N; ++n) {
    if (idx[n] >= C) {
      shape_fail(kind, "label " + std::to_string(idx[n]) + " out of range for " +
                           std::to_string(C) + " classes");
    }
    out[n] = xd[n * C + idx[n]];
  }
  Tensor result = make_result({N}, std::move(out));
  if (wants_tape({&x})) {
    TensorImpl* xi = x.impl();
    TensorImpl* oi = result.impl();
    record(kind, {&x}, result, [=] {
      for (std::size_t n = 0; n < N; ++n) xi->grad[n * C + idx[n]] += oi->grad[n];
    });
  }
  return result;
}

}  // namespace chexopt::ops
