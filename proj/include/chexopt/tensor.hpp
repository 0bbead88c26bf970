#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace chexopt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until allocated; same length as data after
  bool requires_grad = false;
  bool leaf = true;
  bool nonfinite = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Shared handle over a dense row-major double buffer. Copies alias the same
// storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }

  bool requires_grad() const { return impl_->requires_grad; }
  // Marks a leaf as trainable and allocates its zeroed gradient buffer.
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  // True when the op that produced this tensor saw a NaN or infinity in its
  // output.
  bool nonfinite() const { return impl_->nonfinite; }
  bool all_finite() const;

  Tensor clone() const;  // deep copy, detached, keeps requires_grad
  Tensor detach() const; // deep copy without gradient tracking

  // Overwrites values in place (parameter loading, optimizer updates).
  void assign(std::span<const double> values);

  detail::TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& shared() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(Shape shape, std::vector<double> data);
};

// Builds an op output (non-leaf) and sets its non-finite flag.
Tensor make_result(Shape shape, std::vector<double> data);

// ---------------------------------------------------------------------------
// Reverse-mode tape

struct TapeNode {
  std::string_view kind;
  std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
  std::shared_ptr<detail::TensorImpl> output;
  std::function<void()> backward;
};

// Append-only record of the ops executed since the last backward on the
// calling thread. One tape per thread; tapes never share tensors.
class Tape {
 public:
  static Tape& current();

  void record(TapeNode node);
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  void clear();

  const std::vector<TapeNode>& nodes() const { return nodes_; }

 private:
  std::vector<TapeNode> nodes_;
};

// Populates d(loss)/d(t) for every requires_grad tensor reachable from loss,
// then clears the tape. Leaf gradients accumulate across calls until
// zero_grad().
void backward(const Tensor& loss);

bool grad_enabled();

// Disables tape recording for its lifetime (evaluation, finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Compute precision for the GEMM-backed kernels (conv, matmul). Storage is
// always double; F32 rounds operands to float inside the kernels.

enum class ComputePrecision { F64, F32 };

ComputePrecision compute_precision();
void set_compute_precision(ComputePrecision p);

class PrecisionGuard {
 public:
  explicit PrecisionGuard(ComputePrecision p);
  ~PrecisionGuard();
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  ComputePrecision prev_;
};

// Rounds to the nearest IEEE binary16 value (ties to even); magnitudes past
// the half range become +-inf. Used to emulate half-precision gradients.
double round_to_half(double x);

}  // namespace chexopt
