#include "chexopt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "chexopt/error.hpp"

namespace chexopt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on) {
    impl_->ensure_grad();
  } else {
    impl_->grad.clear();
  }
  return *this;
}

std::span<double> Tensor::grad() {
  if (!impl_->requires_grad) throw AutodiffError("grad: tensor does not require grad");
  impl_->ensure_grad();
  return impl_->grad;
}

std::span<const double> Tensor::grad() const {
  if (!impl_->requires_grad) throw AutodiffError("grad: tensor does not require grad");
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) impl_->grad.assign(impl_->data.size(), 0.0);
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor Tensor::clone() const {
  Tensor t = from(impl_->shape, impl_->data, false);
  t.impl_->requires_grad = impl_->requires_grad;
  if (impl_->requires_grad) t.impl_->ensure_grad();
  return t;
}

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data, false); }

void Tensor::assign(std::span<const double> values) {
  if (values.size() != impl_->data.size()) {
    throw ShapeError("assign: expected " + std::to_string(impl_->data.size()) +
                     " values, got " + std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), impl_->data.begin());
}

Tensor make_result(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->leaf = false;
  impl->nonfinite = !std::all_of(impl->data.begin(), impl->data.end(),
                                 [](double v) { return std::isfinite(v); });
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------

namespace {
thread_local bool g_grad_enabled = true;
thread_local ComputePrecision g_precision = ComputePrecision::F64;
}  // namespace

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

void Tape::clear() { nodes_.clear(); }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutodiffError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));
  }
  Tape& tape = Tape::current();
  if (tape.empty()) {
    throw AutodiffError(
        "backward: tape is empty (already consumed by a previous backward, or loss "
        "does not depend on any tensor requiring grad)");
  }
  auto* root = loss.impl();
  bool on_tape = false;
  for (const auto& node : tape.nodes()) {
    if (node.output.get() == root) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) {
    tape.clear();
    throw AutodiffError("backward: loss was not produced on the current tape");
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    // Nodes whose output never received a gradient are off the loss path.
    if (it->output->grad.size() != it->output->data.size()) continue;
    for (const auto& in : it->inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    it->backward();
  }
  // Intermediate gradients die with the tape; leaves keep theirs.
  for (const auto& node : nodes) {
    if (!node.output->leaf) {
      node.output->grad.clear();
      node.output->grad.shrink_to_fit();
    }
  }
  tape.clear();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

ComputePrecision compute_precision() { return g_precision; }
void set_compute_precision(ComputePrecision p) { g_precision = p; }

PrecisionGuard::PrecisionGuard(ComputePrecision p) : prev_(g_precision) { g_precision = p; }
PrecisionGuard::~PrecisionGuard() { g_precision = prev_; }

double round_to_half(double x) {
  if (!std::isfinite(x) || x == 0.0) return x;
  const double ax = std::fabs(x);
  constexpr double kMaxHalf = 65504.0;
  // Values that round past the largest finite half overflow.
  if (ax >= kMaxHalf + 16.0) return std::copysign(INFINITY, x);
  int exp = 0;
  std::frexp(ax, &exp);  // ax = m * 2^exp, m in [0.5, 1)
  // Half has 11 significant bits for normals; subnormal spacing is 2^-24.
  int quantum_exp = std::max(exp - 11, -24);
  const double quantum = std::ldexp(1.0, quantum_exp);
  const double rounded = std::nearbyint(ax / quantum) * quantum;  // ties to even
  if (rounded > kMaxHalf) return std::copysign(INFINITY, x);
  return std::copysign(rounded, x);
}

}  // namespace chexopt
