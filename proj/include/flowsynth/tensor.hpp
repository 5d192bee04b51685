#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// diffcore: a small dense tensor type with tape-based reverse-mode
// differentiation. All arithmetic is double precision.
namespace flowsynth::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_string(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  bool is_leaf = true;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access, for optimizers and finite-difference probes. Must not
  // be used on a tensor whose value is still referenced by a live tape.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();  // allocates zeros on first use
  std::vector<double> grad_or_zero() const;
  void zero_grad();

  // Same values, no gradient tracking, independent storage.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Records operations whose inputs require gradients. One tape per thread; ops
// find it through TapeScope. backward() walks the records in exact reverse
// order; intermediate gradients are reset first, leaf gradients accumulate.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
              BackwardFn backward);
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the scope's lifetime (inference, finite differences).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// ---- forward ops -------------------------------------------------------
// Elementwise binary ops take equal shapes, or a single-element operand that
// broadcasts as a scalar. Shape errors raise ShapeMismatch naming both shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
// Elementwise a^p; non-integer p requires a > 0.
Tensor pow(const Tensor& a, double p);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// [m,k] x [k,n] -> [m,n]; the flags read a stored operand as its transpose.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor softmax(const Tensor& a, std::size_t axis);
// Normalizes over axis 0 of a [C, ...] tensor at every trailing position, then
// applies per-channel gain and bias (both shape [C]).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

// x [Ci, D, H, W], w [Co, Ci, k, k, k], bias [Co] or undefined.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad);
// Adjoint of conv3d. x [Ci, D, H, W], w [Ci, Co, k, k, k], bias [Co] or undefined;
// output extent (D - 1) * stride - 2 * pad + k.
Tensor conv3d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                        std::size_t pad);

}  // namespace flowsynth::diff
