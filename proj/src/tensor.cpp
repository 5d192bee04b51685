#include "flowsynth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>

#include "flowsynth/error.hpp"
#include "flowsynth/kernels.hpp"

namespace flowsynth::diff {

namespace k = flowsynth::kernels;

namespace {

thread_local Tape* g_active_tape = nullptr;

std::vector<double>& ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw Error(Errc::non_finite, std::string(op) + " produced a non-finite value");
  }
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw Error(Errc::shape_mismatch, std::string(op) + ": " + shape_string(a) + " vs " + shape_string(b));
}

// Returns the active tape when `out` must be recorded, and marks `out` as a
// non-leaf that requires grad in that case.
Tape* track(Tensor& out, std::initializer_list<const Tensor*> inputs) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return nullptr;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor* t) { return t->defined() && t->requires_grad(); });
  if (!any) return nullptr;
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
  return tape;
}

bool wants(const std::shared_ptr<TensorImpl>& t) { return t && t->requires_grad; }

Tensor finish(Tensor out, const char* op) {
  check_finite(out, op);
  return out;
}

enum class Bcast { same, scalar_a, scalar_b };

Bcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.size() == 1) return Bcast::scalar_b;
  if (a.size() == 1) return Bcast::scalar_a;
  shape_error(op, a.shape(), b.shape());
}

// (outer, n, inner) view of a tensor around `axis`.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty() || std::find(shape.begin(), shape.end(), 0u) != shape.end()) {
    throw Error(Errc::shape_mismatch, "tensor shape must be non-empty and positive, got " + shape_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw Error(Errc::shape_mismatch, "shape " + shape_string(shape) + " holds " +
                                          std::to_string(shape_size(shape)) + " values, got " +
                                          std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw Error(Errc::shape_mismatch, "item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::mutable_grad() { return ensure_grad(*impl_); }

std::vector<double> Tensor::grad_or_zero() const {
  if (impl_->grad.empty()) return std::vector<double>(size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

// ---- Tape ----------------------------------------------------------------

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
                  BackwardFn backward) {
  nodes_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw Error(Errc::not_scalar_loss, "loss has shape " + shape_string(loss.shape()));
  }
  if (nodes_.empty()) throw Error(Errc::empty_tape, "backward() on an empty tape");
  for (auto& node : nodes_) node.output->grad.clear();
  for (auto& node : nodes_) {
    for (auto& in : node.inputs) {
      if (in && in->requires_grad && in->is_leaf) ensure_grad(*in);
    }
  }
  ensure_grad(*loss.impl())[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

// ---- elementwise ---------------------------------------------------------

namespace {

// Shared implementation of add/sub/mul with scalar broadcasting.
enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Bcast kind = broadcast_kind(name, a, b);
  const Shape& shape = kind == Bcast::scalar_a ? b.shape() : a.shape();
  const std::size_t n = shape_size(shape);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = kind == Bcast::scalar_a ? ad[0] : ad[i];
    const double x1 = kind == Bcast::scalar_b ? bd[0] : bd[i];
    y[i] = op == BinOp::add ? x0 + x1 : op == BinOp::sub ? x0 - x1 : x0 * x1;
  }
  Tensor out = Tensor::from(shape, std::move(y));
  if (Tape* tape = track(out, {&a, &b})) {
    auto ai = a.shared();
    auto bi = b.shared();
    auto oi = out.shared();
    tape->record({ai, bi}, oi, [ai, bi, oi, kind, op, n] {
      const auto& g = oi->grad;
      if (wants(ai)) {
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < n; ++i) {
          double d = g[i];
          if (op == BinOp::mul) d *= kind == Bcast::scalar_b ? bi->data[0] : bi->data[i];
          ga[kind == Bcast::scalar_a ? 0 : i] += d;
        }
      }
      if (wants(bi)) {
        auto& gb = ensure_grad(*bi);
        for (std::size_t i = 0; i < n; ++i) {
          double d = op == BinOp::sub ? -g[i] : g[i];
          if (op == BinOp::mul) d *= kind == Bcast::scalar_a ? ai->data[0] : ai->data[i];
          gb[kind == Bcast::scalar_b ? 0 : i] += d;
        }
      }
    });
  }
  return finish(std::move(out), name);
}

// Unary map y = f(x) with dy/dx computed from (x, y).
template <class F, class D>
Tensor unary(const Tensor& a, const char* name, F f, D dfdx) {
  std::vector<double> y(a.size());
  const auto ad = a.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(ad[i]);
  Tensor out = Tensor::from(a.shape(), std::move(y));
  if (Tape* tape = track(out, {&a})) {
    auto ai = a.shared();
    auto oi = out.shared();
    tape->record({ai}, oi, [ai, oi, dfdx] {
      auto& ga = ensure_grad(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * dfdx(ai->data[i], oi->data[i]);
    });
  }
  return finish(std::move(out), name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor pow(const Tensor& a, double p) {
  if (p != std::floor(p)) {
    for (double v : a.data()) {
      if (!(v > 0.0)) throw Error(Errc::bad_argument, "pow with non-integer exponent needs positive base");
    }
  }
  return unary(
      a, "pow", [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (Tape* tape = track(out, {&a})) {
    auto ai = a.shared();
    auto oi = out.shared();
    tape->record({ai}, oi, [ai, oi] {
      auto& ga = ensure_grad(*ai);
      for (double& g : ga) g += oi->grad[0];
    });
  }
  return finish(std::move(out), "sum");
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (Tape* tape = track(out, {&a})) {
    auto ai = a.shared();
    auto oi = out.shared();
    tape->record({ai}, oi, [ai, oi] {
      auto& ga = ensure_grad(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return out;
}

// ---- structured ops ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) shape_error("matmul (rank 2 required)", a.shape(), b.shape());
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb) shape_error("matmul", a.shape(), b.shape());
  std::vector<double> y(m * n);
  k::omp::gemm(trans_a, trans_b, m, n, ka, a.data(), b.data(), y, false);
  Tensor out = Tensor::from({m, n}, std::move(y));
  if (Tape* tape = track(out, {&a, &b})) {
    auto ai = a.shared();
    auto bi = b.shared();
    auto oi = out.shared();
    tape->record({ai, bi}, oi, [ai, bi, oi, trans_a, trans_b, m, n, ka] {
      const auto& g = oi->grad;
      if (wants(ai)) {
        auto& ga = ensure_grad(*ai);
        if (!trans_a) {
          k::omp::gemm(false, !trans_b, m, ka, n, g, bi->data, ga, true);
        } else {
          k::omp::gemm(trans_b, true, ka, m, n, bi->data, g, ga, true);
        }
      }
      if (wants(bi)) {
        auto& gb = ensure_grad(*bi);
        if (!trans_b) {
          k::omp::gemm(!trans_a, false, ka, n, m, ai->data, g, gb, true);
        } else {
          k::omp::gemm(true, trans_a, n, ka, m, g, ai->data, gb, true);
        }
      }
    });
  }
  return finish(std::move(out), "matmul");
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw Error(Errc::shape_mismatch, "softmax axis out of range for " + shape_string(a.shape()));
  const AxisView v = axis_view(a.shape(), axis);
  const auto x = a.data();
  std::vector<double> y(a.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < v.n; ++j) mx = std::max(mx, x[base + j * v.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(x[base + j * v.inner] - mx);
        y[base + j * v.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) y[base + j * v.inner] /= z;
    }
  }
  Tensor out = Tensor::from(a.shape(), std::move(y));
  if (Tape* tape = track(out, {&a})) {
    auto ai = a.shared();
    auto oi = out.shared();
    tape->record({ai}, oi, [ai, oi, v] {
      auto& ga = ensure_grad(*ai);
      const auto& g = oi->grad;
      const auto& yy = oi->data;
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const std::size_t base = o * v.n * v.inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < v.n; ++j) dot += g[base + j * v.inner] * yy[base + j * v.inner];
          for (std::size_t j = 0; j < v.n; ++j) {
            const std::size_t idx = base + j * v.inner;
            ga[idx] += yy[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return finish(std::move(out), "softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 2) throw Error(Errc::shape_mismatch, "layer_norm needs [C, ...], got " + shape_string(x.shape()));
  const std::size_t channels = x.dim(0);
  const std::size_t sites = x.size() / channels;
  if (gain.shape() != Shape{channels}) shape_error("layer_norm gain", x.shape(), gain.shape());
  if (bias.shape() != Shape{channels}) shape_error("layer_norm bias", x.shape(), bias.shape());
  std::vector<double> y(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(sites);
  k::omp::layer_norm_forward(channels, sites, x.data(), gain.data(), bias.data(), eps, y, *xhat, *rstd);
  Tensor out = Tensor::from(x.shape(), std::move(y));
  if (Tape* tape = track(out, {&x, &gain, &bias})) {
    auto xi = x.shared();
    auto gi = gain.shared();
    auto bi = bias.shared();
    auto oi = out.shared();
    tape->record({xi, gi, bi}, oi, [xi, gi, bi, oi, xhat, rstd, channels, sites] {
      std::span<double> gx;
      std::span<double> gg;
      std::span<double> gb;
      if (wants(xi)) gx = ensure_grad(*xi);
      if (wants(gi)) gg = ensure_grad(*gi);
      if (wants(bi)) gb = ensure_grad(*bi);
      k::omp::layer_norm_backward(channels, sites, oi->grad, *xhat, *rstd, gi->data, gx, gg, gb);
    });
  }
  return finish(std::move(out), "layer_norm");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw Error(Errc::shape_mismatch, "concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw Error(Errc::shape_mismatch, "concat axis out of range for " + shape_string(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) shape_error("concat", first, p.shape());
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) shape_error("concat", first, p.shape());
    }
    shape[axis] += p.dim(axis);
  }
  const AxisView out_view = axis_view(shape, axis);
  std::vector<double> y(shape_size(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisView pv = axis_view(p.shape(), axis);
    for (std::size_t o = 0; o < pv.outer; ++o) {
      std::copy_n(p.data().begin() + o * pv.n * pv.inner, pv.n * pv.inner,
                  y.begin() + (o * out_view.n + offset) * out_view.inner);
    }
    offset += pv.n;
  }
  Tensor out = Tensor::from(shape, std::move(y));
  Tape* tape = g_active_tape;
  const bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape != nullptr && any) {
    out.impl()->requires_grad = true;
    out.impl()->is_leaf = false;
    std::vector<std::shared_ptr<TensorImpl>> ins;
    for (const auto& p : parts) ins.push_back(p.shared());
    auto oi = out.shared();
    tape->record(ins, oi, [ins, oi, offsets, out_view, axis] {
      for (std::size_t idx = 0; idx < ins.size(); ++idx) {
        if (!wants(ins[idx])) continue;
        auto& g = ensure_grad(*ins[idx]);
        const AxisView pv = axis_view(ins[idx]->shape, axis);
        for (std::size_t o = 0; o < pv.outer; ++o) {
          const double* src = oi->grad.data() + (o * out_view.n + offsets[idx]) * out_view.inner;
          double* dst = g.data() + o * pv.n * pv.inner;
          for (std::size_t i = 0; i < pv.n * pv.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || length == 0 || start + length > a.dim(axis)) {
    throw Error(Errc::shape_mismatch, "slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                                          ") on axis " + std::to_string(axis) + " of " + shape_string(a.shape()));
  }
  const AxisView v = axis_view(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> y(shape_size(shape));
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(a.data().begin() + (o * v.n + start) * v.inner, length * v.inner,
                y.begin() + o * length * v.inner);
  }
  Tensor out = Tensor::from(shape, std::move(y));
  if (Tape* tape = track(out, {&a})) {
    auto ai = a.shared();
    auto oi = out.shared();
    tape->record({ai}, oi, [ai, oi, v, start, length] {
      auto& ga = ensure_grad(*ai);
      for (std::size_t o = 0; o < v.outer; ++o) {
        const double* src = oi->grad.data() + o * length * v.inner;
        double* dst = ga.data() + (o * v.n + start) * v.inner;
        for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// ---- convolutions --------------------------------------------------------

namespace {

void check_conv_args(const char* op, const Tensor& x, const Tensor& w, const Tensor& bias,
                     std::size_t w_in_axis, std::size_t w_out_axis) {
  if (x.rank() != 4 || w.rank() != 5) shape_error(op, x.shape(), w.shape());
  if (w.dim(w_in_axis) != x.dim(0)) shape_error(op, x.shape(), w.shape());
  if (w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4)) shape_error(op, x.shape(), w.shape());
  if (bias.defined() && bias.shape() != Shape{w.dim(w_out_axis)}) shape_error(op, w.shape(), bias.shape());
}

void add_bias_grad(TensorImpl& bias, const std::vector<double>& gout, std::size_t channels) {
  auto& gb = ensure_grad(bias);
  const std::size_t sites = gout.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t s = 0; s < sites; ++s) acc += gout[c * sites + s];
    gb[c] += acc;
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  check_conv_args("conv3d", x, w, bias, 1, 0);
  const auto g = k::ConvGeom::make(x.dim(0), w.dim(0), w.dim(2), stride, pad, x.dim(1), x.dim(2), x.dim(3));
  std::vector<double> y(g.out_size());
  k::omp::conv3d_forward(g, x.data(), w.data(), bias.defined() ? bias.data() : std::span<const double>{}, y);
  Tensor out = Tensor::from({g.co, g.od, g.oh, g.ow}, std::move(y));
  if (Tape* tape = track(out, {&x, &w, &bias})) {
    auto xi = x.shared();
    auto wi = w.shared();
    auto bi = bias.defined() ? bias.shared() : nullptr;
    auto oi = out.shared();
    tape->record({xi, wi, bi}, oi, [xi, wi, bi, oi, g] {
      if (wants(xi)) k::omp::conv3d_backward_input(g, oi->grad, wi->data, ensure_grad(*xi));
      if (wants(wi)) k::omp::conv3d_backward_weight(g, xi->data, oi->grad, ensure_grad(*wi), {});
      if (wants(bi)) add_bias_grad(*bi, oi->grad, g.co);
    });
  }
  return finish(std::move(out), "conv3d");
}

Tensor conv3d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                        std::size_t pad) {
  check_conv_args("conv3d_transpose", x, w, bias, 0, 1);
  const std::size_t kk = w.dim(2);
  auto extent = [&](std::size_t d) {
    const std::ptrdiff_t e = static_cast<std::ptrdiff_t>((d - 1) * stride + kk) - 2 * static_cast<std::ptrdiff_t>(pad);
    if (e <= 0) shape_error("conv3d_transpose", x.shape(), w.shape());
    return static_cast<std::size_t>(e);
  };
  const std::size_t od = extent(x.dim(1)), oh = extent(x.dim(2)), ow = extent(x.dim(3));
  const std::size_t co = w.dim(1);
  // The adjoint conv maps the (co, od, oh, ow) output back onto x's grid.
  const auto g = k::ConvGeom::make(co, x.dim(0), kk, stride, pad, od, oh, ow);
  if (g.od != x.dim(1) || g.oh != x.dim(2) || g.ow != x.dim(3)) shape_error("conv3d_transpose", x.shape(), w.shape());
  std::vector<double> y(g.in_size(), 0.0);
  k::omp::conv3d_backward_input(g, x.data(), w.data(), y);
  if (bias.defined()) {
    const std::size_t sites = od * oh * ow;
    for (std::size_t c = 0; c < co; ++c) {
      for (std::size_t s = 0; s < sites; ++s) y[c * sites + s] += bias.data()[c];
    }
  }
  Tensor out = Tensor::from({co, od, oh, ow}, std::move(y));
  if (Tape* tape = track(out, {&x, &w, &bias})) {
    auto xi = x.shared();
    auto wi = w.shared();
    auto bi = bias.defined() ? bias.shared() : nullptr;
    auto oi = out.shared();
    tape->record({xi, wi, bi}, oi, [xi, wi, bi, oi, g] {
      if (wants(xi)) {
        std::vector<double> tmp(g.out_size());
        k::omp::conv3d_forward(g, oi->grad, wi->data, {}, tmp);
        auto& gx = ensure_grad(*xi);
        for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
      }
      if (wants(wi)) k::omp::conv3d_backward_weight(g, oi->grad, xi->data, ensure_grad(*wi), {});
      if (wants(bi)) add_bias_grad(*bi, oi->grad, g.ci);
    });
  }
  return finish(std::move(out), "conv3d_transpose");
}

}  // namespace flowsynth::diff
