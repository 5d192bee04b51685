#include "flowsynth/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "flowsynth/error.hpp"
#include "flowsynth/params.hpp"
#include "flowsynth/rng.hpp"

namespace flowsynth {

namespace adapters {

namespace {

using diff::Tensor;

constexpr int kMaxHalvings = 30;
// Increases at rounding level do not trigger a halving.
constexpr double kSlack = 1e-12;

void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(Errc::dim_mismatch,
                std::string(what) + ": embedding dims " + std::to_string(a) + " and " + std::to_string(b));
  }
}

void require_nonzero(const Embedding& v, const char* what) {
  for (double x : v) {
    if (x != 0.0) return;
  }
  throw Error(Errc::zero_vector, std::string(what) + " has zero norm");
}

Tensor sim(const Tensor& u, const Tensor& v) {
  const auto dot = diff::sum(diff::mul(u, v));
  const auto nu = diff::sum(diff::mul(u, u));
  const auto nv = diff::sum(diff::mul(v, v));
  return diff::mul(dot, diff::pow(diff::mul(nu, nv), -0.5));
}

Tensor adapt(diff::ParamStore& ps, const std::string& prefix, const Tensor& c) {
  return diff::add(diff::mul(ps.get(prefix + ".scale"), c), ps.get(prefix + ".bias"));
}

void add_identity(diff::ParamStore& ps, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".scale", {1}, {1.0});
  ps.add_zeros(prefix + ".bias", {dim});
}

AffineAdapter extract(const diff::ParamStore& ps, const std::string& prefix) {
  const auto& b = ps.get(prefix + ".bias").data();
  return {ps.get(prefix + ".scale").item(), Embedding(b.begin(), b.end())};
}

Embedding unit_normal(SplitMix64& rng, std::size_t dim) {
  Embedding v(dim);
  double n = 0.0;
  for (double& x : v) {
    x = rng.normal();
    n += x * x;
  }
  for (double& x : v) x /= std::sqrt(n);
  return v;
}


// Gradient step of size lr, halved until the loss does not increase by more than kSlack.
// Returns the loss at the new point.
double descend(diff::ParamStore& ps, double lr, double loss, const std::function<double(bool)>& evaluate) {
  std::vector<std::vector<double>> saved;
  for (const auto& [name, t] : ps) saved.emplace_back(t.data().begin(), t.data().end());
  double step = lr;
  for (int halving = 0;; ++halving) {
    diff::sgd_step(ps, step);
    const double next = evaluate(false);
    if (next <= loss + kSlack || halving == kMaxHalvings) return next;
    std::size_t i = 0;
    for (auto& [name, t] : ps) {
      std::copy(saved[i].begin(), saved[i].end(), t.mutable_data().begin());
      ++i;
    }
    step *= 0.5;
  }
}

}  // namespace

double cosine_sim(std::span<const double> u, std::span<const double> v) {
  require_same_dim(u.size(), v.size(), "cosine_sim");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw Error(Errc::zero_vector, "cosine_sim of a zero vector");
  return std::clamp(dot / std::sqrt(nu * nv), -1.0, 1.0);
}

Embedding AffineAdapter::apply(std::span<const double> c) const {
  require_same_dim(c.size(), bias.size(), "adapter");
  Embedding out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = scale * c[i] + bias[i];
  return out;
}

AlignResult align_adapters(const Embedding& c_f, const Embedding& c_a, const Embedding& mean_f,
                           const Embedding& mean_a, const AlignOptions& opts) {
  const std::size_t dim = c_f.size();
  require_same_dim(dim, c_a.size(), "align_adapters");
  require_same_dim(dim, mean_f.size(), "align_adapters");
  require_same_dim(dim, mean_a.size(), "align_adapters");
  require_nonzero(c_f, "c_f");
  require_nonzero(c_a, "c_a");
  require_nonzero(mean_f, "mean_f");
  require_nonzero(mean_a, "mean_a");
  if (!(opts.tau >= 0.0 && opts.tau <= 1.0)) throw Error(Errc::bad_argument, "tau must lie in [0, 1]");
  if (!(opts.mu >= 0.0)) throw Error(Errc::bad_argument, "mu must be >= 0");

  diff::ParamStore ps;
  add_identity(ps, "f", dim);
  add_identity(ps, "a", dim);
  const auto cf = Tensor::from({dim}, c_f), ca = Tensor::from({dim}, c_a);
  const auto mf = Tensor::from({dim}, mean_f), ma = Tensor::from({dim}, mean_a);

  struct Terms {
    double loss, term_f, term_a, cross;
  };
  auto evaluate = [&](bool with_grad) {
    diff::Tape tape;
    diff::TapeScope scope(tape);
    const auto uf = adapt(ps, "f", cf);
    const auto ua = adapt(ps, "a", ca);
    const auto tf = diff::add_scalar(diff::scale(sim(uf, mf), -1.0), 1.0);
    const auto ta = diff::add_scalar(diff::scale(sim(ua, ma), -1.0), 1.0);
    auto loss = diff::add(tf, ta);
    const auto cross = sim(uf, ua);
    if (opts.mu > 0.0) {
      const auto gap = diff::relu(diff::add_scalar(diff::scale(cross, -1.0), opts.tau));
      loss = diff::add(loss, diff::scale(diff::mul(gap, gap), opts.mu));
    }
    if (with_grad) {
      ps.zero_grad();
      tape.backward(loss);
    }
    return Terms{loss.item(), tf.item(), ta.item(), cross.item()};
  };

  AlignResult out;
  out.history.reserve(opts.steps + 1);
  double loss = evaluate(true).loss;
  for (std::size_t step = 0; step < opts.steps; ++step) {
    out.history.push_back(loss);
    descend(ps, opts.lr, loss, [&](bool g) { return evaluate(g).loss; });
    loss = evaluate(true).loss;
  }
  const Terms last = evaluate(false);
  out.history.push_back(last.loss);
  out.f = extract(ps, "f");
  out.a = extract(ps, "a");
  out.term_f = last.term_f;
  out.term_a = last.term_a;
  out.cross_sim = last.cross;
  out.constraint_residual = std::max(0.0, opts.tau - last.cross);
  out.constraint_warning = out.constraint_residual > 1e-3;
  return out;
}

AffineAdapter align_single(const Embedding& c, const Embedding& mean, std::size_t steps, double lr,
                           std::vector<double>* history) {
  require_same_dim(c.size(), mean.size(), "align_single");
  require_nonzero(c, "c");
  require_nonzero(mean, "mean");
  diff::ParamStore ps;
  add_identity(ps, "m", c.size());
  const auto ct = Tensor::from({c.size()}, c), mt = Tensor::from({c.size()}, mean);
  auto evaluate = [&](bool with_grad) {
    diff::Tape tape;
    diff::TapeScope scope(tape);
    const auto term = diff::add_scalar(diff::scale(sim(adapt(ps, "m", ct), mt), -1.0), 1.0);
    if (with_grad) {
      ps.zero_grad();
      tape.backward(term);
    }
    return term.item();
  };
  for (std::size_t step = 0; step < steps; ++step) {
    const double l = evaluate(true);
    if (history) history->push_back(l);
    descend(ps, lr, l, evaluate);
  }
  if (history) history->push_back(evaluate(false));
  return extract(ps, "m");
}

ConditionContext build_context(Modality m, const AffineAdapter& adapter, const Embedding& c_m,
                               const Embedding& c_demo) {
  require_same_dim(c_m.size(), c_demo.size(), "build_context");
  auto row0 = adapter.apply(c_m);
  row0.insert(row0.end(), c_demo.begin(), c_demo.end());
  return {m, Tensor::from({2, c_m.size()}, std::move(row0))};
}

SyntheticEmbeddingProvider::SyntheticEmbeddingProvider(std::uint64_t seed, std::size_t dim) : dim_(dim) {
  if (dim < 2) throw Error(Errc::bad_argument, "embedding dim must be >= 2");
  SplitMix64 rng(seed);
  for (int i = 0; i < 5; ++i) basis_.push_back(unit_normal(rng, dim));
  for (int m = 0; m < 2; ++m) {
    text_[m] = unit_normal(rng, dim);
    const auto noise = unit_normal(rng, dim);
    mean_[m] = Embedding(dim);
    for (std::size_t i = 0; i < dim; ++i) mean_[m][i] = text_[m][i] + noise[i];
  }
}

Embedding SyntheticEmbeddingProvider::text(Modality m) const { return text_[static_cast<int>(m)]; }

Embedding SyntheticEmbeddingProvider::image_mean(Modality m) const { return mean_[static_cast<int>(m)]; }

Embedding SyntheticEmbeddingProvider::demographic(double severity, const Demographics& d) const {
  const double c = std::cos(std::numbers::pi * severity);
  const double s = std::sin(std::numbers::pi * severity);
  const double age = 0.1 * (d.age - 70.0) / 10.0;
  const double sex = 0.1 * d.sex;
  Embedding out(dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    out[i] = basis_[0][i] + c * basis_[1][i] + s * basis_[2][i] + age * basis_[3][i] + sex * basis_[4][i];
  }
  return out;
}

}  // namespace adapters
}  // namespace flowsynth
