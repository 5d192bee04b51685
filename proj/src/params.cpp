#include "flowsynth/params.hpp"

#include <algorithm>
#include <cmath>

#include "flowsynth/error.hpp"
#include "flowsynth/rng.hpp"

namespace flowsynth::diff {

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Tensor& ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (contains(name)) throw Error(Errc::bad_argument, "duplicate parameter " + name);
  for (double& v : values) v = round_f32(v);
  index_[name] = entries_.size();
  entries_.emplace_back(name, Tensor::from(std::move(shape), std::move(values), true));
  return entries_.back().second;
}

Tensor& ParamStore::add_zeros(const std::string& name, Shape shape) {
  const std::size_t n = shape_size(shape);
  return add(name, std::move(shape), std::vector<double>(n, 0.0));
}

bool ParamStore::contains(const std::string& name) const { return index_.contains(name); }

const Tensor& ParamStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error(Errc::bad_argument, "unknown parameter " + name);
  return entries_[it->second].second;
}

Tensor& ParamStore::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) {
    out.index_[name] = out.entries_.size();
    out.entries_.emplace_back(name, Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, true));
  }
  return out;
}

void ParamStore::round_to_f32() {
  for (auto& [name, t] : entries_) {
    for (double& v : t.mutable_data()) v = round_f32(v);
  }
}

void Adam::reset() {
  step_ = 0;
  m_.clear();
  v_.clear();
}

void Adam::step(ParamStore& params) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw Error(Errc::missing_grad, "parameter " + name + " has no gradient");
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (auto& [name, t] : params) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(t.size(), 0.0);
      v.assign(t.size(), 0.0);
    }
    auto p = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = round_f32(config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i]);
      v[i] = round_f32(config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] = round_f32(p[i] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

void sgd_step(ParamStore& params, double lr) {
  for (auto& [name, t] : params) {
    if (!t.has_grad()) throw Error(Errc::missing_grad, "parameter " + name + " has no gradient");
    auto p = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
}

GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor> inputs, const GradCheckOptions& opts,
                           const std::vector<std::string>& names) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw Error(Errc::bad_argument, "grad_check inputs must require grad");
    t.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = f(inputs);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.push_back(t.grad_or_zero());

  auto eval = [&] {
    NoGradScope nograd;
    return f(inputs).item();
  };

  GradCheckReport report;
  SplitMix64 rng(opts.seed);
  for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
    auto values = inputs[idx].mutable_data();
    std::vector<std::size_t> comps;
    if (opts.max_components == 0 || opts.max_components >= values.size()) {
      comps.resize(values.size());
      for (std::size_t i = 0; i < comps.size(); ++i) comps[i] = i;
    } else {
      for (std::size_t i = 0; i < opts.max_components; ++i) comps.push_back(rng.below(values.size()));
    }
    for (std::size_t c : comps) {
      const double orig = values[c];
      values[c] = orig + opts.eps;
      const double fp = eval();
      values[c] = orig - opts.eps;
      const double fm = eval();
      values[c] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double a = analytic[idx][c];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opts.floor});
      ++report.checked;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        const std::string label = idx < names.size() ? names[idx] : "input" + std::to_string(idx);
        report.worst = label + "[" + std::to_string(c) + "] analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  report.passed = report.max_rel_error <= opts.tol;
  return report;
}

}  // namespace flowsynth::diff
