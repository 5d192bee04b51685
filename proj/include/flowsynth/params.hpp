#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flowsynth/tensor.hpp"

namespace flowsynth::diff {

// Named, ordered collection of learnable leaf tensors. Values are kept
// representable in 32-bit float so a CKPT1 round trip is exact.
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor>;

  Tensor& add(const std::string& name, Shape shape, std::vector<double> values);
  Tensor& add_zeros(const std::string& name, Shape shape);

  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();
  // Deep copy of the values; the copy has fresh (empty) gradients.
  ParamStore clone() const;
  void round_to_f32();

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

double round_f32(double v);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Updated parameters and both moment buffers are
// rounded to float after every step (fp32 master weights, fp64 arithmetic).
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Throws MissingGrad if a parameter never received a gradient buffer.
  void step(ParamStore& params);
  void reset();

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  void set_config(const AdamConfig& c) { config_ = c; }
  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }

  std::map<std::string, std::vector<double>>& first_moments() { return m_; }
  std::map<std::string, std::vector<double>>& second_moments() { return v_; }
  const std::map<std::string, std::vector<double>>& first_moments() const { return m_; }
  const std::map<std::string, std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

// Plain gradient descent p -= lr * grad. Values are not rounded.
void sgd_step(ParamStore& params, double lr);

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-4;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-7;
  // 0 checks every component; otherwise this many seeded picks per input.
  std::size_t max_components = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
  bool passed = true;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares tape gradients of scalar f at `inputs` against central finite
// differences. `inputs` must be leaf tensors with requires_grad set.
GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor> inputs, const GradCheckOptions& opts = {},
                           const std::vector<std::string>& names = {});

}  // namespace flowsynth::diff
