#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowsynth/modality.hpp"
#include "flowsynth/tensor.hpp"

namespace flowsynth {

using Embedding = std::vector<double>;

// Two frozen tokens, [2, dim]: row 0 the modality guidance vector, row 1 the
// subject (demographic) vector. The tensor never requires gradients.
struct ConditionContext {
  Modality modality = Modality::f;
  diff::Tensor tokens;

  std::size_t dim() const { return tokens.dim(1); }
};

namespace adapters {

// Throws ZeroVector when either argument has zero norm.
double cosine_sim(std::span<const double> u, std::span<const double> v);

struct AffineAdapter {
  double scale = 1.0;
  Embedding bias;

  static AffineAdapter identity(std::size_t dim) { return {1.0, Embedding(dim, 0.0)}; }
  Embedding apply(std::span<const double> c) const;
};

struct AlignOptions {
  double tau = 0.5;
  double mu = 10.0;
  std::size_t steps = 500;
  double lr = 0.05;
};

struct AlignResult {
  AffineAdapter f;
  AffineAdapter a;
  // Loss before the first step, then after every step (steps + 1 values).
  std::vector<double> history;
  double term_f = 0.0;  // 1 - sim(Adapt_f(c_f), mean_f)
  double term_a = 0.0;
  double cross_sim = 0.0;  // sim(Adapt_f(c_f), Adapt_a(c_a))
  double constraint_residual = 0.0;  // max(0, tau - cross_sim)
  // Set when the residual exceeds 1e-3 at the returned point. Not fatal.
  bool constraint_warning = false;
};

// Gradient descent from identity adapters on
//   (1 - sim(Adapt_f(c_f), mean_f)) + (1 - sim(Adapt_a(c_a), mean_a))
//     + mu * max(0, tau - sim(Adapt_f(c_f), Adapt_a(c_a)))^2
// Each step starts at lr and is halved while it would raise the loss.
AlignResult align_adapters(const Embedding& c_f, const Embedding& c_a, const Embedding& mean_f,
                           const Embedding& mean_a, const AlignOptions& opts = {});

// One alignment term on its own; the mu = 0 joint problem splits into two of these.
AffineAdapter align_single(const Embedding& c, const Embedding& mean, std::size_t steps, double lr,
                           std::vector<double>* history = nullptr);

ConditionContext build_context(Modality m, const AffineAdapter& adapter, const Embedding& c_m,
                               const Embedding& c_demo);

struct Demographics {
  double age = 70.0;
  int sex = 0;  // 0 or 1
};

// Stand-in for a frozen text/image encoder.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  virtual Embedding text(Modality m) const = 0;
  virtual Embedding demographic(double severity, const Demographics& d) const = 0;
  virtual Embedding image_mean(Modality m) const = 0;
};

// Seeded random basis. c_demo = b0 + cos(pi s) b1 + sin(pi s) b2 plus small age
// and sex terms, so severity is recoverable from the context.
class SyntheticEmbeddingProvider final : public EmbeddingProvider {
 public:
  SyntheticEmbeddingProvider(std::uint64_t seed, std::size_t dim);

  std::size_t dim() const override { return dim_; }
  Embedding text(Modality m) const override;
  Embedding demographic(double severity, const Demographics& d) const override;
  Embedding image_mean(Modality m) const override;

 private:
  std::size_t dim_;
  std::vector<Embedding> basis_;  // b0..b4 for demographics
  Embedding text_[2];
  Embedding mean_[2];
};

}  // namespace adapters
}  // namespace flowsynth
