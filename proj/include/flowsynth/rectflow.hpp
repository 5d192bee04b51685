#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowsynth/adapters.hpp"
#include "flowsynth/checkpoint.hpp"
#include "flowsynth/rng.hpp"
#include "flowsynth/synthdata.hpp"
#include "flowsynth/velocitynet.hpp"

namespace flowsynth::flow {

struct FlowConfig {
  double lambda_f = 1.0;
  double lambda_a = 1.0;
  diff::AdamConfig adam{};
  std::size_t epochs = 300;
  std::size_t distill_start_epoch = 250;
  std::size_t teacher_steps = 50;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

// One training subject: tensors are [1, nz, ny, nx]; absent targets are undefined.
struct ConditionedSample {
  Dims dims;
  double severity = 0.0;
  diff::Tensor source;
  diff::Tensor target_f;
  diff::Tensor target_a;
  ConditionContext ctx_f;
  ConditionContext ctx_a;

  bool has(Modality m) const { return (m == Modality::f ? target_f : target_a).defined(); }
  const diff::Tensor& target(Modality m) const { return m == Modality::f ? target_f : target_a; }
  const ConditionContext& context(Modality m) const { return m == Modality::f ? ctx_f : ctx_a; }
};

// Frozen conditioning: text embeddings through the aligned adapters, plus the
// provider's demographic token for a subject's severity.
struct ContextFactory {
  const adapters::EmbeddingProvider* provider = nullptr;
  adapters::AffineAdapter adapter_f;
  adapters::AffineAdapter adapter_a;

  ConditionContext make(Modality m, double severity) const;
  ConditionedSample condition(const synth::SamplePair& pair) const;
};

Volume3D interpolate(const Volume3D& x0, const Volume3D& x1, double t);

struct LossBreakdown {
  double total = 0.0;
  double f = 0.0;  // lambda-weighted tracer components; total = f + a
  double a = 0.0;
};

// Batch mean over samples of sum_m lambda_m * delta_m * mean((y_m - x0) - V_m(x_t, c_m, t))^2
// with x_t = t y_m + (1 - t) x0. ts[i] is the time of batch[i]. With
// `with_grad`, every parameter's gradient is overwritten by the batch-mean
// gradient; per-sample gradients are computed independently and summed in
// batch order, so the result does not depend on the thread count.
LossBreakdown flow_loss(const net::VelocityNet& net, diff::ParamStore& params,
                        std::span<const ConditionedSample* const> batch, std::span<const double> ts,
                        const FlowConfig& cfg, bool with_grad);
// Draws one t ~ U(0, 1) per sample, in batch order, shared by both tracers.
LossBreakdown flow_loss(const net::VelocityNet& net, diff::ParamStore& params,
                        std::span<const ConditionedSample* const> batch, SplitMix64& rng, const FlowConfig& cfg,
                        bool with_grad);

// Explicit Euler: x <- x + V(x, c, k/n) / n for k = 0..n-1, head chosen by ctx.modality.
diff::Tensor sample_euler(const net::VelocityNet& net, const diff::ParamStore& params, const diff::Tensor& x0,
                          const ConditionContext& ctx, std::size_t n_steps);
diff::Tensor sample_onestep(const net::VelocityNet& net, const diff::ParamStore& params, const diff::Tensor& x0,
                            const ConditionContext& ctx);
Volume3D sample_euler(const net::VelocityNet& net, const diff::ParamStore& params, const Volume3D& x0,
                      const ConditionContext& ctx, std::size_t n_steps);

// Teacher endpoints for both tracers of one sample.
struct DistillTarget {
  diff::Tensor f;
  diff::Tensor a;
};

// Batch mean over samples of sum over both heads of mean((x0 + V_m(x0, c_m, 0)) - T_m)^2.
LossBreakdown distill_loss(const net::VelocityNet& net, diff::ParamStore& params,
                           std::span<const ConditionedSample* const> batch,
                           std::span<const DistillTarget* const> targets, bool with_grad);

enum class Phase { flow, distill };
std::string to_string(Phase p);

struct HistoryRow {
  std::size_t epoch = 0;
  double total = 0.0;
  double f = 0.0;
  double a = 0.0;
  Phase phase = Phase::flow;
  bool operator==(const HistoryRow&) const = default;
};

struct TrainState {
  diff::ParamStore params;
  std::optional<diff::ParamStore> teacher;  // frozen at distill_start_epoch
  diff::Adam adam;
  std::size_t epoch = 0;  // completed epochs
  std::vector<HistoryRow> history;

  // Phase of the next epoch to run.
  Phase phase(const FlowConfig& cfg) const { return epoch >= cfg.distill_start_epoch ? Phase::distill : Phase::flow; }
};

class Trainer {
 public:
  Trainer(const net::VelocityNet& net, FlowConfig cfg, std::vector<ConditionedSample> dataset);

  TrainState init(std::uint64_t param_seed) const;
  // Runs one epoch (flow or distill by state.epoch) and appends a history row.
  // The row is an evaluation loss at fixed per-sample times, so it does not
  // move unless the parameters do.
  void run_epoch(TrainState& state);
  void run_until(TrainState& state, std::size_t epoch);

  const FlowConfig& config() const { return cfg_; }
  const std::vector<ConditionedSample>& dataset() const { return data_; }
  // Teacher endpoints for every sample; computed on first use after the teacher is frozen.
  const std::vector<DistillTarget>& distill_targets(const TrainState& state);

 private:
  HistoryRow evaluate(TrainState& state, Phase phase);

  const net::VelocityNet& net_;
  FlowConfig cfg_;
  std::vector<ConditionedSample> data_;
  std::vector<double> eval_ts_;
  std::vector<DistillTarget> targets_;
};

// Mean over samples and available tracers of mse(sample_euler(x0, c_m, n), y_m).
double sampling_mse(const net::VelocityNet& net, const diff::ParamStore& params,
                    const std::vector<ConditionedSample>& data, std::size_t n_steps);

// ---- checkpoints -------------------------------------------------------
void put_net_config(Checkpoint& ck, const net::NetConfig& cfg);
net::NetConfig get_net_config(const Checkpoint& ck);
void put_state(Checkpoint& ck, const TrainState& state);
TrainState get_state(const Checkpoint& ck);

struct AlignedAdapters {
  std::uint64_t provider_seed = 0;
  std::size_t dim = 0;
  adapters::AffineAdapter f;
  adapters::AffineAdapter a;
};
void put_adapters(Checkpoint& ck, const AlignedAdapters& a);
AlignedAdapters get_adapters(const Checkpoint& ck);

}  // namespace flowsynth::flow
