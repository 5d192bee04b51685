#include "flowsynth/rectflow.hpp"

#include <algorithm>
#include <numeric>

#include "flowsynth/error.hpp"
#include "parallel.hpp"

namespace flowsynth::flow {

namespace {

using diff::Tensor;

constexpr std::uint64_t kEvalStream = 0x4556414C;  // "EVAL"

Tensor mse(const Tensor& a, const Tensor& b) {
  const auto r = diff::sub(a, b);
  return diff::mean(diff::mul(r, r));
}

// Forward + backward of one sample on a private copy of the parameters.
struct SampleResult {
  double f = 0.0;
  double a = 0.0;
  std::vector<std::vector<double>> grads;  // ParamStore order; empty when no grad
};

template <typename LossFn>
LossBreakdown batch_loss(diff::ParamStore& params, std::size_t n, bool with_grad, LossFn&& loss_of) {
  if (n == 0) throw Error(Errc::empty_batch, "loss needs a non-empty batch");
  std::vector<SampleResult> results(n);
  detail::parallel_for(n, [&](std::size_t i) {
    auto& r = results[i];
    if (!with_grad) {
      diff::NoGradScope no_grad;
      const auto [lf, la] = loss_of(params, i);
      r.f = lf.defined() ? lf.item() : 0.0;
      r.a = la.defined() ? la.item() : 0.0;
      return;
    }
    auto local = params.clone();
    diff::Tape tape;
    diff::TapeScope scope(tape);
    const auto [lf, la] = loss_of(local, i);
    Tensor total;
    if (lf.defined() && la.defined()) total = diff::add(lf, la);
    else total = lf.defined() ? lf : la;
    r.f = lf.defined() ? lf.item() : 0.0;
    r.a = la.defined() ? la.item() : 0.0;
    if (total.defined()) tape.backward(total);
    for (const auto& [name, t] : local) r.grads.push_back(t.grad_or_zero());
  });

  LossBreakdown out;
  for (const auto& r : results) {
    out.f += r.f;
    out.a += r.a;
  }
  const double inv = 1.0 / static_cast<double>(n);
  out.f *= inv;
  out.a *= inv;
  out.total = out.f + out.a;
  if (with_grad) {
    std::size_t j = 0;
    for (auto& [name, t] : params) {
      auto g = t.mutable_grad();
      std::fill(g.begin(), g.end(), 0.0);
      for (const auto& r : results) {
        const auto& src = r.grads[j];
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += src[k];
      }
      for (double& v : g) v *= inv;
      ++j;
    }
  }
  return out;
}

void require_unit_t(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error(Errc::out_of_range_t, "t must lie in [0, 1]");
}

}  // namespace

void FlowConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(Errc::bad_config, msg); };
  if (!(lambda_f >= 0.0 && lambda_a >= 0.0)) bad("lambda_f and lambda_a must be >= 0");
  if (lambda_f == 0.0 && lambda_a == 0.0) bad("lambda_f and lambda_a must not both be 0");
  if (distill_start_epoch > epochs) bad("distill_start_epoch must not exceed epochs");
  if (teacher_steps == 0) bad("teacher_steps must be >= 1");
  if (batch_size == 0) bad("batch_size must be >= 1");
  if (!(adam.lr >= 0.0)) bad("lr must be >= 0");
}

ConditionContext ContextFactory::make(Modality m, double severity) const {
  if (provider == nullptr) throw Error(Errc::bad_argument, "context factory has no embedding provider");
  const auto& adapter = m == Modality::f ? adapter_f : adapter_a;
  return adapters::build_context(m, adapter, provider->text(m), provider->demographic(severity, {}));
}

ConditionedSample ContextFactory::condition(const synth::SamplePair& pair) const {
  ConditionedSample s;
  s.dims = pair.source.dims();
  s.severity = pair.severity;
  s.source = net::to_tensor(pair.source);
  if (pair.target_f) s.target_f = net::to_tensor(*pair.target_f);
  if (pair.target_a) s.target_a = net::to_tensor(*pair.target_a);
  s.ctx_f = make(Modality::f, pair.severity);
  s.ctx_a = make(Modality::a, pair.severity);
  return s;
}

Volume3D interpolate(const Volume3D& x0, const Volume3D& x1, double t) {
  if (!(x0.dims() == x1.dims())) {
    throw Error(Errc::dim_mismatch, "interpolate: " + to_string(x0.dims()) + " vs " + to_string(x1.dims()));
  }
  require_unit_t(t);
  if (t == 0.0) return x0;
  if (t == 1.0) return x1;
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t * x1.voxels()[i] + (1.0 - t) * x0.voxels()[i];
  const bool unit = x0.domain() == ValueDomain::unit_normalized && x1.domain() == ValueDomain::unit_normalized;
  return Volume3D::from_doubles(x0.dims(), out, unit ? ValueDomain::unit_normalized : ValueDomain::raw);
}

LossBreakdown flow_loss(const net::VelocityNet& net, diff::ParamStore& params,
                        std::span<const ConditionedSample* const> batch, std::span<const double> ts,
                        const FlowConfig& cfg, bool with_grad) {
  if (ts.size() != batch.size()) throw Error(Errc::bad_argument, "flow_loss needs one t per sample");
  for (double t : ts) require_unit_t(t);
  return batch_loss(params, batch.size(), with_grad, [&](const diff::ParamStore& ps, std::size_t i) {
    const auto& s = *batch[i];
    const double t = ts[i];
    std::pair<Tensor, Tensor> out;
    for (Modality m : {Modality::f, Modality::a}) {
      const double lambda = m == Modality::f ? cfg.lambda_f : cfg.lambda_a;
      if (!s.has(m) || lambda == 0.0) continue;
      const auto& y = s.target(m);
      const auto xt = diff::add(diff::scale(y, t), diff::scale(s.source, 1.0 - t));
      const auto v = net.forward_head(ps, xt, s.context(m), t);
      const auto term = diff::scale(mse(diff::sub(y, s.source), v), lambda);
      (m == Modality::f ? out.first : out.second) = term;
    }
    return out;
  });
}

LossBreakdown flow_loss(const net::VelocityNet& net, diff::ParamStore& params,
                        std::span<const ConditionedSample* const> batch, SplitMix64& rng, const FlowConfig& cfg,
                        bool with_grad) {
  std::vector<double> ts(batch.size());
  for (double& t : ts) t = rng.uniform();
  return flow_loss(net, params, batch, ts, cfg, with_grad);
}

Tensor sample_euler(const net::VelocityNet& net, const diff::ParamStore& params, const Tensor& x0,
                    const ConditionContext& ctx, std::size_t n_steps) {
  if (n_steps == 0) throw Error(Errc::bad_argument, "n_steps must be >= 1");
  diff::NoGradScope no_grad;
  const double h = 1.0 / static_cast<double>(n_steps);
  Tensor x = x0;
  for (std::size_t k = 0; k < n_steps; ++k) {
    const auto v = net.forward_head(params, x, ctx, static_cast<double>(k) * h);
    x = diff::add(x, diff::scale(v, h));
  }
  return x;
}

Tensor sample_onestep(const net::VelocityNet& net, const diff::ParamStore& params, const Tensor& x0,
                      const ConditionContext& ctx) {
  return sample_euler(net, params, x0, ctx, 1);
}

Volume3D sample_euler(const net::VelocityNet& net, const diff::ParamStore& params, const Volume3D& x0,
                      const ConditionContext& ctx, std::size_t n_steps) {
  return net::to_volume(sample_euler(net, params, net::to_tensor(x0), ctx, n_steps), x0.dims());
}

LossBreakdown distill_loss(const net::VelocityNet& net, diff::ParamStore& params,
                           std::span<const ConditionedSample* const> batch,
                           std::span<const DistillTarget* const> targets, bool with_grad) {
  if (targets.size() != batch.size()) throw Error(Errc::bad_argument, "distill_loss needs one target per sample");
  return batch_loss(params, batch.size(), with_grad, [&](const diff::ParamStore& ps, std::size_t i) {
    const auto& s = *batch[i];
    std::pair<Tensor, Tensor> out;
    for (Modality m : {Modality::f, Modality::a}) {
      const auto& target = m == Modality::f ? targets[i]->f : targets[i]->a;
      const auto v = net.forward_head(ps, s.source, s.context(m), 0.0);
      (m == Modality::f ? out.first : out.second) = mse(diff::add(s.source, v), target);
    }
    return out;
  });
}

std::string to_string(Phase p) { return p == Phase::flow ? "flow" : "distill"; }

Trainer::Trainer(const net::VelocityNet& net, FlowConfig cfg, std::vector<ConditionedSample> dataset)
    : net_(net), cfg_(cfg), data_(std::move(dataset)) {
  cfg_.validate();
  if (data_.empty()) throw Error(Errc::empty_batch, "training needs a non-empty dataset");
  for (const auto& s : data_) {
    net_.check_dims(s.dims);
    if (!s.has(Modality::f) && !s.has(Modality::a)) {
      throw Error(Errc::bad_argument, "every training sample needs at least one target");
    }
  }
  SplitMix64 rng(derive_seed(cfg_.seed, kEvalStream));
  eval_ts_.resize(data_.size());
  for (double& t : eval_ts_) t = rng.uniform();
}

TrainState Trainer::init(std::uint64_t param_seed) const {
  TrainState s;
  s.params = net_.init_params(param_seed);
  s.adam = diff::Adam(cfg_.adam);
  return s;
}

const std::vector<DistillTarget>& Trainer::distill_targets(const TrainState& state) {
  if (!state.teacher) throw Error(Errc::bad_argument, "no frozen teacher to distill from");
  if (targets_.empty()) {
    targets_.resize(data_.size());
    detail::parallel_for(data_.size(), [&](std::size_t i) {
      const auto& s = data_[i];
      targets_[i].f = sample_euler(net_, *state.teacher, s.source, s.ctx_f, cfg_.teacher_steps);
      targets_[i].a = sample_euler(net_, *state.teacher, s.source, s.ctx_a, cfg_.teacher_steps);
    });
  }
  return targets_;
}

HistoryRow Trainer::evaluate(TrainState& state, Phase phase) {
  std::vector<const ConditionedSample*> all;
  for (const auto& s : data_) all.push_back(&s);
  LossBreakdown l;
  if (phase == Phase::flow) {
    l = flow_loss(net_, state.params, all, eval_ts_, cfg_, false);
  } else {
    const auto& targets = distill_targets(state);
    std::vector<const DistillTarget*> tp;
    for (const auto& t : targets) tp.push_back(&t);
    l = distill_loss(net_, state.params, all, tp, false);
  }
  return {state.epoch, l.total, l.f, l.a, phase};
}

void Trainer::run_epoch(TrainState& state) {
  if (state.epoch >= cfg_.epochs) throw Error(Errc::bad_argument, "training already finished");
  const Phase phase = state.phase(cfg_);
  state.adam.set_config(cfg_.adam);  // not stored in checkpoints
  if (phase == Phase::distill && !state.teacher) {
    state.teacher = state.params.clone();
    state.adam.reset();
    targets_.clear();
  }
  SplitMix64 rng(derive_seed(cfg_.seed, state.epoch));
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    std::vector<const ConditionedSample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&data_[order[i]]);
    if (phase == Phase::flow) {
      flow_loss(net_, state.params, batch, rng, cfg_, true);
    } else {
      const auto& targets = distill_targets(state);
      std::vector<const DistillTarget*> tp;
      for (std::size_t i = start; i < end; ++i) tp.push_back(&targets[order[i]]);
      distill_loss(net_, state.params, batch, tp, true);
    }
    state.adam.step(state.params);
  }
  ++state.epoch;
  auto row = evaluate(state, phase);
  row.epoch = state.epoch;
  state.history.push_back(row);
}

void Trainer::run_until(TrainState& state, std::size_t epoch) {
  while (state.epoch < std::min(epoch, cfg_.epochs)) run_epoch(state);
}

double sampling_mse(const net::VelocityNet& net, const diff::ParamStore& params,
                    const std::vector<ConditionedSample>& data, std::size_t n_steps) {
  std::vector<double> per(2 * data.size(), 0.0);
  std::vector<char> used(2 * data.size(), 0);
  detail::parallel_for(2 * data.size(), [&](std::size_t j) {
    const auto& s = data[j / 2];
    const Modality m = j % 2 == 0 ? Modality::f : Modality::a;
    if (!s.has(m)) return;
    const auto x1 = sample_euler(net, params, s.source, s.context(m), n_steps);
    diff::NoGradScope no_grad;
    per[j] = mse(x1, s.target(m)).item();
    used[j] = 1;
  });
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < per.size(); ++j) {
    if (used[j]) sum += per[j], ++n;
  }
  if (n == 0) throw Error(Errc::empty_batch, "no targets to compare against");
  return sum / static_cast<double>(n);
}

// ---- checkpoints -------------------------------------------------------

namespace {

std::vector<std::string> block_names(std::size_t levels) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l + 1 < levels; ++l) out.push_back("enc" + std::to_string(l));
  out.push_back("mid");
  for (std::size_t l = 0; l + 1 < levels; ++l) out.push_back("dec" + std::to_string(l));
  return out;
}

std::size_t count_of(const Checkpoint& ck, const std::string& name) {
  const double v = ck.scalar(name);
  if (!(v >= 0.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
    throw Error(Errc::bad_header, "checkpoint entry " + name + " is not a count");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

void put_net_config(Checkpoint& ck, const net::NetConfig& cfg) {
  ck.put_scalar("net.levels", static_cast<double>(cfg.levels));
  ck.put_scalar("net.base_channels", static_cast<double>(cfg.base_channels));
  ck.put_scalar("net.context_dim", static_cast<double>(cfg.context_dim));
  ck.put_scalar("net.time_embed_dim", static_cast<double>(cfg.time_embed_dim));
  ck.put_scalar("net.heads", static_cast<double>(cfg.heads));
  std::vector<double> flags;
  for (const auto& b : block_names(cfg.levels)) flags.push_back(cfg.has_attention(b) ? 1.0 : 0.0);
  ck.put_doubles("net.attn", flags);
}

net::NetConfig get_net_config(const Checkpoint& ck) {
  net::NetConfig cfg;
  cfg.levels = count_of(ck, "net.levels");
  cfg.base_channels = count_of(ck, "net.base_channels");
  cfg.context_dim = count_of(ck, "net.context_dim");
  cfg.time_embed_dim = count_of(ck, "net.time_embed_dim");
  cfg.heads = count_of(ck, "net.heads");
  if (cfg.levels < 2 || cfg.levels > 6) throw Error(Errc::bad_header, "checkpoint net.levels out of range");
  const auto names = block_names(cfg.levels);
  const auto flags = ck.doubles("net.attn");
  if (flags.size() != names.size()) throw Error(Errc::dim_mismatch, "checkpoint net.attn has the wrong length");
  cfg.attn_levels.clear();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (flags[i] != 0.0) cfg.attn_levels.insert(names[i]);
  }
  cfg.validate();
  return cfg;
}

void put_state(Checkpoint& ck, const TrainState& state) {
  ck.add_params(state.params, "params.");
  if (state.teacher) ck.add_params(*state.teacher, "teacher.");
  for (const auto& [name, m] : state.adam.first_moments()) ck.put_doubles("adam.m." + name, m);
  for (const auto& [name, v] : state.adam.second_moments()) ck.put_doubles("adam.v." + name, v);
  ck.put_scalar("state.epoch", static_cast<double>(state.epoch));
  ck.put_scalar("state.adam_steps", static_cast<double>(state.adam.steps()));
  std::vector<double> hist;
  for (const auto& r : state.history) {
    hist.insert(hist.end(), {static_cast<double>(r.epoch), r.total, r.f, r.a, r.phase == Phase::flow ? 0.0 : 1.0});
  }
  const auto rows = static_cast<std::uint32_t>(state.history.size());
  ck.put("history", {rows, 5}, std::vector<float>(hist.begin(), hist.end()));
}

TrainState get_state(const Checkpoint& ck) {
  TrainState s;
  s.params = ck.params("params.");
  if (s.params.size() == 0) throw Error(Errc::bad_header, "checkpoint holds no parameters");
  auto teacher = ck.params("teacher.");
  if (teacher.size() > 0) s.teacher = std::move(teacher);
  for (const auto& e : ck.entries()) {
    if (e.name.rfind("adam.m.", 0) == 0) s.adam.first_moments()[e.name.substr(7)] = ck.doubles(e.name);
    if (e.name.rfind("adam.v.", 0) == 0) s.adam.second_moments()[e.name.substr(7)] = ck.doubles(e.name);
  }
  s.epoch = count_of(ck, "state.epoch");
  s.adam.set_steps(static_cast<std::int64_t>(count_of(ck, "state.adam_steps")));
  const auto& h = ck.at("history");
  if (h.dims.size() != 2 || h.dims[1] != 5) throw Error(Errc::dim_mismatch, "checkpoint history must be [rows, 5]");
  for (std::size_t r = 0; r < h.dims[0]; ++r) {
    const float* row = h.values.data() + 5 * r;
    s.history.push_back({static_cast<std::size_t>(row[0]), row[1], row[2], row[3],
                         row[4] == 0.0f ? Phase::flow : Phase::distill});
  }
  return s;
}

void put_adapters(Checkpoint& ck, const AlignedAdapters& a) {
  ck.put_u64("provider.seed", a.provider_seed);
  ck.put_scalar("provider.dim", static_cast<double>(a.dim));
  ck.put_scalar("adapter.f.scale", a.f.scale);
  ck.put_doubles("adapter.f.bias", a.f.bias);
  ck.put_scalar("adapter.a.scale", a.a.scale);
  ck.put_doubles("adapter.a.bias", a.a.bias);
}

AlignedAdapters get_adapters(const Checkpoint& ck) {
  AlignedAdapters a;
  a.provider_seed = ck.u64("provider.seed");
  a.dim = count_of(ck, "provider.dim");
  a.f = {ck.scalar("adapter.f.scale"), ck.doubles("adapter.f.bias")};
  a.a = {ck.scalar("adapter.a.scale"), ck.doubles("adapter.a.bias")};
  if (a.f.bias.size() != a.dim || a.a.bias.size() != a.dim) {
    throw Error(Errc::dim_mismatch, "adapter bias length does not match provider.dim");
  }
  return a;
}

}  // namespace flowsynth::flow
