#include <cmath>

#include "doctest.h"
#include "flowsynth/error.hpp"
#include "flowsynth/kernels.hpp"
#include "flowsynth/rectflow.hpp"
#include "support/flow_fixtures.hpp"

using namespace flowsynth;
using namespace flowsynth::flow;
using diff::Tensor;
using testing::values;

namespace {

const net::NetConfig kTiny = testing::tiny_config();

ConditionedSample shifted_pair(double kappa, std::uint64_t seed, bool f = true, bool a = true) {
  const auto src = synth::make_source(seed, {8, 8, 8}, 4);
  ConditionedSample s;
  s.dims = src.dims();
  s.source = net::to_tensor(src);
  auto shifted = values(s.source);
  for (double& v : shifted) v += kappa;
  if (f) s.target_f = Tensor::from(s.source.shape(), shifted);
  if (a) s.target_a = Tensor::from(s.source.shape(), shifted);
  SplitMix64 rng(seed);
  s.ctx_f = testing::random_context(rng, Modality::f, kTiny.context_dim);
  s.ctx_a = testing::random_context(rng, Modality::a, kTiny.context_dim);
  return s;
}

diff::ParamStore zero_params(const net::VelocityNet& net) {
  auto ps = net.init_params(0);
  for (auto& [name, t] : ps) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  return ps;
}

bool same_params(const diff::ParamStore& a, const diff::ParamStore& b) {
  if (a.size() != b.size()) return false;
  auto ib = b.begin();
  for (const auto& [name, t] : a) {
    if (name != ib->first || values(t) != values(ib->second)) return false;
    ++ib;
  }
  return true;
}

}  // namespace

TEST_CASE("interpolate examples") {
  const auto x0 = synth::make_source(1, {8, 8, 8}, 3);
  const auto x1 = synth::make_source(2, {8, 8, 8}, 3);
  CHECK(interpolate(x0, x1, 0.0) == x0);
  CHECK(interpolate(x0, x1, 1.0) == x1);
  const auto mid = interpolate(Volume3D::filled({8, 8, 8}, 0.0f), Volume3D::filled({8, 8, 8}, 1.0f), 0.3);
  for (float v : mid.voxels()) CHECK(v == 0.3f);
  CHECK_THROWS_AS(interpolate(x0, Volume3D::filled({8, 8, 9}, 0.0f), 0.5), Error);
}

TEST_CASE("flow_loss examples") {
  const net::VelocityNet net(kTiny);
  auto zero = zero_params(net);
  FlowConfig cfg;
  cfg.lambda_f = 0.5;
  cfg.lambda_a = 2.0;

  SUBCASE("no available tracer contributes nothing") {
    auto s = shifted_pair(0.2, 3, false, false);
    std::vector<const ConditionedSample*> batch{&s};
    const auto l = flow_loss(net, zero, batch, std::vector<double>{0.4}, cfg, true);
    CHECK(l.total == 0.0);
    for (const auto& [name, t] : zero) {
      for (double g : t.grad_or_zero()) CHECK(g == 0.0);
    }
  }
  SUBCASE("identity coupling with a zero field") {
    auto s = shifted_pair(0.0, 3);
    std::vector<const ConditionedSample*> batch{&s};
    CHECK(flow_loss(net, zero, batch, std::vector<double>{0.7}, cfg, false).total == 0.0);
  }
  SUBCASE("constant displacement with a zero field") {
    const double kappa = 0.25;
    auto only_f = shifted_pair(kappa, 3, true, false);
    auto only_a = shifted_pair(kappa, 4, false, true);
    std::vector<const ConditionedSample*> bf{&only_f}, ba{&only_a};
    CHECK(flow_loss(net, zero, bf, std::vector<double>{0.3}, cfg, false).total ==
          doctest::Approx(0.5 * kappa * kappa).epsilon(1e-12));
    CHECK(flow_loss(net, zero, ba, std::vector<double>{0.3}, cfg, false).total ==
          doctest::Approx(2.0 * kappa * kappa).epsilon(1e-12));
    auto both = shifted_pair(kappa, 5);
    std::vector<const ConditionedSample*> bb{&both, &only_f};
    const auto l = flow_loss(net, zero, bb, std::vector<double>{0.1, 0.9}, cfg, false);
    CHECK(l.f == doctest::Approx(0.5 * kappa * kappa).epsilon(1e-12));
    CHECK(l.a == doctest::Approx(0.5 * 2.0 * kappa * kappa).epsilon(1e-12));
    CHECK(l.total == l.f + l.a);
  }
  SUBCASE("empty batch") {
    std::vector<const ConditionedSample*> batch;
    try {
      (void)flow_loss(net, zero, batch, std::vector<double>{}, cfg, false);
      FAIL("expected EmptyBatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::empty_batch);
    }
  }
}

TEST_CASE("gated heads receive exactly zero gradient") {
  const net::VelocityNet net(kTiny);
  auto ps = testing::random_params(net, 4);
  const auto data = testing::small_dataset(6, 11, kTiny.context_dim, true);
  FlowConfig cfg;
  for (const auto& s : data) {
    std::vector<const ConditionedSample*> batch{&s};
    SplitMix64 rng(1);
    flow_loss(net, ps, batch, rng, cfg, true);
    for (Modality m : {Modality::f, Modality::a}) {
      const std::string head = m == Modality::f ? "head_f" : "head_a";
      double norm = 0.0;
      for (double g : ps.get(head + ".w").grad_or_zero()) norm += std::abs(g);
      for (double g : ps.get(head + ".b").grad_or_zero()) norm += std::abs(g);
      if (s.has(m)) CHECK(norm > 0.0);
      else CHECK(norm == 0.0);
    }
  }
}

TEST_CASE("batch gradient is the mean of sample gradients") {
  const net::VelocityNet net(kTiny);
  auto ps = testing::random_params(net, 5);
  const auto data = testing::small_dataset(3, 2, kTiny.context_dim);
  const auto all = testing::pointers(data);
  const std::vector<double> ts{0.2, 0.5, 0.8};
  FlowConfig cfg;
  flow_loss(net, ps, all, ts, cfg, true);
  const auto batch = ps.get("dec0.conv1.w").grad_or_zero();
  std::vector<double> sum(batch.size(), 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<const ConditionedSample*> one{all[i]};
    flow_loss(net, ps, one, std::vector<double>{ts[i]}, cfg, true);
    const auto g = ps.get("dec0.conv1.w").grad_or_zero();
    for (std::size_t k = 0; k < g.size(); ++k) sum[k] += g[k] / 3.0;
  }
  for (std::size_t k = 0; k < sum.size(); ++k) CHECK(batch[k] == doctest::Approx(sum[k]).epsilon(1e-12));
}

TEST_CASE("sample_euler examples") {
  const net::VelocityNet net(kTiny);
  SplitMix64 rng(6);
  const auto x0 = net::to_tensor(synth::make_source(8, {8, 8, 8}, 3));
  const auto ctx = testing::random_context(rng, Modality::a, kTiny.context_dim);

  SUBCASE("zero field") {
    const auto zero = zero_params(net);
    for (std::size_t n : {1, 3, 8}) CHECK(values(sample_euler(net, zero, x0, ctx, n)) == values(x0));
  }
  SUBCASE("constant field is integrated exactly") {
    auto ps = net.init_params(3);
    ps.get("head_a.b").mutable_data()[0] = 0.375;
    auto expect = values(x0);
    for (double& v : expect) v += 0.375;
    for (std::size_t n : {1, 2, 4, 8}) CHECK(values(sample_euler(net, ps, x0, ctx, n)) == expect);
    const auto n5 = values(sample_euler(net, ps, x0, ctx, 5));
    for (std::size_t i = 0; i < n5.size(); ++i) CHECK(n5[i] == doctest::Approx(expect[i]).epsilon(1e-14));
  }
  SUBCASE("one step is Euler with n = 1") {
    const auto ps = testing::random_params(net, 7);
    CHECK(values(sample_onestep(net, ps, x0, ctx)) == values(sample_euler(net, ps, x0, ctx, 1)));
    double diff = 0.0;
    const auto one = sample_euler(net, ps, x0, ctx, 1), two = sample_euler(net, ps, x0, ctx, 2);
    for (std::size_t i = 0; i < one.size(); ++i) diff += std::pow(one.data()[i] - two.data()[i], 2);
    CHECK(std::sqrt(diff) > 1e-6);
  }
  SUBCASE("volume wrapper") {
    const auto zero = zero_params(net);
    const auto v = synth::make_source(8, {8, 8, 8}, 3);
    const auto out = sample_euler(net, zero, v, ctx, 2);
    CHECK(out.voxels().size() == v.voxels().size());
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(out.voxels()[i] == v.voxels()[i]);
  }
}

TEST_CASE("training examples") {
  const net::VelocityNet net(kTiny);
  SUBCASE("constant displacement is learned") {
    std::vector<ConditionedSample> data{shifted_pair(0.2, 21)};
    FlowConfig cfg;
    cfg.adam.lr = 1e-2;
    cfg.epochs = 500;
    cfg.distill_start_epoch = 500;
    cfg.batch_size = 1;
    Trainer trainer(net, cfg, data);
    auto state = trainer.init(1);
    trainer.run_until(state, 500);
    CHECK(state.history.back().total < 1e-4);
  }
  SUBCASE("lr 0 keeps the history constant") {
    FlowConfig cfg;
    cfg.adam.lr = 0.0;
    cfg.epochs = 3;
    cfg.distill_start_epoch = 3;
    Trainer trainer(net, cfg, testing::small_dataset(3, 4, kTiny.context_dim));
    auto state = trainer.init(2);
    trainer.run_until(state, 3);
    REQUIRE(state.history.size() == 3);
    CHECK(state.history[0].total == state.history[1].total);
    CHECK(state.history[1].total == state.history[2].total);
  }
  SUBCASE("same seed, same history") {
    FlowConfig cfg;
    cfg.epochs = 3;
    cfg.distill_start_epoch = 2;
    cfg.teacher_steps = 4;
    cfg.seed = 77;
    auto run = [&] {
      Trainer trainer(net, cfg, testing::small_dataset(5, 4, kTiny.context_dim, true));
      auto state = trainer.init(3);
      trainer.run_until(state, 3);
      return state;
    };
    const auto a = run(), b = run();
    CHECK(a.history == b.history);
    CHECK(same_params(a.params, b.params));
    CHECK(a.history[2].phase == Phase::distill);
  }
}

TEST_CASE("result does not depend on the thread count") {
  const net::VelocityNet net(kTiny);
  FlowConfig cfg;
  cfg.epochs = 2;
  cfg.distill_start_epoch = 1;
  cfg.teacher_steps = 3;
  auto run = [&](int threads) {
    kernels::set_thread_count(threads);
    Trainer trainer(net, cfg, testing::small_dataset(6, 9, kTiny.context_dim, true));
    auto state = trainer.init(4);
    trainer.run_until(state, 2);
    kernels::set_thread_count(0);
    return state;
  };
  const auto one = run(1), three = run(3);
  CHECK(same_params(one.params, three.params));
  CHECK(one.history == three.history);
}

TEST_CASE("distillation examples") {
  const net::VelocityNet net(kTiny);
  const auto data = testing::small_dataset(3, 5, kTiny.context_dim);
  SUBCASE("N = 1 starts at a fixed point") {
    FlowConfig cfg;
    cfg.epochs = 1;
    cfg.distill_start_epoch = 0;
    cfg.teacher_steps = 1;
    Trainer trainer(net, cfg, data);
    auto state = trainer.init(6);
    state.params = testing::random_params(net, 6);
    state.teacher = state.params.clone();
    const auto& targets = trainer.distill_targets(state);
    std::vector<const DistillTarget*> tp;
    for (const auto& t : targets) tp.push_back(&t);
    CHECK(distill_loss(net, state.params, testing::pointers(data), tp, false).total == 0.0);
  }
  SUBCASE("constant-field teacher is matched") {
    FlowConfig cfg;
    cfg.epochs = 300;
    cfg.distill_start_epoch = 0;
    cfg.teacher_steps = 8;
    cfg.adam.lr = 1e-2;
    Trainer trainer(net, cfg, data);
    auto state = trainer.init(7);
    state.params.get("head_f.b").mutable_data()[0] = 0.125;
    state.params.get("head_a.b").mutable_data()[0] = -0.25;
    trainer.run_until(state, 300);
    CHECK(state.history.front().total < 1e-12);
    CHECK(state.history.back().total < 1e-6);
  }
}

TEST_CASE("checkpoint resume continues bit-identically") {
  const net::VelocityNet net(kTiny);
  FlowConfig cfg;
  cfg.epochs = 4;
  cfg.distill_start_epoch = 2;
  cfg.teacher_steps = 3;
  cfg.seed = 5;
  const auto data = testing::small_dataset(5, 8, kTiny.context_dim, true);

  Trainer straight(net, cfg, data);
  auto full = straight.init(9);
  straight.run_until(full, 4);

  for (std::size_t cut : {1, 2, 3}) {
    Trainer first(net, cfg, data);
    auto part = first.init(9);
    first.run_until(part, cut);
    Checkpoint ck;
    put_net_config(ck, net.config());
    put_state(ck, part);
    const auto restored_ck = decode_checkpoint(encode_checkpoint(ck));
    CHECK(get_net_config(restored_ck).attn_levels == std::set<std::string>{"mid", "dec0", "dec1"});
    auto resumed = get_state(restored_ck);
    Trainer second(net, cfg, data);
    second.run_until(resumed, 4);
    INFO("cut after epoch ", cut);
    CHECK(same_params(resumed.params, full.params));
    CHECK(resumed.adam.steps() == full.adam.steps());
  }
}

TEST_CASE("config validation") {
  FlowConfig cfg;
  cfg.lambda_f = cfg.lambda_a = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = FlowConfig{};
  cfg.distill_start_epoch = cfg.epochs + 1;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
