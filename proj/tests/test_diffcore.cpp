#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "flowsynth/checkpoint.hpp"
#include "flowsynth/error.hpp"
#include "flowsynth/params.hpp"
#include "flowsynth/tensor.hpp"
#include "support/primitive_checks.hpp"

using namespace flowsynth;
using diff::Tensor;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected flowsynth::Error");
  return Errc::bad_argument;
}

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("forward op examples") {
  CHECK(vec(diff::relu(Tensor::from({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
  CHECK(vec(diff::softmax(Tensor::from({2}, {0, 0}), 0)) == std::vector<double>{0.5, 0.5});

  SplitMix64 rng(3);
  const auto x = testing::random_tensor(rng, {1, 4, 5, 3}, -1, 1, false);
  std::vector<double> delta(27, 0.0);
  delta[13] = 1.0;
  const auto w = Tensor::from({1, 1, 3, 3, 3}, delta);
  const auto y = diff::conv3d(x, w, Tensor(), 1, 1);
  CHECK(y.shape() == x.shape());
  CHECK(vec(y) == vec(x));
}

TEST_CASE("conv3d with stride 1 and pad k preserves spatial dims") {
  SplitMix64 rng(5);
  for (std::size_t half = 0; half < 3; ++half) {
    const std::size_t kk = 2 * half + 1;
    const auto x = testing::random_tensor(rng, {2, 5, 6, 7}, -1, 1, false);
    const auto w = testing::random_tensor(rng, {3, 2, kk, kk, kk}, -1, 1, false);
    const auto y = diff::conv3d(x, w, Tensor(), 1, half);
    CHECK(y.shape() == diff::Shape{3, 5, 6, 7});
  }
}

TEST_CASE("shape errors name both shapes") {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({3, 2});
  try {
    (void)diff::add(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
  CHECK(code_of([&] { (void)diff::matmul(a, a); }) == Errc::shape_mismatch);
}

TEST_CASE("non-finite forward results are errors") {
  const auto x = Tensor::from({1}, {1e308});
  CHECK(code_of([&] { (void)diff::scale(x, 10.0); }) == Errc::non_finite);
}

TEST_CASE("backward examples") {
  SUBCASE("sum gives ones") {
    auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    diff::Tape tape;
    diff::TapeScope scope(tape);
    tape.backward(diff::sum(x));
    CHECK(x.grad_or_zero() == std::vector<double>(6, 1.0));
  }
  SUBCASE("mean of squares") {
    auto x = Tensor::from({1}, {3.0}, true);
    diff::Tape tape;
    diff::TapeScope scope(tape);
    tape.backward(diff::mean(diff::pow(x, 2.0)));
    CHECK(x.grad()[0] == doctest::Approx(6.0));
  }
  SUBCASE("two backward calls accumulate") {
    auto x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    diff::Tape tape;
    diff::TapeScope scope(tape);
    const auto loss = diff::sum(diff::mul(diff::sigmoid(x), x));
    tape.backward(loss);
    const auto once = x.grad_or_zero();
    tape.backward(loss);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0 * once[i]);
  }
  SUBCASE("unreachable leaves hold zero gradients") {
    auto x = Tensor::from({2}, {1, 2}, true);
    auto unused = Tensor::from({2}, {3, 4}, true);
    diff::Tape tape;
    diff::TapeScope scope(tape);
    const auto side = diff::mul(unused, x);  // recorded but not part of the loss
    (void)side;
    tape.backward(diff::sum(x));
    REQUIRE(unused.has_grad());
    CHECK(unused.grad_or_zero() == std::vector<double>{0, 0});
  }
  SUBCASE("non-scalar loss") {
    auto x = Tensor::from({2}, {1, 2}, true);
    diff::Tape tape;
    diff::TapeScope scope(tape);
    const auto y = diff::scale(x, 2.0);
    CHECK(code_of([&] { tape.backward(y); }) == Errc::not_scalar_loss);
  }
  SUBCASE("no recording without an active tape") {
    auto x = Tensor::from({2}, {1, 2}, true);
    const auto y = diff::scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    SplitMix64 rng(11);
    auto x = testing::random_tensor(rng, {2, 4, 4, 4});
    auto w = testing::random_tensor(rng, {3, 2, 3, 3, 3});
    diff::Tape tape;
    diff::TapeScope scope(tape);
    tape.backward(diff::mean(diff::relu(diff::conv3d(x, w, Tensor(), 1, 1))));
    auto g = x.grad_or_zero();
    auto gw = w.grad_or_zero();
    g.insert(g.end(), gw.begin(), gw.end());
    return g;
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check examples") {
  SplitMix64 rng(1);
  SUBCASE("linear f is exact") {
    auto x = testing::random_tensor(rng, {5});
    const auto r = diff::grad_check([](const auto& in) { return diff::sum(in[0]); }, {x});
    CHECK(r.max_rel_error < 1e-9);
    CHECK(r.passed);
  }
  SUBCASE("mean of sigmoid") {
    auto x = testing::random_tensor(rng, {4});
    diff::GradCheckOptions o;
    o.eps = 1e-4;
    o.tol = 1e-5;
    const auto r = diff::grad_check([](const auto& in) { return diff::mean(diff::sigmoid(in[0])); }, {x}, o);
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("dead relu region") {
    auto x = testing::random_tensor(rng, {6}, -2.0, -1.0);
    const auto r = diff::grad_check([](const auto& in) { return diff::sum(diff::relu(in[0])); }, {x});
    CHECK(x.grad_or_zero() == std::vector<double>(6, 0.0));
    CHECK(r.max_abs_error == 0.0);
  }
}

TEST_CASE("every primitive passes finite differences (10 seeds)") {
  const auto opts = testing::primitive_check_options();
  for (const auto& c : testing::primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = c.run(seed, opts);
      INFO(c.name, " seed ", seed, " worst ", r.worst);
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("Adam examples") {
  SUBCASE("zero grads leave parameters unchanged") {
    diff::ParamStore ps;
    ps.add("w", {3}, {0.25, -1.5, 2.0});
    ps.get("w").mutable_grad();
    diff::Adam adam;
    adam.step(ps);
    CHECK(vec(ps.get("w")) == std::vector<double>{0.25, -1.5, 2.0});
    CHECK(adam.first_moments()["w"] == std::vector<double>(3, 0.0));
    CHECK(adam.second_moments()["w"] == std::vector<double>(3, 0.0));
    CHECK(adam.steps() == 1);
  }
  SUBCASE("first step with unit gradient moves by -lr") {
    diff::ParamStore ps;
    ps.add("w", {1}, {1.0});
    ps.get("w").mutable_grad()[0] = 1.0;
    diff::Adam adam({.lr = 1e-3});
    adam.step(ps);
    // m_hat = 1, v_hat = 1: step = lr / (1 + eps)
    CHECK(ps.get("w").data()[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
  }
  SUBCASE("lr 0 leaves parameters unchanged") {
    diff::ParamStore ps;
    ps.add("w", {2}, {0.5, 0.75});
    ps.get("w").mutable_grad()[0] = 3.0;
    diff::Adam adam({.lr = 0.0});
    adam.step(ps);
    CHECK(vec(ps.get("w")) == std::vector<double>{0.5, 0.75});
  }
  SUBCASE("missing gradient") {
    diff::ParamStore ps;
    ps.add("w", {2}, {0.5, 0.75});
    diff::Adam adam;
    CHECK(code_of([&] { adam.step(ps); }) == Errc::missing_grad);
  }
}

TEST_CASE("parameter values stay float-representable") {
  diff::ParamStore ps;
  ps.add("w", {1}, {0.1});
  CHECK(ps.get("w").data()[0] == static_cast<double>(0.1f));
}

TEST_CASE("CKPT1 round trip is bit-exact") {
  SplitMix64 rng(9);
  diff::ParamStore ps;
  ps.add("enc0.conv1.w", {2, 1, 3, 3, 3}, vec(testing::random_tensor(rng, {54})));
  ps.add("head_f.b", {1}, {-0.375});
  Checkpoint ck;
  ck.add_params(ps, "params.");
  ck.put_scalar("state.epoch", 17);
  ck.put_u64("state.seed", 0xDEADBEEFCAFEF00DULL);
  const auto path = std::filesystem::temp_directory_path() / "flowsynth_test.ckpt";
  write_checkpoint(path, ck);
  const auto back = read_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(back == ck);
  CHECK(back.u64("state.seed") == 0xDEADBEEFCAFEF00DULL);
  const auto restored = back.params("params.");
  REQUIRE(restored.size() == 2);
  CHECK(vec(restored.get("enc0.conv1.w")) == vec(ps.get("enc0.conv1.w")));
  CHECK(restored.get("enc0.conv1.w").shape() == diff::Shape{2, 1, 3, 3, 3});

  auto bytes = encode_checkpoint(ck);
  CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "CKPT1");
  bytes[1] = 'X';
  CHECK(code_of([&] { (void)decode_checkpoint(bytes); }) == Errc::bad_magic);
}
