#include <cmath>

#include "doctest.h"
#include "mkfa/optim.hpp"
#include "test_util.hpp"

using namespace mkfa;
using mkfa::testing::random_tensor;

namespace {

ParamRegistry<double> make_registry(SeededRng& rng) {
  ParamRegistry<double> reg;
  reg.add("a", random_tensor<double>(Shape{1, 3, 2, 2}, rng));
  reg.add("b", random_tensor<double>(Shape{1, 1, 1, 5}, rng));
  return reg;
}

}  // namespace

TEST_CASE("first adam step closed form") {
  for (double g : {0.3, -2.0, 1e-3, -7e-6}) {
    ParamRegistry<double> reg;
    reg.add("w", Tensor64(Shape{1, 1, 1, 1}, 1.5));
    reg[0].grad()[0] = g;
    Optimizer<double> opt;
    const double lr = 1e-3, eps = opt.config().eps;
    opt.step(reg, lr);
    const double delta = reg[0].value()[0] - 1.5;
    CHECK(delta == doctest::Approx(-lr * g / (std::abs(g) + eps)).epsilon(1e-12));
    CHECK(std::abs(delta + lr * (g > 0 ? 1 : -1)) < lr * 0.01);
    CHECK(reg[0].grad()[0] == 0.0);
    CHECK(opt.steps() == 1);
  }
}

TEST_CASE("adam matches a scalar reference over several steps") {
  SeededRng rng(3);
  ParamRegistry<double> reg;
  reg.add("w", Tensor64(Shape{1, 1, 1, 1}, 0.2));
  Optimizer<double> opt;
  double w = 0.2, m = 0.0, v = 0.0;
  for (int t = 1; t <= 25; ++t) {
    const double g = rng.normal();
    const double lr = 1e-2 / t;
    reg[0].grad()[0] = g;
    opt.step(reg, lr);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(reg[0].value()[0] == doctest::Approx(w).epsilon(1e-13));
  }
}

TEST_CASE("zero gradients") {
  SeededRng rng(4);
  SUBCASE("adam leaves parameters unchanged") {
    auto reg = make_registry(rng);
    const Tensor64 a = reg[0].value(), b = reg[1].value();
    Optimizer<double> opt;
    for (int i = 0; i < 3; ++i) opt.step(reg, 1e-3);
    CHECK(reg[0].value().data()[3] == a.data()[3]);
    for (int64_t i = 0; i < b.numel(); ++i) CHECK(reg[1].value()[i] == b[i]);
  }
  SUBCASE("adamw decays by 1 - lr * wd") {
    auto reg = make_registry(rng);
    const Tensor64 a = reg[0].value();
    Optimizer<double> opt({OptimizerKind::adamw, 0.9, 0.999, 1e-8, 0.05});
    opt.step(reg, 0.001);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(reg[0].value()[i] == doctest::Approx(a[i] * 0.99995).epsilon(1e-15));
  }
}

TEST_CASE("lr 0 and wd 0 is the identity") {
  SeededRng rng(5);
  auto reg = make_registry(rng);
  const Tensor64 a = reg[0].value();
  for (auto kind : {OptimizerKind::adam, OptimizerKind::adamw}) {
    Optimizer<double> opt({kind, 0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 3; ++i) {
      reg[0].grad() = random_tensor<double>(a.shape(), rng);
      opt.step(reg, 0.0);
    }
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(reg[0].value()[i] == a[i]);
  }
}

TEST_CASE("non-finite gradient names the parameter") {
  SeededRng rng(6);
  auto reg = make_registry(rng);
  const Tensor64 a = reg[0].value();
  reg[0].grad()[0] = 1.0;
  reg[1].grad()[2] = std::nan("");
  Optimizer<double> opt;
  try {
    opt.step(reg, 1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("parameter b") != std::string::npos);
  }
  CHECK(reg[0].value()[0] == a[0]);
  CHECK(opt.steps() == 0);
}

TEST_CASE("frozen parameters are skipped") {
  ParamRegistry<double> reg;
  reg.add("w", Tensor64(Shape{1, 1, 1, 1}, 1.0), false);
  reg[0].grad()[0] = 1.0;
  Optimizer<double> opt;
  opt.step(reg, 0.1);
  CHECK(reg[0].value()[0] == 1.0);
}

TEST_CASE("warmup cosine schedule") {
  LrSchedule s{5e-4, 1e-6, 100, 1000};
  CHECK(s.at(0) == 0.0);
  CHECK(s.at(50) == doctest::Approx(2.5e-4));
  CHECK(s.at(100) == 5e-4);
  CHECK(std::abs(s.at(1000) - 1e-6) < 1e-12);
  CHECK(std::abs(s.at(5000) - 1e-6) < 1e-12);
  CHECK(s.at(550) == doctest::Approx(1e-6 + 0.5 * (5e-4 - 1e-6)));
  double prev = s.at(100);
  for (int64_t t = 101; t <= 1000; ++t) {
    CHECK(s.at(t) <= prev);
    prev = s.at(t);
  }
  CHECK_THROWS_AS(s.at(-1), std::invalid_argument);
  LrSchedule flat{1e-3, 1e-3, 0, 10};
  CHECK(flat.at(0) == 1e-3);
  CHECK(flat.at(7) == doctest::Approx(1e-3).epsilon(1e-15));
}

TEST_CASE("optimizer config json") {
  OptimizerConfig c{OptimizerKind::adamw, 0.8, 0.99, 1e-6, 0.05};
  const auto back = nlohmann::json(c).get<OptimizerConfig>();
  CHECK(back.kind == OptimizerKind::adamw);
  CHECK(back.weight_decay == 0.05);
  CHECK_THROWS_AS(parse_optimizer_kind("sgd"), std::invalid_argument);
}
