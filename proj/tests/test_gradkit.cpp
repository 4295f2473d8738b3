#include <doctest.h>

#include <cmath>
#include <random>

#include "sharpen/autodiff.hpp"
#include "sharpen/error.hpp"
#include "sharpen/gradcheck.hpp"
#include "sharpen/optim.hpp"

using namespace sharpen;

namespace {

Array random_array(Shape shape, std::uint64_t seed, double lo = -1.5, double hi = 1.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Array a(std::move(shape));
  for (auto& v : a.storage()) v = u(rng);
  return a;
}

// Reduces a matrix-valued node to a scalar through a fixed random weighting,
// so every output element contributes a distinct gradient.
Var probe(Tape& tape, Var y) {
  const Array& v = y.value();
  Array w = random_array(v.shape(), 99);
  return sum(y * tape.constant(w));
}

}  // namespace

TEST_CASE("every primitive passes a central-difference check") {
  const Array x = random_array({3, 4}, 1);
  const Array other = random_array({3, 4}, 2);
  const Array col = random_array({3, 1}, 3);
  const Array right = random_array({4, 2}, 4);
  const Array positive = random_array({3, 4}, 5, 0.2, 2.0);

  struct Case {
    const char* name;
    TapeFunction f;
    Array at;
  };
  const std::vector<Case> cases = {
      {"add", [&](Tape& t, Var v) { return probe(t, v + t.constant(other)); }, x},
      {"add broadcast column", [&](Tape& t, Var v) { return probe(t, t.constant(x) + v); }, col},
      {"sub", [&](Tape& t, Var v) { return probe(t, t.constant(other) - v); }, x},
      {"mul", [&](Tape& t, Var v) { return probe(t, v * v * t.constant(other)); }, x},
      {"mul broadcast", [&](Tape& t, Var v) { return probe(t, t.constant(x) * v); }, col},
      {"neg", [&](Tape& t, Var v) { return probe(t, -v); }, x},
      {"scale", [&](Tape& t, Var v) { return probe(t, scale(v, -2.5)); }, x},
      {"matmul left", [&](Tape& t, Var v) { return probe(t, matmul(v, t.constant(right))); }, x},
      {"matmul right", [&](Tape& t, Var v) { return probe(t, matmul(t.constant(x), v)); }, right},
      {"tanh", [&](Tape& t, Var v) { return probe(t, tanh(v)); }, x},
      {"silu", [&](Tape& t, Var v) { return probe(t, silu(v)); }, x},
      {"exp", [&](Tape& t, Var v) { return probe(t, exp(v)); }, x},
      {"log", [&](Tape& t, Var v) { return probe(t, log(v)); }, positive},
      {"softplus", [&](Tape& t, Var v) { return probe(t, softplus(scale(v, 10.0))); }, x},
      {"sum", [&](Tape&, Var v) { return sum(v * v); }, x},
      {"mean", [&](Tape&, Var v) { return mean(exp(v)); }, x},
      {"sq_norm", [&](Tape&, Var v) { return sq_norm(v); }, x},
      {"row_sum", [&](Tape& t, Var v) { return probe(t, row_sum(v * v)); }, x},
      {"concat_cols", [&](Tape& t, Var v) {
         const Var parts[] = {v, t.constant(col), tanh(v)};
         return probe(t, concat_cols(parts));
       }, x},
      {"log_softmax", [&](Tape& t, Var v) { return probe(t, log_softmax(v)); }, x},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(gradcheck(c.f, c.at, 1e-5) < 1e-6);
  }
}

TEST_CASE("broadcasting follows the size-one rule and names both shapes on error") {
  Tape tape;
  const Var a = tape.constant(random_array({3, 4}, 1));
  const Var row = tape.constant(random_array({1, 4}, 2));
  CHECK((a + row).value().shape() == Shape{3, 4});
  const Var bad = tape.constant(random_array({2, 4}, 3));
  try {
    (void)(a + bad);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(3x4)") != std::string::npos);
    CHECK(msg.find("(2x4)") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("known gradients") {
  SUBCASE("sum of squares gives 2x") {
    const Array x = Array::matrix(1, 3, {1.0, -2.0, 0.5});
    const Array g = gradient([](Tape&, Var v) { return sum(v * v); }, x);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(-4.0));
    CHECK(g[2] == doctest::Approx(1.0));
  }
  SUBCASE("softplus is stable and its slope is the sigmoid") {
    const Array x = Array::matrix(1, 3, {-800.0, 0.0, 800.0});
    Tape tape;
    const Var v = tape.leaf(x);
    const Var y = softplus(v);
    CHECK(y.value()[0] == doctest::Approx(0.0));
    CHECK(y.value()[1] == doctest::Approx(std::log(2.0)));
    CHECK(y.value()[2] == doctest::Approx(800.0));
    const Array g = tape.backward(sum(y)).of(v);
    CHECK(g[0] == doctest::Approx(0.0));
    CHECK(g[1] == doctest::Approx(0.5));
    CHECK(g[2] == doctest::Approx(1.0));
  }
  SUBCASE("unused leaf gets zeros") {
    Tape tape;
    const Var a = tape.leaf(Array::scalar(2.0));
    const Var b = tape.leaf(Array::matrix(1, 2, {1.0, 1.0}));
    const Gradients g = tape.backward(scale(a, 3.0));
    CHECK(g.of(b) == Array({1, 2}, 0.0));
  }
}

TEST_CASE("backward is repeatable and validates its seed") {
  Tape tape;
  const Var v = tape.leaf(random_array({2, 3}, 7));
  const Var y = tanh(v) * v;
  const Gradients g1 = tape.backward(y, Array({2, 3}, 1.0));
  const Gradients g2 = tape.backward(y, Array({2, 3}, 1.0));
  CHECK(g1.of(v) == g2.of(v));
  CHECK_THROWS_AS(tape.backward(y, Array({3, 2}, 1.0)), ShapeError);
  CHECK_THROWS(tape.backward(y));  // not scalar
  Tape empty;
  CHECK_THROWS(empty.backward(Var{&empty, 0}));
}

TEST_CASE("gradcheck validates its perturbation and output") {
  const Array x = random_array({2, 2}, 1);
  const TapeFunction f = [](Tape&, Var v) { return sum(v); };
  CHECK_THROWS_AS(gradcheck(f, x, 1e-9), ConfigError);
  CHECK_THROWS_AS(gradcheck(f, x, 1e-2), ConfigError);
  CHECK_THROWS_AS(gradcheck([](Tape&, Var v) { return v; }, x), ShapeError);
  CHECK(gradcheck(f, x) < 1e-9);
}

TEST_CASE("adamw step matches a hand-computed update") {
  std::vector<Array> params{Array::matrix(1, 2, {1.0, -1.0})};
  const std::vector<Array> grads{Array::matrix(1, 2, {0.5, -2.0})};
  OptimState state = make_optim_state(params);
  const AdamConfig cfg{0.1, 0.9, 0.999, 1e-8, 0.01};
  adamw_step(params, grads, state, cfg);
  // First step: bias-corrected m / (sqrt(v) + eps) = g / (|g| + eps); weight decay applied to the old value.
  CHECK(params[0][0] == doctest::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0)).epsilon(1e-12));
  CHECK(params[0][1] == doctest::Approx(-1.0 - 0.1 * (-2.0 / (2.0 + 1e-8) + 0.01 * -1.0)).epsilon(1e-12));
  CHECK(state.step == 1);
}

TEST_CASE("adamw with fine-tuning defaults reproduces beta1 = 0 behaviour") {
  const AdamConfig cfg;
  CHECK(cfg.beta1 == 0.0);
  CHECK(cfg.beta2 == 0.99);
  CHECK(cfg.weight_decay == 0.0);
  std::vector<Array> params{Array::scalar(0.0)};
  OptimState state;
  for (int k = 1; k <= 3; ++k) {
    const std::vector<Array> grads{Array::scalar(k)};
    const double before = params[0].item();
    adamw_step(params, grads, state, cfg);
    // With beta1 = 0 the first moment is the current gradient.
    const double v_hat = [&] {
      double v = 0.0;
      for (int j = 1; j <= k; ++j) v = 0.99 * v + 0.01 * j * j;
      return v / (1.0 - std::pow(0.99, k));
    }();
    CHECK(params[0].item() == doctest::Approx(before - cfg.lr * k / (std::sqrt(v_hat) + cfg.epsilon)).epsilon(1e-12));
  }
}

TEST_CASE("adamw rejects bad input") {
  std::vector<Array> params{Array::scalar(1.0)};
  OptimState state = make_optim_state(params);
  const std::vector<Array> nan_grad{Array::scalar(std::nan(""))};
  const std::vector<std::string> names{"layer.weight"};
  try {
    adamw_step(params, nan_grad, state, AdamConfig{}, names);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer.weight") != std::string::npos);
  }
  const std::vector<Array> ok{Array::scalar(1.0)};
  CHECK_THROWS_AS(adamw_step(params, ok, state, AdamConfig{0.0}), ConfigError);
}
