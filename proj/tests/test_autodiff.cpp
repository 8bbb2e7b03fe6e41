#include <doctest.h>

#include <cmath>
#include <functional>

#include "stressvit/autodiff.hpp"
#include "stressvit/optim.hpp"
#include "test_util.hpp"

using namespace stressvit;
using testutil::random_tensor;

namespace {

using Graph = std::function<Var(Tape*)>;

// Backward once, then compare against central differences of the same graph
// evaluated without a tape.
double op_grad_error(std::vector<Parameter*> params, const Graph& f) {
  Tape tape;
  backward(f(&tape), tape, params);
  std::vector<NamedParameter> named;
  std::vector<Tensor> analytic;
  for (std::size_t i = 0; i < params.size(); ++i) {
    named.push_back({"p" + std::to_string(i), params[i]});
    analytic.push_back(params[i]->grad);
  }
  return testutil::finite_difference_check(named, analytic, [&] { return f(nullptr).value().item(); }, 1e-6)
      .max_rel_error;
}

}  // namespace

TEST_CASE("sum of squares gradient") {
  Parameter x(Tensor::vector({1, 2}));
  Tape tape;
  const Var v = tape.param(x);
  const Var loss = sum(mul(v, v));
  Parameter* ps[] = {&x};
  backward(loss, tape, ps);
  CHECK(x.grad == Tensor::vector({2, 4}));
}

TEST_CASE("frozen parameter gets an exact zero gradient") {
  Parameter a(Tensor::vector({1, 2})), b(Tensor::vector({3, 4}));
  b.trainable = false;
  Tape tape;
  const Var loss = sum(mul(tape.param(a), tape.param(b)));
  Parameter* ps[] = {&a, &b};
  backward(loss, tape, ps);
  CHECK(a.grad == Tensor::vector({3, 4}));
  CHECK(b.grad == Tensor::vector({0, 0}));
  CHECK(tape.grad_of(b) == nullptr);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Parameter a(Tensor::vector({1, 2}));
  Tape tape;
  const Var v = scale(tape.param(a), 2.0);
  CHECK_THROWS_AS(tape.backward(v), ShapeError);
}

TEST_CASE("tape records operations in topological order only when needed") {
  Parameter a(Tensor::vector({1, 2}));
  Tape tape;
  const Var c = constant(Tensor::vector({1, 1}));
  const Var cc = add(c, c);
  CHECK(tape.size() == 0);
  CHECK_FALSE(cc.requires_grad());
  const Var x = add(tape.param(a), cc);
  CHECK(x.requires_grad());
  CHECK(tape.size() == 1);
}

TEST_CASE("per-operation gradients match finite differences") {
  Rng rng(21);
  Parameter a(random_tensor({3, 4}, rng)), b(random_tensor({4, 2}, rng)), r(random_tensor({4}, rng));
  Parameter g(random_tensor({4}, rng, 0.5, 1.5)), be(random_tensor({4}, rng));
  const Tensor w = random_tensor({3, 4}, rng);
  // A fixed random projection keeps every output coordinate in the loss.
  auto proj = [&](const Var& v, std::uint64_t seed) {
    Rng pr(seed);
    return sum(mul(v, constant(random_tensor(v.shape(), pr))));
  };

  CHECK(op_grad_error({&a, &b}, [&](Tape* t) { return proj(matmul(leaf(a, t), leaf(b, t)), 1); }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) { return proj(transpose(leaf(a, t)), 2); }) < 1e-6);
  CHECK(op_grad_error({&a, &r}, [&](Tape* t) { return proj(add_row(leaf(a, t), leaf(r, t)), 3); }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) { return proj(softmax_rows(scale(leaf(a, t), 3.0)), 4); }) < 1e-6);
  CHECK(op_grad_error({&a, &g, &be}, [&](Tape* t) {
          return proj(layer_norm(leaf(a, t), leaf(g, t), leaf(be, t), 1e-6), 5);
        }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) { return proj(gelu(scale(leaf(a, t), 2.0)), 6); }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) { return proj(slice_cols(leaf(a, t), 1, 3), 7); }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) { return proj(slice_rows(leaf(a, t), 1, 3), 8); }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) { return proj(reshape(leaf(a, t), {4, 3}), 9); }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) { return proj(mul(leaf(a, t), constant(w)), 10); }) < 1e-6);
  CHECK(op_grad_error({&a, &b}, [&](Tape* t) {
          const Var cols[] = {leaf(a, t), matmul(leaf(a, t), leaf(b, t))};
          return proj(concat_cols(cols), 11);
        }) < 1e-6);
  CHECK(op_grad_error({&a}, [&](Tape* t) {
          const Var rows[] = {leaf(a, t), slice_rows(leaf(a, t), 0, 1)};
          return proj(concat_rows(rows), 12);
        }) < 1e-6);
}

TEST_CASE("bce gradient is sigmoid minus label") {
  Parameter z(Tensor({4, 1}, std::vector<double>{-2.0, 0.0, 0.5, 3.0}));
  const std::vector<int> y{0, 1, 1, 0};
  Tape tape;
  const Var loss = bce_with_logits(tape.param(z), y);
  Parameter* ps[] = {&z};
  backward(loss, tape, ps);
  for (std::size_t i = 0; i < 4; ++i) {
    const double sig = 1.0 / (1.0 + std::exp(-z.value[i]));
    CHECK(z.grad[i] == doctest::Approx((sig - y[i]) / 4.0).epsilon(1e-14));
  }
  CHECK(op_grad_error({&z}, [&](Tape* t) { return bce_with_logits(leaf(z, t), y); }) < 1e-7);
  const std::vector<int> bad{0, 2, 1, 0};
  CHECK_THROWS_AS(bce_with_logits(constant(z.value), bad), std::invalid_argument);
}

TEST_CASE("dropout") {
  Rng rng(1);
  const Tensor x = random_tensor({4, 8}, rng);
  CHECK(dropout(constant(x), 0.0, true, &rng).value() == x);
  CHECK(dropout(constant(x), 0.7, false, nullptr).value() == x);
  CHECK_THROWS_AS(dropout(constant(x), 1.0, true, &rng), std::invalid_argument);
  CHECK_THROWS_AS(dropout(constant(x), -0.1, true, &rng), std::invalid_argument);

  Rng r1(99), r2(99);
  const Tensor d1 = dropout(constant(x), 0.5, true, &r1).value();
  const Tensor d2 = dropout(constant(x), 0.5, true, &r2).value();
  CHECK(d1 == d2);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK((d1[i] == 0.0 || d1[i] == x[i] * 2.0));

  // Keep rate over many draws.
  Rng big(5);
  const Tensor ones({200, 100}, 1.0);
  const Tensor d = dropout(constant(ones), 0.3, true, &big).value();
  std::size_t kept = 0;
  for (double v : d.data()) kept += v != 0.0;
  CHECK(static_cast<double>(kept) / 20000.0 == doctest::Approx(0.7).epsilon(0.03));
}

TEST_CASE("optimizer steps") {
  SUBCASE("zero learning rate leaves parameters unchanged") {
    Parameter p(Tensor::vector({1.0, -2.0}));
    p.grad = Tensor::vector({0.3, 0.4});
    Parameter* ps[] = {&p};
    auto cfg = OptimizerConfig::adamw(0.0);
    optimizer_step(ps, cfg);
    CHECK(p.value == Tensor::vector({1.0, -2.0}));
    CHECK(p.moments.step == 1);
  }
  SUBCASE("first adam step moves by lr against the gradient sign") {
    for (double g : {0.5, -3.0, 1e-3}) {
      Parameter p(Tensor::scalar(2.0));
      p.grad = Tensor::scalar(g);
      Parameter* ps[] = {&p};
      optimizer_step(ps, OptimizerConfig::adam(0.01));
      CHECK(std::abs(p.value.item() - (2.0 - 0.01 * (g > 0 ? 1 : -1))) <= 0.01 * 1e-5);
    }
  }
  SUBCASE("adamw decoupled decay with zero gradient") {
    Parameter p(Tensor::scalar(1.0));
    p.grad = Tensor::scalar(0.0);
    Parameter* ps[] = {&p};
    optimizer_step(ps, OptimizerConfig::adamw(0.001));
    CHECK(p.value.item() == doctest::Approx(0.99999).epsilon(1e-15));
  }
  SUBCASE("frozen parameters are skipped") {
    Parameter p(Tensor::scalar(1.0));
    p.grad = Tensor::scalar(5.0);
    p.trainable = false;
    Parameter* ps[] = {&p};
    optimizer_step(ps, OptimizerConfig::adamw());
    CHECK(p.value.item() == 1.0);
    CHECK(p.moments.step == 0);
  }
  SUBCASE("bit-deterministic") {
    Rng rng(4);
    Parameter a(random_tensor({3, 3}, rng)), b = a;
    for (int s = 0; s < 5; ++s) {
      a.grad = b.grad = random_tensor({3, 3}, rng);
      Parameter* pa[] = {&a};
      Parameter* pb[] = {&b};
      optimizer_step(pa, OptimizerConfig::adamw());
      optimizer_step(pb, OptimizerConfig::adamw());
    }
    CHECK(a.value == b.value);
    CHECK(a.moments.second == b.moments.second);
  }
  SUBCASE("adam matches a hand-rolled reference over several steps") {
    Parameter p(Tensor::vector({0.5, -0.25}));
    double theta[2] = {0.5, -0.25}, m[2] = {0, 0}, v[2] = {0, 0};
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
    for (int t = 1; t <= 4; ++t) {
      const double g[2] = {0.1 * t, -0.2 / t};
      p.grad = Tensor::vector({g[0], g[1]});
      Parameter* ps[] = {&p};
      optimizer_step(ps, OptimizerConfig::adamw(lr));
      for (int i = 0; i < 2; ++i) {
        theta[i] -= lr * wd * theta[i];
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
        const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
        theta[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
    CHECK(p.value[0] == doctest::Approx(theta[0]).epsilon(1e-13));
    CHECK(p.value[1] == doctest::Approx(theta[1]).epsilon(1e-13));
  }
  CHECK(parse_optimizer_kind("AdamW") == OptimizerKind::adamw);
  CHECK_THROWS(parse_optimizer_kind("sgd"));
  OptimizerConfig bad = OptimizerConfig::adam();
  bad.beta1 = 1.0;
  CHECK_THROWS(bad.validate());
}
