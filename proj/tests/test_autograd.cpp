#include <doctest.h>

#include <cmath>
#include <limits>

#include "dybnn/autograd.hpp"
#include "dybnn/models.hpp"
#include "dybnn/ops.hpp"
#include "dybnn/train.hpp"
#include "support.hpp"

using namespace dybnn;
using testsupport::random_tensor;

TEST_CASE("ste_sign_grad passes gradients inside the clip window only") {
  const Tensor<double> up(Shape{3}, std::vector<double>{1, 1, 1});
  const Tensor<double> x(Shape{3}, std::vector<double>{0.5, -2.0, 0.9});
  const auto g = ops::ste_sign_grad(up, x, 1.0);
  CHECK(g.vec() == std::vector<double>{1, 0, 1});
}

TEST_CASE("ste_sign_grad is the identity on an all-zero input") {
  const auto up = random_tensor<double>(Shape{4, 5}, 3);
  const Tensor<double> x(Shape{4, 5}, 0.0);
  CHECK(ops::ste_sign_grad(up, x, 1.0) == up);
}

TEST_CASE("ste_sign_grad rejects mismatched shapes") {
  const Tensor<double> up(Shape{3}, 1.0);
  const Tensor<double> x(Shape{4}, 0.0);
  CHECK_THROWS_AS(ops::ste_sign_grad(up, x, 1.0), DimensionError);
}

TEST_CASE("sign_ste backward matches the clip mask on 1000 random elements") {
  const auto x = random_tensor<double>(Shape{1000}, 11, -3.0, 3.0);
  const auto up = random_tensor<double>(Shape{1000}, 12);
  auto leaf = Var<double>::leaf(x, true);
  const auto y = ops::sign_ste(leaf);
  backward(y, up);
  std::size_t passed = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double expect = std::abs(x[i]) <= 1.0 ? up[i] : 0.0;
    CHECK(leaf.grad()[i] == expect);
    passed += std::abs(x[i]) <= 1.0;
    CHECK(std::abs(y.value()[i]) == 1.0);
  }
  CHECK(passed > 200);
  CHECK(passed < 500);
}

TEST_CASE("sign_ste in zero mode propagates no gradient") {
  auto leaf = Var<double>::leaf(random_tensor<double>(Shape{16}, 5), true);
  backward(ops::sum_all(ops::sign_ste(leaf, ops::SteBackward::zero)));
  for (double g : leaf.grad().vec()) CHECK(g == 0.0);
}

TEST_CASE("zero-weight classifier starts at ln(K)") {
  const std::size_t k = 7;
  models::Model<double> m(testsupport::linear_graph(5, k), 1);
  m.params().at("fc.weight").mutable_value().fill(0.0);
  const auto x = random_tensor<double>(Shape{4, 5}, 2);
  const std::vector<std::int32_t> labels{0, 3, 6, 2};
  const auto r = train::forward_backward(m, x, labels, {});
  CHECK(r.loss == doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-12));
}

TEST_CASE("logistic regression loss decreases monotonically over 10 gradient steps") {
  models::Model<double> m(testsupport::linear_graph(2, 2), 4);
  auto& w = m.params().at("fc.weight").mutable_value();
  w = Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
  const Tensor<double> x(Shape{4, 2}, std::vector<double>{2, -1, 1.5, -2, -1, 2, -2, 1});
  const std::vector<std::int32_t> labels{0, 0, 1, 1};
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 10; ++step) {
    const auto r = train::forward_backward(m, x, labels, {});
    CHECK(r.loss < prev);
    prev = r.loss;
    for (const auto& name : m.params().names()) {
      auto& p = m.params().at(name);
      for (std::size_t i = 0; i < p.value().size(); ++i) p.mutable_value()[i] -= 0.5 * p.grad()[i];
    }
  }
}

TEST_CASE("two-layer network gradients agree with central differences") {
  models::Model<double> m(testsupport::mlp_graph(6, 5, 3), 9);
  const auto x = random_tensor<double>(Shape{4, 6}, 10);
  const std::vector<std::int32_t> labels{0, 1, 2, 1};
  train::FiniteDiffOptions o;
  o.eps = 1e-4;
  o.max_entries = 64;
  const auto r = train::finite_diff_check(m, x, labels, [](const std::string&) { return true; }, o);
  CHECK(r.checked > 40);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("finite_diff_check validates its arguments") {
  models::Model<double> m(testsupport::mlp_graph(3, 3, 2), 1);
  const auto x = random_tensor<double>(Shape{2, 3}, 1);
  const std::vector<std::int32_t> labels{0, 1};
  CHECK_THROWS_AS(train::finite_diff_check(m, x, labels, [](const std::string&) { return false; }), ArgumentError);
  train::FiniteDiffOptions o;
  o.eps = 0.5;
  CHECK_THROWS_AS(train::finite_diff_check(m, x, labels, [](const std::string&) { return true; }, o),
                  ArgumentError);
}

TEST_CASE("parameter with no influence on the loss gets an exactly zero gradient") {
  models::Model<double> m(testsupport::mlp_graph(4, 3, 2, models::LayerKind::relu), 6);
  auto& w1 = m.params().at("fc1.weight").mutable_value();
  for (std::size_t j = 0; j < 4; ++j) w1[j] = 0.0;
  m.params().at("fc1.bias").mutable_value()[0] = -100.0;
  const auto x = random_tensor<double>(Shape{5, 4}, 7);
  const std::vector<std::int32_t> labels{0, 1, 0, 1, 1};
  train::forward_backward(m, x, labels, {});
  const auto& g1 = m.params().at("fc1.weight").grad();
  for (std::size_t j = 0; j < 4; ++j) CHECK(g1[j] == 0.0);
  const auto& g2 = m.params().at("fc2.weight").grad();
  CHECK(g2[0] == 0.0);
  CHECK(g2[3] == 0.0);
}

TEST_CASE("backward of a sum of losses equals the sum of backwards") {
  const auto xv = random_tensor<double>(Shape{3, 4}, 21);
  auto loss_a = [](const Var<double>& x) { return ops::sum_all(ops::gelu(x)); };
  auto loss_b = [](const Var<double>& x) { return ops::sum_all(ops::mul(x, ops::softmax_last(x))); };

  auto x1 = Var<double>::leaf(xv, true);
  backward(loss_a(x1));
  auto x2 = Var<double>::leaf(xv, true);
  backward(loss_b(x2));
  auto x3 = Var<double>::leaf(xv, true);
  backward(ops::add(loss_a(x3), loss_b(x3)));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    CHECK(x3.grad()[i] == doctest::Approx(x1.grad()[i] + x2.grad()[i]).epsilon(1e-12));
  }
}

TEST_CASE("identical inputs, parameters and seed give bit-identical outputs") {
  const auto g = testsupport::mlp_graph(6, 8, 4);
  models::Model<float> a(g, 42), b(g, 42);
  const auto x = random_tensor<float>(Shape{3, 6}, 8);
  const auto ya = a.forward(x).value();
  CHECK(ya == b.forward(x).value());
  CHECK(ya == a.forward(x).value());
  models::Model<float> c(g, 43);
  CHECK_FALSE(ya == c.forward(x).value());
}

TEST_CASE("recording an op without a gradient rule is rejected") {
  auto x = Var<double>::leaf(Tensor<double>(Shape{2}, 1.0), true);
  CHECK_THROWS_AS(record<double>("no_such_op", Tensor<double>(Shape{2}, 0.0), {x}), ArgumentError);
  CHECK_THROWS_AS(GradRegistry<double>::instance().rule("no_such_op"), ArgumentError);
  CHECK(GradRegistry<double>::instance().contains("sign_ste"));
}

TEST_CASE("no-grad scope records constants") {
  auto x = Var<double>::leaf(Tensor<double>(Shape{2}, 1.0), true);
  NoGradGuard guard;
  const auto y = ops::gelu(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("non-finite activations raise a numeric fault naming the layer") {
  models::Model<double> m(testsupport::mlp_graph(3, 3, 2), 1);
  m.params().at("fc2.weight").mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  const auto x = random_tensor<double>(Shape{2, 3}, 1);
  try {
    m.forward(x);
    FAIL("expected a numeric fault");
  } catch (const NumericFault& e) {
    CHECK(e.layer() == "fc2");
    CHECK(e.exit_code() == 3);
  }
}

TEST_CASE("adam applies decoupled weight decay") {
  models::Model<double> m(testsupport::linear_graph(2, 2), 3);
  auto& w = m.params().at("fc.weight");
  const Tensor<double> before = w.value();
  for (const auto& name : m.params().names()) {
    auto& p = m.params().at(name);
    const Shape s = p.value().shape();
    p.node()->grad = Tensor<double>(s, 0.0);
  }
  train::AdamConfig cfg;
  cfg.weight_decay = 0.1;
  train::Adam<double> adam(cfg);
  adam.step(m.params(), 0.01);
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(w.value()[i] == doctest::Approx(before[i] * (1 - 0.01 * 0.1)).epsilon(1e-12));
  }
  CHECK(adam.steps() == 1);
}

TEST_CASE("linear decay reaches zero at the end of training") {
  CHECK(train::linear_decay(5e-4, 0, 100) == doctest::Approx(5e-4));
  CHECK(train::linear_decay(5e-4, 50, 100) == doctest::Approx(2.5e-4));
  CHECK(train::linear_decay(5e-4, 100, 100) == doctest::Approx(0.0));
}
