#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "weam/gradcheck.hpp"
#include "weam/rng.hpp"
#include "weam/tensor.hpp"

using weam::Graph;
using weam::Rng;
using weam::Tensor;

namespace {

Tensor<double> random_tensor(weam::Shape shape, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  for (auto& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul basics") {
  Graph<double> g;
  SECTION("identity") {
    int id = g.constant({2, 2}, {1, 0, 0, 1});
    int a = g.constant({2, 2}, {1, 2, 3, 4});
    int c = g.matmul(id, a);
    CHECK(g.val(c).values == std::vector<double>{1, 2, 3, 4});
  }
  SECTION("hand dot product") {
    int a = g.constant({1, 2}, {1, 2});
    int b = g.constant({2, 1}, {3, 4});
    int c = g.matmul(a, b);
    CHECK(g.val(c).values == std::vector<double>{11});
  }
  SECTION("zero annihilator") {
    Rng rng(7);
    int z = g.constant(Tensor<double>::zeros({2, 3}));
    int b = g.constant(random_tensor({3, 4}, rng));
    int c = g.matmul(z, b);
    CHECK(g.val(c).shape == weam::Shape{2, 4});
    for (double v : g.val(c).values) CHECK(v == 0.0);
  }
  SECTION("shape mismatch names both shapes") {
    int a = g.constant(Tensor<double>::zeros({2, 3}));
    int b = g.constant(Tensor<double>::zeros({2, 3}));
    CHECK_THROWS_MATCHES(g.matmul(a, b), weam::dimension_error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("(2x3)")));
  }
}

TEST_CASE("softmax values") {
  Graph<double> g;
  SECTION("uniform over equal logits") {
    int x = g.constant({3}, {1, 1, 1});
    int y = g.softmax(x, 0);
    for (double v : g.val(y).values) CHECK(v == Catch::Approx(1.0 / 3).margin(1e-12));
  }
  SECTION("large logits do not overflow") {
    int x = g.constant({2}, {1000, 1000});
    int y = g.softmax(x, 0);
    CHECK(g.val(y).values[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(g.val(y).values[1] == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("quarter/three-quarters") {
    int x = g.constant({2}, {0.0, std::log(3.0)});
    int y = g.softmax(x, 0);
    CHECK(g.val(y).values[0] == Catch::Approx(0.25).margin(1e-6));
    CHECK(g.val(y).values[1] == Catch::Approx(0.75).margin(1e-6));
  }
  SECTION("NaN input rejected") {
    int x = g.constant({2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(g.softmax(x, 0), weam::numeric_error);
  }
  SECTION("rows of a matrix, axis 1") {
    int x = g.constant({2, 3}, {1, 2, 3, 5, 5, 5});
    int y = g.softmax(x, 1);
    double s0 = g.val(y).values[0] + g.val(y).values[1] + g.val(y).values[2];
    CHECK(s0 == Catch::Approx(1.0).margin(1e-9));
    CHECK(g.val(y).values[3] == Catch::Approx(1.0 / 3).margin(1e-9));
  }
}

TEST_CASE("softmax invariants on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t n = 1 + rng.below(8);
    Tensor<double> x = random_tensor({n}, rng, -4, 4);
    Graph<double> g;
    int y = g.softmax(g.constant(x), 0);
    double sum = 0;
    for (double v : g.val(y).values) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    // additive shift invariance
    double shift = rng.uniform(-50, 50);
    Tensor<double> xs = x;
    for (auto& v : xs.values) v += shift;
    Graph<double> g2;
    int y2 = g2.softmax(g2.constant(xs), 0);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(std::abs(g.val(y).values[i] - g2.val(y2).values[i]) < 1e-6);
  }
}

TEST_CASE("elementwise ops") {
  Graph<double> g;
  SECTION("sigmoid at zero") {
    int y = g.sigmoid(g.constant({1}, {0.0}));
    CHECK(g.val(y).values[0] == 0.5);
  }
  SECTION("tanh at zero") {
    int y = g.tanh(g.constant({1}, {0.0}));
    CHECK(g.val(y).values[0] == 0.0);
  }
  SECTION("add") {
    int y = g.add(g.constant({2}, {1, 2}), g.constant({2}, {3, 4}));
    CHECK(g.val(y).values == std::vector<double>{4, 6});
  }
  SECTION("scalar broadcast both ways") {
    int s = g.scalar(2.0);
    int x = g.constant({3}, {1, 2, 3});
    CHECK(g.val(g.mul(s, x)).values == std::vector<double>{2, 4, 6});
    CHECK(g.val(g.div(x, s)).values == std::vector<double>{0.5, 1.0, 1.5});
  }
  SECTION("log rejects non-positive input") {
    CHECK_THROWS_AS(g.log(g.constant({1}, {0.0})), weam::numeric_error);
    CHECK_THROWS_AS(g.log(g.constant({1}, {-1.0})), weam::numeric_error);
  }
  SECTION("shape mismatch") {
    int a = g.constant(Tensor<double>::zeros({2}));
    int b = g.constant(Tensor<double>::zeros({3}));
    CHECK_THROWS_AS(g.add(a, b), weam::dimension_error);
  }
  SECTION("clamp and its dead zone") {
    Tensor<double> x({3}, {-20, 0, 50});
    x.requires_grad = true;
    Graph<double> gg;
    int xi = gg.leaf(x);
    int y = gg.clamp(xi, -10, 10);
    CHECK(gg.val(y).values == std::vector<double>{-10, 0, 10});
    gg.backward(gg.sum(y));
    CHECK(x.grad == std::vector<double>{0, 1, 0});
  }
}

TEST_CASE("concat") {
  Graph<double> g;
  SECTION("two rows") {
    int a = g.constant({1, 1}, {1});
    int b = g.constant({1, 1}, {2});
    int c = g.concat({a, b}, 0);
    CHECK(g.val(c).shape == weam::Shape{2, 1});
    CHECK(g.val(c).values == std::vector<double>{1, 2});
  }
  SECTION("single part is identity") {
    int a = g.constant({2, 2}, {1, 2, 3, 4});
    int c = g.concat({a}, 0);
    CHECK(g.val(c).values == g.val(a).values);
  }
  SECTION("extent arithmetic on axis 1") {
    int a = g.constant(Tensor<double>::zeros({2, 3}));
    int b = g.constant(Tensor<double>::zeros({2, 5}));
    int c = g.concat({a, b}, 1);
    CHECK(g.val(c).shape == weam::Shape{2, 8});
  }
  SECTION("inconsistent shapes") {
    int a = g.constant(Tensor<double>::zeros({2, 3}));
    int b = g.constant(Tensor<double>::zeros({3, 3}));
    CHECK_THROWS_AS(g.concat({a, b}, 1), weam::dimension_error);
  }
}

TEST_CASE("backward basics") {
  SECTION("sum gives ones") {
    Tensor<double> x({3}, {5, 6, 7});
    x.requires_grad = true;
    Graph<double> g;
    g.backward(g.sum(g.leaf(x)));
    CHECK(x.grad == std::vector<double>{1, 1, 1});
  }
  SECTION("x squared") {
    Tensor<double> x({1}, {2});
    x.requires_grad = true;
    Graph<double> g;
    int xi = g.leaf(x);
    g.backward(g.sum(g.mul(xi, xi)));
    CHECK(x.grad == std::vector<double>{4});
  }
  SECTION("reuse doubles the gradient") {
    Tensor<double> x({2}, {1, 2});
    x.requires_grad = true;
    Graph<double> g;
    int xi = g.leaf(x);
    int y = g.scale(xi, 3.0);
    g.backward(g.add(g.sum(y), g.sum(y)));
    CHECK(x.grad == std::vector<double>{6, 6});
  }
  SECTION("non-scalar loss rejected") {
    Tensor<double> x({2}, {1, 2});
    x.requires_grad = true;
    Graph<double> g;
    int xi = g.leaf(x);
    CHECK_THROWS_AS(g.backward(xi), weam::contract_error);
  }
  SECTION("backward accumulates into existing grad") {
    Tensor<double> x({2}, {1, 2});
    x.requires_grad = true;
    Graph<double> g;
    g.backward(g.sum(g.leaf(x)));
    Graph<double> g2;
    g2.backward(g2.sum(g2.leaf(x)));
    CHECK(x.grad == std::vector<double>{2, 2});
  }
}

TEST_CASE("gather, repeat and sum") {
  Graph<double> g;
  SECTION("gather rows with repeats accumulates") {
    Tensor<double> m({3, 2}, {1, 2, 3, 4, 5, 6});
    m.requires_grad = true;
    Graph<double> gg;
    int mi = gg.leaf(m);
    int y = gg.gather_rows(mi, {1, 1, 0});
    CHECK(gg.val(y).values == std::vector<double>{3, 4, 3, 4, 1, 2});
    gg.backward(gg.sum(y));
    CHECK(m.grad == std::vector<double>{1, 1, 2, 2, 0, 0});
  }
  SECTION("gather rows rejects out-of-range id") {
    int m = g.constant(Tensor<double>::zeros({3, 2}));
    CHECK_THROWS_AS(g.gather_rows(m, {3}), weam::vocab_error);
  }
  SECTION("empty gather gives 0 x d") {
    int m = g.constant(Tensor<double>::zeros({3, 2}));
    int y = g.gather_rows(m, {});
    CHECK(g.val(y).shape == weam::Shape{0, 2});
  }
  SECTION("gather cols") {
    int m = g.constant({2, 3}, {1, 2, 3, 4, 5, 6});
    int y = g.gather_cols(m, {2, 0});
    CHECK(g.val(y).values == std::vector<double>{3, 1, 6, 4});
  }
  SECTION("repeat rows sums back") {
    Tensor<double> r({1, 2}, {1, 2});
    r.requires_grad = true;
    Graph<double> gg;
    int y = gg.repeat_rows(gg.leaf(r), 3);
    CHECK(gg.val(y).shape == weam::Shape{3, 2});
    gg.backward(gg.sum(y));
    CHECK(r.grad == std::vector<double>{3, 3});
  }
}

TEST_CASE("layer norm forward statistics") {
  Rng rng(3);
  Tensor<double> x = random_tensor({4, 64}, rng, -2, 2);
  Graph<double> g;
  int gain = g.constant(Tensor<double>::full({1, 64}, 1.0));
  int bias = g.constant(Tensor<double>::zeros({1, 64}));
  int y = g.layer_norm(g.constant(x), gain, bias);
  for (std::size_t i = 0; i < 4; ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 64; ++j) mean += g.val(y).at(i, j);
    mean /= 64;
    for (std::size_t j = 0; j < 64; ++j) {
      double d = g.val(y).at(i, j) - mean;
      var += d * d;
    }
    var /= 64;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("grad_check matches finite differences per primitive") {
  Rng rng(42);
  auto check_unary = [&](auto op, double lo, double hi) {
    for (int t = 0; t < 3; ++t) {
      weam::Shape shape = {1 + rng.below(4), 1 + rng.below(6)};
      Tensor<double> x = random_tensor(shape, rng, lo, hi);
      x.requires_grad = true;
      auto f = [&](bool with_grad) {
        Graph<double> g;
        int y = op(g, g.leaf(x));
        int loss = g.sum(y);
        if (with_grad) g.backward(loss);
        return g.val(loss).values[0];
      };
      CHECK(weam::grad_check(f, {&x}) < 1e-6);
    }
  };
  SECTION("tanh") {
    check_unary([](auto& g, int x) { return g.tanh(x); }, -2, 2);
  }
  SECTION("sigmoid") {
    check_unary([](auto& g, int x) { return g.sigmoid(x); }, -2, 2);
  }
  SECTION("exp") {
    check_unary([](auto& g, int x) { return g.exp(x); }, -2, 2);
  }
  SECTION("log") {
    check_unary([](auto& g, int x) { return g.log(x); }, 0.1, 3);
  }
  SECTION("softmax-weighted sum") {
    check_unary(
        [](auto& g, int x) {
          int p = g.softmax(x, 1);
          return g.mul(p, p);
        },
        -3, 3);
  }
  SECTION("layer norm") {
    Tensor<double> x = random_tensor({3, 8}, rng);
    Tensor<double> gain = random_tensor({1, 8}, rng, 0.5, 1.5);
    Tensor<double> bias = random_tensor({1, 8}, rng);
    x.requires_grad = gain.requires_grad = bias.requires_grad = true;
    Tensor<double> w = random_tensor({3, 8}, rng);
    auto f = [&](bool with_grad) {
      Graph<double> g;
      int y = g.layer_norm(g.leaf(x), g.leaf(gain), g.leaf(bias));
      int loss = g.sum(g.mul(y, g.constant(w)));
      if (with_grad) g.backward(loss);
      return g.val(loss).values[0];
    };
    CHECK(weam::grad_check(f, {&x, &gain, &bias}) < 1e-6);
  }
}

TEST_CASE("grad_check through matmul compositions") {
  Rng rng(9);
  SECTION("linear map") {
    Tensor<double> w = random_tensor({4, 3}, rng);
    Tensor<double> x = random_tensor({3, 2}, rng);
    w.requires_grad = x.requires_grad = true;
    auto f = [&](bool with_grad) {
      Graph<double> g;
      int loss = g.sum(g.matmul(g.leaf(w), g.leaf(x)));
      if (with_grad) g.backward(loss);
      return g.val(loss).values[0];
    };
    CHECK(weam::grad_check(f, {&w, &x}) < 1e-6);
  }
  SECTION("matmul_nt agrees with matmul of the transpose") {
    Tensor<double> a = random_tensor({2, 5}, rng);
    Tensor<double> b = random_tensor({3, 5}, rng);
    a.requires_grad = b.requires_grad = true;
    auto f = [&](bool with_grad) {
      Graph<double> g;
      int y = g.matmul_nt(g.leaf(a), g.leaf(b));
      int loss = g.sum(g.mul(y, y));
      if (with_grad) g.backward(loss);
      return g.val(loss).values[0];
    };
    CHECK(weam::grad_check(f, {&a, &b}) < 1e-6);
    Graph<double> g;
    int y = g.matmul_nt(g.leaf(a), g.leaf(b));
    CHECK(g.val(y).shape == weam::Shape{2, 3});
    double manual = 0;
    for (std::size_t j = 0; j < 5; ++j) manual += a.at(0, j) * b.at(1, j);
    CHECK(g.val(y).at(0, 1) == Catch::Approx(manual).margin(1e-12));
  }
  SECTION("softmax then log then pick") {
    Tensor<double> w = random_tensor({1, 6}, rng, -2, 2);
    w.requires_grad = true;
    auto f = [&](bool with_grad) {
      Graph<double> g;
      int lp = g.log_softmax(g.leaf(w), 1);
      int loss = g.scale(g.sum(g.gather_cols(lp, {2})), -1.0);
      if (with_grad) g.backward(loss);
      return g.val(loss).values[0];
    };
    CHECK(weam::grad_check(f, {&w}) < 1e-5);
  }
}

TEST_CASE("random primitive compositions match finite differences") {
  // ten random shapes through a mixed pipeline
  Rng rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
    Tensor<double> x = random_tensor({r, c}, rng, -1.5, 1.5);
    Tensor<double> w = random_tensor({c, c}, rng, -0.8, 0.8);
    x.requires_grad = w.requires_grad = true;
    auto f = [&](bool with_grad) {
      Graph<double> g;
      int xi = g.leaf(x);
      int h = g.tanh(g.matmul(xi, g.leaf(w)));
      int p = g.softmax(h, 1);
      int mixed = g.add(g.mul(p, h), g.scale(g.sigmoid(xi), 0.5));
      int loss = g.sum(mixed);
      if (with_grad) g.backward(loss);
      return g.val(loss).values[0];
    };
    CHECK(weam::grad_check(f, {&x, &w}) < 1e-4);
  }
}

TEST_CASE("gradient accumulation equals batch sum") {
  Rng rng(5);
  Tensor<double> w = random_tensor({3, 3}, rng);
  w.requires_grad = true;
  std::vector<Tensor<double>> items;
  for (int i = 0; i < 4; ++i) items.push_back(random_tensor({1, 3}, rng));

  // one graph summing all items
  w.grad.clear();
  {
    Graph<double> g;
    int wi = g.leaf(w);
    std::vector<int> losses;
    for (auto& it : items)
      losses.push_back(g.sum(g.tanh(g.matmul(g.constant(it), wi))));
    int total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = g.add(total, losses[i]);
    g.backward(total);
  }
  std::vector<double> joint = w.grad;

  // independent graphs accumulating one by one
  w.grad.clear();
  for (auto& it : items) {
    Graph<double> g;
    g.backward(g.sum(g.tanh(g.matmul(g.constant(it), g.leaf(w)))));
  }
  for (std::size_t i = 0; i < joint.size(); ++i)
    CHECK(std::abs(joint[i] - w.grad[i]) < 1e-10);
}

TEST_CASE("grad_check detects nondeterminism") {
  Rng rng(1);
  Tensor<double> x({1}, {0.5});
  x.requires_grad = true;
  auto f = [&](bool) { return rng.uniform(); };
  CHECK_THROWS_AS(weam::grad_check(f, {&x}), weam::determinism_error);
}
