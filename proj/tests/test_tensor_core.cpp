#include <cmath>
#include <random>

#include "doctest.h"
#include "inca/graph.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

using namespace inca;
using inca::testing::Builder;
using inca::testing::grad_check;
using inca::testing::op_cases;
using inca::testing::random_tensor;

namespace {

Tensor64 eval(const Builder& build, std::vector<Tensor64> inputs) {
  Graph<double> g;
  std::vector<Var> vs;
  for (auto& t : inputs) vs.push_back(g.constant(t));
  return g.value(build(g, vs));
}

std::size_t dim(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 5) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

TEST_CASE("matmul examples") {
  auto mm = [](Graph<double>& g, const std::vector<Var>& v) { return g.matmul(v[0], v[1]); };
  const auto r1 = eval(mm, {Tensor64::identity(2), Tensor64::matrix({{1, 2}, {3, 4}})});
  CHECK(bit_equal(r1, Tensor64::matrix({{1, 2}, {3, 4}})));
  const auto r2 = eval(mm, {Tensor64::matrix({{1, 0}, {0, 0}}), Tensor64::matrix({{5}, {7}})});
  CHECK(bit_equal(r2, Tensor64::matrix({{5}, {0}})));

  std::mt19937_64 rng(7);
  const auto a = random_tensor({3, 4}, rng);
  const auto b = random_tensor({4, 2}, rng);
  const auto r3 = eval(mm, {a, b});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      CHECK(r3(i, j) == doctest::Approx(s).epsilon(1e-14));
    }

  Graph<double> g;
  auto x = g.constant(Tensor64({2, 3}));
  auto y = g.constant(Tensor64({2, 3}));
  CHECK_THROWS_AS(g.matmul(x, y), Error);
}

TEST_CASE("matmul kernel matches triple loop on tile and remainder paths") {
  std::mt19937_64 rng(11);
  for (auto [p, q, r] : {std::tuple{9, 7, 37}, {4, 3, 32}, {1, 1, 1}, {17, 33, 70}}) {
    const auto a = tensor_cast<float>(random_tensor({std::size_t(p), std::size_t(q)}, rng));
    const auto b = tensor_cast<float>(random_tensor({std::size_t(q), std::size_t(r)}, rng));
    Graph<float> g;
    const auto& c = g.value(g.matmul(g.constant(a), g.constant(b)));
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < r; ++j) {
        float s = 0.0f;
        for (int k = 0; k < q; ++k) s += a(i, k) * b(k, j);
        // same accumulation order, so exact
        CHECK(c(i, j) == s);
      }
  }
}

TEST_CASE("matmul rows do not depend on the other rows") {
  std::mt19937_64 rng(3);
  const auto a = tensor_cast<float>(random_tensor({13, 40}, rng));
  const auto b = tensor_cast<float>(random_tensor({40, 70}, rng));
  Graph<float> g;
  const auto& full = g.value(g.matmul(g.constant(a), g.constant(b)));
  for (std::size_t i = 0; i < 13; ++i) {
    Graph<float> h;
    auto row = h.slice_rows(h.constant(a), i, i + 1);
    const auto& one = h.value(h.matmul(row, h.constant(b)));
    CHECK(std::memcmp(one.ptr(), full.ptr() + i * 70, 70 * sizeof(float)) == 0);
  }
}

TEST_CASE("softmax_rows examples") {
  auto sm = [](Graph<double>& g, const std::vector<Var>& v) { return g.softmax_rows(v[0]); };
  const auto u = eval(sm, {Tensor64::row({0, 0, 0})});
  for (int j = 0; j < 3; ++j) CHECK(u[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto big = eval(sm, {Tensor64::row({1000, 0})});
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);
  CHECK(big.all_finite());
  const auto logs = eval(sm, {Tensor64::row({std::log(1.0), std::log(2.0), std::log(3.0)})});
  CHECK(logs[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-14));
  CHECK(logs[1] == doctest::Approx(2.0 / 6.0).epsilon(1e-14));
  CHECK(logs[2] == doctest::Approx(3.0 / 6.0).epsilon(1e-14));
}

TEST_CASE("softmax_rows rows sum to one and are shift invariant") {
  std::mt19937_64 rng(5);
  auto sm = [](Graph<double>& g, const std::vector<Var>& v) { return g.softmax_rows(v[0]); };
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t p = dim(rng), q = dim(rng, 1, 12);
    auto x = random_tensor({p, q}, rng, 5.0);
    const auto y = eval(sm, {x});
    auto shifted = x;
    const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
    for (std::size_t i = 0; i < q; ++i) shifted(0, i) += c;
    const auto ys = eval(sm, {shifted});
    for (std::size_t i = 0; i < p; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < q; ++j) {
        CHECK(y(i, j) >= 0.0);
        s += y(i, j);
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    for (std::size_t j = 0; j < q; ++j) CHECK(std::abs(ys(0, j) - y(0, j)) < 1e-6);
  }
}

TEST_CASE("layer_norm examples") {
  auto ln = [](Graph<double>& g, const std::vector<Var>& v) {
    return g.layer_norm(v[0], v[1], v[2]);
  };
  const auto c = eval(ln, {Tensor64::row({5, 5, 5, 5}), Tensor64::filled({4}, 1), Tensor64({4})});
  for (int j = 0; j < 4; ++j) CHECK(c[j] == 0.0);

  // [1, -1]: mean 0, variance 1, so output = x / sqrt(1 + 1e-5).
  const auto pm = eval(ln, {Tensor64::row({1, -1}), Tensor64::filled({2}, 1), Tensor64({2})});
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(pm[0] == doctest::Approx(expect).epsilon(1e-14));
  CHECK(pm[1] == doctest::Approx(-expect).epsilon(1e-14));

  std::mt19937_64 rng(1);
  const auto beta = random_tensor({6}, rng);
  const auto collapsed = eval(ln, {random_tensor({3, 6}, rng), Tensor64({6}), beta});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(collapsed(i, j) == beta[j]);
}

TEST_CASE("layer_norm pre-affine moments") {
  std::mt19937_64 rng(9);
  auto ln = [](Graph<double>& g, const std::vector<Var>& v) {
    return g.layer_norm(v[0], v[1], v[2]);
  };
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = dim(rng, 2, 32);
    auto x = random_tensor({1, d}, rng, 3.0);
    double m = 0, v = 0;
    for (double e : x.data()) m += e;
    m /= double(d);
    for (double e : x.data()) v += (e - m) * (e - m);
    v /= double(d);
    if (v < 1e-3) continue;
    const auto y = eval(ln, {x, Tensor64::filled({d}, 1), Tensor64({d})});
    double ym = 0, yv = 0;
    for (double e : y.data()) ym += e;
    ym /= double(d);
    for (double e : y.data()) yv += (e - ym) * (e - ym);
    yv /= double(d);
    CHECK(std::abs(ym) < 1e-6);
    CHECK(std::abs(yv - 1.0) < 1e-4);
  }
}

TEST_CASE("mean_rows examples") {
  auto mp = [](Graph<double>& g, const std::vector<Var>& v) { return g.mean_rows(v[0]); };
  const auto one = Tensor64::row({3, -1, 2});
  CHECK(bit_equal(eval(mp, {one}), one));
  CHECK(bit_equal(eval(mp, {Tensor64::matrix({{1, 3}, {3, 1}})}), Tensor64::row({2, 2})));
  std::mt19937_64 rng(2);
  const auto a = random_tensor({5, 3}, rng);
  const auto m = eval(mp, {a});
  for (std::size_t j = 0; j < 3; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < 5; ++i) s += a(i, j);
    CHECK(m[j] == doctest::Approx(s / 5.0).epsilon(1e-14));
  }
  Graph<double> g;
  CHECK_THROWS_AS(g.mean_rows(g.constant(Tensor64({0, 3}))), Error);
}

TEST_CASE("cross_entropy examples") {
  auto ce = [](int label) {
    return [label](Graph<double>& g, const std::vector<Var>& v) {
      const int labels[] = {label};
      return g.cross_entropy(v[0], labels);
    };
  };
  CHECK(eval(ce(0), {Tensor64::row({0, 0})})[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(eval(ce(0), {Tensor64::row({10, -10})})[0] < 1e-8);
  // log(e + e^2 + e^3) - 3
  const double expect = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  CHECK(eval(ce(2), {Tensor64::row({1, 2, 3})})[0] == doctest::Approx(expect).epsilon(1e-14));
  CHECK(expect == doctest::Approx(0.40761).epsilon(1e-4));
  CHECK_THROWS_AS(eval(ce(3), {Tensor64::row({1, 2, 3})}), Error);
  CHECK_THROWS_AS(eval(ce(-1), {Tensor64::row({1, 2, 3})}), Error);
}

TEST_CASE("bce_with_logits examples") {
  auto bce = [](double target) {
    return [target](Graph<double>& g, const std::vector<Var>& v) {
      return g.bce_with_logits(v[0], Tensor64({1, 1}, {target}));
    };
  };
  CHECK(eval(bce(1), {Tensor64::row({0})})[0] == doctest::Approx(std::log(2.0)));
  CHECK(eval(bce(0), {Tensor64::row({0})})[0] == doctest::Approx(std::log(2.0)));
  const double expect = -std::log(1.0 / (1.0 + std::exp(-2.0)));
  CHECK(eval(bce(1), {Tensor64::row({2})})[0] == doctest::Approx(expect).epsilon(1e-14));
  CHECK(expect == doctest::Approx(0.12693).epsilon(1e-4));
  // stable at extreme logits
  CHECK(std::isfinite(eval(bce(0), {Tensor64::row({800})})[0]));
  CHECK(eval(bce(0), {Tensor64::row({800})})[0] == doctest::Approx(800.0));
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(4);
  const auto w = random_tensor({1, 5}, rng);
  const auto x = random_tensor({1, 5}, rng);
  {
    Graph<double> g;
    auto wv = g.param(w);
    auto loss = g.sum(g.mul(wv, g.constant(x)));
    g.backward(loss);
    CHECK(bit_equal(*g.grad(wv), x));
  }
  {
    Graph<double> g;
    auto v = g.param(random_tensor({1, 6}, rng));
    auto loss = g.sum(g.softmax_rows(v));
    g.backward(loss);
    for (double e : g.grad(v)->data()) CHECK(std::abs(e) < 1e-15);
  }
  {
    Graph<double> g;
    auto a = g.param(w);
    auto unused = g.param(x);
    g.backward(g.sum(a));
    CHECK(g.grad(unused) == nullptr);
    CHECK_THROWS_AS(g.backward(a), Error);
  }
}

TEST_CASE("backward is bit-deterministic") {
  std::mt19937_64 rng(8);
  const auto a = tensor_cast<float>(random_tensor({4, 6}, rng));
  const auto b = tensor_cast<float>(random_tensor({6, 5}, rng));
  auto run = [&] {
    Graph<float> g;
    auto av = g.param(a);
    auto bv = g.param(b);
    auto h = g.softmax_rows(g.matmul(av, bv));
    auto y = g.layer_norm(h, g.constant(Tensor::filled({5}, 1.f)), g.constant(Tensor({5})));
    const int labels[] = {0, 1, 2, 3};
    g.backward(g.cross_entropy(g.add(y, g.matmul(av, bv)), labels));
    return std::pair{*g.grad(av), *g.grad(bv)};
  };
  auto [ga1, gb1] = run();
  auto [ga2, gb2] = run();
  CHECK(bit_equal(ga1, ga2));
  CHECK(bit_equal(gb1, gb2));
}

TEST_CASE("finite-difference gradient checks over 100 random shapes per op") {
  std::mt19937_64 rng(2024);
  for (const auto& op : op_cases()) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      auto [build, inputs] = op.make(rng);
      auto res = grad_check(build, inputs, std::vector<bool>(inputs.size(), true), rng);
      worst = std::max(worst, res.max_rel_error);
    }
    INFO(std::string(op.name) << " worst relative error " << worst);
    CHECK(worst < 1e-6);
  }
}
