#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "inca/adapters.hpp"
#include "inca/error.hpp"
#include "inca/random.hpp"

using namespace inca;

namespace {

AdapterSpec make_spec(AdapterKind kind, std::size_t d, std::size_t heads, std::size_t m, int classes) {
  AdapterSpec s;
  s.kind = kind;
  s.dim = d;
  s.heads = heads;
  s.queries = m;
  s.classes = classes;
  return s;
}

Tensor random_map(std::size_t d, std::size_t t, std::uint64_t seed, double scale = 1.0) {
  Tensor z({d, t});
  Rng rng(seed);
  fill_normal(z.data(), rng, scale);
  return z;
}

Adapter random_adapter(AdapterSpec spec, std::uint64_t seed) {
  auto a = init_adapter(spec, seed);
  Rng rng(seed ^ 0xfeed);
  for (auto& nt : named_tensors(a)) fill_normal(nt.tensor->data(), rng, 0.3);
  return a;
}

Tensor permute_tokens(const Tensor& z, const std::vector<std::size_t>& perm) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) out(i, j) = z(i, perm[j]);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("cross_attention with a single token ignores the query") {
  auto a = random_adapter(make_spec(AdapterKind::kInCA, 8, 2, 3, 2), 1);
  const auto z = random_map(8, 1, 2);
  const auto out = cross_attention(z, a.attn, a.attn.queries);
  const auto expect = matmul(a.attn.w_o, matmul(a.attn.w_v, z));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t i = 0; i < 8; ++i) CHECK(out(r, i) == doctest::Approx(expect[i]).epsilon(1e-5));
}

TEST_CASE("cross_attention is invariant to token duplication") {
  auto a = random_adapter(make_spec(AdapterKind::kInCA, 8, 4, 2, 2), 3);
  const auto z = random_map(8, 5, 4);
  Tensor zz({8, 10});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 10; ++j) zz(i, j) = z(i, j % 5);
  CHECK(max_abs_diff(cross_attention(z, a.attn, a.attn.queries),
                     cross_attention(zz, a.attn, a.attn.queries)) < 1e-5);
}

TEST_CASE("single-head cross_attention equals the collapsed layer") {
  double worst = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const std::size_t d = 4 + trial % 13, t = 1 + trial % 9;
    auto a = random_adapter(make_spec(AdapterKind::kInCA, d, 1, 1, 2), 100 + trial);
    a.attn.w_o = Tensor::identity(d);
    const auto z = random_map(d, t, 200 + trial);
    const auto full = cross_attention(z, a.attn, a.attn.queries);
    const auto cp = collapse_query(a.attn.w_q, a.attn.w_k, a.attn.queries, a.attn.w_v,
                                   1.0 / std::sqrt(double(d)));
    worst = std::max(worst, max_abs_diff(full, collapse_apply(z, cp)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("collapse examples") {
  const auto q = Tensor64::row({0.5, -1.0, 2.0});
  const auto i3 = Tensor64::identity(3);
  CHECK(bit_equal(collapse_query(i3, i3, q, i3).q_star, q));

  const auto zero = collapse_query(i3, i3, Tensor64({1, 3}), i3);
  const auto w = collapse_weights(Tensor64::matrix({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}}), zero.q_star);
  for (double v : w.data()) CHECK(v == doctest::Approx(1.0 / 3));

  // identical tokens
  const auto same = Tensor64::matrix({{1, 1, 1}, {2, 2, 2}, {-1, -1, -1}});
  CollapsedParams<double> cp{q, Tensor64::matrix({{1, 0, 1}, {0, 2, 0}})};
  const auto out = collapse_apply(same, cp);
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(4.0));

  // saturated score: margin >= 20 in favor of token 1
  const auto z = Tensor64::matrix({{0, 25, 1}, {1, 0, 0}, {0, 0, 3}});
  CollapsedParams<double> sat{Tensor64::row({1, 0, 0}), Tensor64::identity(3)};
  const auto o = collapse_apply(z, sat);
  CHECK(std::abs(o[0] - 25) < 1e-6);
  CHECK(std::abs(o[1]) < 1e-6);
  CHECK(std::abs(o[2]) < 1e-6);
  const auto sw = collapse_weights(z, sat.q_star);
  CHECK(sw[1] > 1 - 1e-10);

  // q* orthogonal to every token -> uniform average
  const auto zo = Tensor64::matrix({{0, 0}, {1, -3}, {2, 5}});
  CollapsedParams<double> orth{Tensor64::row({1, 0, 0}), Tensor64::identity(3)};
  const auto avg = collapse_apply(zo, orth);
  CHECK(avg[1] == doctest::Approx(-1.0));
  CHECK(avg[2] == doctest::Approx(3.5));
}

TEST_CASE("inca_forward basics") {
  SUBCASE("zero head gives bias") {
    auto a = init_adapter(make_spec(AdapterKind::kInCA, 16, 4, 1, 5), 9);
    a.head.bias = Tensor::row({0.1f, -0.2f, 0.3f, 0.0f, 2.0f});
    const auto out = inca_forward(random_map(16, 7, 1), a);
    CHECK(bit_equal(out, a.head.bias));
  }
  SUBCASE("m=1 is head(norm(v_cross))") {
    auto a = random_adapter(make_spec(AdapterKind::kInCA, 8, 2, 1, 3), 4);
    const auto z = random_map(8, 6, 5);
    const auto v = cross_attention(z, a.attn, a.attn.queries);
    Graph<float> g;
    const auto n = g.layer_norm(g.constant(v), g.constant(a.head.gamma), g.constant(a.head.beta));
    const auto expect = g.value(g.add_row(g.matmul_nt(n, g.constant(a.head.weight)), g.constant(a.head.bias)));
    CHECK(bit_equal(inca_forward(z, a), expect));
  }
  SUBCASE("token permutation invariance") {
    for (std::size_t m : {1u, 2u, 4u, 16u}) {
      auto a = random_adapter(make_spec(AdapterKind::kInCA, 16, 4, m, 4), 10 + m);
      const auto z = random_map(16, 9, 11);
      std::vector<std::size_t> perm(9);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), std::mt19937_64(m));
      CHECK(max_abs_diff(inca_forward(z, a), inca_forward(permute_tokens(z, perm), a)) < 1e-5);
    }
  }
  SUBCASE("d not divisible by heads") {
    CHECK_THROWS_AS(init_adapter(make_spec(AdapterKind::kInCA, 10, 4, 1, 2), 0), Error);
  }
}

TEST_CASE("open_inca isolation") {
  auto a = random_adapter(make_spec(AdapterKind::kOpenInCA, 16, 4, 0, 6), 21);
  std::vector<Tensor> zs;
  for (int s = 0; s < 5; ++s) zs.push_back(random_map(16, 8, 300 + s));
  std::vector<const Tensor*> ptrs;
  for (auto& z : zs) ptrs.push_back(&z);
  const auto full = batch_logits(a, ptrs);

  for (std::size_t i = 0; i < 6; ++i) {
    Adapter one = a;
    one.spec.classes = 1;
    one.attn.queries = Tensor({1, 16});
    one.head.weight = Tensor({1, 16});
    for (std::size_t k = 0; k < 16; ++k) {
      one.attn.queries[k] = a.attn.queries(i, k);
      one.head.weight[k] = a.head.weight(i, k);
    }
    one.head.bias = Tensor::row({a.head.bias[i]});
    one.class_ids = {a.class_ids[i]};
    const auto single = batch_logits(one, ptrs);
    for (std::size_t s = 0; s < zs.size(); ++s)
      CHECK(std::memcmp(&single(s, 0), &full(s, i), sizeof(float)) == 0);
  }

  // perturbing class j never changes logit i
  Adapter b = a;
  for (std::size_t k = 0; k < 16; ++k) {
    b.attn.queries(2, k) += 1.0f;
    b.head.weight(2, k) *= -3.0f;
  }
  b.head.bias[2] = 7.0f;
  const auto pert = batch_logits(b, ptrs);
  for (std::size_t s = 0; s < zs.size(); ++s)
    for (std::size_t i = 0; i < 6; ++i)
      if (i != 2) CHECK(std::memcmp(&pert(s, i), &full(s, i), sizeof(float)) == 0);
}

TEST_CASE("open_inca with one class matches single-query InCA") {
  auto o = random_adapter(make_spec(AdapterKind::kOpenInCA, 8, 2, 0, 1), 31);
  Adapter inca = init_adapter(make_spec(AdapterKind::kInCA, 8, 2, 1, 1), 0);
  inca.attn = o.attn;
  inca.head = o.head;
  const auto z = random_map(8, 5, 32);
  CHECK(max_abs_diff(open_inca_forward(z, o), inca_forward(z, inca)) < 1e-5);
}

TEST_CASE("diag_head") {
  Rng rng(5);
  Tensor64 a({4, 4});
  fill_normal(a.data(), rng, 1.0);
  const auto diag = diag_head(a, Tensor64::identity(4), Tensor64({1, 4}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(diag[i] == a(i, i));

  const auto bias = Tensor64::row({1, 2, 3});
  Tensor64 a43({4, 3});
  fill_normal(a43.data(), rng, 1.0);
  CHECK(bit_equal(diag_head(a43, Tensor64({3, 4}), bias), bias));

  Tensor64 w({3, 4});
  fill_normal(w.data(), rng, 1.0);
  const auto out = diag_head(a43, w, bias);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = bias[i];
    for (std::size_t k = 0; k < 4; ++k) s += w(i, k) * a43(k, i);
    CHECK(out[i] == doctest::Approx(s).epsilon(1e-14));
  }
  CHECK_THROWS_AS(diag_head(a43, Tensor64({4, 4}), bias), Error);
}

TEST_CASE("linear probe") {
  auto a = random_adapter(make_spec(AdapterKind::kLinearProbe, 8, 1, 1, 3), 41);
  SUBCASE("T=1 is head(norm(z1))") {
    const auto z = random_map(8, 1, 42);
    Graph<float> g;
    const auto n = g.layer_norm(g.constant(z.reshaped({1, 8})), g.constant(a.head.gamma),
                                g.constant(a.head.beta));
    const auto expect = g.value(g.add_row(g.matmul_nt(n, g.constant(a.head.weight)), g.constant(a.head.bias)));
    CHECK(bit_equal(linear_probe_forward(z, a), expect));
  }
  SUBCASE("token permutation") {
    const auto z = random_map(8, 12, 43);
    std::vector<std::size_t> perm(12);
    std::iota(perm.rbegin(), perm.rend(), 0);
    CHECK(max_abs_diff(linear_probe_forward(z, a), linear_probe_forward(permute_tokens(z, perm), a)) < 1e-5);
  }
  SUBCASE("pooling dilutes a planted token by 1/T") {
    const std::size_t d = 32, t = 16;
    Tensor w({d});
    w[0] = 1.0f;
    auto z = random_map(d, t, 44, 1.0 / std::sqrt(double(d)));
    for (std::size_t j = 0; j < t; ++j) z(0, j) = 0.0f;
    z(0, 5) = 2.0f;
    Graph<float> g;
    const auto pooled = g.value(g.mean_rows(g.transpose(g.constant(z))));
    CHECK(pooled[0] == doctest::Approx(2.0 / t));
  }
}

TEST_CASE("mlp3") {
  SUBCASE("zero weights give the bias") {
    auto a = init_adapter(make_spec(AdapterKind::kMlp3, 8, 1, 1, 3), 5);
    for (auto& nt : named_tensors(a))
      if (nt.name.find(".w") != std::string::npos) std::fill(nt.tensor->data().begin(), nt.tensor->data().end(), 0.0f);
    a.mlp.b3 = Tensor::row({1, 2, 3});
    CHECK(bit_equal(mlp3_forward(random_map(8, 4, 1), a), a.mlp.b3));
  }
  SUBCASE("hidden width 0 is rejected") {
    AdapterSpec s = make_spec(AdapterKind::kMlp3, 8, 1, 1, 3);
    s.hidden = 0;
    try {
      init_adapter(s, 0);
      FAIL("expected config error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kConfig);
    }
  }
  SUBCASE("identity hidden layers act linearly on positive pools") {
    AdapterSpec s = make_spec(AdapterKind::kMlp3, 8, 1, 1, 2);
    auto a = init_adapter(s, 6);
    a.mlp.w1 = Tensor::identity(8);
    a.mlp.w2 = Tensor::identity(8);
    Rng rng(7);
    fill_normal(a.mlp.w3.data(), rng, 1.0);
    auto z = random_map(8, 4, 8, 0.5);
    for (auto& v : z.data()) v += 8.0f;
    Graph<float> g;
    const auto pooled = g.mean_rows(g.transpose(g.constant(z)));
    const auto lin = g.value(g.matmul_nt(pooled, g.constant(a.mlp.w3)));
    CHECK(max_abs_diff(mlp3_forward(z, a), lin) < 1e-4);
  }
}

TEST_CASE("init_adapter") {
  const AdapterSpec spec = make_spec(AdapterKind::kInCA, 16, 4, 1, 10);
  const auto a = init_adapter(spec, 77);
  const auto b = init_adapter(spec, 77);
  for (std::size_t i = 0; i < list_tensors(a).size(); ++i)
    CHECK(bit_equal(*list_tensors(a)[i].second, *list_tensors(b)[i].second));
  CHECK_FALSE(bit_equal(a.attn.w_q, init_adapter(spec, 78).attn.w_q));

  std::vector<Tensor> zs;
  std::vector<const Tensor*> ptrs;
  for (int s = 0; s < 10; ++s) zs.push_back(random_map(16, 4, s));
  for (auto& z : zs) ptrs.push_back(&z);
  std::vector<int> labels(10);
  std::iota(labels.begin(), labels.end(), 0);
  Graph<float> g;
  const auto v = bind(g, a, TrainMode::kFull);
  const auto loss = g.cross_entropy(adapter_logits(g, a, v, ptrs), labels);
  CHECK(g.scalar(loss) == doctest::Approx(std::log(10.0)).epsilon(1e-7));

  // Open-InCA class rows depend only on the class id
  const auto o4 = init_adapter(make_spec(AdapterKind::kOpenInCA, 16, 4, 0, 4), 5);
  const auto o9 = init_adapter(make_spec(AdapterKind::kOpenInCA, 16, 4, 0, 9), 5);
  for (std::size_t k = 0; k < 16; ++k) CHECK(o4.attn.queries(3, k) == o9.attn.queries(3, k));
  CHECK(bit_equal(init_class(16, 3, 5).query.reshaped({16}), Tensor({16}, std::vector<float>(
      o9.attn.queries.row_span(3).begin(), o9.attn.queries.row_span(3).end()))));
}

TEST_CASE("parameter count") {
  const auto a = init_adapter(make_spec(AdapterKind::kInCA, 1024, 4, 1, 100), 0);
  const std::size_t expect = 4 * 1024 * 1024 + 1024 + 2 * 1024 + 100 * 1024 + 100;
  CHECK(parameter_count(a) == expect);
  CHECK(trainable_count(a, TrainMode::kFull) == expect);
  CHECK(trainable_count(a, TrainMode::kQueryOnly) == 1024 + 100 * 1024 + 100);
}

TEST_CASE("checkpoint roundtrip") {
  for (auto kind : {AdapterKind::kInCA, AdapterKind::kOpenInCA, AdapterKind::kLinearProbe, AdapterKind::kMlp3}) {
    auto a = random_adapter(make_spec(kind, 8, 2, 2, 3), 55);
    const auto bytes = serialize_adapter(a);
    const auto b = deserialize_adapter(bytes);
    CHECK(b.spec.kind == kind);
    CHECK(b.class_ids == a.class_ids);
    CHECK(b.seed == a.seed);
    const auto na = list_tensors(a), nb = list_tensors(b);
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) CHECK(bit_equal(*na[i].second, *nb[i].second));
    CHECK(serialize_adapter(b) == bytes);
    CHECK_THROWS_AS(deserialize_adapter(bytes.substr(0, bytes.size() - 3)), Error);
  }
}

TEST_CASE("adapter gradients match finite differences") {
  for (auto kind : {AdapterKind::kInCA, AdapterKind::kOpenInCA, AdapterKind::kLinearProbe, AdapterKind::kMlp3}) {
    INFO(std::string(adapter_kind_name(kind)));
    auto a = random_adapter(make_spec(kind, 6, 2, 2, 3), 61);
    std::vector<Tensor> zs = {random_map(6, 4, 62), random_map(6, 4, 63)};
    std::vector<const Tensor*> ptrs = {&zs[0], &zs[1]};
    const std::vector<int> labels = {0, 2};

    auto loss_of = [&](const Adapter& ad, Graph<double>& g, std::vector<Var>& vars) {
      vars = bind(g, ad, TrainMode::kFull);
      return g.cross_entropy(adapter_logits(g, ad, vars, ptrs), labels);
    };
    Graph<double> g;
    std::vector<Var> vars;
    g.backward(loss_of(a, g, vars));

    const double h = 1e-5;
    auto nts = named_tensors(a);
    double worst = 0;
    for (std::size_t ti = 0; ti < nts.size(); ++ti) {
      const auto analytic = g.grad_or_zero(vars[ti]);
      double num_sq = 0, diff_sq = 0, an_sq = 0;
      for (std::size_t e = 0; e < nts[ti].tensor->size(); ++e) {
        // Adapter storage is f32, so perturb a double copy through the graph.
        auto eval = [&](double delta) {
          Graph<double> gg;
          auto vv = bind(gg, a, TrainMode::kFull);
          auto& node = const_cast<Tensor64&>(gg.value(vv[ti]));
          node[e] += delta;
          return gg.scalar(gg.cross_entropy(adapter_logits(gg, a, vv, ptrs), labels));
        };
        const double num = (eval(h) - eval(-h)) / (2 * h);
        num_sq += num * num;
        an_sq += analytic[e] * analytic[e];
        diff_sq += (num - analytic[e]) * (num - analytic[e]);
      }
      const double rel = std::sqrt(diff_sq) / std::max(std::sqrt(num_sq) + std::sqrt(an_sq), 1e-8);
      worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-6);
  }
}
