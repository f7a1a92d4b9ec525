#include <cstring>
#include <random>

#include "doctest.h"
#include "inca/error.hpp"
#include "inca/incremental.hpp"

using namespace inca;

namespace {

AdapterSpec open_spec(std::size_t d, int classes) {
  AdapterSpec s;
  s.kind = AdapterKind::kOpenInCA;
  s.dim = d;
  s.heads = 2;
  s.classes = classes;
  return s;
}

// Open-InCA with non-trivial head rows so logits differ per class.
Adapter random_open(std::size_t d, int classes, std::uint64_t seed) {
  Adapter a = init_adapter(open_spec(d, classes), seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : a.head.weight.data()) v = n(rng);
  for (auto& v : a.head.bias.data()) v = n(rng);
  for (auto& v : a.attn.queries.data()) v = n(rng);
  for (auto& v : a.head.beta.data()) v = 0.1f * n(rng);
  return a;
}

std::vector<Tensor> random_maps(std::size_t d, std::size_t t, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor z({d, t});
    for (auto& v : z.data()) v = dist(rng);
    out.push_back(std::move(z));
  }
  return out;
}

float logit_of(const Adapter& a, const Tensor& z, int class_id) {
  const auto l = open_inca_forward(z, a);
  return l[static_cast<std::size_t>(label_column(a, class_id))];
}

bool same_float(float x, float y) { return std::memcmp(&x, &y, sizeof x) == 0; }

bool same_class_logits(const Adapter& a, const Adapter& b, const std::vector<Tensor>& maps,
                       const std::vector<int>& ids) {
  for (const auto& z : maps)
    for (int id : ids)
      if (!same_float(logit_of(a, z, id), logit_of(b, z, id))) return false;
  return true;
}

bool same_tensors(const Adapter& a, const Adapter& b) {
  const auto x = list_tensors(a), y = list_tensors(b);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!bit_equal(*x[i].second, *y[i].second)) return false;
  return true;
}

struct OracleTask {
  PlantedLayerOracle oracle;
  TaskSplit split;
  OracleSource source;
  OracleTask(OracleConfig c, std::size_t train, std::size_t test)
      : oracle(c), split(make_balanced_split(c.classes, train, test, 8)), source(oracle, split, 2) {}
};

OracleConfig oracle_cfg(int classes) {
  OracleConfig c;
  c.depth = 3;
  c.dim = 8;
  c.tokens = 4;
  c.classes = classes;
  c.planted_layer = 2;
  c.noise_base = 0.05;
  c.seed = 11;
  return c;
}

TrainConfig q_cfg(LossKind loss) {
  TrainConfig t;
  t.epochs = 4;
  t.lrs = {2e-2};
  t.batch = 8;
  t.seed = 3;
  t.mode = TrainMode::kQueryOnly;
  t.loss = loss;
  return t;
}

}  // namespace

TEST_CASE("add_class keeps prior logits") {
  const auto a = random_open(8, 4, 1);
  const auto maps = random_maps(8, 5, 100, 2);
  auto cp = init_class(8, 9, 4);
  cp.weight = Tensor::filled({1, 8}, 0.3f);
  cp.bias = 0.7f;
  const auto b = add_class(a, cp);
  CHECK(b.class_ids.size() == 5);
  CHECK(same_class_logits(a, b, maps, {0, 1, 2, 3}));

  const auto zero = add_class(a, init_class(8, 10, 4));
  for (const auto& z : maps) CHECK(logit_of(zero, z, 10) == 0.0f);

  CHECK_THROWS_AS(add_class(a, init_class(5, 11, 4)), Error);
  CHECK_THROWS_AS(add_class(a, extract_class(a, 2)), Error);
}

TEST_CASE("sequential adds match a direct init") {
  const auto direct = init_adapter(open_spec(8, 10), 6);
  Adapter seq = empty_like(direct);
  for (int i = 0; i < 10; ++i) seq = add_class(seq, init_class(8, i, 6));
  CHECK(same_tensors(direct, seq));
  CHECK(seq.class_ids == direct.class_ids);
}

TEST_CASE("remove_class is exact and commutative") {
  const auto a = random_open(8, 5, 3);
  const auto maps = random_maps(8, 6, 100, 4);
  const auto saved = extract_class(a, 2);
  const auto removed = remove_class(a, 2);
  CHECK(same_class_logits(a, removed, maps, {0, 1, 3, 4}));
  const auto back = add_class(removed, saved);
  CHECK(same_class_logits(a, back, maps, {0, 1, 2, 3, 4}));

  const auto ij = remove_class(remove_class(a, 1), 3);
  const auto ji = remove_class(remove_class(a, 3), 1);
  CHECK(same_tensors(ij, ji));

  // Survivors keep their argmax on inputs not claimed by the dropped class.
  for (const auto& z : maps) {
    const auto full = open_inca_forward(z, a);
    const auto col = std::max_element(full.data().begin(), full.data().end()) - full.data().begin();
    if (a.class_ids[static_cast<std::size_t>(col)] == 2) continue;
    const auto part = open_inca_forward(z, removed);
    const auto pcol = std::max_element(part.data().begin(), part.data().end()) - part.data().begin();
    CHECK(removed.class_ids[static_cast<std::size_t>(pcol)] == a.class_ids[static_cast<std::size_t>(col)]);
  }

  auto single = remove_class(remove_class(remove_class(remove_class(a, 0), 1), 2), 3);
  try {
    remove_class(single, 4);
    FAIL("removing the last class must fail");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kContract);
  }
}

TEST_CASE("merge") {
  const auto full = random_open(8, 6, 5);
  const auto maps = random_maps(8, 4, 100, 6);
  Adapter a = remove_class(remove_class(remove_class(full, 3), 4), 5);
  Adapter b = remove_class(remove_class(remove_class(full, 0), 1), 2);
  const auto m = merge(a, b);
  CHECK(same_class_logits(full, m, maps, {0, 1, 2, 3, 4, 5}));
  CHECK(same_tensors(merge(a, empty_like(a)), a));
  CHECK(same_tensors(merge(empty_like(a), a), a));

  Adapter other = random_open(8, 2, 99);
  other.class_ids = {7, 8};
  try {
    merge(a, other);
    FAIL("trunk mismatch must fail");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIncompatible);
  }
  CHECK_THROWS_AS(merge(a, a), Error);

  // Per-episode models merged equal sequential construction.
  Adapter seq = empty_like(full), merged = empty_like(full);
  for (int ep = 0; ep < 3; ++ep) {
    Adapter episode = empty_like(full);
    for (int k = 0; k < 2; ++k) {
      seq = add_class(seq, extract_class(full, 2 * ep + k));
      episode = add_class(episode, extract_class(full, 2 * ep + k));
    }
    merged = merge(merged, episode);
  }
  CHECK(same_tensors(seq, merged));
}

TEST_CASE("query-only training leaves the trunk and isolates classes under BCE") {
  OracleTask t(oracle_cfg(3), 48, 0);
  const auto trunk = empty_like(init_adapter(open_spec(8, 0), 21));
  const std::vector<int> both = {0, 1}, only_a = {0};

  const auto joint = query_only_train(trunk, t.source, t.split, 2, both, t.split.train, q_cfg(LossKind::kBce), 5);
  const auto alone = query_only_train(trunk, t.source, t.split, 2, only_a, t.split.train, q_cfg(LossKind::kBce), 5);
  CHECK(trunk_checksum(joint) == trunk_checksum(trunk));
  const auto ja = extract_class(joint, 0), aa = extract_class(alone, 0);
  CHECK(bit_equal(ja.query, aa.query));
  CHECK(bit_equal(ja.weight, aa.weight));
  CHECK(same_float(ja.bias, aa.bias));
  CHECK_FALSE(bit_equal(ja.query, init_class(8, 0, 5).query));

  // Softmax couples the classes: the same experiment diverges. The lone
  // class gets all of the data under CE only if every label is its own.
  std::vector<std::uint64_t> ab_ids;
  for (auto id : t.split.train) if (t.split.labels[id] <= 1) ab_ids.push_back(id);
  const std::vector<int> ab = {0, 1};
  const auto ce_joint = query_only_train(trunk, t.source, t.split, 2, ab, ab_ids, q_cfg(LossKind::kCrossEntropy), 5);
  const std::vector<int> abc = {0, 1, 2};
  const auto ce_wide = query_only_train(trunk, t.source, t.split, 2, abc, ab_ids, q_cfg(LossKind::kCrossEntropy), 5);
  CHECK_FALSE(bit_equal(extract_class(ce_joint, 0).query, extract_class(ce_wide, 0).query));

  TrainConfig full = q_cfg(LossKind::kBce);
  full.mode = TrainMode::kFull;
  try {
    query_only_train(trunk, t.source, t.split, 2, both, t.split.train, full, 5);
    FAIL("full mode must be refused");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kContract);
  }
}

TEST_CASE("forgetting and average accuracy") {
  CHECK(forgetting({{0.9}}) == 0.0);
  CHECK(average_accuracy({{0.9}}) == doctest::Approx(0.9));
  const std::vector<std::vector<double>> acc = {{0.9}, {0.8, 0.7}, {0.6, 0.75, 0.5}};
  // j=0: max(0.9, 0.8) - 0.6 = 0.3; j=1: 0.7 - 0.75 = -0.05
  CHECK(forgetting(acc) == doctest::Approx((0.3 - 0.05) / 2));
  CHECK(average_accuracy(acc) == doctest::Approx((0.6 + 0.75 + 0.5) / 3));
}

TEST_CASE("cil run") {
  OracleConfig c = oracle_cfg(6);
  OracleTask t(c, 96, 48);
  const auto episodes = make_episodes(t.split, 3, 2);
  REQUIRE(episodes.size() == 3);
  CHECK(episodes[1].class_ids == std::vector<int>{2, 3});
  CHECK(episodes[0].test.size() == 16);

  const auto trunk = empty_like(init_adapter(open_spec(8, 0), 21));
  const auto r = cil_run(episodes, trunk, t.source, t.split, 2, q_cfg(LossKind::kBce), 4);
  REQUIRE(r.accuracy.size() == 3);
  CHECK(r.accuracy[2].size() == 3);
  CHECK(r.forgetting == doctest::Approx(forgetting(r.accuracy)));

  // Independent recount from the snapshots, one map at a time.
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t j = 0; j <= l; ++j) {
      std::size_t right = 0;
      for (auto id : episodes[j].test) {
        const std::vector<std::uint64_t> one = {id};
        const std::vector<int> layer = {2};
        const auto z = t.source.collect(one, layer)[0][0].tokens;
        const auto lg = open_inca_forward(z, r.snapshots[l]);
        const auto col = std::max_element(lg.data().begin(), lg.data().end()) - lg.data().begin();
        right += r.snapshots[l].class_ids[static_cast<std::size_t>(col)] == t.split.labels[id];
      }
      CHECK(r.accuracy[l][j] == doctest::Approx(double(right) / double(episodes[j].test.size())));
    }

  // Old-class logits never move across episodes.
  const auto maps = random_maps(8, 4, 20, 1);
  CHECK(same_class_logits(r.snapshots[0], r.snapshots[2], maps, {0, 1}));

  const auto single = cil_run(std::span(episodes).first(1), trunk, t.source, t.split, 2, q_cfg(LossKind::kBce), 4);
  CHECK(single.forgetting == 0.0);

  auto overlap = episodes;
  overlap[1].class_ids.push_back(0);
  CHECK_THROWS_AS(cil_run(overlap, trunk, t.source, t.split, 2, q_cfg(LossKind::kBce), 4), Error);
  CHECK_THROWS_AS(episodes_from_json("{\"episodes\": [[0, 1], [1]]}", t.split), Error);
}

TEST_CASE("ensemble pair") {
  Tensor h1({2, 3}, {1, 2, 3, -1, 0, 4}), h2({2, 3}, {3, 0, -1, 1, 2, 0});
  const auto e = ensemble_pair(h1, h2);
  CHECK(bit_equal(e, Tensor({2, 3}, {2, 1, 1, 0, 1, 2})));
  Tensor neg = h1;
  for (auto& v : neg.data()) v = -v;
  const auto cancel = ensemble_pair(h1, neg);
  for (float v : cancel.data()) CHECK(v == 0.0f);
  const std::vector<int> labels = {2, 2};
  CHECK(argmax_error(ensemble_pair(h1, h1), labels) == argmax_error(h1, labels));
  CHECK_THROWS_AS(ensemble_pair(h1, Tensor({3, 2})), Error);
}

TEST_CASE("ensemble search") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<int> labels(40);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  std::vector<Tensor> logits;
  for (int s = 0; s < 5; ++s) {
    Tensor l({40, 3});
    for (std::size_t i = 0; i < 40; ++i)
      for (std::size_t c = 0; c < 3; ++c) l(i, c) = n(rng) + (int(c) == labels[i] ? 0.8f : 0.0f);
    logits.push_back(l);
  }
  const auto r = ensemble_search(logits, labels);
  CHECK(r.pairs_evaluated == 10);
  CHECK(ensemble_search(std::span(logits).first(2), labels).pairs_evaluated == 1);

  double best = 1.0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j) {
      Tensor avg({40, 3});
      for (std::size_t k = 0; k < avg.size(); ++k) avg[k] = (logits[i][k] + logits[j][k]) / 2.0f;
      best = std::min(best, argmax_error(avg, labels));
    }
  CHECK(r.best_pair_error == best);
  CHECK(r.gain == doctest::Approx(r.best_single_error - best));
  CHECK_THROWS_AS(ensemble_search(std::span(logits).first(1), labels), Error);
}
