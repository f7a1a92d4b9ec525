#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "inca/error.hpp"
#include "inca/trainer.hpp"

using namespace inca;
namespace fs = std::filesystem;

namespace {

AdapterSpec inca_spec(std::size_t d, int classes) {
  AdapterSpec s;
  s.kind = AdapterKind::kInCA;
  s.dim = d;
  s.heads = 2;
  s.queries = 1;
  s.classes = classes;
  return s;
}

bool same_bits(const Adapter& a, const Adapter& b) {
  const auto x = list_tensors(a), y = list_tensors(b);
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& p = *x[i].second;
    const auto& q = *y[i].second;
    if (p.shape() != q.shape() || std::memcmp(p.data().data(), q.data().data(), p.size() * 4) != 0)
      return false;
  }
  return true;
}

struct OracleTask {
  OracleConfig cfg;
  PlantedLayerOracle oracle;
  TaskSplit split;
  OracleSource source;

  explicit OracleTask(OracleConfig c, std::size_t train = 48, std::size_t test = 24)
      : cfg(c), oracle(c), split(make_balanced_split(c.classes, train, test, 3)),
        source(oracle, split, 17) {}
};

OracleConfig small_oracle() {
  OracleConfig c;
  c.depth = 4;
  c.dim = 8;
  c.tokens = 5;
  c.classes = 3;
  c.planted_layer = 2;
  c.noise_base = 0.05;
  c.seed = 4;
  return c;
}

TrainConfig quick(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.lrs = {1e-2};
  t.batch = 8;
  t.seed = 9;
  return t;
}

}  // namespace

TEST_CASE("adamw first step") {
  Tensor p({1, 2}, {1.0f, -2.0f}), g({1, 2}, {0.5f, -0.25f});
  Tensor m({1, 2}), v({1, 2});
  adamw_step(p, g, m, v, 1, 0.1, 0.0);
  // bias-corrected first step moves each coordinate by lr * sign(g)
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-1.9).epsilon(1e-6));
  CHECK(m[0] == doctest::Approx(0.05));
  CHECK(v[0] == doctest::Approx(0.00025));

  Tensor q({1, 1}, {2.0f}), zero({1, 1}), m2({1, 1}), v2({1, 1});
  adamw_step(q, zero, m2, v2, 1, 0.1, 0.5);
  CHECK(q[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(1.0, 0, 10) == doctest::Approx(1.0));
  CHECK(cosine_lr(1.0, 5, 10) == doctest::Approx(0.5));
  CHECK(cosine_lr(1.0, 10, 10) == doctest::Approx(0.0));
  CHECK(cosine_lr(3e-4, 2.5, 10) == doctest::Approx(3e-4 * 0.5 * (1 + std::cos(M_PI / 4))));
  CHECK_THROWS_AS(cosine_lr(1.0, 11, 10), Error);
  CHECK_THROWS_AS(cosine_lr(1.0, -1, 10), Error);
}

TEST_CASE("top-1 error and label columns") {
  Adapter a = init_adapter(inca_spec(4, 3), 1);
  Tensor logits({4, 3}, {3, 1, 0,   // 0
                         0, 2, 2,   // tie -> 1
                         0, 0, 1,   // 2
                         5, 0, 0}); // 0
  const std::vector<int> labels = {0, 2, 2, 1};
  CHECK(top1_error(a, logits, labels) == doctest::Approx(0.5));
  CHECK_THROWS_AS(top1_error(a, Tensor({0, 3}), std::vector<int>{}), Error);

  AdapterSpec os = inca_spec(4, 2);
  os.kind = AdapterKind::kOpenInCA;
  Adapter o = init_adapter(os, 1);
  o.class_ids = {7, 3};
  CHECK(label_column(o, 3) == 1);
  CHECK(label_column(o, 5) == -1);
  CHECK(column_label(o, 0) == 7);
}

TEST_CASE("select best and layer signature") {
  TrainReport r;
  auto add = [&](int id, int layer, double lr, double err) {
    SlotReport s;
    s.slot_id = id;
    s.layer_id = layer;
    s.lr = lr;
    s.test_error = err;
    r.slots.push_back(s);
  };
  add(0, 3, 3e-4, 0.2);
  add(1, 3, 1e-4, 0.2);
  add(2, 1, 3e-4, 0.2);
  add(3, 5, 1e-4, 0.4);
  add(4, 5, 3e-4, 0.3);
  CHECK(select_best(r) == 2);
  r.slots[2].test_error = 0.25;
  CHECK(select_best(r) == 1);

  const auto sig = layer_signature(r);
  REQUIRE(sig.size() == 3);
  CHECK(sig[0].layer_id == 1);
  CHECK(sig[1].error == doctest::Approx(0.2));
  CHECK(sig[2].error == doctest::Approx(0.3));
  CHECK(sig[1].improvement == doctest::Approx(0.1));
  CHECK(sig[2].improvement == 0.0);
}

TEST_CASE("zero epochs leave parameters at init") {
  OracleTask t(small_oracle());
  const std::vector<int> layers = {1, 2};
  const std::vector<double> lrs = {1e-2};
  auto slots = make_slots(inca_spec(8, 3), layers, lrs, 5);
  const auto fresh = make_slots(inca_spec(8, 3), layers, lrs, 5);
  const auto rep = train_parallel(t.source, t.split, slots, quick(0));
  for (std::size_t k = 0; k < slots.size(); ++k) CHECK(same_bits(slots[k].params, fresh[k].params));
  CHECK(rep.train_counters.batch_calls == 0);
  CHECK(rep.slots[0].test_error >= 0.0);
}

TEST_CASE("one forward per batch regardless of slot count") {
  OracleTask t(small_oracle(), 50, 10);
  const std::vector<int> layers = {1, 2, 3, 4};
  const std::vector<double> lrs = {1e-2, 3e-3};
  auto slots = make_slots(inca_spec(8, 3), layers, lrs, 5);
  const auto rep = train_parallel(t.source, t.split, slots, quick(2));
  REQUIRE(rep.epoch_batches.size() == 2);
  CHECK(rep.epoch_batches[0] == 7);  // ceil(50 / 8)
  for (std::size_t e = 0; e < 2; ++e) CHECK(rep.epoch_forward_batches[e] == rep.epoch_batches[e]);
  CHECK(rep.train_counters.sample_forwards == 100);
}

TEST_CASE("slots are isolated from their neighbours") {
  OracleTask t(small_oracle());
  const std::vector<int> layers = {1, 2, 3};
  const std::vector<double> lrs = {1e-2, 3e-3};
  auto many = make_slots(inca_spec(8, 3), layers, lrs, 5);
  train_parallel(t.source, t.split, many, quick(3));

  for (const auto& target : many) {
    std::vector<AdapterSlot> alone = {make_slot(inca_spec(8, 3), target.layer_id, target.lr_index,
                                                target.lr, 5)};
    train_parallel(t.source, t.split, alone, quick(3));
    CHECK(same_bits(alone[0].params, target.params));
  }
}

TEST_CASE("training lowers the loss and fits the planted layer") {
  OracleConfig c = small_oracle();
  c.noise_base = 0.02;
  OracleTask t(c, 96, 48);
  const std::vector<int> layers = {2};
  const std::vector<double> lrs = {3e-2};
  auto slots = make_slots(inca_spec(8, 3), layers, lrs, 1);
  TrainConfig cfg = quick(25);
  cfg.eval_train = true;
  const auto rep = train_parallel(t.source, t.split, slots, cfg);
  const auto& loss = rep.slots[0].epoch_loss;
  CHECK(loss.front() < std::log(3.0) + 1e-3);
  CHECK(loss.back() < 0.5 * loss.front());
  CHECK(rep.slots[0].train_error < 0.1);
  CHECK(rep.best_slot == 0);
}

TEST_CASE("cached and live training agree bit for bit") {
  TokenDataset data = make_token_dataset({3, 24, 6, 8, 5, 0.05, 2});
  SyntheticBackbone bb({3, 8, 5, 7});
  BackboneSource live(bb, data);
  const std::vector<int> layers = {1, 3};
  const std::vector<double> lrs = {1e-2};

  const auto dir = fs::temp_directory_path() / ("inca_trainer_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto path = (dir / "acts.bin").string();
  std::vector<std::uint64_t> ids(data.split.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  dump_epoch(live, ids, layers, path, 8);
  ActivationCache cache(path);

  auto a = make_slots(inca_spec(8, 3), layers, lrs, 3);
  auto b = make_slots(inca_spec(8, 3), layers, lrs, 3);
  const auto ra = train_parallel(live, data.split, a, quick(3));
  const auto rb = train_parallel(cache, data.split, b, quick(3));
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(same_bits(a[k].params, b[k].params));
    CHECK(ra.slots[k].test_error == rb.slots[k].test_error);
  }
  CHECK(rb.train_counters.sample_forwards == 0);
  CHECK(rb.train_counters.cache_reads > 0);
  CHECK(rb.cost.cached);
  fs::remove_all(dir);
}

TEST_CASE("trainer rejects bad configurations") {
  OracleTask t(small_oracle());
  const std::vector<int> bad_layer = {9};
  const std::vector<double> lrs = {1e-2};
  auto slots = make_slots(inca_spec(8, 3), bad_layer, lrs, 1);
  CHECK_THROWS_AS(train_parallel(t.source, t.split, slots, quick(1)), Error);

  const std::vector<int> ok = {1};
  auto good = make_slots(inca_spec(8, 3), ok, lrs, 1);
  TrainConfig tiny = quick(1);
  tiny.memory_limit = 1024;
  try {
    train_parallel(t.source, t.split, good, tiny);
    FAIL("expected a resource error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kResource);
  }
  TrainConfig no_lr = quick(1);
  no_lr.lrs.clear();
  CHECK_THROWS_AS(validate(no_lr), Error);
}

TEST_CASE("report serialization") {
  OracleTask t(small_oracle());
  const std::vector<int> layers = {1, 2};
  const std::vector<double> lrs = {1e-2};
  auto slots = make_slots(inca_spec(8, 3), layers, lrs, 1);
  const auto rep = train_parallel(t.source, t.split, slots, quick(2));
  const auto csv = rep.curves_csv();
  CHECK(csv.rfind("slot,layer,lr,epoch,loss\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(rep.to_json().find("\"signature\"") != std::string::npos);
}
