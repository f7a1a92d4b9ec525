#include "inca/incremental.hpp"

#include <algorithm>
#include <set>

#include "inca/error.hpp"
#include "json.hpp"

namespace inca {

namespace {

void require_open(const Adapter& a, const char* op) {
  require(a.spec.kind == AdapterKind::kOpenInCA, ErrorKind::kConfig,
          std::string(op) + " needs an open-inca adapter, got " + adapter_kind_name(a.spec.kind));
}

std::size_t class_index(const Adapter& a, int class_id) {
  const int col = label_column(a, class_id);
  require(col >= 0, ErrorKind::kRange, "class " + std::to_string(class_id) + " is not in the model");
  return static_cast<std::size_t>(col);
}

// Rebuilds the class-indexed tensors from per-class rows.
Adapter with_classes(const Adapter& trunk, const std::vector<ClassParams>& classes) {
  Adapter out = empty_like(trunk);
  const std::size_t d = trunk.spec.dim, c = classes.size();
  out.attn.queries = Tensor({c, d});
  out.head.weight = Tensor({c, d});
  out.head.bias = Tensor({1, c});
  for (std::size_t i = 0; i < c; ++i) {
    const auto& cp = classes[i];
    std::copy(cp.query.data().begin(), cp.query.data().end(), out.attn.queries.row_span(i).begin());
    std::copy(cp.weight.data().begin(), cp.weight.data().end(), out.head.weight.row_span(i).begin());
    out.head.bias[i] = cp.bias;
    out.class_ids.push_back(cp.class_id);
  }
  out.spec.classes = static_cast<int>(c);
  out.spec.queries = c;
  return out;
}

std::vector<ClassParams> classes_of(const Adapter& a) {
  std::vector<ClassParams> out;
  for (int id : a.class_ids) out.push_back(extract_class(a, id));
  return out;
}

}  // namespace

Adapter empty_like(const Adapter& a) {
  require_open(a, "empty_like");
  Adapter out;
  out.spec = a.spec;
  out.spec.classes = 0;
  out.spec.queries = 0;
  out.seed = a.seed;
  out.attn = a.attn;
  out.attn.queries = Tensor({0, a.spec.dim});
  out.head.gamma = a.head.gamma;
  out.head.beta = a.head.beta;
  out.head.weight = Tensor({0, a.spec.dim});
  out.head.bias = Tensor({1, 0});
  return out;
}

ClassParams extract_class(const Adapter& a, int class_id) {
  require_open(a, "extract_class");
  const auto i = class_index(a, class_id);
  const std::size_t d = a.spec.dim;
  ClassParams cp;
  cp.class_id = class_id;
  cp.query = Tensor({1, d});
  cp.weight = Tensor({1, d});
  std::copy_n(a.attn.queries.row_span(i).begin(), d, cp.query.data().begin());
  std::copy_n(a.head.weight.row_span(i).begin(), d, cp.weight.data().begin());
  cp.bias = a.head.bias[i];
  return cp;
}

Adapter add_class(const Adapter& a, const ClassParams& cls) {
  require_open(a, "add_class");
  const std::size_t d = a.spec.dim;
  require(cls.query.size() == d && cls.weight.size() == d, ErrorKind::kDimension,
          "add_class: class rows must have length " + std::to_string(d) + ", got " +
              shape_str(cls.query.shape()) + " and " + shape_str(cls.weight.shape()));
  require(label_column(a, cls.class_id) < 0, ErrorKind::kConfig,
          "add_class: class " + std::to_string(cls.class_id) + " already present");
  auto classes = classes_of(a);
  classes.push_back(cls);
  return with_classes(a, classes);
}

Adapter remove_class(const Adapter& a, int class_id) {
  require_open(a, "remove_class");
  const auto i = class_index(a, class_id);
  require(a.class_ids.size() >= 2, ErrorKind::kContract, "remove_class: refusing to remove the last class");
  auto classes = classes_of(a);
  classes.erase(classes.begin() + static_cast<std::ptrdiff_t>(i));
  return with_classes(a, classes);
}

Adapter merge(const Adapter& a, const Adapter& b) {
  require_open(a, "merge");
  require_open(b, "merge");
  require(a.spec.dim == b.spec.dim && a.spec.heads == b.spec.heads &&
              trunk_checksum(a) == trunk_checksum(b),
          ErrorKind::kIncompatible, "merge: the two models do not share a trunk");
  auto classes = classes_of(a);
  for (int id : b.class_ids) {
    require(label_column(a, id) < 0, ErrorKind::kIncompatible,
            "merge: class " + std::to_string(id) + " is present in both models");
    classes.push_back(extract_class(b, id));
  }
  return with_classes(a, classes);
}

Adapter query_only_train(const Adapter& trunk, ActivationSource& source, const TaskSplit& split,
                         int layer, std::span<const int> class_ids,
                         std::span<const std::uint64_t> train_ids, const TrainConfig& cfg,
                         std::uint64_t seed) {
  require_open(trunk, "query_only_train");
  require(cfg.mode == TrainMode::kQueryOnly, ErrorKind::kContract,
          "query_only_train: the trunk is frozen, but the config asks to train it");
  require(cfg.lrs.size() == 1, ErrorKind::kConfig, "query_only_train takes exactly one learning rate");
  require(!class_ids.empty(), ErrorKind::kConfig, "query_only_train: no classes to learn");

  std::vector<ClassParams> fresh;
  for (int id : class_ids) fresh.push_back(init_class(trunk.spec.dim, id, seed));
  std::vector<AdapterSlot> slots(1);
  slots[0].layer_id = layer;
  slots[0].lr = cfg.lrs[0];
  slots[0].params = with_classes(trunk, fresh);

  TaskSplit episode = split;
  episode.train.assign(train_ids.begin(), train_ids.end());
  episode.test.clear();
  const auto before = trunk_checksum(trunk);
  train_parallel(source, episode, slots, cfg);
  require(trunk_checksum(slots[0].params) == before, ErrorKind::kContract,
          "query_only_train: trunk parameters changed");
  return std::move(slots[0].params);
}

std::vector<Episode> make_episodes(const TaskSplit& split, int episodes, int per_episode) {
  require(episodes >= 1 && per_episode >= 1, ErrorKind::kConfig, "cil: episodes and classes per episode must be >= 1");
  require(episodes * per_episode <= split.classes, ErrorKind::kConfig,
          "cil: " + std::to_string(episodes) + " x " + std::to_string(per_episode) +
              " classes exceed the dataset's " + std::to_string(split.classes));
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e)
    for (int k = 0; k < per_episode; ++k) sets[static_cast<std::size_t>(e)].push_back(e * per_episode + k);
  nlohmann::json j;
  j["episodes"] = sets;
  return episodes_from_json(j.dump(), split);
}

std::vector<Episode> episodes_from_json(const std::string& text, const TaskSplit& split) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("episode spec: ") + e.what());
  }
  require(j.contains("episodes") && j["episodes"].is_array(), ErrorKind::kFormat,
          "episode spec: expected {\"episodes\": [[...], ...]}");
  std::vector<Episode> out;
  for (const auto& set : j["episodes"]) {
    Episode e;
    e.index = static_cast<int>(out.size());
    e.class_ids = set.get<std::vector<int>>();
    for (int id : e.class_ids)
      require(id >= 0 && id < split.classes, ErrorKind::kRange,
              "episode spec: class " + std::to_string(id) + " outside the dataset");
    const std::set<int> mine(e.class_ids.begin(), e.class_ids.end());
    for (auto id : split.train) if (mine.count(split.labels[id])) e.train.push_back(id);
    for (auto id : split.test) if (mine.count(split.labels[id])) e.test.push_back(id);
    out.push_back(std::move(e));
  }
  check_disjoint(out);
  return out;
}

void check_disjoint(std::span<const Episode> episodes) {
  std::set<int> seen;
  for (const auto& e : episodes)
    for (int id : e.class_ids)
      require(seen.insert(id).second, ErrorKind::kConfig,
              "episodes overlap: class " + std::to_string(id) + " appears twice");
}

double average_accuracy(const std::vector<std::vector<double>>& acc) {
  if (acc.empty()) return 0.0;
  const auto& last = acc.back();
  double s = 0.0;
  for (double a : last) s += a;
  return last.empty() ? 0.0 : s / double(last.size());
}

double forgetting(const std::vector<std::vector<double>>& acc) {
  if (acc.size() < 2) return 0.0;
  const std::size_t L = acc.size() - 1;
  double s = 0.0;
  for (std::size_t j = 0; j < L; ++j) {
    double best = acc[j][j];
    for (std::size_t l = j; l < L; ++l) best = std::max(best, acc[l][j]);
    s += best - acc[L][j];
  }
  return s / double(L);
}

double class_accuracy(const Adapter& model, ActivationSource& source, const TaskSplit& split,
                      int layer, std::span<const std::uint64_t> ids) {
  std::vector<AdapterSlot> one(1);
  one[0].layer_id = layer;
  one[0].params = model;
  const auto l = slot_logits(source, ids, one);
  std::vector<int> labels;
  for (auto id : ids) labels.push_back(split.labels.at(id));
  return 1.0 - top1_error(model, l[0], labels);
}

CILReport cil_run(std::span<const Episode> episodes, const Adapter& trunk, ActivationSource& source,
                  const TaskSplit& split, int layer, const TrainConfig& cfg, std::uint64_t seed) {
  check_disjoint(episodes);
  CILReport r;
  Adapter model = empty_like(trunk);
  for (std::size_t l = 0; l < episodes.size(); ++l) {
    const auto& ep = episodes[l];
    const auto learned = query_only_train(trunk, source, split, layer, ep.class_ids, ep.train, cfg, seed);
    model = merge(model, learned);
    std::vector<double> row;
    for (std::size_t j = 0; j <= l; ++j)
      row.push_back(class_accuracy(model, source, split, layer, episodes[j].test));
    r.accuracy.push_back(std::move(row));
    r.snapshots.push_back(model);
  }
  r.average_accuracy = average_accuracy(r.accuracy);
  r.forgetting = forgetting(r.accuracy);
  return r;
}

std::string CILReport::to_json() const {
  nlohmann::json j;
  j["accuracy"] = accuracy;
  j["average_accuracy"] = average_accuracy;
  j["forgetting"] = forgetting;
  j["classes"] = snapshots.empty() ? std::vector<int>{} : snapshots.back().class_ids;
  return j.dump(2) + "\n";
}

Tensor ensemble_pair(const Tensor& h1, const Tensor& h2) {
  require(h1.shape() == h2.shape(), ErrorKind::kDimension,
          "ensemble_pair: " + shape_str(h1.shape()) + " vs " + shape_str(h2.shape()));
  Tensor out(h1.shape());
  for (std::size_t i = 0; i < h1.size(); ++i) out[i] = (h1[i] + h2[i]) / 2.0f;
  return out;
}

double argmax_error(const Tensor& logits, std::span<const int> labels) {
  require(!labels.empty(), ErrorKind::kRange, "argmax_error: empty dataset");
  require(logits.rows() == labels.size(), ErrorKind::kDimension, "argmax_error: logits/labels mismatch");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.row_span(i);
    wrong += (std::max_element(row.begin(), row.end()) - row.begin()) != labels[i];
  }
  return double(wrong) / double(labels.size());
}

EnsembleResult ensemble_search(std::span<const Tensor> logits, std::span<const int> labels) {
  require(logits.size() >= 2, ErrorKind::kConfig, "ensemble_search needs at least 2 slots");
  EnsembleResult r;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double e = argmax_error(logits[i], labels);
    if (r.best_single < 0 || e < r.best_single_error) {
      r.best_single = static_cast<int>(i);
      r.best_single_error = e;
    }
  }
  for (std::size_t i = 0; i < logits.size(); ++i)
    for (std::size_t j = i + 1; j < logits.size(); ++j) {
      const double e = argmax_error(ensemble_pair(logits[i], logits[j]), labels);
      ++r.pairs_evaluated;
      if (r.best_i < 0 || e < r.best_pair_error) {
        r.best_i = static_cast<int>(i);
        r.best_j = static_cast<int>(j);
        r.best_pair_error = e;
      }
    }
  r.gain = r.best_single_error - r.best_pair_error;
  return r;
}

EnsembleResult ensemble_search(ActivationSource& source, const std::vector<AdapterSlot>& slots,
                               const TaskSplit& split, std::span<const std::uint64_t> ids) {
  const auto logits = slot_logits(source, ids, slots);
  std::vector<int> labels;
  for (auto id : ids) labels.push_back(split.labels.at(id));
  return ensemble_search(logits, labels);
}

std::string EnsembleResult::to_json() const {
  nlohmann::json j = {{"pairs_evaluated", pairs_evaluated}, {"best_single", best_single},
                      {"best_single_error", best_single_error}, {"best_pair", {best_i, best_j}},
                      {"best_pair_error", best_pair_error}, {"gain", gain}};
  return j.dump(2) + "\n";
}

}  // namespace inca
