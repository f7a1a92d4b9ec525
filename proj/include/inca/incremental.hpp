#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "inca/adapters.hpp"
#include "inca/trainer.hpp"

namespace inca {

// ---------------------------------------------------------------------------
// Open-InCA class lifecycle. All operations return new parameter sets and
// leave every surviving logit bit-identical.

// Trunk (projections, heads, shared norm) of `a` with no classes.
Adapter empty_like(const Adapter& a);
ClassParams extract_class(const Adapter& a, int class_id);
Adapter add_class(const Adapter& a, const ClassParams& cls);
Adapter remove_class(const Adapter& a, int class_id);
// Concatenates class sets; trunks must match bit for bit.
Adapter merge(const Adapter& a, const Adapter& b);

// Trains fresh query/head rows for `class_ids` on `train_ids` with the trunk
// frozen. Returns the trunk carrying only the new classes. Samples whose
// label is outside `class_ids` act as negatives under BCE and are rejected
// under CE. Rows are initialised by init_class(seed).
Adapter query_only_train(const Adapter& trunk, ActivationSource& source, const TaskSplit& split,
                         int layer, std::span<const int> class_ids,
                         std::span<const std::uint64_t> train_ids, const TrainConfig& cfg,
                         std::uint64_t seed);

// ---------------------------------------------------------------------------
// Class-incremental runs

struct Episode {
  int index = 0;
  std::vector<int> class_ids;
  std::vector<std::uint64_t> train, test;
};

// Consecutive class blocks of `per_episode` classes; ids are taken from
// split.train / split.test by label.
std::vector<Episode> make_episodes(const TaskSplit& split, int episodes, int per_episode);
// {"episodes": [[class ids], ...]}
std::vector<Episode> episodes_from_json(const std::string& text, const TaskSplit& split);
void check_disjoint(std::span<const Episode> episodes);

struct CILReport {
  // accuracy[l][j]: accuracy on episode-j classes after episode l, j <= l.
  std::vector<std::vector<double>> accuracy;
  double average_accuracy = 0.0;
  double forgetting = 0.0;
  std::vector<Adapter> snapshots;  // merged model after each episode
  std::string to_json() const;
};

double average_accuracy(const std::vector<std::vector<double>>& acc);
// mean over j < L of max_{j <= l < L} acc[l][j] - acc[L][j]; 0 when L = 0.
double forgetting(const std::vector<std::vector<double>>& acc);

// Accuracy of `model` on `ids`, argmax over its whole class set.
double class_accuracy(const Adapter& model, ActivationSource& source, const TaskSplit& split,
                      int layer, std::span<const std::uint64_t> ids);

CILReport cil_run(std::span<const Episode> episodes, const Adapter& trunk, ActivationSource& source,
                  const TaskSplit& split, int layer, const TrainConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Equal-weight ensembles

Tensor ensemble_pair(const Tensor& h1, const Tensor& h2);
// Error of argmax column against the label.
double argmax_error(const Tensor& logits, std::span<const int> labels);

struct EnsembleResult {
  std::size_t pairs_evaluated = 0;
  int best_single = -1;
  double best_single_error = 1.0;
  int best_i = -1, best_j = -1;
  double best_pair_error = 1.0;
  double gain = 0.0;  // best single error - best pair error (signed)
  std::string to_json() const;
};

// Exhaustive scan over all pairs of precomputed per-slot logits. Ties go to
// the lexicographically first pair.
EnsembleResult ensemble_search(std::span<const Tensor> logits, std::span<const int> labels);
// Computes every slot's logits once with one source pass, then scans.
EnsembleResult ensemble_search(ActivationSource& source, const std::vector<AdapterSlot>& slots,
                               const TaskSplit& split, std::span<const std::uint64_t> ids);

}  // namespace inca
