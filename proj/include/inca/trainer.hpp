#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "inca/activation_cache.hpp"
#include "inca/adapters.hpp"
#include "inca/backbone.hpp"

namespace inca {

enum class LossKind { kCrossEntropy, kBce };

const char* loss_kind_name(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct TrainConfig {
  int epochs = 30;
  std::vector<double> lrs = {1e-4, 3e-4};
  double weight_decay = 1e-4;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kFull;
  LossKind loss = LossKind::kCrossEntropy;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool eval_train = false;  // also report final train error
  std::size_t memory_limit = std::size_t{3} << 30;
};

// Throws a config error naming the offending field.
void validate(const TrainConfig& cfg);

struct AdamState {
  std::vector<Tensor> m, v;  // one per named tensor
  std::uint64_t step = 0;
};

struct AdapterSlot {
  int slot_id = 0;
  int layer_id = 0;
  int lr_index = 0;
  double lr = 0.0;
  Adapter params;
  AdamState opt;
};

// One slot per (layer, lr). Each slot's init seed is derived from
// (seed, layer, lr index) only, so a slot is the same whichever other slots
// are trained next to it.
std::vector<AdapterSlot> make_slots(const AdapterSpec& spec, std::span<const int> layers,
                                    std::span<const double> lrs, std::uint64_t seed);
AdapterSlot make_slot(const AdapterSpec& spec, int layer, int lr_index, double lr,
                      std::uint64_t seed, int slot_id = 0);

struct SlotReport {
  int slot_id = 0;
  int layer_id = 0;
  int lr_index = 0;
  double lr = 0.0;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  double test_error = -1.0;
  double train_error = -1.0;
};

struct TrainReport {
  std::vector<SlotReport> slots;
  int best_slot = -1;
  CostReport cost;
  ForwardCounters train_counters;           // during training epochs only
  std::vector<std::uint64_t> epoch_forward_batches;  // source batch calls per epoch
  std::vector<std::uint64_t> epoch_batches;          // optimizer batches per epoch
  std::string to_json() const;
  std::string curves_csv() const;  // slot,layer,lr,epoch,loss
};

// Live or cached training. Every batch is gathered once from `source` for
// all slots; each slot then builds its own graph, so its gradient is that of
// its own loss only. Slots update concurrently.
TrainReport train_parallel(ActivationSource& source, const TaskSplit& split,
                           std::vector<AdapterSlot>& slots, const TrainConfig& cfg);

// Rejects configurations whose estimated resident memory exceeds the limit.
std::size_t estimate_memory(const std::vector<AdapterSlot>& slots, std::size_t batch,
                            std::size_t dim, std::size_t tokens);

// Decoupled weight decay with bias-corrected moments; `t` is the 1-based step.
void adamw_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::uint64_t t,
                double lr, double wd, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

// base * (1 + cos(pi * t / total)) / 2
double cosine_lr(double base_lr, double t, double total);

// Column index of `label` in the adapter's output, or -1 when the adapter
// has no column for it (possible for Open-InCA).
int label_column(const Adapter& a, int label);
int column_label(const Adapter& a, int column);

// Logits of every slot on `ids`, gathered with one source pass: result[k]
// is ids.size() x C for slot k.
std::vector<Tensor> slot_logits(ActivationSource& source, std::span<const std::uint64_t> ids,
                                const std::vector<AdapterSlot>& slots, std::size_t batch = 64);

// Fraction of argmax mispredictions (ties go to the lowest column).
double top1_error(const Adapter& a, const Tensor& logits, std::span<const int> labels);
double evaluate(const AdapterSlot& slot, ActivationSource& source, const TaskSplit& split,
                std::span<const std::uint64_t> ids);

struct SignatureEntry {
  int layer_id = 0;
  double error = 0.0;
  double improvement = 0.0;  // error at the deepest layer minus this error
};
std::vector<SignatureEntry> layer_signature(const TrainReport& report);

// argmin test error; ties go to the lower layer, then the lower lr.
int select_best(const TrainReport& report);

}  // namespace inca
