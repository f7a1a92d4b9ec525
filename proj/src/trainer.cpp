#include "inca/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "inca/error.hpp"
#include "inca/parallel.hpp"
#include "inca/random.hpp"
#include "json.hpp"

namespace inca {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<int> unique_layers(const std::vector<AdapterSlot>& slots) {
  std::vector<int> ls;
  for (const auto& s : slots) ls.push_back(s.layer_id);
  std::sort(ls.begin(), ls.end());
  ls.erase(std::unique(ls.begin(), ls.end()), ls.end());
  return ls;
}

std::size_t index_of(const std::vector<int>& v, int x) {
  return static_cast<std::size_t>(std::find(v.begin(), v.end(), x) - v.begin());
}

// Loss of one slot on one batch, built on a fresh graph.
Var batch_loss(Graph<float>& g, const Adapter& a, const std::vector<Var>& vars,
               std::span<const Tensor* const> maps, std::span<const int> labels, LossKind loss) {
  const Var logits = adapter_logits(g, a, vars, maps);
  const auto c = g.value(logits).cols();
  if (loss == LossKind::kCrossEntropy) {
    std::vector<int> cols(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      cols[i] = label_column(a, labels[i]);
      require(cols[i] >= 0, ErrorKind::kRange,
              "label " + std::to_string(labels[i]) + " has no output column");
    }
    return g.cross_entropy(logits, cols);
  }
  Tensor targets({labels.size(), c});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int col = label_column(a, labels[i]);
    if (col >= 0) targets(i, static_cast<std::size_t>(col)) = 1.0f;
  }
  return g.bce_with_logits(logits, targets);
}

}  // namespace

const char* loss_kind_name(LossKind kind) { return kind == LossKind::kBce ? "bce" : "ce"; }

LossKind parse_loss_kind(const std::string& name) {
  if (name == "ce") return LossKind::kCrossEntropy;
  if (name == "bce") return LossKind::kBce;
  fail(ErrorKind::kConfig, "unknown loss '" + name + "' (ce|bce)");
}

void validate(const TrainConfig& cfg) {
  require(cfg.epochs >= 0, ErrorKind::kConfig, "trainer.epochs must be >= 0");
  require(!cfg.lrs.empty(), ErrorKind::kConfig, "trainer.lrs must list at least one rate");
  for (double lr : cfg.lrs) require(lr > 0, ErrorKind::kConfig, "trainer.lrs must be positive");
  require(cfg.weight_decay >= 0, ErrorKind::kConfig, "trainer.weight_decay must be >= 0");
  require(cfg.batch >= 1, ErrorKind::kConfig, "trainer.batch must be >= 1");
  require(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1, ErrorKind::kConfig,
          "trainer betas must lie in [0, 1)");
  require(cfg.eps > 0, ErrorKind::kConfig, "trainer.eps must be positive");
}

AdapterSlot make_slot(const AdapterSpec& spec, int layer, int lr_index, double lr,
                      std::uint64_t seed, int slot_id) {
  AdapterSlot s;
  s.slot_id = slot_id;
  s.layer_id = layer;
  s.lr_index = lr_index;
  s.lr = lr;
  s.params = init_adapter(spec, derive_seed(seed, {0x5107, static_cast<std::uint64_t>(layer),
                                                   static_cast<std::uint64_t>(lr_index)}));
  return s;
}

std::vector<AdapterSlot> make_slots(const AdapterSpec& spec, std::span<const int> layers,
                                    std::span<const double> lrs, std::uint64_t seed) {
  std::vector<AdapterSlot> out;
  for (int l : layers)
    for (std::size_t k = 0; k < lrs.size(); ++k)
      out.push_back(make_slot(spec, l, static_cast<int>(k), lrs[k], seed, static_cast<int>(out.size())));
  return out;
}

void adamw_step(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, std::uint64_t t, double lr,
                double wd, double beta1, double beta2, double eps) {
  const double c1 = 1.0 - std::pow(beta1, double(t));
  const double c2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = beta1 * m[i] + (1.0 - beta1) * gi;
    const double vi = beta2 * v[i] + (1.0 - beta2) * gi * gi;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double mhat = mi / c1, vhat = vi / c2;
    const double pi = p[i];
    p[i] = static_cast<float>(pi - lr * (mhat / (std::sqrt(vhat) + eps) + wd * pi));
  }
}

double cosine_lr(double base_lr, double t, double total) {
  require(total > 0 && t >= 0 && t <= total, ErrorKind::kRange,
          "cosine_lr: need 0 <= t <= total, got t=" + std::to_string(t) +
              " total=" + std::to_string(total));
  return std::max(0.0, base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t / total)));
}

int label_column(const Adapter& a, int label) {
  if (a.spec.kind == AdapterKind::kOpenInCA) {
    const auto it = std::find(a.class_ids.begin(), a.class_ids.end(), label);
    return it == a.class_ids.end() ? -1 : static_cast<int>(it - a.class_ids.begin());
  }
  return label >= 0 && label < a.spec.classes ? label : -1;
}

int column_label(const Adapter& a, int column) {
  if (a.spec.kind == AdapterKind::kOpenInCA) return a.class_ids.at(static_cast<std::size_t>(column));
  return column;
}

std::size_t estimate_memory(const std::vector<AdapterSlot>& slots, std::size_t batch,
                            std::size_t dim, std::size_t tokens) {
  const auto layers = unique_layers(slots).size();
  std::size_t total = layers * batch * dim * tokens * sizeof(float);
  for (const auto& s : slots) {
    const auto p = parameter_count(s.params);
    // params, moments, gradients
    total += 4 * p * sizeof(float);
    // per-slot graph: attention scores and pooled outputs per sample
    const std::size_t rows = std::max<std::size_t>(s.params.attn.queries.rows(), 1) *
                             std::max<std::size_t>(s.params.attn.heads, 1);
    total += 6 * batch * rows * (tokens + dim) * sizeof(float) + 2 * p * sizeof(float);
  }
  return total;
}

TrainReport train_parallel(ActivationSource& source, const TaskSplit& split,
                           std::vector<AdapterSlot>& slots, const TrainConfig& cfg) {
  validate(cfg);
  require(!split.train.empty(), ErrorKind::kRange, "training split is empty");
  const auto available = source.layers();
  for (const auto& s : slots)
    require(std::find(available.begin(), available.end(), s.layer_id) != available.end(),
            ErrorKind::kRange, "slot " + std::to_string(s.slot_id) + " attaches to layer " +
                                   std::to_string(s.layer_id) + ", which is not attachable");
  const auto need = estimate_memory(slots, cfg.batch, source.dim(), source.tokens());
  require(need <= cfg.memory_limit, ErrorKind::kResource,
          "estimated memory " + std::to_string(need >> 20) + " MiB exceeds limit " +
              std::to_string(cfg.memory_limit >> 20) + " MiB");

  const auto layers = unique_layers(slots);
  TrainReport report;
  for (auto& s : slots) {
    if (s.opt.m.empty())
      for (const auto& nt : named_tensors(s.params)) {
        s.opt.m.emplace_back(nt.tensor->shape());
        s.opt.v.emplace_back(nt.tensor->shape());
      }
    SlotReport r;
    r.slot_id = s.slot_id;
    r.layer_id = s.layer_id;
    r.lr_index = s.lr_index;
    r.lr = s.lr;
    report.slots.push_back(r);
  }

  const auto counters0 = source.counters();
  double adapter_seconds = 0.0;
  std::vector<int> labels;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto calls0 = source.counters().batch_calls;
    std::vector<std::uint64_t> order = split.train;
    Rng rng(derive_seed(cfg.seed, {0xe90c, static_cast<std::uint64_t>(e)}));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<double> loss_sum(slots.size(), 0.0);
    std::size_t nb = 0;

    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch, ++nb) {
      const std::span<const std::uint64_t> ids(order.data() + b0, std::min(cfg.batch, order.size() - b0));
      const auto maps = source.collect(ids, layers);
      labels.resize(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) labels[i] = split.labels[ids[i]];

      const auto t0 = Clock::now();
      parallel_for(slots.size(), [&](std::size_t k) {
        auto& slot = slots[k];
        const auto& lm = maps[index_of(layers, slot.layer_id)];
        std::vector<const Tensor*> ptrs(lm.size());
        for (std::size_t i = 0; i < lm.size(); ++i) ptrs[i] = &lm[i].tokens;

        Graph<float> g;
        const auto vars = bind(g, slot.params, cfg.mode);
        const Var loss = batch_loss(g, slot.params, vars, ptrs, labels, cfg.loss);
        loss_sum[k] += g.scalar(loss);
        g.backward(loss);

        const double lr = cosine_lr(slot.lr, e, cfg.epochs);
        slot.opt.step += 1;
        auto nts = named_tensors(slot.params);
        for (std::size_t i = 0; i < nts.size(); ++i) {
          if (!is_trainable(nts[i], cfg.mode)) continue;
          const Tensor* grad = g.grad(vars[i]);
          const Tensor zero = grad ? Tensor() : Tensor(nts[i].tensor->shape());
          adamw_step(*nts[i].tensor, grad ? *grad : zero, slot.opt.m[i], slot.opt.v[i],
                     slot.opt.step, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
        }
      });
      adapter_seconds += seconds_since(t0);
    }
    for (std::size_t k = 0; k < slots.size(); ++k) report.slots[k].epoch_loss.push_back(loss_sum[k] / double(nb));
    report.epoch_forward_batches.push_back(source.counters().batch_calls - calls0);
    report.epoch_batches.push_back(nb);
  }
  const auto& c1 = source.counters();
  report.train_counters.batch_calls = c1.batch_calls - counters0.batch_calls;
  report.train_counters.sample_forwards = c1.sample_forwards - counters0.sample_forwards;
  report.train_counters.cache_reads = c1.cache_reads - counters0.cache_reads;
  report.train_counters.backbone_seconds = c1.backbone_seconds - counters0.backbone_seconds;
  report.cost = measure_costs(report.train_counters.backbone_seconds, adapter_seconds, cfg.epochs,
                              dynamic_cast<const ActivationCache*>(&source) != nullptr);

  if (!split.test.empty()) {
    const auto test_logits = slot_logits(source, split.test, slots);
    std::vector<int> test_labels;
    for (auto id : split.test) test_labels.push_back(split.labels[id]);
    for (std::size_t k = 0; k < slots.size(); ++k)
      report.slots[k].test_error = top1_error(slots[k].params, test_logits[k], test_labels);
    report.best_slot = select_best(report);
  }
  if (cfg.eval_train) {
    const auto train_logits = slot_logits(source, split.train, slots);
    std::vector<int> train_labels;
    for (auto id : split.train) train_labels.push_back(split.labels[id]);
    for (std::size_t k = 0; k < slots.size(); ++k)
      report.slots[k].train_error = top1_error(slots[k].params, train_logits[k], train_labels);
  }
  return report;
}

std::vector<Tensor> slot_logits(ActivationSource& source, std::span<const std::uint64_t> ids,
                                const std::vector<AdapterSlot>& slots, std::size_t batch) {
  const auto layers = unique_layers(slots);
  std::vector<Tensor> out(slots.size());
  std::vector<std::size_t> width(slots.size());
  for (std::size_t k = 0; k < slots.size(); ++k) {
    width[k] = slots[k].params.spec.kind == AdapterKind::kOpenInCA
                   ? slots[k].params.attn.queries.rows()
                   : static_cast<std::size_t>(slots[k].params.spec.classes);
    out[k] = Tensor({ids.size(), width[k]});
  }
  for (std::size_t b0 = 0; b0 < ids.size(); b0 += batch) {
    const auto chunk = ids.subspan(b0, std::min(batch, ids.size() - b0));
    const auto maps = source.collect(chunk, layers);
    parallel_for(slots.size(), [&](std::size_t k) {
      const auto& lm = maps[index_of(layers, slots[k].layer_id)];
      std::vector<const Tensor*> ptrs(lm.size());
      for (std::size_t i = 0; i < lm.size(); ++i) ptrs[i] = &lm[i].tokens;
      const auto l = batch_logits(slots[k].params, ptrs);
      std::copy(l.data().begin(), l.data().end(), out[k].data().begin() + static_cast<std::ptrdiff_t>(b0 * width[k]));
    });
  }
  return out;
}

double top1_error(const Adapter& a, const Tensor& logits, std::span<const int> labels) {
  require(!labels.empty(), ErrorKind::kRange, "evaluate: empty dataset");
  require(logits.rows() == labels.size(), ErrorKind::kDimension, "evaluate: logits/labels mismatch");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.row_span(i);
    const auto col = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    wrong += column_label(a, col) != labels[i];
  }
  return double(wrong) / double(labels.size());
}

double evaluate(const AdapterSlot& slot, ActivationSource& source, const TaskSplit& split,
                std::span<const std::uint64_t> ids) {
  const std::vector<AdapterSlot> one = {slot};
  const auto l = slot_logits(source, ids, one);
  std::vector<int> labels;
  for (auto id : ids) labels.push_back(split.labels.at(id));
  return top1_error(slot.params, l[0], labels);
}

std::vector<SignatureEntry> layer_signature(const TrainReport& report) {
  std::map<int, double> best;
  for (const auto& s : report.slots) {
    auto [it, fresh] = best.emplace(s.layer_id, s.test_error);
    if (!fresh) it->second = std::min(it->second, s.test_error);
  }
  std::vector<SignatureEntry> out;
  if (best.empty()) return out;
  const double last = best.rbegin()->second;
  for (const auto& [layer, err] : best) out.push_back({layer, err, last - err});
  return out;
}

int select_best(const TrainReport& report) {
  int best = -1;
  for (std::size_t k = 0; k < report.slots.size(); ++k) {
    const auto& s = report.slots[k];
    if (best < 0) {
      best = static_cast<int>(k);
      continue;
    }
    const auto& b = report.slots[static_cast<std::size_t>(best)];
    if (std::tie(s.test_error, s.layer_id, s.lr) < std::tie(b.test_error, b.layer_id, b.lr))
      best = static_cast<int>(k);
  }
  return best < 0 ? -1 : report.slots[static_cast<std::size_t>(best)].slot_id;
}

std::string TrainReport::to_json() const {
  nlohmann::json j;
  auto& js = j["slots"];
  js = nlohmann::json::array();
  for (const auto& s : slots)
    js.push_back({{"slot_id", s.slot_id},
                  {"layer_id", s.layer_id},
                  {"lr", s.lr},
                  {"lr_index", s.lr_index},
                  {"epoch_loss", s.epoch_loss},
                  {"test_error", s.test_error},
                  {"train_error", s.train_error}});
  j["best_slot"] = best_slot;
  j["cost"] = {{"backbone_epoch_cost", cost.backbone_epoch_cost},
               {"adapter_epoch_cost", cost.adapter_epoch_cost},
               {"backbone_total", cost.backbone_total},
               {"adapter_total", cost.adapter_total},
               {"epochs", cost.epochs},
               {"cached", cost.cached}};
  j["train_counters"] = {{"batch_calls", train_counters.batch_calls},
                         {"sample_forwards", train_counters.sample_forwards},
                         {"cache_reads", train_counters.cache_reads}};
  j["epoch_forward_batches"] = epoch_forward_batches;
  j["epoch_batches"] = epoch_batches;
  auto& sig = j["signature"];
  sig = nlohmann::json::array();
  for (const auto& e : layer_signature(*this))
    sig.push_back({{"layer_id", e.layer_id}, {"error", e.error}, {"improvement", e.improvement}});
  return j.dump(2) + "\n";
}

std::string TrainReport::curves_csv() const {
  std::ostringstream out;
  out << "slot,layer,lr,epoch,loss\n";
  out.precision(9);
  for (const auto& s : slots)
    for (std::size_t e = 0; e < s.epoch_loss.size(); ++e)
      out << s.slot_id << ',' << s.layer_id << ',' << s.lr << ',' << e << ',' << s.epoch_loss[e] << '\n';
  return out.str();
}

}  // namespace inca
