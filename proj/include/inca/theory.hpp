#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "inca/backbone.hpp"
#include "inca/tensor.hpp"

namespace inca {

// Token-separable binary data: one token per sample carries the label along
// a witness direction w, the others are N(0, I/d) noise. Everything here runs
// in double.
struct TSDatasetSpec {
  std::size_t n = 200;
  std::size_t tokens = 32;
  std::size_t dim = 4096;
  std::vector<double> w;  // unit witness; empty draws one from `seed`
  double b = 0.0;
  double c = 0.5;
  bool permuted = true;
  std::size_t position = 0;  // planted position when not permuted
  double delta = 0.01;
  std::uint64_t seed = 0;
};

void validate(const TSDatasetSpec& spec);
std::vector<double> witness(const TSDatasetSpec& spec);

struct TSSample {
  Tensor64 x;  // d x T, tokens are columns
  int y = 1;   // +1 / -1
  std::size_t position = 0;
};

struct TSDataset {
  std::vector<double> w;
  double b = 0.0;
  std::vector<TSSample> samples;
  double c_realized = 0.0;
};

// Sample i of draw `trial`; every (trial, i) has its own stream.
TSSample draw_ts_sample(const TSDatasetSpec& spec, const std::vector<double>& w,
                        std::uint64_t trial, std::size_t i);
TSDataset generate_ts_dataset(const TSDatasetSpec& spec, std::uint64_t trial = 0);

// min_i max_j y_i (<x_i^j, w> + b)
double margin_of(const std::vector<double>& w, double b, const TSDataset& data);

struct SeparatorParams {
  std::vector<double> q;  // t * w
  std::vector<double> u;  // w
  double bias = 0.0;      // -c/4
  double t = 0.0;         // (4/c) log(T/eps)
  double eps = 0.0;
};

SeparatorParams construct_separator(const std::vector<double>& w, double b, double c,
                                    std::size_t tokens, double eps);

// sign(sum_j softmax_j(<q, x^j>) <u, x^j> + bias), via the collapsed
// attention form with a 1 x d value map.
int cross_attn_classify(const Tensor64& x, const SeparatorParams& sp);
// sign(b + sum_j <w, x^j>)
int linear_classify(const Tensor64& x, const std::vector<double>& w, double b);

struct ConditionCheck {
  bool satisfied = false;
  double required_c = 0.0;  // max(sqrt((32/d)(log(1/delta) + log(2nT))), 2|b|)
  double concentration_term = 0.0;
  double bias_term = 0.0;
  double slack = 0.0;  // c - required_c
};
ConditionCheck check_condition(const TSDatasetSpec& spec);

// 2 T n exp(-d c^2 / 32)
double success_delta(const TSDatasetSpec& spec);
// sqrt(d) c / sqrt(T - 1)
double failure_s(const TSDatasetSpec& spec);
// (1/sqrt(2 pi)) s / (s^2 + 1) exp(-s^2 / 2)
double linear_failure_bound(double s);

struct SuccessReport {
  ConditionCheck condition;
  SeparatorParams separator;  // q and u omitted from JSON
  double delta = 0.0;
  std::size_t trials = 0;
  std::size_t separated = 0;  // draws labelled entirely correctly
  double separation_rate = 0.0;
  double mc_sigma = 0.0;
  // Per-sample proof quantities: M = max over noise tokens of |<w, x^k>|.
  std::size_t samples = 0;
  std::size_t concentrated = 0;  // M < c/4
  // Positive samples with M < c/4, and those whose planted-token weight is
  // >= 1 - eps. Negative planted tokens score lowest, so only positives
  // saturate.
  std::size_t positive_concentrated = 0;
  std::size_t saturated = 0;
  double concentration_bound = 0.0;  // 1 - 2T exp(-d c^2 / 32)
  bool passed = false;               // rate >= 1 - delta - 3 sigma
  std::string to_json() const;
};

// Refuses (config error) when the hypothesis fails, unless `allow_outside`.
SuccessReport verify_success_bound(const TSDatasetSpec& spec, std::size_t trials, double eps = 0.1,
                                   bool allow_outside = false);

struct FailureReport {
  double s = 0.0;
  double bound = 0.0;
  std::size_t trials = 0;
  std::size_t failed = 0;  // draws with at least one misclassified sample
  double failure_rate = 0.0;
  double sample_failure_rate = 0.0;
  double mc_sigma = 0.0;  // binomial sigma at the bound
  bool passed = false;    // rate >= bound - 3 sigma
  std::string to_json() const;
};
FailureReport verify_linear_failure(const TSDatasetSpec& spec, std::size_t trials);

// ---------------------------------------------------------------------------
// Token-separable data as a trainable task (labels 0 for y=-1, 1 for y=+1).

class InMemorySource final : public ActivationSource {
 public:
  InMemorySource(std::vector<Tensor> maps, int layer = 1) : maps_(std::move(maps)), layer_(layer) {}

  std::size_t dim() const override { return maps_.empty() ? 0 : maps_[0].rows(); }
  std::size_t tokens() const override { return maps_.empty() ? 0 : maps_[0].cols(); }
  std::vector<int> layers() const override { return {layer_}; }
  std::vector<std::vector<ActivationMap>> collect(std::span<const std::uint64_t> sample_ids,
                                                  std::span<const int> layer_ids) override;

 private:
  std::vector<Tensor> maps_;
  int layer_;
};

struct TSTask {
  TaskSplit split;
  std::vector<Tensor> maps;
};
// First n_train samples train, the next n_test test; spec.n is ignored.
TSTask make_ts_task(const TSDatasetSpec& spec, std::size_t n_train, std::size_t n_test);

}  // namespace inca
