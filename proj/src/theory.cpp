#include "inca/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "inca/adapters.hpp"
#include "inca/error.hpp"
#include "inca/parallel.hpp"
#include "inca/random.hpp"
#include "json.hpp"

namespace inca {

namespace {

double dot_column(const Tensor64& x, std::size_t j, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x(i, j) * w[i];
  return s;
}

// <w, x^j> for every token.
std::vector<double> projections(const Tensor64& x, const std::vector<double>& w) {
  require(x.rows() == w.size(), ErrorKind::kDimension,
          "token dimension " + std::to_string(x.rows()) + " vs direction " + std::to_string(w.size()));
  std::vector<double> p(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row_span(i);
    for (std::size_t j = 0; j < p.size(); ++j) p[j] += row[j] * w[i];
  }
  return p;
}

Tensor64 as_row(const std::vector<double>& v) { return Tensor64({1, v.size()}, v); }

double binomial_sigma(double p, std::size_t n) { return std::sqrt(std::max(p * (1.0 - p), 0.0) / double(n)); }

}  // namespace

void validate(const TSDatasetSpec& spec) {
  require(spec.c > 0, ErrorKind::kConfig, "theory.c must be positive (margin infeasible)");
  require(spec.n >= 1 && spec.tokens >= 1 && spec.dim >= 2, ErrorKind::kConfig,
          "theory: need n >= 1, tokens >= 1, dim >= 2");
  require(spec.delta > 0 && spec.delta < 1, ErrorKind::kConfig, "theory.delta must lie in (0, 1)");
  require(spec.permuted || spec.position < spec.tokens, ErrorKind::kConfig,
          "theory.position must be < tokens");
  if (!spec.w.empty()) {
    require(spec.w.size() == spec.dim, ErrorKind::kConfig, "theory.w must have dim entries");
    double n2 = 0.0;
    for (double v : spec.w) n2 += v * v;
    require(std::abs(std::sqrt(n2) - 1.0) < 1e-9, ErrorKind::kConfig, "theory.w must have unit norm");
  }
}

std::vector<double> witness(const TSDatasetSpec& spec) {
  if (!spec.w.empty()) return spec.w;
  std::vector<double> w(spec.dim);
  Rng rng(derive_seed(spec.seed, {0x3a}));
  fill_normal(std::span<double>(w), rng, 1.0);
  double n2 = 0.0;
  for (double v : w) n2 += v * v;
  for (auto& v : w) v /= std::sqrt(n2);
  return w;
}

TSSample draw_ts_sample(const TSDatasetSpec& spec, const std::vector<double>& w, std::uint64_t trial,
                        std::size_t i) {
  Rng rng(derive_seed(spec.seed, {0x75, trial, static_cast<std::uint64_t>(i)}));
  TSSample s;
  s.y = (rng() & 1) ? 1 : -1;
  s.position = spec.permuted ? static_cast<std::size_t>(rng() % spec.tokens) : spec.position;
  s.x = Tensor64({spec.dim, spec.tokens});
  fill_normal(s.x.data(), rng, 1.0 / std::sqrt(double(spec.dim)));

  // The planted token keeps its noise orthogonal to w and sits at exact
  // margin c along w.
  const std::size_t j = s.position;
  const double along = dot_column(s.x, j, w);
  const double target = s.y * spec.c - spec.b;
  for (std::size_t r = 0; r < spec.dim; ++r) s.x(r, j) += (target - along) * w[r];
  return s;
}

TSDataset generate_ts_dataset(const TSDatasetSpec& spec, std::uint64_t trial) {
  validate(spec);
  TSDataset d;
  d.w = witness(spec);
  d.b = spec.b;
  d.samples.resize(spec.n);
  parallel_for(spec.n, [&](std::size_t i) { d.samples[i] = draw_ts_sample(spec, d.w, trial, i); });
  d.c_realized = margin_of(d.w, d.b, d);
  return d;
}

double margin_of(const std::vector<double>& w, double b, const TSDataset& data) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& s : data.samples) {
    double best = -std::numeric_limits<double>::infinity();
    for (double p : projections(s.x, w)) best = std::max(best, s.y * (p + b));
    worst = std::min(worst, best);
  }
  return worst;
}

SeparatorParams construct_separator(const std::vector<double>& w, double b, double c,
                                    std::size_t tokens, double eps) {
  require(c > 0, ErrorKind::kConfig, "separator: margin c must be positive");
  require(eps > 0 && eps < 1.0 / 3.0, ErrorKind::kConfig,
          "separator: eps must lie in (0, 1/3), got " + std::to_string(eps));
  require(tokens >= 1, ErrorKind::kConfig, "separator: need at least one token");
  (void)b;  // the -c/4 threshold works for every |b| <= c/2
  SeparatorParams sp;
  sp.eps = eps;
  sp.t = (4.0 / c) * std::log(double(tokens) / eps);
  sp.u = w;
  sp.q = w;
  for (auto& v : sp.q) v *= sp.t;
  sp.bias = -c / 4.0;
  return sp;
}

int cross_attn_classify(const Tensor64& x, const SeparatorParams& sp) {
  const CollapsedParams<double> cp{as_row(sp.q), as_row(sp.u)};
  const double score = collapse_apply(x, cp)[0] + sp.bias;
  return score >= 0 ? 1 : -1;
}

int linear_classify(const Tensor64& x, const std::vector<double>& w, double b) {
  double s = b;
  for (double p : projections(x, w)) s += p;
  return s >= 0 ? 1 : -1;
}

ConditionCheck check_condition(const TSDatasetSpec& spec) {
  ConditionCheck c;
  c.concentration_term =
      std::sqrt((32.0 / double(spec.dim)) *
                (std::log(1.0 / spec.delta) + std::log(2.0 * double(spec.n) * double(spec.tokens))));
  c.bias_term = 2.0 * std::abs(spec.b);
  c.required_c = std::max(c.concentration_term, c.bias_term);
  c.slack = spec.c - c.required_c;
  c.satisfied = spec.c >= c.required_c;
  return c;
}

double success_delta(const TSDatasetSpec& spec) {
  return 2.0 * double(spec.tokens) * double(spec.n) * std::exp(-double(spec.dim) * spec.c * spec.c / 32.0);
}

double failure_s(const TSDatasetSpec& spec) {
  require(spec.tokens >= 2, ErrorKind::kConfig, "failure bound needs at least 2 tokens");
  return std::sqrt(double(spec.dim)) * spec.c / std::sqrt(double(spec.tokens - 1));
}

double linear_failure_bound(double s) {
  return (1.0 / std::sqrt(2.0 * std::numbers::pi)) * s / (s * s + 1.0) * std::exp(-s * s / 2.0);
}

SuccessReport verify_success_bound(const TSDatasetSpec& spec, std::size_t trials, double eps,
                                   bool allow_outside) {
  validate(spec);
  require(trials >= 1, ErrorKind::kConfig, "theory.trials must be >= 1");
  SuccessReport r;
  r.condition = check_condition(spec);
  require(r.condition.satisfied || allow_outside, ErrorKind::kConfig,
          "theory: hypothesis not met, c = " + std::to_string(spec.c) + " < required " +
              std::to_string(r.condition.required_c));
  const auto w = witness(spec);
  r.separator = construct_separator(w, spec.b, spec.c, spec.tokens, eps);
  r.delta = success_delta(spec);
  r.trials = trials;
  r.concentration_bound = 1.0 - 2.0 * double(spec.tokens) * std::exp(-double(spec.dim) * spec.c * spec.c / 32.0);

  struct Tally {
    bool all_right = true;
    std::size_t concentrated = 0, positive_concentrated = 0, saturated = 0;
  };
  std::vector<Tally> tallies(trials);
  const Tensor64 q = as_row(r.separator.q);
  parallel_for(trials, [&](std::size_t k) {
    auto& t = tallies[k];
    for (std::size_t i = 0; i < spec.n; ++i) {
      const auto s = draw_ts_sample(spec, w, k, i);
      if (cross_attn_classify(s.x, r.separator) != s.y) t.all_right = false;
      const auto p = projections(s.x, w);
      double m = 0.0;
      for (std::size_t j = 0; j < p.size(); ++j)
        if (j != s.position) m = std::max(m, std::abs(p[j]));
      if (m < spec.c / 4.0) ++t.concentrated;
      if (m < spec.c / 4.0 && s.y > 0) {
        ++t.positive_concentrated;
        const auto weights = collapse_weights(s.x, q);
        if (weights[s.position] >= 1.0 - eps) ++t.saturated;
      }
    }
  });
  for (const auto& t : tallies) {
    r.separated += t.all_right;
    r.concentrated += t.concentrated;
    r.positive_concentrated += t.positive_concentrated;
    r.saturated += t.saturated;
  }
  r.samples = trials * spec.n;
  r.separation_rate = double(r.separated) / double(trials);
  r.mc_sigma = binomial_sigma(1.0 - r.delta, trials);
  r.passed = r.separation_rate >= 1.0 - r.delta - 3.0 * r.mc_sigma;
  return r;
}

FailureReport verify_linear_failure(const TSDatasetSpec& spec, std::size_t trials) {
  validate(spec);
  require(trials >= 1, ErrorKind::kConfig, "theory.trials must be >= 1");
  FailureReport r;
  r.s = failure_s(spec);
  r.bound = linear_failure_bound(r.s);
  r.trials = trials;
  const auto w = witness(spec);
  std::vector<std::size_t> wrong(trials, 0);
  parallel_for(trials, [&](std::size_t k) {
    for (std::size_t i = 0; i < spec.n; ++i) {
      const auto s = draw_ts_sample(spec, w, k, i);
      wrong[k] += linear_classify(s.x, w, spec.b) != s.y;
    }
  });
  std::size_t wrong_samples = 0;
  for (auto v : wrong) {
    r.failed += v > 0;
    wrong_samples += v;
  }
  r.failure_rate = double(r.failed) / double(trials);
  r.sample_failure_rate = double(wrong_samples) / double(trials * spec.n);
  r.mc_sigma = binomial_sigma(r.bound, trials);
  r.passed = r.failure_rate >= r.bound - 3.0 * r.mc_sigma;
  return r;
}

std::string SuccessReport::to_json() const {
  nlohmann::json j;
  j["condition"] = {{"satisfied", condition.satisfied}, {"required_c", condition.required_c},
                    {"concentration_term", condition.concentration_term},
                    {"bias_term", condition.bias_term}, {"slack", condition.slack}};
  j["separator"] = {{"t", separator.t}, {"eps", separator.eps}, {"bias", separator.bias}};
  j["delta_bound"] = delta;
  j["trials"] = trials;
  j["separated"] = separated;
  j["separation_rate"] = separation_rate;
  j["mc_sigma"] = mc_sigma;
  j["samples"] = samples;
  j["concentrated"] = concentrated;
  j["positive_concentrated"] = positive_concentrated;
  j["saturated"] = saturated;
  j["concentration_bound"] = concentration_bound;
  j["passed"] = passed;
  return j.dump(2) + "\n";
}

std::string FailureReport::to_json() const {
  nlohmann::json j = {{"s", s},
                      {"bound", bound},
                      {"trials", trials},
                      {"failed", failed},
                      {"failure_rate", failure_rate},
                      {"sample_failure_rate", sample_failure_rate},
                      {"mc_sigma", mc_sigma},
                      {"passed", passed}};
  return j.dump(2) + "\n";
}

std::vector<std::vector<ActivationMap>> InMemorySource::collect(std::span<const std::uint64_t> sample_ids,
                                                                std::span<const int> layer_ids) {
  for (int l : layer_ids)
    require(l == layer_, ErrorKind::kRange, "layer " + std::to_string(l) + " is not available");
  std::vector<std::vector<ActivationMap>> out(layer_ids.size());
  for (auto& per_layer : out)
    for (auto id : sample_ids) {
      require(id < maps_.size(), ErrorKind::kRange, "sample " + std::to_string(id) + " out of range");
      per_layer.push_back({layer_, id, maps_[id]});
    }
  counters_.batch_calls += 1;
  return out;
}

TSTask make_ts_task(const TSDatasetSpec& spec, std::size_t n_train, std::size_t n_test) {
  TSDatasetSpec s = spec;
  s.n = n_train + n_test;
  const auto data = generate_ts_dataset(s);
  TSTask task;
  task.split.classes = 2;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    task.split.labels.push_back(data.samples[i].y > 0 ? 1 : 0);
    (i < n_train ? task.split.train : task.split.test).push_back(i);
    task.maps.push_back(tensor_cast<float>(data.samples[i].x));
  }
  return task;
}

}  // namespace inca
