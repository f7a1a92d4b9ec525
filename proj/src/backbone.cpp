#include "inca/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "inca/graph.hpp"
#include "inca/parallel.hpp"
#include "inca/random.hpp"
#include "kernels.hpp"

namespace inca {

namespace {

using Clock = std::chrono::steady_clock;

// Token-wise (column) layer norm with unit scale and zero shift.
void normalize_columns(Tensor& z) {
  const std::size_t d = z.rows(), t = z.cols();
  const float eps = static_cast<float>(kLayerNormEps);
  std::vector<float> mean(t, 0.0f), var(t, 0.0f);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < t; ++j) mean[j] += z(i, j);
  for (auto& m : mean) m /= float(d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < t; ++j) {
      const float c = z(i, j) - mean[j];
      var[j] += c * c;
    }
  for (auto& v : var) v = 1.0f / std::sqrt(v / float(d) + eps);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < t; ++j) z(i, j) = (z(i, j) - mean[j]) * var[j];
}

Tensor unit_prototype(std::size_t dim, Rng& rng) {
  Tensor p({dim});
  fill_normal(p.data(), rng, 1.0);
  double norm = 0.0;
  for (float v : p.data()) norm += double(v) * v;
  norm = std::sqrt(norm);
  for (auto& v : p.data()) v = static_cast<float>(v / norm);
  return p;
}

void check_layers(std::span<const int> layer_ids, int depth) {
  for (int l : layer_ids)
    require(l >= 1 && l <= depth, ErrorKind::kRange,
            "unknown layer id " + std::to_string(l) + " (attachable layers are 1.." +
                std::to_string(depth) + ")");
}

}  // namespace

SyntheticBackbone::SyntheticBackbone(BackboneConfig cfg) : cfg_(cfg) {
  require(cfg_.depth >= 1 && cfg_.dim >= 1 && cfg_.tokens >= 1, ErrorKind::kConfig,
          "backbone needs depth, dim and tokens >= 1");
  mixing_.reserve(static_cast<std::size_t>(cfg_.depth));
  for (int j = 1; j <= cfg_.depth; ++j) {
    Rng rng(derive_seed(cfg_.seed, {0xb10c, static_cast<std::uint64_t>(j)}));
    Tensor w({cfg_.dim, cfg_.dim});
    fill_normal(w.data(), rng, 1.0 / std::sqrt(double(cfg_.dim)));
    mixing_.push_back(std::move(w));
  }
}

std::vector<ActivationMap> SyntheticBackbone::forward_collect(const Tensor& x,
                                                              std::span<const int> layer_ids,
                                                              std::uint64_t sample_id) const {
  require(x.rows() == cfg_.dim && x.cols() == cfg_.tokens, ErrorKind::kDimension,
          "backbone input must be " + std::to_string(cfg_.dim) + "x" +
              std::to_string(cfg_.tokens) + ", got " + shape_str(x.shape()));
  check_layers(layer_ids, cfg_.depth);
  std::vector<ActivationMap> out(layer_ids.size());
  if (layer_ids.empty()) return out;
  const int deepest = *std::max_element(layer_ids.begin(), layer_ids.end());

  Tensor z = x.reshaped({cfg_.dim, cfg_.tokens});
  Tensor mixed({cfg_.dim, cfg_.tokens});
  for (int j = 1; j <= deepest; ++j) {
    kernels::gemm(mixing_[j - 1].ptr(), z.ptr(), mixed.ptr(), cfg_.dim, cfg_.dim, cfg_.tokens);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += mixed[i];
    normalize_columns(z);
    for (std::size_t k = 0; k < layer_ids.size(); ++k)
      if (layer_ids[k] == j) out[k] = ActivationMap{j, sample_id, z};
  }
  return out;
}

std::uint64_t SyntheticBackbone::checksum() const {
  std::uint64_t h = 0;
  for (const auto& w : mixing_) h = fingerprint(w, h);
  return h;
}

TokenDataset make_token_dataset(const TokenTaskSpec& spec) {
  require(spec.classes >= 2, ErrorKind::kConfig, "token task needs at least 2 classes");
  TokenDataset out;
  out.split = make_balanced_split(spec.classes, spec.train, spec.test, spec.seed);
  Rng proto_rng(derive_seed(spec.seed, {0x9607}));
  std::vector<Tensor> protos;
  for (int c = 0; c < spec.classes; ++c) protos.push_back(unit_prototype(spec.dim, proto_rng));

  const std::size_t n = out.split.size();
  out.inputs.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng(derive_seed(spec.seed, {0x5a3e, s}));
    Tensor x({spec.dim, spec.tokens});
    fill_normal(x.data(), rng, 1.0 / std::sqrt(double(spec.dim)));
    const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, spec.tokens - 1)(rng);
    const auto& mu = protos[static_cast<std::size_t>(out.split.labels[s])];
    for (std::size_t i = 0; i < spec.dim; ++i) x(i, pos) = mu[i];
    if (spec.noise > 0) {
      std::normal_distribution<double> nd(0.0, spec.noise);
      for (auto& v : x.data()) v += static_cast<float>(nd(rng));
    }
    out.inputs[s] = std::move(x);
  }
  return out;
}

TaskSplit make_balanced_split(int classes, std::size_t train, std::size_t test,
                              std::uint64_t seed) {
  TaskSplit split;
  split.classes = classes;
  auto fill = [&](std::size_t count, std::uint64_t tag) {
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % std::size_t(classes));
    Rng rng(derive_seed(seed, {0x1abe1, tag}));
    std::shuffle(labels.begin(), labels.end(), rng);
    return labels;
  };
  auto tr = fill(train, 0);
  auto te = fill(test, 1);
  split.labels = tr;
  split.labels.insert(split.labels.end(), te.begin(), te.end());
  split.train.resize(train);
  std::iota(split.train.begin(), split.train.end(), std::uint64_t{0});
  split.test.resize(test);
  std::iota(split.test.begin(), split.test.end(), std::uint64_t{train});
  return split;
}

// ---------------------------------------------------------------------------

PlantedLayerOracle::PlantedLayerOracle(OracleConfig cfg) : cfg_(cfg) {
  require(cfg_.classes >= 1 && cfg_.dim >= 1 && cfg_.tokens >= 1 && cfg_.depth >= 1,
          ErrorKind::kConfig, "oracle needs classes, dim, tokens and depth >= 1");
  require(cfg_.planted_layer >= 1 && cfg_.planted_layer <= cfg_.depth, ErrorKind::kConfig,
          "oracle planted_layer must lie in 1..depth");
  require(cfg_.noise_base >= 0 && cfg_.noise_growth >= 0, ErrorKind::kConfig,
          "oracle noise parameters must be nonnegative");
  Rng rng(derive_seed(cfg_.seed, {0x9607}));
  for (int c = 0; c < cfg_.classes; ++c) prototypes_.push_back(unit_prototype(cfg_.dim, rng));
}

double PlantedLayerOracle::noise_std(int layer) const {
  return cfg_.noise_base * (1.0 + cfg_.noise_growth * std::abs(layer - cfg_.planted_layer));
}

std::size_t PlantedLayerOracle::planted_position(std::uint64_t sample_seed) const {
  if (!cfg_.permuted) return 0;
  Rng rng(derive_seed(sample_seed, {0x9051}));
  return std::uniform_int_distribution<std::size_t>(0, cfg_.tokens - 1)(rng);
}

ActivationMap PlantedLayerOracle::emit(int label, int layer, std::uint64_t sample_seed,
                                       std::uint64_t sample_id) const {
  require(label >= 0 && label < cfg_.classes, ErrorKind::kRange,
          "oracle label " + std::to_string(label) + " out of range");
  require(layer >= 1 && layer <= cfg_.depth, ErrorKind::kRange,
          "oracle layer " + std::to_string(layer) + " out of range");
  const std::size_t d = cfg_.dim, t = cfg_.tokens;
  Tensor z({d, t});
  Rng clean(derive_seed(sample_seed, {0xc1ea}));
  fill_normal(z.data(), clean, 1.0 / std::sqrt(double(d)));
  const std::size_t pos = planted_position(sample_seed);
  const auto& mu = prototypes_[static_cast<std::size_t>(label)];
  for (std::size_t i = 0; i < d; ++i) z(i, pos) = mu[i];

  const double sigma = noise_std(layer);
  if (sigma > 0) {
    Rng noise(derive_seed(sample_seed, {0x0015e, static_cast<std::uint64_t>(layer)}));
    std::normal_distribution<double> nd(0.0, sigma);
    for (auto& v : z.data()) v += static_cast<float>(nd(noise));
  }
  return ActivationMap{layer, sample_id, std::move(z)};
}

// ---------------------------------------------------------------------------

std::vector<int> BackboneSource::layers() const {
  std::vector<int> ls(static_cast<std::size_t>(backbone_.depth()));
  std::iota(ls.begin(), ls.end(), 1);
  return ls;
}

std::vector<std::vector<ActivationMap>> BackboneSource::collect(
    std::span<const std::uint64_t> sample_ids, std::span<const int> layer_ids) {
  const auto start = Clock::now();
  std::vector<std::vector<ActivationMap>> out(layer_ids.size(),
                                              std::vector<ActivationMap>(sample_ids.size()));
  for (auto id : sample_ids)
    require(id < data_.inputs.size(), ErrorKind::kRange,
            "sample id " + std::to_string(id) + " out of range");
  parallel_for(sample_ids.size(), [&](std::size_t s) {
    auto maps = backbone_.forward_collect(data_.inputs[sample_ids[s]], layer_ids, sample_ids[s]);
    for (std::size_t k = 0; k < maps.size(); ++k) out[k][s] = std::move(maps[k]);
  });
  counters_.batch_calls += 1;
  counters_.sample_forwards += sample_ids.size();
  counters_.backbone_seconds += std::chrono::duration<double>(Clock::now() - start).count();
  return out;
}

std::vector<int> OracleSource::layers() const {
  std::vector<int> ls(static_cast<std::size_t>(oracle_.config().depth));
  std::iota(ls.begin(), ls.end(), 1);
  return ls;
}

std::uint64_t OracleSource::sample_seed(std::uint64_t sample_id) const {
  return derive_seed(data_seed_, {0x5a3e, sample_id});
}

std::vector<std::vector<ActivationMap>> OracleSource::collect(
    std::span<const std::uint64_t> sample_ids, std::span<const int> layer_ids) {
  const auto start = Clock::now();
  std::vector<std::vector<ActivationMap>> out(layer_ids.size(),
                                              std::vector<ActivationMap>(sample_ids.size()));
  parallel_for(sample_ids.size(), [&](std::size_t s) {
    const auto id = sample_ids[s];
    require(id < split_.labels.size(), ErrorKind::kRange,
            "sample id " + std::to_string(id) + " out of range");
    for (std::size_t k = 0; k < layer_ids.size(); ++k)
      out[k][s] = oracle_.emit(split_.labels[id], layer_ids[k], sample_seed(id), id);
  });
  counters_.batch_calls += 1;
  counters_.sample_forwards += sample_ids.size();
  counters_.backbone_seconds += std::chrono::duration<double>(Clock::now() - start).count();
  return out;
}

}  // namespace inca
