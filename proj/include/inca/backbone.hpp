#pragma once

#include <chrono>
#include <cstdint>
#include <span>
#include <vector>

#include "inca/tensor.hpp"

namespace inca {

// One layer's d x T token map for one sample; tokens are columns.
struct ActivationMap {
  int layer_id = 0;
  std::uint64_t sample_id = 0;
  Tensor tokens;
};

// Labels and the train/test partition of a task. Sample ids index `labels`.
struct TaskSplit {
  int classes = 0;
  std::vector<int> labels;
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> test;

  std::size_t size() const noexcept { return labels.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic frozen backbone

struct BackboneConfig {
  int depth = 12;
  std::size_t dim = 64;
  std::size_t tokens = 16;
  std::uint64_t seed = 0;
};

// f = g_n o ... o g_1 with g_j(z) = layer_norm(z + W_j z) applied token-wise.
// Layer j (1-based) is the post-residual output of block j; only those are
// attachable.
class SyntheticBackbone {
 public:
  explicit SyntheticBackbone(BackboneConfig cfg);

  const BackboneConfig& config() const noexcept { return cfg_; }
  int depth() const noexcept { return cfg_.depth; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  std::size_t tokens() const noexcept { return cfg_.tokens; }
  const Tensor& mixing(int layer) const { return mixing_.at(static_cast<std::size_t>(layer - 1)); }

  // Single pass up to the deepest requested layer. Returned maps follow the
  // order of `layer_ids`.
  std::vector<ActivationMap> forward_collect(const Tensor& x, std::span<const int> layer_ids,
                                             std::uint64_t sample_id = 0) const;

  // Fingerprint of every frozen tensor.
  std::uint64_t checksum() const;

 private:
  BackboneConfig cfg_;
  std::vector<Tensor> mixing_;
};

// Inputs for the synthetic backbone: each sample hides its class prototype in
// one token (random position) among N(0, I/d) tokens, plus isotropic noise.
struct TokenTaskSpec {
  int classes = 4;
  std::size_t train = 256;
  std::size_t test = 256;
  std::size_t dim = 64;
  std::size_t tokens = 16;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

struct TokenDataset {
  TaskSplit split;
  std::vector<Tensor> inputs;  // by sample id
};

TokenDataset make_token_dataset(const TokenTaskSpec& spec);

// ---------------------------------------------------------------------------
// Planted-layer oracle

struct OracleConfig {
  int depth = 12;
  std::size_t dim = 32;
  std::size_t tokens = 16;
  int classes = 4;
  int planted_layer = 6;
  double noise_base = 0.1;
  double noise_growth = 0.5;
  bool permuted = true;
  std::uint64_t seed = 0;
};

// Emits layer activations directly: one token carries the class prototype,
// the rest are N(0, I/d), and every entry gets N(0, sigma_l^2) noise with
// sigma_l = noise_base * (1 + noise_growth * |l - planted_layer|).
class PlantedLayerOracle {
 public:
  explicit PlantedLayerOracle(OracleConfig cfg);

  const OracleConfig& config() const noexcept { return cfg_; }
  double noise_std(int layer) const;
  const Tensor& prototype(int label) const { return prototypes_.at(static_cast<std::size_t>(label)); }

  // The same sample_seed gives the same clean tokens at every layer; the
  // layer only changes the noise draw.
  ActivationMap emit(int label, int layer, std::uint64_t sample_seed,
                     std::uint64_t sample_id = 0) const;
  std::size_t planted_position(std::uint64_t sample_seed) const;

 private:
  OracleConfig cfg_;
  std::vector<Tensor> prototypes_;  // unit norm, length d
};

// Balanced labels, sample ids [0, train) train and [train, train + test) test.
TaskSplit make_balanced_split(int classes, std::size_t train, std::size_t test, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Activation sources

struct ForwardCounters {
  std::uint64_t batch_calls = 0;      // batched inferences (or cache batch reads)
  std::uint64_t sample_forwards = 0;  // per-sample backbone evaluations
  std::uint64_t cache_reads = 0;      // per-sample cache record reads
  double backbone_seconds = 0.0;
};

// Where adapters get their inputs. collect() is one batched inference that
// returns maps[k][s] for layer_ids[k] and sample_ids[s].
class ActivationSource {
 public:
  virtual ~ActivationSource() = default;

  virtual std::size_t dim() const = 0;
  virtual std::size_t tokens() const = 0;
  virtual std::vector<int> layers() const = 0;
  virtual std::vector<std::vector<ActivationMap>> collect(
      std::span<const std::uint64_t> sample_ids, std::span<const int> layer_ids) = 0;

  const ForwardCounters& counters() const noexcept { return counters_; }
  void reset_counters() noexcept { counters_ = {}; }

 protected:
  ForwardCounters counters_;
};

class BackboneSource final : public ActivationSource {
 public:
  BackboneSource(const SyntheticBackbone& backbone, const TokenDataset& data)
      : backbone_(backbone), data_(data) {}

  std::size_t dim() const override { return backbone_.dim(); }
  std::size_t tokens() const override { return backbone_.tokens(); }
  std::vector<int> layers() const override;
  std::vector<std::vector<ActivationMap>> collect(std::span<const std::uint64_t> sample_ids,
                                                  std::span<const int> layer_ids) override;

 private:
  const SyntheticBackbone& backbone_;
  const TokenDataset& data_;
};

class OracleSource final : public ActivationSource {
 public:
  // Sample seeds are derived from `data_seed` and the sample id.
  OracleSource(const PlantedLayerOracle& oracle, const TaskSplit& split, std::uint64_t data_seed)
      : oracle_(oracle), split_(split), data_seed_(data_seed) {}

  std::size_t dim() const override { return oracle_.config().dim; }
  std::size_t tokens() const override { return oracle_.config().tokens; }
  std::vector<int> layers() const override;
  std::vector<std::vector<ActivationMap>> collect(std::span<const std::uint64_t> sample_ids,
                                                  std::span<const int> layer_ids) override;
  std::uint64_t sample_seed(std::uint64_t sample_id) const;

 private:
  const PlantedLayerOracle& oracle_;
  const TaskSplit& split_;
  std::uint64_t data_seed_;
};

// Reads a cache file written by dump_epoch; see activation_cache.hpp.
std::vector<ActivationMap> import_activations(const std::string& path);

}  // namespace inca
