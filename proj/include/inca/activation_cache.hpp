#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "inca/backbone.hpp"

namespace inca {

// Binary layout (little-endian):
//   "INCACHE1" | u32 version | u32 dtype (0 f32, 1 f64) | u32 d | u32 T |
//   u32 layer count | u64 sample count | u32 layer ids[] |
//   records grouped by layer, each u64 sample_id + d*T scalars.
// A JSON sidecar `<path>.manifest.json` is written last.
inline constexpr char kCacheMagic[8] = {'I', 'N', 'C', 'A', 'C', 'H', 'E', '1'};
inline constexpr std::uint32_t kCacheVersion = 1;

struct CacheManifest {
  std::uint32_t version = kCacheVersion;
  std::uint32_t dtype = 0;
  std::size_t dim = 0;
  std::size_t tokens = 0;
  std::vector<int> layer_ids;
  std::uint64_t sample_count = 0;
  std::vector<std::uint64_t> layer_offsets;  // byte offset of each layer group
  std::uint64_t file_bytes = 0;
  std::uint64_t payload_checksum = 0;  // FNV-1a over every record
  std::uint64_t dataset_checksum = 0;  // supplied by the producer

  std::size_t scalar_bytes() const { return dtype == 0 ? 4 : 8; }
  std::size_t record_bytes() const { return 8 + dim * tokens * scalar_bytes(); }
  std::string to_json() const;
  static CacheManifest from_json(const std::string& text);
};

std::string manifest_path(const std::string& cache_path);

// Runs the source once over `sample_ids` (in that order, `batch` at a time)
// and stores every requested layer. On failure no file is left behind.
CacheManifest dump_epoch(ActivationSource& source, std::span<const std::uint64_t> sample_ids,
                         std::span<const int> layer_ids, const std::string& path,
                         std::size_t batch = 64, std::uint64_t dataset_checksum = 0);

// Read-only view of a finished dump. Reads are positional, so one instance
// may serve concurrent readers.
class ActivationCache final : public ActivationSource {
 public:
  explicit ActivationCache(std::string path);
  ~ActivationCache() override;
  ActivationCache(const ActivationCache&) = delete;
  ActivationCache& operator=(const ActivationCache&) = delete;

  const CacheManifest& manifest() const noexcept { return manifest_; }
  const std::string& path() const noexcept { return path_; }
  // Sample ids in dump order.
  const std::vector<std::uint64_t>& sample_ids() const noexcept { return ids_; }

  std::vector<ActivationMap> read_batch(std::span<const std::uint64_t> sample_ids, int layer_id);
  // Recomputes the payload checksum; throws on mismatch.
  void verify() const;

  std::size_t dim() const override { return manifest_.dim; }
  std::size_t tokens() const override { return manifest_.tokens; }
  std::vector<int> layers() const override { return manifest_.layer_ids; }
  std::vector<std::vector<ActivationMap>> collect(std::span<const std::uint64_t> sample_ids,
                                                  std::span<const int> layer_ids) override;

 private:
  ActivationMap read_record(std::size_t layer_index, std::size_t record) const;
  std::size_t layer_index(int layer_id) const;

  std::string path_;
  int fd_ = -1;
  CacheManifest manifest_;
  std::vector<std::uint64_t> ids_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

// Wall-clock split of a training run. C_PT is the backbone cost of one
// epoch, C_A the adapter cost of one epoch.
struct CostReport {
  double backbone_epoch_cost = 0.0;
  double adapter_epoch_cost = 0.0;
  double backbone_total = 0.0;
  double adapter_total = 0.0;
  int epochs = 0;
  bool cached = false;
};

// `backbone_seconds` covers every backbone evaluation of the run (the dump
// when cached), `adapter_seconds` all adapter forward/backward/update work.
CostReport measure_costs(double backbone_seconds, double adapter_seconds, int epochs, bool cached);

}  // namespace inca
