#include "inca/activation_cache.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"
#include "inca/error.hpp"

namespace inca {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr std::size_t kFixedHeader = 8 + 5 * 4 + 8;

std::string at_offset(std::uint64_t off) { return " at byte offset " + std::to_string(off); }

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(bool(out), ErrorKind::kIo, "cannot create " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      fail(ErrorKind::kIo, "write failed for " + tmp);
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorKind::kIo, "cannot rename " + tmp + " to " + path);
  }
}

std::string header_bytes(const CacheManifest& m) {
  std::string h(kCacheMagic, 8);
  io::put<std::uint32_t>(h, m.version);
  io::put<std::uint32_t>(h, m.dtype);
  io::put<std::uint32_t>(h, static_cast<std::uint32_t>(m.dim));
  io::put<std::uint32_t>(h, static_cast<std::uint32_t>(m.tokens));
  io::put<std::uint32_t>(h, static_cast<std::uint32_t>(m.layer_ids.size()));
  io::put<std::uint64_t>(h, m.sample_count);
  for (int l : m.layer_ids) io::put<std::uint32_t>(h, static_cast<std::uint32_t>(l));
  return h;
}

void layout(CacheManifest& m) {
  const std::uint64_t start = kFixedHeader + 4 * m.layer_ids.size();
  m.layer_offsets.clear();
  for (std::size_t k = 0; k < m.layer_ids.size(); ++k)
    m.layer_offsets.push_back(start + k * m.sample_count * m.record_bytes());
  m.file_bytes = start + m.layer_ids.size() * m.sample_count * m.record_bytes();
}

// Parses the fixed header and checks it against the manifest.
void check_header(const char* p, std::size_t available, const CacheManifest& m,
                  const std::string& path) {
  require(available >= kFixedHeader, ErrorKind::kFormat,
          path + ": truncated header (" + std::to_string(available) + " of " +
              std::to_string(kFixedHeader) + " bytes)");
  require(std::memcmp(p, kCacheMagic, 8) == 0, ErrorKind::kFormat,
          path + ": bad magic" + at_offset(0));
  auto field = [&](std::size_t off, std::uint64_t expect, const char* name) {
    const std::uint64_t v = off == 28 ? io::get<std::uint64_t>(p + off) : io::get<std::uint32_t>(p + off);
    require(v == expect, ErrorKind::kFormat,
            path + ": header field " + name + " is " + std::to_string(v) + " but manifest says " +
                std::to_string(expect) + at_offset(off));
  };
  field(8, m.version, "version");
  field(12, m.dtype, "dtype");
  field(16, m.dim, "d");
  field(20, m.tokens, "T");
  field(24, m.layer_ids.size(), "layer_count");
  field(28, m.sample_count, "sample_count");
  const std::size_t table = 4 * m.layer_ids.size();
  require(available >= kFixedHeader + table, ErrorKind::kFormat,
          path + ": truncated layer table" + at_offset(available));
  for (std::size_t k = 0; k < m.layer_ids.size(); ++k) {
    const auto off = kFixedHeader + 4 * k;
    const auto v = io::get<std::uint32_t>(p + off);
    require(v == static_cast<std::uint32_t>(m.layer_ids[k]), ErrorKind::kFormat,
            path + ": layer table entry " + std::to_string(k) + " is " + std::to_string(v) +
                " but manifest says " + std::to_string(m.layer_ids[k]) + at_offset(off));
  }
}

}  // namespace

std::string manifest_path(const std::string& cache_path) { return cache_path + ".manifest.json"; }

std::string CacheManifest::to_json() const {
  json j;
  j["format"] = "INCACHE1";
  j["version"] = version;
  j["dtype"] = dtype == 0 ? "f32" : "f64";
  j["d"] = dim;
  j["T"] = tokens;
  j["layer_ids"] = layer_ids;
  j["sample_count"] = sample_count;
  j["layer_offsets"] = layer_offsets;
  j["file_bytes"] = file_bytes;
  j["payload_checksum"] = io::hex64(payload_checksum);
  j["dataset_checksum"] = io::hex64(dataset_checksum);
  return j.dump(2) + "\n";
}

CacheManifest CacheManifest::from_json(const std::string& text) {
  CacheManifest m;
  try {
    const auto j = json::parse(text);
    m.version = j.at("version").get<std::uint32_t>();
    const auto dt = j.at("dtype").get<std::string>();
    require(dt == "f32" || dt == "f64", ErrorKind::kFormat, "manifest dtype must be f32 or f64");
    m.dtype = dt == "f32" ? 0 : 1;
    m.dim = j.at("d").get<std::size_t>();
    m.tokens = j.at("T").get<std::size_t>();
    m.layer_ids = j.at("layer_ids").get<std::vector<int>>();
    m.sample_count = j.at("sample_count").get<std::uint64_t>();
    m.layer_offsets = j.at("layer_offsets").get<std::vector<std::uint64_t>>();
    m.file_bytes = j.at("file_bytes").get<std::uint64_t>();
    m.payload_checksum = std::stoull(j.at("payload_checksum").get<std::string>(), nullptr, 16);
    m.dataset_checksum = std::stoull(j.at("dataset_checksum").get<std::string>(), nullptr, 16);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed cache manifest: ") + e.what());
  } catch (const std::invalid_argument&) {
    fail(ErrorKind::kFormat, "malformed checksum in cache manifest");
  }
  require(m.version == kCacheVersion, ErrorKind::kFormat,
          "unsupported cache version " + std::to_string(m.version));
  CacheManifest expect = m;
  layout(expect);
  require(expect.layer_offsets == m.layer_offsets && expect.file_bytes == m.file_bytes,
          ErrorKind::kFormat,
          "manifest offsets disagree with sample_count x layers x d x T");
  return m;
}

CacheManifest dump_epoch(ActivationSource& source, std::span<const std::uint64_t> sample_ids,
                         std::span<const int> layer_ids, const std::string& path,
                         std::size_t batch, std::uint64_t dataset_checksum) {
  require(!layer_ids.empty(), ErrorKind::kConfig, "dump_epoch needs at least one layer");
  require(batch >= 1, ErrorKind::kConfig, "dump_epoch batch must be >= 1");
  const auto available = source.layers();
  for (int l : layer_ids)
    require(std::find(available.begin(), available.end(), l) != available.end(), ErrorKind::kRange,
            "layer " + std::to_string(l) + " is not attachable");

  CacheManifest m;
  m.dtype = 0;
  m.dim = source.dim();
  m.tokens = source.tokens();
  m.layer_ids.assign(layer_ids.begin(), layer_ids.end());
  m.sample_count = sample_ids.size();
  m.dataset_checksum = dataset_checksum;
  layout(m);

  // Records are grouped by layer but produced batch by batch, so the file is
  // preallocated and each group is filled at its own offset.
  const std::string part = path + ".part";
  const int fd = ::open(part.c_str(), O_CREAT | O_TRUNC | O_RDWR, 0644);
  require(fd >= 0, ErrorKind::kIo, "cannot create " + part + ": " + std::strerror(errno));
  auto cleanup = [&] {
    ::close(fd);
    std::remove(part.c_str());
  };
  auto pwrite_all = [&](const char* p, std::size_t n, std::uint64_t off) {
    while (n > 0) {
      const auto w = ::pwrite(fd, p, n, static_cast<off_t>(off));
      if (w <= 0) {
        const std::string why = std::strerror(errno);
        cleanup();
        fail(ErrorKind::kIo, "write failed for " + part + at_offset(off) + ": " + why);
      }
      p += w;
      n -= static_cast<std::size_t>(w);
      off += static_cast<std::uint64_t>(w);
    }
  };

  const auto header = header_bytes(m);
  pwrite_all(header.data(), header.size(), 0);
  std::string rec;
  try {
    for (std::size_t b0 = 0; b0 < sample_ids.size(); b0 += batch) {
      const auto ids = sample_ids.subspan(b0, std::min(batch, sample_ids.size() - b0));
      const auto maps = source.collect(ids, layer_ids);
      for (std::size_t k = 0; k < layer_ids.size(); ++k)
        for (std::size_t s = 0; s < ids.size(); ++s) {
          const auto& t = maps[k][s].tokens;
          require(t.size() == m.dim * m.tokens, ErrorKind::kDimension, "activation map of wrong size");
          rec.clear();
          io::put<std::uint64_t>(rec, ids[s]);
          rec.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
          pwrite_all(rec.data(), rec.size(), m.layer_offsets[k] + (b0 + s) * m.record_bytes());
        }
    }
  } catch (const Error&) {
    cleanup();
    throw;
  }
  // Checksum in file order, read back from disk.
  {
    std::uint64_t h = io::kFnvOffset;
    std::vector<char> buf(m.record_bytes());
    for (std::size_t k = 0; k < layer_ids.size(); ++k)
      for (std::uint64_t r = 0; r < m.sample_count; ++r) {
        const auto off = m.layer_offsets[k] + r * m.record_bytes();
        if (::pread(fd, buf.data(), buf.size(), static_cast<off_t>(off)) !=
            static_cast<ssize_t>(buf.size())) {
          cleanup();
          fail(ErrorKind::kIo, "read-back failed for " + part + at_offset(off));
        }
        h = io::fnv1a(buf.data(), buf.size(), h);
      }
    m.payload_checksum = h;
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    std::remove(part.c_str());
    fail(ErrorKind::kIo, "cannot flush " + part);
  }
  std::error_code ec;
  fs::rename(part, path, ec);
  if (ec) {
    std::remove(part.c_str());
    fail(ErrorKind::kIo, "cannot rename " + part + " to " + path);
  }
  write_atomic(manifest_path(path), m.to_json());
  return m;
}

// ---------------------------------------------------------------------------

ActivationCache::ActivationCache(std::string path) : path_(std::move(path)) {
  const auto mpath = manifest_path(path_);
  require(fs::exists(mpath), ErrorKind::kFormat,
          path_ + ": manifest " + mpath + " missing (incomplete dump?)");
  manifest_ = CacheManifest::from_json(read_text(mpath));

  fd_ = ::open(path_.c_str(), O_RDONLY);
  require(fd_ >= 0, ErrorKind::kIo, "cannot open " + path_ + ": " + std::strerror(errno));
  try {
    struct stat st {};
    require(::fstat(fd_, &st) == 0, ErrorKind::kIo, "cannot stat " + path_);
    const auto size = static_cast<std::uint64_t>(st.st_size);
    std::string head(std::min<std::uint64_t>(size, kFixedHeader + 4 * manifest_.layer_ids.size()), '\0');
    require(::pread(fd_, head.data(), head.size(), 0) == static_cast<ssize_t>(head.size()),
            ErrorKind::kIo, "cannot read " + path_);
    check_header(head.data(), head.size(), manifest_, path_);
    if (size < manifest_.file_bytes) {
      const auto rb = manifest_.record_bytes();
      const auto idx = size < manifest_.layer_offsets[0] ? 0 : (size - manifest_.layer_offsets[0]) / rb;
      const auto k = idx / std::max<std::uint64_t>(manifest_.sample_count, 1);
      fail(ErrorKind::kFormat,
           path_ + ": truncated; record " + std::to_string(idx % std::max<std::uint64_t>(manifest_.sample_count, 1)) +
               " of layer " + std::to_string(manifest_.layer_ids[std::min<std::size_t>(k, manifest_.layer_ids.size() - 1)]) +
               " missing" + at_offset(manifest_.layer_offsets[0] + idx * rb) + " (file has " +
               std::to_string(size) + " of " + std::to_string(manifest_.file_bytes) + " bytes)");
    }
    require(size == manifest_.file_bytes, ErrorKind::kFormat,
            path_ + ": " + std::to_string(size - manifest_.file_bytes) +
                " trailing bytes after the last record" + at_offset(manifest_.file_bytes));

    ids_.resize(manifest_.sample_count);
    for (std::uint64_t r = 0; r < manifest_.sample_count; ++r) {
      const auto off = manifest_.layer_offsets[0] + r * manifest_.record_bytes();
      std::uint64_t id = 0;
      require(::pread(fd_, &id, 8, static_cast<off_t>(off)) == 8, ErrorKind::kIo,
              "cannot read " + path_ + at_offset(off));
      ids_[r] = id;
      require(index_.emplace(id, r).second, ErrorKind::kFormat,
              path_ + ": duplicate sample id " + std::to_string(id) + at_offset(off));
    }
  } catch (...) {
    ::close(fd_);
    throw;
  }
}

ActivationCache::~ActivationCache() {
  if (fd_ >= 0) ::close(fd_);
}

std::size_t ActivationCache::layer_index(int layer_id) const {
  const auto& ls = manifest_.layer_ids;
  const auto it = std::find(ls.begin(), ls.end(), layer_id);
  if (it == ls.end()) {
    std::string listed;
    for (int l : ls) listed += (listed.empty() ? "" : ",") + std::to_string(l);
    fail(ErrorKind::kRange,
         "layer " + std::to_string(layer_id) + " not cached (cached layers: " + listed + ")");
  }
  return static_cast<std::size_t>(it - ls.begin());
}

ActivationMap ActivationCache::read_record(std::size_t k, std::size_t r) const {
  const auto off = manifest_.layer_offsets[k] + r * manifest_.record_bytes();
  std::vector<char> buf(manifest_.record_bytes());
  require(::pread(fd_, buf.data(), buf.size(), static_cast<off_t>(off)) ==
              static_cast<ssize_t>(buf.size()),
          ErrorKind::kFormat,
          path_ + ": record " + std::to_string(r) + " of layer " +
              std::to_string(manifest_.layer_ids[k]) + " unreadable" + at_offset(off));
  const auto id = io::get<std::uint64_t>(buf.data());
  require(id == ids_[r], ErrorKind::kFormat,
          path_ + ": record " + std::to_string(r) + " of layer " +
              std::to_string(manifest_.layer_ids[k]) + " has sample id " + std::to_string(id) +
              ", expected " + std::to_string(ids_[r]) + at_offset(off));
  Tensor t({manifest_.dim, manifest_.tokens});
  const char* p = buf.data() + 8;
  if (manifest_.dtype == 0) {
    std::memcpy(t.ptr(), p, t.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<float>(io::get<double>(p + 8 * i));
  }
  return ActivationMap{manifest_.layer_ids[k], id, std::move(t)};
}

std::vector<ActivationMap> ActivationCache::read_batch(std::span<const std::uint64_t> sample_ids,
                                                       int layer_id) {
  const auto k = layer_index(layer_id);
  std::vector<ActivationMap> out;
  out.reserve(sample_ids.size());
  for (auto id : sample_ids) {
    const auto it = index_.find(id);
    require(it != index_.end(), ErrorKind::kRange,
            "sample id " + std::to_string(id) + " not in cache " + path_);
    out.push_back(read_record(k, it->second));
  }
  counters_.cache_reads += sample_ids.size();
  return out;
}

std::vector<std::vector<ActivationMap>> ActivationCache::collect(
    std::span<const std::uint64_t> sample_ids, std::span<const int> layer_ids) {
  std::vector<std::vector<ActivationMap>> out;
  out.reserve(layer_ids.size());
  for (int l : layer_ids) out.push_back(read_batch(sample_ids, l));
  counters_.batch_calls += 1;
  return out;
}

void ActivationCache::verify() const {
  std::uint64_t h = io::kFnvOffset;
  std::vector<char> buf(manifest_.record_bytes());
  for (std::size_t k = 0; k < manifest_.layer_ids.size(); ++k)
    for (std::uint64_t r = 0; r < manifest_.sample_count; ++r) {
      const auto off = manifest_.layer_offsets[k] + r * manifest_.record_bytes();
      require(::pread(fd_, buf.data(), buf.size(), static_cast<off_t>(off)) ==
                  static_cast<ssize_t>(buf.size()),
              ErrorKind::kFormat, path_ + ": unreadable record" + at_offset(off));
      h = io::fnv1a(buf.data(), buf.size(), h);
    }
  require(h == manifest_.payload_checksum, ErrorKind::kFormat,
          path_ + ": payload checksum " + io::hex64(h) + " does not match manifest " +
              io::hex64(manifest_.payload_checksum));
}

std::vector<ActivationMap> import_activations(const std::string& path) {
  ActivationCache cache(path);
  cache.verify();
  std::vector<ActivationMap> out;
  for (int l : cache.manifest().layer_ids) {
    auto maps = cache.read_batch(cache.sample_ids(), l);
    for (auto& m : maps) out.push_back(std::move(m));
  }
  return out;
}

CostReport measure_costs(double backbone_seconds, double adapter_seconds, int epochs, bool cached) {
  CostReport r;
  r.epochs = epochs;
  r.cached = cached;
  r.backbone_total = std::max(0.0, backbone_seconds);
  r.adapter_total = std::max(0.0, adapter_seconds);
  const double e = std::max(epochs, 1);
  r.backbone_epoch_cost = cached ? r.backbone_total : r.backbone_total / e;
  r.adapter_epoch_cost = r.adapter_total / e;
  return r;
}

}  // namespace inca
