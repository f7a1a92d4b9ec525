#include "inca.h"

#include <cstring>
#include <exception>
#include <string>

#include "inca/adapters.hpp"
#include "inca/config.hpp"
#include "inca/error.hpp"
#include "inca/experiment.hpp"

struct inca_config {
  inca::Config cfg;
  std::string scratch;
};

struct inca_adapter {
  inca::Adapter a;
};

namespace {

thread_local std::string g_last_error;

inca_status to_status(inca::ErrorKind k) {
  switch (k) {
    case inca::ErrorKind::kConfig: return INCA_ERR_CONFIG;
    case inca::ErrorKind::kDimension: return INCA_ERR_DIMENSION;
    case inca::ErrorKind::kRange: return INCA_ERR_RANGE;
    case inca::ErrorKind::kFormat: return INCA_ERR_FORMAT;
    case inca::ErrorKind::kIo: return INCA_ERR_IO;
    case inca::ErrorKind::kContract: return INCA_ERR_CONTRACT;
    case inca::ErrorKind::kIncompatible: return INCA_ERR_INCOMPATIBLE;
    case inca::ErrorKind::kResource: return INCA_ERR_RESOURCE;
  }
  return INCA_ERR_INTERNAL;
}

template <typename F>
inca_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return INCA_OK;
  } catch (const inca::Error& e) {
    g_last_error = e.what();
    return to_status(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return INCA_ERR_RESOURCE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return INCA_ERR_INTERNAL;
  }
}

inca_status bad_argument(const char* what) {
  g_last_error = what;
  return INCA_ERR_ARGUMENT;
}

}  // namespace

extern "C" {

const char* inca_version(void) { return "0.1.0"; }

const char* inca_status_name(inca_status s) {
  switch (s) {
    case INCA_OK: return "ok";
    case INCA_ERR_CONFIG: return "config";
    case INCA_ERR_DIMENSION: return "dimension";
    case INCA_ERR_RANGE: return "range";
    case INCA_ERR_FORMAT: return "format";
    case INCA_ERR_IO: return "io";
    case INCA_ERR_CONTRACT: return "contract";
    case INCA_ERR_INCOMPATIBLE: return "incompatible";
    case INCA_ERR_RESOURCE: return "resource";
    case INCA_ERR_ARGUMENT: return "argument";
    case INCA_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* inca_last_error(void) { return g_last_error.c_str(); }

inca_status inca_config_create(inca_config** out) {
  if (!out) return bad_argument("inca_config_create: null output");
  return guarded([&] { *out = new inca_config{}; });
}

inca_status inca_config_load(const char* path, inca_config** out) {
  if (!path || !out) return bad_argument("inca_config_load: null argument");
  return guarded([&] { *out = new inca_config{inca::Config::from_file(path), {}}; });
}

inca_status inca_config_set(inca_config* cfg, const char* assignment) {
  if (!cfg || !assignment) return bad_argument("inca_config_set: null argument");
  return guarded([&] { cfg->cfg.set(std::string(assignment)); });
}

inca_status inca_config_get(const inca_config* cfg, const char* key, const char** value) {
  if (!cfg || !key || !value) return bad_argument("inca_config_get: null argument");
  return guarded([&] {
    auto* self = const_cast<inca_config*>(cfg);
    self->scratch = cfg->cfg.str(key);
    *value = self->scratch.c_str();
  });
}

inca_status inca_config_dump(const inca_config* cfg, char* buf, size_t cap, size_t* needed) {
  if (!cfg) return bad_argument("inca_config_dump: null config");
  return guarded([&] {
    const auto text = cfg->cfg.to_ini();
    if (needed) *needed = text.size() + 1;
    if (buf && cap > 0) {
      const auto n = std::min(cap - 1, text.size());
      std::memcpy(buf, text.data(), n);
      buf[n] = '\0';
    }
  });
}

void inca_config_destroy(inca_config* cfg) { delete cfg; }

size_t inca_command_count(void) { return inca::command_names().size(); }

const char* inca_command_name(size_t index) {
  const auto& n = inca::command_names();
  return index < n.size() ? n[index].c_str() : nullptr;
}

inca_status inca_run(const inca_config* cfg, const char* command, const char* out_dir, int deterministic,
                     size_t* artifacts_written) {
  if (!cfg || !command) return bad_argument("inca_run: null argument");
  return guarded([&] {
    inca::RunOptions opt;
    if (out_dir) opt.out_dir = out_dir;
    opt.deterministic = deterministic != 0;
    const auto written = inca::run_command(command, cfg->cfg, opt);
    if (artifacts_written) *artifacts_written = written.size();
  });
}

inca_status inca_adapter_create(const char* kind, size_t dim, size_t heads, size_t queries, int classes,
                                uint64_t seed, inca_adapter** out) {
  if (!kind || !out) return bad_argument("inca_adapter_create: null argument");
  return guarded([&] {
    inca::AdapterSpec s;
    s.kind = inca::parse_adapter_kind(kind);
    s.dim = dim;
    s.heads = heads;
    s.queries = queries;
    s.classes = classes;
    *out = new inca_adapter{inca::init_adapter(s, seed)};
  });
}

inca_status inca_adapter_load(const char* path, inca_adapter** out) {
  if (!path || !out) return bad_argument("inca_adapter_load: null argument");
  return guarded([&] { *out = new inca_adapter{inca::load_adapter(path)}; });
}

inca_status inca_adapter_save(const inca_adapter* a, const char* path) {
  if (!a || !path) return bad_argument("inca_adapter_save: null argument");
  return guarded([&] { inca::save_adapter(a->a, path); });
}

inca_status inca_adapter_param_count(const inca_adapter* a, size_t* out) {
  if (!a || !out) return bad_argument("inca_adapter_param_count: null argument");
  return guarded([&] { *out = inca::parameter_count(a->a); });
}

inca_status inca_adapter_classes(const inca_adapter* a, size_t* out) {
  if (!a || !out) return bad_argument("inca_adapter_classes: null argument");
  return guarded([&] { *out = static_cast<size_t>(std::max(a->a.classes(), 0)); });
}

inca_status inca_adapter_logits(const inca_adapter* a, const float* tokens, size_t dim, size_t n_tokens,
                                float* out, size_t out_cap, size_t* n_out) {
  if (!a || !tokens || !out) return bad_argument("inca_adapter_logits: null argument");
  return guarded([&] {
    inca::Tensor z({dim, n_tokens}, std::vector<float>(tokens, tokens + dim * n_tokens));
    const auto l = inca::logits(z, a->a);
    inca::require(out_cap >= l.size(), inca::ErrorKind::kRange,
                  "inca_adapter_logits: output holds " + std::to_string(out_cap) + ", need " +
                      std::to_string(l.size()));
    std::copy(l.data().begin(), l.data().end(), out);
    if (n_out) *n_out = l.size();
  });
}

void inca_adapter_destroy(inca_adapter* a) { delete a; }

}  // extern "C"
