#include "inca/experiment.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "inca/activation_cache.hpp"
#include "inca/backbone.hpp"
#include "inca/error.hpp"
#include "inca/incremental.hpp"
#include "inca/random.hpp"
#include "inca/theory.hpp"
#include "inca/trainer.hpp"
#include "json.hpp"

namespace inca {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream o;
  o << "0x" << std::hex << v;
  return o.str();
}

std::string timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::size_t positive(const Config& c, const std::string& key) {
  const auto v = c.integer(key);
  require(v >= 1, ErrorKind::kConfig, "config key '" + key + "' must be >= 1");
  return static_cast<std::size_t>(v);
}

// Live data, its split, and an optional cache over it.
struct Workspace {
  std::string source_kind;
  std::uint64_t seed = 0;
  std::unique_ptr<SyntheticBackbone> backbone;
  std::unique_ptr<TokenDataset> tokens;
  std::unique_ptr<PlantedLayerOracle> oracle;
  TaskSplit split;
  std::unique_ptr<ActivationSource> live;
  std::unique_ptr<ActivationCache> cache;
  std::uint64_t dataset_checksum = 0;

  ActivationSource& source() { return cache ? static_cast<ActivationSource&>(*cache) : *live; }
  std::vector<std::uint64_t> all_ids() const {
    std::vector<std::uint64_t> ids(split.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return ids;
  }
};

std::unique_ptr<Workspace> make_workspace(const Config& c) {
  auto w = std::make_unique<Workspace>();
  w->seed = c.u64("run.seed");
  w->source_kind = c.str("run.source");
  const auto train = positive(c, "dataset.train");
  const auto test = static_cast<std::size_t>(c.integer("dataset.test"));
  const auto data_seed = c.u64("dataset.seed");
  std::string fingerprint = w->source_kind;

  if (w->source_kind == "oracle") {
    OracleConfig oc;
    oc.depth = static_cast<int>(positive(c, "oracle.depth"));
    oc.dim = positive(c, "oracle.dim");
    oc.tokens = positive(c, "oracle.tokens");
    oc.classes = static_cast<int>(positive(c, "dataset.classes"));
    oc.planted_layer = static_cast<int>(c.integer("oracle.planted_layer"));
    require(oc.planted_layer >= 1 && oc.planted_layer <= oc.depth, ErrorKind::kConfig,
            "config key 'oracle.planted_layer' must lie in [1, oracle.depth]");
    oc.noise_base = c.real("oracle.noise_base");
    oc.noise_growth = c.real("oracle.noise_growth");
    oc.permuted = c.boolean("oracle.permuted");
    oc.seed = derive_seed(w->seed, {1, c.u64("oracle.seed")});
    w->oracle = std::make_unique<PlantedLayerOracle>(oc);
    w->split = make_balanced_split(oc.classes, train, test, derive_seed(w->seed, {2, data_seed}));
    w->live = std::make_unique<OracleSource>(*w->oracle, w->split, derive_seed(w->seed, {3, data_seed}));
    for (const auto& k : {"oracle.depth", "oracle.dim", "oracle.tokens", "oracle.planted_layer",
                          "oracle.noise_base", "oracle.noise_growth", "oracle.permuted", "oracle.seed"})
      fingerprint += "|" + c.str(k);
  } else if (w->source_kind == "backbone") {
    TokenTaskSpec ts;
    ts.classes = static_cast<int>(positive(c, "dataset.classes"));
    ts.train = train;
    ts.test = test;
    ts.dim = positive(c, "backbone.dim");
    ts.tokens = positive(c, "backbone.tokens");
    ts.noise = c.real("dataset.noise");
    ts.seed = derive_seed(w->seed, {4, data_seed});
    w->tokens = std::make_unique<TokenDataset>(make_token_dataset(ts));
    w->backbone = std::make_unique<SyntheticBackbone>(
        BackboneConfig{static_cast<int>(positive(c, "backbone.depth")), ts.dim, ts.tokens,
                       derive_seed(w->seed, {5, c.u64("backbone.seed")})});
    w->split = w->tokens->split;
    w->live = std::make_unique<BackboneSource>(*w->backbone, *w->tokens);
    fingerprint += "|" + hex(w->backbone->checksum()) + "|" + c.str("dataset.noise");
  } else if (w->source_kind == "ts") {
    TSDatasetSpec ts;
    ts.dim = positive(c, "ts.dim");
    ts.tokens = positive(c, "ts.tokens");
    ts.c = c.real("ts.c");
    ts.b = c.real("ts.b");
    ts.permuted = c.boolean("ts.permuted");
    ts.seed = derive_seed(w->seed, {6, data_seed});
    auto task = make_ts_task(ts, train, test);
    w->split = std::move(task.split);
    w->live = std::make_unique<InMemorySource>(std::move(task.maps));
    for (const auto& k : {"ts.dim", "ts.tokens", "ts.c", "ts.b", "ts.permuted"}) fingerprint += "|" + c.str(k);
  } else {
    fail(ErrorKind::kConfig, "config key 'run.source': expected oracle, backbone or ts, got '" +
                                 w->source_kind + "'");
  }
  for (const auto& k : {"run.seed", "dataset.classes", "dataset.train", "dataset.test", "dataset.seed"})
    fingerprint += "|" + c.str(k);
  w->dataset_checksum = fnv(fingerprint);
  return w;
}

void open_cache(Workspace& w, const Config& c) {
  const auto& mode = c.str("cache.mode");
  const auto& path = c.str("cache.path");
  require(mode == "auto" || mode == "live" || mode == "cached", ErrorKind::kConfig,
          "config key 'cache.mode': expected auto, live or cached, got '" + mode + "'");
  if (mode == "live") return;
  if (mode == "cached")
    require(!path.empty(), ErrorKind::kConfig, "config key 'cache.path' is required when cache.mode = cached");
  if (path.empty() || (mode == "auto" && !fs::exists(path))) return;
  w.cache = std::make_unique<ActivationCache>(path);
  require(w.cache->manifest().dataset_checksum == w.dataset_checksum, ErrorKind::kIncompatible,
          "cache '" + path + "' was produced from a different dataset configuration");
}

std::vector<int> chosen_layers(const Config& c, ActivationSource& src) {
  if (c.str("trainer.layers") == "all") return src.layers();
  const auto ls = c.ints("trainer.layers");
  require(!ls.empty(), ErrorKind::kConfig, "config key 'trainer.layers' is empty");
  return ls;
}

AdapterSpec adapter_spec(const Config& c, std::size_t dim, int classes) {
  AdapterSpec s;
  try {
    s.kind = parse_adapter_kind(c.str("adapter.type"));
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("config key 'adapter.type': ") + e.what());
  }
  s.dim = dim;
  s.heads = positive(c, "adapter.heads");
  s.queries = positive(c, "adapter.queries");
  s.classes = classes;
  if (c.str("adapter.hidden") != "auto") s.hidden = positive(c, "adapter.hidden");
  require(dim % s.heads == 0 || s.kind == AdapterKind::kLinearProbe || s.kind == AdapterKind::kMlp3,
          ErrorKind::kConfig, "config key 'adapter.heads' must divide the token dimension " + std::to_string(dim));
  return s;
}

TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.epochs = static_cast<int>(positive(c, "trainer.epochs"));
  t.lrs = c.reals("trainer.lrs");
  t.weight_decay = c.real("trainer.weight_decay");
  t.batch = positive(c, "trainer.batch");
  t.seed = derive_seed(c.u64("run.seed"), {7});
  const auto& mode = c.str("trainer.mode");
  require(mode == "full" || mode == "query-only", ErrorKind::kConfig,
          "config key 'trainer.mode': expected full or query-only, got '" + mode + "'");
  t.mode = mode == "full" ? TrainMode::kFull : TrainMode::kQueryOnly;
  try {
    t.loss = parse_loss_kind(c.str("trainer.loss"));
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("config key 'trainer.loss': ") + e.what());
  }
  validate(t);
  return t;
}

struct Writer {
  const RunOptions& opt;
  const Config& cfg;
  std::string command;
  std::vector<std::string> written;

  std::string path(const std::string& name) const { return (fs::path(opt.out_dir) / name).string(); }

  void text(const std::string& name, const std::string& body) {
    const auto p = path(name);
    const auto tmp = p + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      out << body;
      require(out.good(), ErrorKind::kIo, "cannot write '" + tmp + "'");
    }
    fs::rename(tmp, p);
    written.push_back(p);
  }

  // Envelope with the resolved config so every artifact is self-describing.
  void report(const std::string& name, json result) {
    json j;
    j["command"] = command;
    j["seed"] = cfg.u64("run.seed");
    j["config"] = cfg.values();
    if (!opt.deterministic) j["generated_at"] = timestamp();
    j["result"] = std::move(result);
    text(name, j.dump(2) + "\n");
  }
};

json train_json(const TrainReport& r, bool deterministic) {
  json j = json::parse(r.to_json());
  if (deterministic) j.erase("cost");
  return j;
}

std::vector<AdapterSlot> slots_for(const Config& c, Workspace& w, const std::vector<int>& layers,
                                   const TrainConfig& t) {
  const auto spec = adapter_spec(c, w.source().dim(), w.split.classes);
  return make_slots(spec, layers, t.lrs, derive_seed(w.seed, {8}));
}

void cmd_train(Writer& out, const Config& c, bool signature_only) {
  auto w = make_workspace(c);
  open_cache(*w, c);
  const auto t = train_config(c);
  const auto layers = chosen_layers(c, w->source());
  auto slots = slots_for(c, *w, layers, t);
  const auto r = train_parallel(w->source(), w->split, slots, t);
  const auto sig = layer_signature(r);

  std::ostringstream csv;
  csv.precision(9);
  csv << "layer,error,improvement\n";
  for (const auto& e : sig) csv << e.layer_id << ',' << e.error << ',' << e.improvement << '\n';

  if (signature_only) {
    json s = json::array();
    for (const auto& e : sig) s.push_back({{"layer_id", e.layer_id}, {"error", e.error}, {"improvement", e.improvement}});
    int arg = sig.empty() ? 0 : sig.front().layer_id;
    double best = 2.0;
    for (const auto& e : sig)
      if (e.error < best) best = e.error, arg = e.layer_id;
    out.text("signature.csv", csv.str());
    out.report("signature.json", {{"signature", s}, {"argmin_layer", arg}, {"cached", w->cache != nullptr}});
    return;
  }
  out.report("report.json", {{"train", train_json(r, out.opt.deterministic)}, {"cached", w->cache != nullptr}});
  out.text("curves.csv", r.curves_csv());
  out.text("signature.csv", csv.str());
  for (const auto& s : slots)
    if (s.slot_id == r.best_slot) {
      save_adapter(s.params, out.path("best_adapter.bin"));
      out.written.push_back(out.path("best_adapter.bin"));
    }
}

void cmd_dump(Writer& out, const Config& c) {
  auto w = make_workspace(c);
  auto path = c.str("cache.path");
  if (path.empty()) path = out.path("activations.bin");
  const auto layers = chosen_layers(c, *w->live);
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = dump_epoch(*w->live, w->all_ids(), layers, path, 64, w->dataset_checksum);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.written.push_back(path);
  out.written.push_back(manifest_path(path));
  json r = {{"cache", path}, {"manifest", json::parse(m.to_json())},
            {"sample_forwards", w->live->counters().sample_forwards}};
  if (!out.opt.deterministic) r["seconds"] = secs;
  out.report("dump.json", r);
}

void cmd_gen(Writer& out, const Config& c) {
  auto w = make_workspace(c);
  json r;
  r["source"] = w->source_kind;
  r["classes"] = w->split.classes;
  r["labels"] = w->split.labels;
  r["train"] = w->split.train;
  r["test"] = w->split.test;
  r["dataset_checksum"] = hex(w->dataset_checksum);
  const auto path = out.path("data.bin");
  if (w->tokens) {
    // Raw backbone inputs, stored as layer 0.
    InMemorySource inputs(w->tokens->inputs, 0);
    const std::vector<int> zero = {0};
    dump_epoch(inputs, w->all_ids(), zero, path, 64, w->dataset_checksum);
  } else {
    const auto layers = w->live->layers();
    dump_epoch(*w->live, w->all_ids(), layers, path, 64, w->dataset_checksum);
  }
  out.written.push_back(path);
  out.written.push_back(manifest_path(path));
  out.report("dataset.json", r);
}

void cmd_ensemble(Writer& out, const Config& c) {
  auto w = make_workspace(c);
  open_cache(*w, c);
  const auto t = train_config(c);
  const auto layers = chosen_layers(c, w->source());
  auto slots = slots_for(c, *w, layers, t);
  require(slots.size() >= 2, ErrorKind::kConfig, "ensemble needs at least 2 slots (layers x lrs)");
  const auto r = train_parallel(w->source(), w->split, slots, t);
  require(!w->split.test.empty(), ErrorKind::kConfig, "ensemble needs test samples (dataset.test)");
  const auto e = ensemble_search(w->source(), slots, w->split, w->split.test);
  json j = json::parse(e.to_json());
  j["slots"] = json::array();
  for (const auto& s : r.slots) j["slots"].push_back({{"slot_id", s.slot_id}, {"layer_id", s.layer_id}, {"lr", s.lr}, {"test_error", s.test_error}});
  out.report("ensemble.json", j);
}

void cmd_cil(Writer& out, const Config& c) {
  auto w = make_workspace(c);
  open_cache(*w, c);
  TrainConfig t = train_config(c);
  t.mode = TrainMode::kQueryOnly;
  t.loss = parse_loss_kind(c.str("cil.loss"));
  t.lrs.resize(1);
  std::vector<Episode> episodes;
  if (const auto& f = c.str("cil.episodes_file"); !f.empty()) {
    std::ifstream in(f);
    require(in.good(), ErrorKind::kConfig, "cannot read episode file '" + f + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    episodes = episodes_from_json(ss.str(), w->split);
  } else {
    episodes = make_episodes(w->split, static_cast<int>(positive(c, "cil.episodes")),
                             static_cast<int>(positive(c, "cil.per_episode")));
  }
  auto layers = w->source().layers();
  int layer = static_cast<int>(c.integer("cil.layer"));
  if (layer == 0) layer = *std::max_element(layers.begin(), layers.end());
  AdapterSpec spec = adapter_spec(c, w->source().dim(), 0);
  spec.kind = AdapterKind::kOpenInCA;
  const auto trunk = init_adapter(spec, derive_seed(w->seed, {9}));
  const auto r = cil_run(episodes, trunk, w->source(), w->split, layer, t, derive_seed(w->seed, {10}));

  std::ostringstream csv;
  csv.precision(9);
  csv << "after_episode,episode,accuracy\n";
  for (std::size_t l = 0; l < r.accuracy.size(); ++l)
    for (std::size_t j = 0; j < r.accuracy[l].size(); ++j) csv << l << ',' << j << ',' << r.accuracy[l][j] << '\n';
  json j = json::parse(r.to_json());
  j["layer"] = layer;
  out.report("cil.json", j);
  out.text("cil_accuracy.csv", csv.str());
}

TSDatasetSpec theory_spec(const Config& c, const std::string& sec, std::uint64_t seed) {
  TSDatasetSpec s;
  s.n = positive(c, sec + ".n");
  s.tokens = positive(c, sec + ".tokens");
  s.dim = positive(c, sec + ".dim");
  s.c = c.real(sec + ".c");
  s.b = c.real(sec + ".b");
  s.seed = seed;
  return s;
}

void cmd_theory(Writer& out, const Config& c) {
  const auto seed = c.u64("run.seed");
  auto a = theory_spec(c, "theory", derive_seed(seed, {11}));
  a.delta = c.real("theory.delta");
  a.permuted = c.boolean("theory.permuted");
  const auto eps = c.real("theory.eps");
  const auto cond = check_condition(a);
  json j;
  j["success"]["spec"] = {{"n", a.n}, {"tokens", a.tokens}, {"dim", a.dim}, {"c", a.c}, {"b", a.b}, {"delta", a.delta}};
  if (cond.satisfied) {
    const auto r = verify_success_bound(a, positive(c, "theory.trials"), eps);
    j["success"]["report"] = json::parse(r.to_json());
  } else {
    j["success"]["report"] = nullptr;
    j["success"]["refused"] = "hypothesis not met: c below required " + std::to_string(cond.required_c);
  }
  j["condition"] = cond.satisfied;
  j["success"]["condition"] = {{"satisfied", cond.satisfied}, {"required_c", cond.required_c}, {"slack", cond.slack}};

  auto b = theory_spec(c, "linear_failure", derive_seed(seed, {12}));
  const auto f = verify_linear_failure(b, positive(c, "linear_failure.trials"));
  j["failure"]["spec"] = {{"n", b.n}, {"tokens", b.tokens}, {"dim", b.dim}, {"c", b.c}, {"b", b.b}};
  j["failure"]["report"] = json::parse(f.to_json());
  j["separation_rate"] = cond.satisfied ? j["success"]["report"]["separation_rate"] : json(nullptr);
  out.report("theory.json", j);
}

void cmd_report(Writer& out, const Config&) {
  json summary = json::array();
  std::vector<fs::path> files;
  if (fs::exists(out.opt.out_dir))
    for (const auto& e : fs::directory_iterator(out.opt.out_dir))
      if (e.path().extension() == ".json" && e.path().filename() != "summary.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    std::ifstream in(p);
    json j;
    try {
      in >> j;
    } catch (const json::exception&) {
      continue;
    }
    if (!j.contains("command") || !j.contains("result")) continue;
    json row = {{"file", p.filename().string()}, {"command", j["command"]}, {"seed", j["seed"]}};
    const auto& r = j["result"];
    if (r.contains("argmin_layer")) row["argmin_layer"] = r["argmin_layer"];
    if (r.contains("average_accuracy")) row["average_accuracy"] = r["average_accuracy"], row["forgetting"] = r["forgetting"];
    if (r.contains("gain")) row["ensemble_gain"] = r["gain"];
    if (r.contains("separation_rate")) row["separation_rate"] = r["separation_rate"];
    if (r.contains("train")) row["best_slot"] = r["train"]["best_slot"];
    summary.push_back(row);
  }
  out.report("summary.json", {{"artifacts", summary}});
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"train", "signature", "cil", "ensemble",
                                                 "theory-verify", "dump-cache", "gen-data", "report"};
  return names;
}

std::vector<std::string> run_command(const std::string& command, const Config& cfg, const RunOptions& opt) {
  fs::create_directories(opt.out_dir);
  Writer out{opt, cfg, command, {}};
  if (command == "train") cmd_train(out, cfg, false);
  else if (command == "signature") cmd_train(out, cfg, true);
  else if (command == "cil") cmd_cil(out, cfg);
  else if (command == "ensemble") cmd_ensemble(out, cfg);
  else if (command == "theory-verify") cmd_theory(out, cfg);
  else if (command == "dump-cache") cmd_dump(out, cfg);
  else if (command == "gen-data") cmd_gen(out, cfg);
  else if (command == "report") cmd_report(out, cfg);
  else fail(ErrorKind::kConfig, "unknown command '" + command + "'");
  return out.written;
}

}  // namespace inca
