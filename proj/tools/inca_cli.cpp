// Batch driver over the C API. Exit codes: 0 ok, 1 config error, 2 runtime failure.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "inca.h"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

int report_failure(inca_status st, const char* what) {
  std::fprintf(stderr, "inca: %s: %s\n", what, inca_last_error());
  return st == INCA_ERR_CONFIG || st == INCA_ERR_ARGUMENT ? kExitConfig : kExitRuntime;
}

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string seed;
  std::string out = ".";
  bool deterministic = false;
  bool print_config = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"InCA adapter experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", inca_version());

  Options opt;
  std::vector<CLI::App*> subs;
  for (size_t i = 0; i < inca_command_count(); ++i) {
    const std::string name = inca_command_name(i);
    auto* sub = app.add_subcommand(name, "run the " + name + " pipeline");
    sub->add_option("--config,-c", opt.config, "INI config file");
    sub->add_option("--set", opt.sets, "override, section.key=value (repeatable)");
    sub->add_option("--seed", opt.seed, "run seed (overrides run.seed)");
    sub->add_option("--out,-o", opt.out, "artifact directory");
    sub->add_flag("--deterministic", opt.deterministic, "omit timestamps and timings from artifacts");
    sub->add_flag("--print-config", opt.print_config, "print the resolved config and exit");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  std::string command;
  for (auto* s : subs)
    if (s->parsed()) command = s->get_name();

  inca_config* cfg = nullptr;
  inca_status st = opt.config.empty() ? inca_config_create(&cfg) : inca_config_load(opt.config.c_str(), &cfg);
  if (st != INCA_OK) return report_failure(st, "config");
  auto apply = [&](const std::string& kv) {
    st = inca_config_set(cfg, kv.c_str());
    return st == INCA_OK;
  };
  for (const auto& kv : opt.sets)
    if (!apply(kv)) {
      const int rc = report_failure(st, "--set");
      inca_config_destroy(cfg);
      return rc;
    }
  if (!opt.seed.empty() && !apply("run.seed=" + opt.seed)) {
    const int rc = report_failure(st, "--seed");
    inca_config_destroy(cfg);
    return rc;
  }

  if (opt.print_config) {
    size_t need = 0;
    inca_config_dump(cfg, nullptr, 0, &need);
    std::string text(need, '\0');
    inca_config_dump(cfg, text.data(), text.size(), nullptr);
    std::fputs(text.c_str(), stdout);
    inca_config_destroy(cfg);
    return 0;
  }

  size_t written = 0;
  st = inca_run(cfg, command.c_str(), opt.out.c_str(), opt.deterministic ? 1 : 0, &written);
  inca_config_destroy(cfg);
  if (st != INCA_OK) return report_failure(st, command.c_str());
  std::printf("%s: wrote %zu artifact(s) to %s\n", command.c_str(), written, opt.out.c_str());
  return 0;
}
