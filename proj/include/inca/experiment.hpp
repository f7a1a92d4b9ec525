#pragma once

#include <string>
#include <vector>

#include "inca/config.hpp"

namespace inca {

// Subcommands driven by a resolved Config. Artifacts go to `out_dir`.
// Throws inca::Error; config problems carry ErrorKind::kConfig.
struct RunOptions {
  std::string out_dir = ".";
  bool deterministic = false;  // omit timestamps and wall-clock costs
};

const std::vector<std::string>& command_names();
// Returns the artifact paths written, in order.
std::vector<std::string> run_command(const std::string& command, const Config& cfg, const RunOptions& opt);

}  // namespace inca
