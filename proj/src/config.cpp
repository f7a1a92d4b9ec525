#include "inca/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "inca/error.hpp"

namespace inca {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = {
      {"run.seed", "0"},
      {"run.source", "oracle"},  // oracle | backbone | ts

      {"backbone.depth", "12"},
      {"backbone.dim", "64"},
      {"backbone.tokens", "16"},
      {"backbone.seed", "0"},

      {"dataset.classes", "4"},
      {"dataset.train", "256"},
      {"dataset.test", "256"},
      {"dataset.noise", "0.1"},
      {"dataset.seed", "0"},

      {"oracle.depth", "12"},
      {"oracle.dim", "32"},
      {"oracle.tokens", "16"},
      {"oracle.planted_layer", "6"},
      {"oracle.noise_base", "0.1"},
      {"oracle.noise_growth", "0.5"},
      {"oracle.permuted", "true"},
      {"oracle.seed", "0"},

      {"ts.dim", "128"},
      {"ts.tokens", "129"},
      {"ts.c", "0.5"},
      {"ts.b", "0"},
      {"ts.permuted", "true"},

      {"adapter.type", "inca"},
      {"adapter.queries", "1"},
      {"adapter.heads", "4"},
      {"adapter.hidden", "auto"},

      {"trainer.epochs", "30"},
      {"trainer.lrs", "1e-4,3e-4"},
      {"trainer.weight_decay", "1e-4"},
      {"trainer.batch", "32"},
      {"trainer.loss", "ce"},
      {"trainer.mode", "full"},
      {"trainer.layers", "all"},

      {"cache.path", ""},
      {"cache.mode", "auto"},  // auto | live | cached

      {"theory.n", "200"},
      {"theory.tokens", "32"},
      {"theory.dim", "4096"},
      {"theory.c", "0.5"},
      {"theory.b", "0"},
      {"theory.delta", "0.01"},
      {"theory.eps", "0.1"},
      {"theory.trials", "100"},
      {"theory.permuted", "true"},

      {"linear_failure.n", "50"},
      {"linear_failure.tokens", "257"},
      {"linear_failure.dim", "64"},
      {"linear_failure.c", "0.5"},
      {"linear_failure.b", "0"},
      {"linear_failure.trials", "1000"},

      {"cil.episodes", "5"},
      {"cil.per_episode", "4"},
      {"cil.layer", "0"},  // 0: deepest layer
      {"cil.episodes_file", ""},
      {"cil.loss", "bce"},
  };
  return d;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  fail(ErrorKind::kConfig, "config key '" + key + "': expected " + want + ", got '" + value + "'");
}

}  // namespace

Config::Config() : values_(defaults()) {}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kConfig, "cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  Config c;
  c.parse(ss.str(), path);
  return c;
}

void Config::parse(const std::string& text, const std::string& origin) {
  std::stringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      require(line.back() == ']', ErrorKind::kConfig, where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kConfig, where + ": expected key = value");
    require(!section.empty(), ErrorKind::kConfig, where + ": key outside of any section");
    const auto key = section + "." + trim(line.substr(0, eq));
    require(defaults().count(key) != 0, ErrorKind::kConfig, where + ": unknown config key '" + key + "'");
    values_[key] = trim(line.substr(eq + 1));
  }
}

void Config::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos, ErrorKind::kConfig,
          "override '" + assignment + "' must look like section.key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
  require(defaults().count(key) != 0, ErrorKind::kConfig, "unknown config key '" + key + "'");
  values_[key] = value;
}

const std::string& Config::str(const std::string& key) const {
  const auto it = values_.find(key);
  require(it != values_.end(), ErrorKind::kConfig, "unknown config key '" + key + "'");
  return it->second;
}

long long Config::integer(const std::string& key) const {
  const auto& v = str(key);
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

std::uint64_t Config::u64(const std::string& key) const {
  const auto& v = str(key);
  std::uint64_t out = 0;
  const int base = v.rfind("0x", 0) == 0 ? 16 : 10;
  const char* first = v.data() + (base == 16 ? 2 : 0);
  const auto [p, ec] = std::from_chars(first, v.data() + v.size(), out, base);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
  return out;
}

double Config::real(const std::string& key) const {
  const auto& v = str(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  bad_value(key, v, "a number");
}

bool Config::boolean(const std::string& key) const {
  const auto& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<double> Config::reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(str(key))) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) bad_value(key, item, "a number list");
    } catch (const std::invalid_argument&) {
      bad_value(key, item, "a number list");
    }
  }
  return out;
}

std::vector<int> Config::ints(const std::string& key) const {
  std::vector<int> out;
  for (const auto& item : split_list(str(key))) {
    int v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size()) bad_value(key, item, "an integer list");
    out.push_back(v);
  }
  return out;
}

std::string Config::to_ini() const {
  std::ostringstream out;
  std::string section;
  for (const auto& [key, value] : values_) {
    const auto dot = key.find('.');
    const auto s = key.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    out << key.substr(dot + 1) << " = " << value << '\n';
  }
  return out.str();
}

}  // namespace inca
