#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace inca {

// Flat INI-style experiment configuration. Every key has an explicit default;
// unknown sections or keys are config errors naming the key.
class Config {
 public:
  Config();

  static Config from_file(const std::string& path);
  void parse(const std::string& text, const std::string& origin = "<string>");
  // "section.key=value"
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& str(const std::string& key) const;
  long long integer(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;
  std::vector<int> ints(const std::string& key) const;

  // Every key, defaults included, sorted.
  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  std::string to_ini() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace inca
