#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "gcaps/network.hpp"

namespace gcaps {

/// Bad flag, bad key, bad value: exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigKey {
  const char* name;
  const char* default_value;
  const char* help;
};

/// Flat key=value run configuration. Defaults <- file <- flags.
class RunConfig {
 public:
  static const std::vector<ConfigKey>& keys();
  static bool known(const std::string& key);

  RunConfig();

  void set(const std::string& key, const std::string& value);
  /// `#` starts a comment; blank lines are skipped; unknown keys throw.
  void merge_text(const std::string& text, const std::string& source = "config");
  void merge_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  bool is_explicit(const std::string& key) const { return explicit_.count(key) != 0; }

  long get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  /// Fills path defaults that depend on other keys (data_dir, file names, checkpoint).
  void expand_defaults();
  /// One key=value line per key, in declaration order.
  std::string serialize() const;

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

ArchConfig arch_from_config(const RunConfig& config);
TrainConfig train_from_config(const RunConfig& config);
RoutingConfig routing_from_config(const RunConfig& config);
std::vector<RoutingConfig> routing_list_from_config(const RunConfig& config);
std::vector<std::uint64_t> seeds_from_config(const RunConfig& config);

/// Exit codes: 0 ok, 1 usage/config error, 2 runtime error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gcaps
