// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace graphfree::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad flags, config keys or values. Exit code 1.
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class ParamKind { Value, Input };

struct Param {
  std::string key;
  json default_value; // type of the default fixes the accepted type
  std::string help;
  ParamKind kind = ParamKind::Value;
  bool required = false;
};

/// Path parameter checked for existence before the command runs.
inline Param input(std::string key, std::string help, bool required = true) {
  return {std::move(key), "", std::move(help), ParamKind::Input, required};
}

struct Context;

struct Command {
  std::string name;
  std::string help;
  std::vector<Param> params;
  std::function<void(Context &)> body;
};

/// Everything a subcommand sees: resolved config, run directory and manifest bookkeeping.
struct Context {
  std::string command;
  json config;
  fs::path out_dir;
  std::ostream &out;
  std::vector<std::string> outputs;

  template <typename T>
  T get(const std::string &key) const {
    return config.at(key).get<T>();
  }
  std::string path(const std::string &key) const { return get<std::string>(key); }
  bool has(const std::string &key) const { return !get<std::string>(key).empty(); }

  /// Path inside the run directory, recorded as an output.
  fs::path output(const std::string &name);
  /// Writes text to the run directory through a temporary file and rename.
  void write_file(const std::string &name, const std::string &text);
  void write_json(const std::string &name, const json &j);
};

std::vector<Command> commands();

// Formatting helpers shared by the commands.

/// Shortest round-trip decimal.
std::string num(double x);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const;
  void print(std::ostream &out) const;
};

/// Converts a flag string to the JSON type of the parameter default.
json parse_flag_value(const Param &p, const std::string &text);

/// Applies a config object over resolved values; unknown keys or wrong types throw UsageError.
void merge_config(json &resolved, const json &overrides, const std::vector<Param> &params);

/// Writes through path.tmp and renames over path.
void atomic_write(const fs::path &path, const std::string &text);

} // namespace graphfree::cli
