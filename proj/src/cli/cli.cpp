// SPDX-License-Identifier: Apache-2.0
#include "graphfree/cli.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <sys/resource.h>

#include <CLI11.hpp>

#include "cli/framework.hpp"
#include "graphfree/runtime.hpp"

namespace graphfree::cli {

std::string num(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, r.ptr);
}

std::string Table::csv() const {
  std::string s;
  auto line = [&](const std::vector<std::string> &cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      s += (i ? "," : "") + cells[i];
    }
    s += '\n';
  };
  line(header);
  for (const auto &r : rows) {
    line(r);
  }
  return s;
}

void Table::print(std::ostream &out) const {
  std::vector<std::size_t> width(header.size(), 0);
  auto widen = [&](const std::vector<std::string> &cells) {
    for (std::size_t i = 0; i < cells.size() && i < width.size(); ++i) {
      width[i] = std::max(width[i], cells[i].size());
    }
  };
  widen(header);
  for (const auto &r : rows) {
    widen(r);
  }
  auto line = [&](const std::vector<std::string> &cells) {
    for (std::size_t i = 0; i < cells.size() && i < width.size(); ++i) {
      out << (i ? "  " : "") << std::setw(static_cast<int>(width[i])) << cells[i];
    }
    out << '\n';
  };
  line(header);
  for (const auto &r : rows) {
    line(r);
  }
}

void atomic_write(const fs::path &path, const std::string &text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw std::runtime_error("cannot write " + tmp.string());
    }
    f << text;
    if (!f.flush()) {
      throw std::runtime_error("write failed for " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

fs::path Context::output(const std::string &name) {
  outputs.push_back(name);
  return out_dir / name;
}

void Context::write_file(const std::string &name, const std::string &text) {
  atomic_write(output(name), text);
}

void Context::write_json(const std::string &name, const json &j) {
  write_file(name, j.dump(2) + "\n");
}

namespace {

std::string type_name(const json &d) {
  if (d.is_boolean()) {
    return "true or false";
  }
  if (d.is_number_unsigned()) {
    return "a non-negative integer";
  }
  if (d.is_number_integer()) {
    return "an integer";
  }
  if (d.is_number()) {
    return "a number";
  }
  if (d.is_array()) {
    return "a comma-separated list of numbers";
  }
  return "a string";
}

std::optional<double> parse_double(const std::string &t) {
  if (t.empty()) {
    return std::nullopt;
  }
  char *end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size()) {
    return std::nullopt;
  }
  return v;
}

} // namespace

json parse_flag_value(const Param &p, const std::string &text) {
  const json &d = p.default_value;
  auto fail = [&]() -> UsageError {
    return UsageError("invalid value for --" + p.key + ": '" + text + "' (expected " +
                      type_name(d) + ")");
  };
  if (d.is_boolean()) {
    if (text == "true" || text == "1" || text == "yes") {
      return true;
    }
    if (text == "false" || text == "0" || text == "no") {
      return false;
    }
    throw fail();
  }
  if (d.is_number_integer()) {
    std::int64_t v = 0;
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || r.ec != std::errc() || r.ptr != text.data() + text.size()) {
      throw fail();
    }
    if (d.is_number_unsigned()) {
      if (v < 0) {
        throw fail();
      }
      return static_cast<std::uint64_t>(v);
    }
    return v;
  }
  if (d.is_number()) {
    const auto v = parse_double(text);
    if (!v) {
      throw fail();
    }
    return *v;
  }
  if (d.is_array()) {
    json arr = json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto v = parse_double(item);
      if (!v) {
        throw fail();
      }
      arr.push_back(*v);
    }
    if (arr.empty()) {
      throw fail();
    }
    return arr;
  }
  return text;
}

void merge_config(json &resolved, const json &overrides, const std::vector<Param> &params) {
  if (!overrides.is_object()) {
    throw UsageError("config must be a JSON object");
  }
  for (const auto &[key, value] : overrides.items()) {
    const auto it = std::find_if(params.begin(), params.end(),
                                 [&](const Param &p) { return p.key == key; });
    if (it == params.end()) {
      throw UsageError("unknown config key '" + key + "'");
    }
    const json &d = it->default_value;
    bool ok = false;
    json v = value;
    if (d.is_boolean()) {
      ok = value.is_boolean();
    } else if (d.is_number_unsigned()) {
      ok = value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
      if (ok) {
        v = value.get<std::uint64_t>();
      }
    } else if (d.is_number_integer()) {
      ok = value.is_number_integer();
    } else if (d.is_number()) {
      ok = value.is_number();
      if (ok) {
        v = value.get<double>();
      }
    } else if (d.is_array()) {
      ok = value.is_array() &&
           std::all_of(value.begin(), value.end(), [](const json &x) { return x.is_number(); });
    } else {
      ok = value.is_string();
    }
    if (!ok) {
      throw UsageError("config key '" + key + "' must be " + type_name(d));
    }
    resolved[key] = v;
  }
}

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

fs::path default_run_dir(const std::string &command) {
  const char *root = std::getenv("GRAPHFREE_OUTPUT_ROOT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << command << "-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  fs::path dir = base / s.str();
  for (int k = 1; fs::exists(dir); ++k) {
    dir = base / (s.str() + "-" + std::to_string(k));
  }
  return dir;
}

long peak_memory_kb() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return u.ru_maxrss;
}

json read_config_file(const std::string &path, const std::string &command) {
  std::ifstream f(path);
  if (!f) {
    throw UsageError("cannot read config file " + path);
  }
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception &e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  // A run manifest can stand in for a config.
  if (j.is_object() && j.contains("command") && j.contains("config")) {
    if (j.at("command") != command) {
      throw UsageError("manifest " + path + " belongs to command '" +
                       j.at("command").get<std::string>() + "'");
    }
    return j.at("config");
  }
  return j;
}

std::string type_label(const Param &p) {
  const json &d = p.default_value;
  if (p.kind == ParamKind::Input) {
    return "PATH";
  }
  if (d.is_boolean()) {
    return "BOOL";
  }
  if (d.is_number_integer()) {
    return "INT";
  }
  if (d.is_number()) {
    return "FLOAT";
  }
  return d.is_array() ? "LIST" : "TEXT";
}

std::string describe_default(const json &d) {
  if (d.is_string()) {
    return d.get<std::string>().empty() ? "" : " [" + d.get<std::string>() + "]";
  }
  return " [" + d.dump() + "]";
}

} // namespace

int run(std::span<const std::string> args, std::ostream &out, std::ostream &err) {
  const auto cmds = commands();
  CLI::App app{"Graph-free transformer toolkit for molecular energies and forces", "graphfree"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", GRAPHFREE_VERSION);
  std::map<std::string, std::string> config_paths;
  std::map<std::string, std::map<std::string, std::string>> raw;
  std::map<std::string, std::map<std::string, CLI::Option *>> opts;
  std::map<std::string, CLI::App *> subs;
  for (const auto &c : cmds) {
    auto *sub = app.add_subcommand(c.name, c.help);
    subs[c.name] = sub;
    sub->add_option("--config", config_paths[c.name], "JSON config file or run manifest")
        ->type_name("PATH");
    for (const auto &p : c.params) {
      opts[c.name][p.key] = sub->add_option("--" + p.key, raw[c.name][p.key],
                                            p.help + describe_default(p.default_value))
                                ->type_name(type_label(p));
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp &) {
    const auto selected = app.get_subcommands();
    out << (selected.empty() ? app.help() : selected.front()->help());
    return kSuccess;
  } catch (const CLI::CallForVersion &) {
    out << GRAPHFREE_VERSION << "\n";
    return kSuccess;
  } catch (const CLI::ParseError &e) {
    err << "error: " << e.what() << "\n\n";
    const auto selected = app.get_subcommands();
    err << (selected.empty() ? app.help() : selected.front()->help());
    return kUsageError;
  }

  const auto *sub = app.get_subcommands().front();
  const auto &cmd = *std::find_if(cmds.begin(), cmds.end(),
                                  [&](const Command &c) { return c.name == sub->get_name(); });

  json config = json::object();
  try {
    for (const auto &p : cmd.params) {
      config[p.key] = p.default_value;
    }
    if (!config_paths[cmd.name].empty()) {
      merge_config(config, read_config_file(config_paths[cmd.name], cmd.name), cmd.params);
    }
    for (const auto &p : cmd.params) {
      if (opts[cmd.name][p.key]->count() > 0) {
        config[p.key] = parse_flag_value(p, raw[cmd.name][p.key]);
      }
    }
    for (const auto &p : cmd.params) {
      if (p.required && config[p.key].get<std::string>().empty()) {
        throw UsageError("missing required --" + p.key + " (" + p.help + ")");
      }
    }
  } catch (const UsageError &e) {
    err << "error: " << e.what() << "\n\n" << sub->help();
    return kUsageError;
  }

  json inputs = json::object();
  for (const auto &p : cmd.params) {
    if (p.kind != ParamKind::Input) {
      continue;
    }
    const auto path = config[p.key].get<std::string>();
    if (path.empty()) {
      continue;
    }
    if (!fs::exists(path)) {
      err << "error: input --" << p.key << " not found: " << path << "\n";
      return kRuntimeError;
    }
    inputs[p.key] = fs::absolute(path).string();
  }

  const std::string out_key = config.contains("out") ? config["out"].get<std::string>() : "";
  const fs::path dir = out_key.empty() ? default_run_dir(cmd.name) : fs::path(out_key);
  const auto started = std::chrono::steady_clock::now();
  json manifest{{"command", cmd.name},
                {"arguments", std::vector<std::string>(args.begin(), args.end())},
                {"config", config},
                {"inputs", inputs},
                {"seed", config.contains("seed") ? config["seed"] : json(nullptr)},
                {"version", GRAPHFREE_VERSION},
                {"started_at", utc_now()}};

  int code = kSuccess;
  Context ctx{cmd.name, config, dir, out, {}};
  try {
    fs::create_directories(dir);
    cmd.body(ctx);
    manifest["status"] = "ok";
  } catch (const UsageError &e) {
    err << "error: " << e.what() << "\n";
    manifest["status"] = "usage_error";
    manifest["error"] = e.what();
    code = kUsageError;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    code = kRuntimeError;
  }
  manifest["outputs"] = ctx.outputs;
  manifest["wall_clock_s"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  manifest["peak_memory_kb"] = peak_memory_kb();
  try {
    if (fs::is_directory(dir)) {
      atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
    }
  } catch (const std::exception &e) {
    err << "error: cannot write manifest: " << e.what() << "\n";
    return kRuntimeError;
  }
  if (code == kSuccess) {
    out << "run directory: " << dir.string() << "\n";
  }
  return code;
}

int main(int argc, char **argv) {
  tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

} // namespace graphfree::cli
