// SPDX-License-Identifier: Apache-2.0
#include "graphfree/data.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace graphfree {

void MolecularFrame::validate() const {
  if (positions.size() != atomic_numbers.size()) {
    throw std::invalid_argument("frame has " + std::to_string(atomic_numbers.size()) +
                                " atoms but " + std::to_string(positions.size()) +
                                " position rows");
  }
  if (forces && forces->size() != positions.size()) {
    throw std::invalid_argument("frame force rows do not match position rows");
  }
  for (int z : atomic_numbers) {
    if (z < 1 || z > 118) {
      throw std::invalid_argument("atomic number out of range: " + std::to_string(z));
    }
  }
  if (spin < 0) {
    throw std::invalid_argument("spin must be non-negative");
  }
}

bool operator==(const MolecularFrame &a, const MolecularFrame &b) {
  return a.atomic_numbers == b.atomic_numbers && a.positions == b.positions &&
         a.forces == b.forces && a.energy == b.energy && a.charge == b.charge &&
         a.spin == b.spin;
}

namespace data {

ParseError::ParseError(std::size_t line, const std::string &what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

namespace {

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') {
      line.remove_suffix(1);
    }
    lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) {
      ++i;
    }
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') {
      ++j;
    }
    if (j > i) {
      out.push_back(line.substr(i, j - i));
    }
    i = j;
  }
  return out;
}

bool is_blank(std::string_view line) {
  return line.find_first_not_of(" \t") == std::string_view::npos;
}

template <typename Number>
bool parse_number(std::string_view s, Number &out) {
  if (!s.empty() && s.front() == '+') {
    s.remove_prefix(1);
  }
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

// key=value pairs; values may be double-quoted and contain spaces.
std::vector<std::pair<std::string, std::string>> parse_comment(std::string_view line) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) {
      ++i;
    }
    std::size_t key_start = i;
    while (i < line.size() && line[i] != '=' && line[i] != ' ' && line[i] != '\t') {
      ++i;
    }
    std::string key(line.substr(key_start, i - key_start));
    if (i >= line.size() || line[i] != '=') {
      continue;
    }
    ++i;
    std::string value;
    if (i < line.size() && line[i] == '"') {
      ++i;
      std::size_t close = line.find('"', i);
      if (close == std::string_view::npos) {
        close = line.size();
      }
      value = std::string(line.substr(i, close - i));
      i = close + 1;
    } else {
      std::size_t vs = i;
      while (i < line.size() && line[i] != ' ' && line[i] != '\t') {
        ++i;
      }
      value = std::string(line.substr(vs, i - vs));
    }
    for (auto &c : key) {
      c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    kv.emplace_back(std::move(key), std::move(value));
  }
  return kv;
}

void append_double(std::string &out, double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

} // namespace

std::vector<MolecularFrame> parse_xyz(std::string_view text) {
  const auto lines = split_lines(text);
  std::vector<MolecularFrame> frames;
  std::size_t i = 0;
  while (i < lines.size()) {
    if (is_blank(lines[i])) {
      ++i;
      continue;
    }
    const std::size_t count_line = i + 1;
    const auto count_tokens = split_ws(lines[i]);
    long long n_atoms = 0;
    if (count_tokens.size() != 1 || !parse_number(count_tokens[0], n_atoms) || n_atoms < 1) {
      throw ParseError(count_line, "malformed atom count '" + std::string(lines[i]) + "'");
    }
    if (i + 1 >= lines.size()) {
      throw ParseError(count_line, "missing comment line");
    }
    MolecularFrame frame;
    for (const auto &[key, value] : parse_comment(lines[i + 1])) {
      if (key == "energy") {
        double e = 0.0;
        if (!parse_number(value, e)) {
          throw ParseError(i + 2, "malformed energy value '" + value + "'");
        }
        frame.energy = e;
      } else if (key == "charge" || key == "spin") {
        int v = 0;
        if (!parse_number(value, v)) {
          throw ParseError(i + 2, "malformed " + key + " value '" + value + "'");
        }
        (key == "charge" ? frame.charge : frame.spin) = v;
      }
    }
    std::size_t columns = 0;
    std::vector<Vec3> forces;
    for (long long a = 0; a < n_atoms; ++a) {
      const std::size_t idx = i + 2 + static_cast<std::size_t>(a);
      if (idx >= lines.size()) {
        throw ParseError(idx + 1, "expected " + std::to_string(n_atoms) + " atom rows, found " +
                                      std::to_string(a));
      }
      const auto tok = split_ws(lines[idx]);
      if (a == 0) {
        columns = tok.size();
        if (columns != 4 && columns != 7) {
          throw ParseError(idx + 1, "atom row must have 4 or 7 columns, found " +
                                        std::to_string(columns));
        }
      } else if (tok.size() != columns) {
        throw ParseError(idx + 1, "atom row has " + std::to_string(tok.size()) +
                                      " columns, expected " + std::to_string(columns));
      }
      int z = atomic_number(tok[0]);
      if (z == 0) {
        int parsed = 0;
        if (parse_number(tok[0], parsed) && parsed >= 1 && parsed <= 118) {
          z = parsed;
        } else {
          throw ParseError(idx + 1, "unknown element symbol '" + std::string(tok[0]) + "'");
        }
      }
      Vec3 r{};
      for (int k = 0; k < 3; ++k) {
        if (!parse_number(tok[1 + k], r[k])) {
          throw ParseError(idx + 1, "malformed coordinate '" + std::string(tok[1 + k]) + "'");
        }
      }
      frame.atomic_numbers.push_back(z);
      frame.positions.push_back(r);
      if (columns == 7) {
        Vec3 f{};
        for (int k = 0; k < 3; ++k) {
          if (!parse_number(tok[4 + k], f[k])) {
            throw ParseError(idx + 1, "malformed force '" + std::string(tok[4 + k]) + "'");
          }
        }
        forces.push_back(f);
      }
    }
    if (columns == 7) {
      frame.forces = std::move(forces);
    }
    frames.push_back(std::move(frame));
    i += 2 + static_cast<std::size_t>(n_atoms);
  }
  return frames;
}

std::vector<MolecularFrame> read_xyz_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_xyz(ss.str());
}

std::string write_xyz(std::span<const MolecularFrame> frames) {
  std::string out;
  for (const auto &f : frames) {
    f.validate();
    out += std::to_string(f.size());
    out += '\n';
    if (f.energy) {
      out += "energy=";
      append_double(out, *f.energy);
      out += ' ';
    }
    out += "charge=" + std::to_string(f.charge) + " spin=" + std::to_string(f.spin);
    out += f.forces ? " Properties=species:S:1:pos:R:3:forces:R:3\n"
                    : " Properties=species:S:1:pos:R:3\n";
    for (std::size_t a = 0; a < f.size(); ++a) {
      out += element_symbol(f.atomic_numbers[a]);
      for (double v : f.positions[a]) {
        out += ' ';
        append_double(out, v);
      }
      if (f.forces) {
        for (double v : (*f.forces)[a]) {
          out += ' ';
          append_double(out, v);
        }
      }
      out += '\n';
    }
  }
  return out;
}

void write_xyz_file(const std::string &path, std::span<const MolecularFrame> frames) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  out << write_xyz(frames);
}

} // namespace data
} // namespace graphfree
