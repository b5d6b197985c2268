// SPDX-License-Identifier: Apache-2.0
#include "graphfree/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <zlib.h>

namespace graphfree::codebook {

QuantileEdges fit_quantile_edges(std::span<const double> values, int bins,
                                 const std::string &channel) {
  if (values.empty()) {
    throw std::invalid_argument("channel '" + channel + "': no values to fit");
  }
  if (bins < 2) {
    throw std::invalid_argument("channel '" + channel + "': need at least 2 bins");
  }
  std::vector<double> sorted(values.begin(), values.end());
  for (double v : sorted) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("channel '" + channel + "': non-finite training value");
    }
  }
  std::sort(sorted.begin(), sorted.end());
  std::size_t n_distinct = sorted.empty() ? 0 : 1;
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    n_distinct += sorted[i] != sorted[i - 1];
  }
  if (static_cast<std::size_t>(bins) > n_distinct) {
    throw DuplicateEdgeError(channel, std::to_string(bins) + " bins requested but only " +
                                          std::to_string(n_distinct) + " distinct values");
  }

  const std::size_t n = sorted.size();
  const auto k = static_cast<std::size_t>(bins);
  QuantileEdges q;
  q.bins = bins;
  q.edges.reserve(k - 1);
  for (std::size_t i = 1; i < k; ++i) {
    const std::size_t c = i * n / k;
    const double lo = sorted[c - 1];
    const double hi = sorted[c];
    double edge = lo + (hi - lo) / 2.0;
    if (edge <= lo) {
      edge = hi;
    }
    if (!q.edges.empty() && edge <= q.edges.back()) {
      throw DuplicateEdgeError(channel, "duplicate quantile edge at " + std::to_string(edge) +
                                            " (too many tied values)");
    }
    q.edges.push_back(edge);
  }

  // medians of the training values that land in each bin
  q.representatives.assign(k, 0.0);
  std::size_t start = 0;
  for (std::size_t b = 0; b < k; ++b) {
    std::size_t end = start;
    while (end < n && (b + 1 == k || sorted[end] < q.edges[b])) {
      ++end;
    }
    const std::size_t count = end - start;
    if (count == 0) {
      const double lo = b == 0 ? q.edges[0] : q.edges[b - 1];
      const double hi = b + 1 == k ? q.edges[b - 1] : q.edges[b];
      q.representatives[b] = lo + (hi - lo) / 2.0;
    } else if (count % 2 == 1) {
      q.representatives[b] = sorted[start + count / 2];
    } else {
      const double a = sorted[start + count / 2 - 1];
      const double c = sorted[start + count / 2];
      q.representatives[b] = a + (c - a) / 2.0;
    }
    start = end;
  }
  return q;
}

int encode_value(double x, const QuantileEdges &q) {
  if (!std::isfinite(x)) {
    throw std::invalid_argument("cannot encode non-finite value");
  }
  return static_cast<int>(std::upper_bound(q.edges.begin(), q.edges.end(), x) - q.edges.begin());
}

double decode_bin(int bin, const QuantileEdges &q) {
  if (bin < 0 || bin >= q.bins) {
    throw std::out_of_range("bin id " + std::to_string(bin) + " outside [0, " +
                            std::to_string(q.bins) + ")");
  }
  return q.representatives[static_cast<std::size_t>(bin)];
}

std::vector<std::string> channel_names() {
  return {"pos_grid_x", "pos_grid_y", "pos_grid_z", "pos_1d_x", "pos_1d_y",
          "pos_1d_z",   "force_x",    "force_y",    "force_z",  "energy"};
}

QuantileCodebook fit_codebook(std::span<const MolecularFrame> frames,
                              const CodebookConfig &config) {
  if (frames.empty()) {
    throw std::invalid_argument("cannot fit a codebook on zero frames");
  }
  static const char *axis = "xyz";
  std::array<std::vector<double>, 3> pos, force;
  std::vector<double> energy;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto &f = frames[i];
    f.validate();
    for (const auto &p : f.positions) {
      for (int k = 0; k < 3; ++k) {
        pos[k].push_back(p[k]);
      }
    }
    if (config.fit_forces) {
      if (!f.forces) {
        throw std::invalid_argument("frame " + std::to_string(i) +
                                    " has no forces but the force channel was requested");
      }
      for (const auto &v : *f.forces) {
        for (int k = 0; k < 3; ++k) {
          force[k].push_back(v[k]);
        }
      }
    }
    if (config.fit_energy) {
      if (!f.energy) {
        throw std::invalid_argument("frame " + std::to_string(i) +
                                    " has no energy but the energy channel was requested");
      }
      energy.push_back(*f.energy);
    }
  }
  QuantileCodebook cb;
  for (int k = 0; k < 3; ++k) {
    cb.position_axis[k] = fit_quantile_edges(pos[k], config.position_grid_bins,
                                             std::string("pos_grid_") + axis[k]);
    if (config.fit_position_1d) {
      cb.position_1d[k] = fit_quantile_edges(pos[k], config.position_1d_bins,
                                             std::string("pos_1d_") + axis[k]);
    }
    if (config.fit_forces) {
      cb.force_axis[k] =
          fit_quantile_edges(force[k], config.force_bins, std::string("force_") + axis[k]);
    }
  }
  if (config.fit_energy) {
    cb.energy = fit_quantile_edges(energy, config.energy_bins, "energy");
  }
  return cb;
}

int encode_position(const Vec3 &xyz, const QuantileCodebook &cb) {
  const int k = cb.grid_bins();
  return (encode_value(xyz[0], cb.position_axis[0]) * k +
          encode_value(xyz[1], cb.position_axis[1])) *
             k +
         encode_value(xyz[2], cb.position_axis[2]);
}

std::array<int, 3> split_cell(int cell, int grid_bins) {
  return {cell / (grid_bins * grid_bins), (cell / grid_bins) % grid_bins, cell % grid_bins};
}

Vec3 decode_position(int cell, const QuantileCodebook &cb) {
  if (cell < 0 || cell >= cb.grid_cells()) {
    throw std::out_of_range("position cell " + std::to_string(cell) + " out of range");
  }
  const auto b = split_cell(cell, cb.grid_bins());
  return {decode_bin(b[0], cb.position_axis[0]), decode_bin(b[1], cb.position_axis[1]),
          decode_bin(b[2], cb.position_axis[2])};
}

std::array<int, 3> encode_position_1d(const Vec3 &xyz, const QuantileCodebook &cb) {
  if (!cb.has_position_1d()) {
    throw std::logic_error("codebook was fit without the 1D position channel");
  }
  return {encode_value(xyz[0], cb.position_1d[0]), encode_value(xyz[1], cb.position_1d[1]),
          encode_value(xyz[2], cb.position_1d[2])};
}

namespace {

nlohmann::json edges_json(const QuantileEdges &q) {
  return {{"K", q.bins}, {"edges", q.edges}, {"representatives", q.representatives}};
}

QuantileEdges edges_from(const nlohmann::json &j) {
  QuantileEdges q;
  q.bins = j.at("K").get<int>();
  q.edges = j.at("edges").get<std::vector<double>>();
  q.representatives = j.at("representatives").get<std::vector<double>>();
  if (q.bins < 2 || q.edges.size() + 1 != static_cast<std::size_t>(q.bins) ||
      q.representatives.size() != static_cast<std::size_t>(q.bins)) {
    throw std::invalid_argument("codebook channel has inconsistent sizes");
  }
  for (std::size_t i = 1; i < q.edges.size(); ++i) {
    if (!(q.edges[i] > q.edges[i - 1])) {
      throw std::invalid_argument("codebook edges are not strictly increasing");
    }
  }
  return q;
}

template <typename Codebook>
auto channels(Codebook &cb) {
  using Ptr = decltype(&cb.energy);
  return std::vector<Ptr>{&cb.position_axis[0], &cb.position_axis[1], &cb.position_axis[2],
          &cb.position_1d[0],   &cb.position_1d[1],   &cb.position_1d[2],
          &cb.force_axis[0],    &cb.force_axis[1],    &cb.force_axis[2],
          &cb.energy};
}

} // namespace

std::string to_json(const QuantileCodebook &cb) {
  nlohmann::json j = nlohmann::json::object();
  const auto names = channel_names();
  const auto ch = channels(cb);
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (ch[i]->bins > 0) {
      j[names[i]] = edges_json(*ch[i]);
    }
  }
  return j.dump();
}

QuantileCodebook from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  QuantileCodebook cb;
  const auto names = channel_names();
  auto ch = channels(cb);
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (j.contains(names[i])) {
      *ch[i] = edges_from(j.at(names[i]));
    } else if (i < 3) {
      throw std::invalid_argument("codebook is missing channel '" + names[i] + "'");
    }
  }
  return cb;
}

void save(const std::string &path, const QuantileCodebook &cb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  out << to_json(cb);
}

QuantileCodebook load(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::uint32_t content_hash(const QuantileCodebook &cb) {
  const std::string text = to_json(cb);
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef *>(text.data()), static_cast<uInt>(text.size())));
}

} // namespace graphfree::codebook
