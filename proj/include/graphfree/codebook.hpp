// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "graphfree/data.hpp"

namespace graphfree::codebook {

class DuplicateEdgeError : public std::runtime_error {
public:
  DuplicateEdgeError(const std::string &channel, const std::string &what)
      : std::runtime_error("channel '" + channel + "': " + what), channel_(channel) {}
  const std::string &channel() const { return channel_; }

private:
  std::string channel_;
};

/// Equal-count bins over one scalar channel. Bin b covers
/// [edges[b-1], edges[b]) with the outer bins open towards infinity.
struct QuantileEdges {
  int bins = 0;
  std::vector<double> edges;           // bins - 1 interior edges, strictly increasing
  std::vector<double> representatives; // training median of each bin

  bool operator==(const QuantileEdges &) const = default;
};

QuantileEdges fit_quantile_edges(std::span<const double> values, int bins,
                                 const std::string &channel = "values");

/// Bin id in [0, bins - 1]; out-of-range values clamp to the outer bins.
int encode_value(double x, const QuantileEdges &q);
double decode_bin(int bin, const QuantileEdges &q);

struct CodebookConfig {
  int position_grid_bins = 10;
  int position_1d_bins = 512;
  int force_bins = 4096;
  int energy_bins = 2048;
  bool fit_position_1d = true;
  bool fit_forces = true;
  bool fit_energy = true;

  bool operator==(const CodebookConfig &) const = default;
};

struct QuantileCodebook {
  std::array<QuantileEdges, 3> position_axis; // joint grid, K = position_grid_bins per axis
  std::array<QuantileEdges, 3> position_1d;   // optional auxiliary per-axis channel
  std::array<QuantileEdges, 3> force_axis;
  QuantileEdges energy;

  int grid_bins() const { return position_axis[0].bins; }
  int grid_cells() const { return grid_bins() * grid_bins() * grid_bins(); }
  bool has_position_1d() const { return position_1d[0].bins > 0; }
  bool has_forces() const { return force_axis[0].bins > 0; }
  bool has_energy() const { return energy.bins > 0; }

  bool operator==(const QuantileCodebook &) const = default;
};

/// Channel names in serialization order.
std::vector<std::string> channel_names();

QuantileCodebook fit_codebook(std::span<const MolecularFrame> frames,
                              const CodebookConfig &config = {});

/// Joint grid cell: bx * K^2 + by * K + bz.
int encode_position(const Vec3 &xyz, const QuantileCodebook &cb);
std::array<int, 3> split_cell(int cell, int grid_bins);
Vec3 decode_position(int cell, const QuantileCodebook &cb);
std::array<int, 3> encode_position_1d(const Vec3 &xyz, const QuantileCodebook &cb);

std::string to_json(const QuantileCodebook &cb);
QuantileCodebook from_json(std::string_view text);
void save(const std::string &path, const QuantileCodebook &cb);
QuantileCodebook load(const std::string &path);

/// CRC-32 of the canonical JSON form; identifies the codebook in checkpoints.
std::uint32_t content_hash(const QuantileCodebook &cb);

} // namespace graphfree::codebook
