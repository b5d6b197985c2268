// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace graphfree {

using Vec3 = std::array<double, 3>;
using Rng = std::mt19937_64;

/// One molecule. Positions in Å, forces in eV/Å, energy in eV.
struct MolecularFrame {
  std::vector<int> atomic_numbers;
  std::vector<Vec3> positions;
  std::optional<std::vector<Vec3>> forces;
  std::optional<double> energy;
  int charge = 0;
  int spin = 0;

  std::size_t size() const { return atomic_numbers.size(); }

  /// Throws std::invalid_argument when shapes or element numbers are inconsistent.
  void validate() const;
};

bool operator==(const MolecularFrame &a, const MolecularFrame &b);

namespace data {

class ParseError : public std::runtime_error {
public:
  ParseError(std::size_t line, const std::string &what);
  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

/// Element symbol for Z in [1, 118].
std::string_view element_symbol(int z);
/// Atomic number for a symbol (case-sensitive, e.g. "Ar"); 0 when unknown.
int atomic_number(std::string_view symbol);
/// Standard atomic mass in amu.
double atomic_mass(int z);

/// Parses concatenated xyz / extended-xyz blocks. Atom rows carry either
/// 4 columns (symbol x y z) or 7 (plus fx fy fz). The comment line may hold
/// energy=, charge= and spin= pairs.
std::vector<MolecularFrame> parse_xyz(std::string_view text);
std::vector<MolecularFrame> read_xyz_file(const std::string &path);

std::string write_xyz(std::span<const MolecularFrame> frames);
void write_xyz_file(const std::string &path, std::span<const MolecularFrame> frames);

/// Proper rotation. Construction checks orthogonality and det = +1 to 1e-10.
class RotationMatrix {
public:
  using Matrix = std::array<std::array<double, 3>, 3>;

  RotationMatrix();
  explicit RotationMatrix(const Matrix &m);

  static RotationMatrix identity() { return RotationMatrix{}; }

  const Matrix &matrix() const { return m_; }
  double operator()(int i, int j) const { return m_[i][j]; }

  Vec3 apply(const Vec3 &v) const;
  Vec3 apply_transpose(const Vec3 &v) const;
  RotationMatrix transpose() const;
  double determinant() const;

private:
  Matrix m_;
};

/// Uniform sample from SO(3) via a normalized Gaussian quaternion.
RotationMatrix random_rotation(Rng &rng);

/// Rotates positions and, when present, forces. Scalars are untouched.
MolecularFrame augment_rotate(const MolecularFrame &frame, const RotationMatrix &r);

struct LjParameters {
  double epsilon = 0.0104; // eV
  double sigma = 3.4;      // Å
  int atomic_number = 18;
  double min_distance_factor = 0.8;
  // new atoms are grown off a random existing atom at this separation range (units of sigma)
  double grow_min_factor = 0.95;
  double grow_max_factor = 1.45;
};

struct LjResult {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

/// Analytic energy and forces of a Lennard-Jones cluster (no cutoff).
LjResult lennard_jones(std::span<const Vec3> positions, const LjParameters &p = {});

/// Random centered LJ clusters with analytic labels.
std::vector<MolecularFrame> generate_lj_dataset(std::size_t n_frames, int atoms_min,
                                                int atoms_max, Rng &rng,
                                                const LjParameters &p = {});

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Shuffled split. `fractions` holds one to three positive entries summing to 1.
DatasetSplit split_dataset(std::size_t n, std::span<const double> fractions, Rng &rng);

struct DatasetManifest {
  std::vector<std::string> files;
  DatasetSplit split;
};

std::string manifest_to_json(const DatasetManifest &m);
DatasetManifest manifest_from_json(std::string_view text);

std::vector<MolecularFrame> select(std::span<const MolecularFrame> frames,
                                   std::span<const std::size_t> indices);

} // namespace data
} // namespace graphfree
