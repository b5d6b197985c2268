// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "graphfree/codebook.hpp"
#include "graphfree/data.hpp"
#include "graphfree/model.hpp"
#include "graphfree/tokenizer.hpp"

namespace graphfree::md {

// Internal units: eV, Å, amu. One time unit is Å·sqrt(amu/eV).

/// Internal time unit in femtoseconds.
double time_unit_fs();
inline constexpr double kBoltzmann = 8.617333262e-5; // eV/K

struct PotentialResult {
  double energy = 0.0;      // eV
  std::vector<Vec3> forces; // eV/Å
};

/// Energy and forces for a configuration (positions, elements, charge, spin).
using ForceProvider = std::function<PotentialResult(const MolecularFrame &)>;

ForceProvider lj_provider(const data::LjParameters &p = {});

enum class ForceMode { Direct, Conservative };

struct ModelProviderOptions {
  ForceMode mode = ForceMode::Direct;
  /// Keep the discrete cell ids of the first call for the whole run, so the
  /// conservative energy is a smooth function of the coordinates.
  bool freeze_tokens = false;
};

/// Wraps a fine-tuned model. The provider holds references to its arguments.
template <typename T>
ForceProvider model_provider(const model::ModelParameters<T> &p,
                             const codebook::QuantileCodebook &cb,
                             const tokens::Vocabulary &vocab, ModelProviderOptions options = {});

class ProviderError : public std::runtime_error {
public:
  ProviderError(std::size_t step, const std::string &what);
  std::size_t step() const { return step_; }

private:
  std::size_t step_;
};

class NonFiniteState : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct MDState {
  std::vector<Vec3> positions;  // Å
  std::vector<Vec3> velocities; // Å per time unit
  std::vector<double> masses;   // amu
  std::vector<int> atomic_numbers;
  int charge = 0;
  int spin = 0;
  /// Cached forces and energy at the current positions (empty until evaluated).
  std::vector<Vec3> forces;
  double potential = 0.0;
  std::size_t step = 0;

  /// Zero velocities, standard masses.
  static MDState from_frame(const MolecularFrame &frame);
  MolecularFrame frame() const;

  std::size_t size() const { return positions.size(); }
  double kinetic_energy() const;
  /// 2 KE / (3 n k_B).
  double temperature() const;
  void validate() const;
};

/// Maxwell-Boltzmann velocities at temperature_k with centre-of-mass momentum
/// and rigid rotation removed.
void maxwell_boltzmann(MDState &state, double temperature_k, Rng &rng);

/// Fills the cached forces and potential energy.
void evaluate(MDState &state, const ForceProvider &provider);

void velocity_verlet_step(MDState &state, const ForceProvider &provider, double dt_fs);

struct Thermostat {
  double temperature_k = 300.0;
  double friction_per_fs = 0.01;
};

/// BAOAB Langevin step.
void langevin_step(MDState &state, const ForceProvider &provider, double dt_fs,
                   const Thermostat &thermostat, Rng &rng);

struct Sample {
  std::size_t step = 0;
  double time_fs = 0.0;
  std::vector<Vec3> positions;
  double potential = 0.0;
  double kinetic = 0.0;

  double total() const { return potential + kinetic; }
};

struct Trajectory {
  std::vector<int> atomic_numbers;
  double dt_fs = 0.0;
  std::size_t stride = 1;
  std::optional<Thermostat> thermostat;
  std::vector<Sample> samples;
  bool unstable = false;
  std::string diagnostic;

  std::vector<double> total_energies() const;
  /// Samples as frames with the potential energy attached.
  std::vector<MolecularFrame> frames() const;
};

/// Samples step 0 and every stride-th step. A non-finite state stops the run
/// and returns the partial trajectory flagged unstable; provider exceptions
/// propagate as ProviderError.
Trajectory run_nve(MDState &state, const ForceProvider &provider, double dt_fs,
                   std::size_t n_steps, std::size_t stride = 1);
Trajectory run_nvt(MDState &state, const ForceProvider &provider, double dt_fs,
                   std::size_t n_steps, std::size_t stride, const Thermostat &thermostat,
                   Rng &rng);

/// max_t |E(t) - E(0)| / max(|E(0)|, eps).
double energy_drift(std::span<const double> energies);
double energy_drift(const Trajectory &t);

/// Pair-distance density on [0, r_max): sum(density) * bin_width = 1 when every
/// distance falls below r_max.
struct RadialHistogram {
  double r_max = 10.0;
  std::vector<double> density;

  std::size_t bins() const { return density.size(); }
  double bin_width() const { return r_max / static_cast<double>(density.size()); }
};

RadialHistogram h_of_r(std::span<const std::vector<Vec3>> frames, double r_max = 10.0,
                       std::size_t n_bins = 200);
RadialHistogram h_of_r(const Trajectory &t, double r_max = 10.0, std::size_t n_bins = 200);

/// sum over bins of bin_width * |a - b|.
double h_mae(const RadialHistogram &a, const RadialHistogram &b);

void to_json(nlohmann::json &j, const Thermostat &t);

} // namespace graphfree::md
