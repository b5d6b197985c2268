// SPDX-License-Identifier: Apache-2.0
#include "graphfree/md.hpp"

#include <cmath>
#include <memory>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace graphfree::md {

double time_unit_fs() {
  // CODATA 2018 exact / recommended values
  constexpr double kAmuKg = 1.66053906660e-27;
  constexpr double kEvJ = 1.602176634e-19;
  constexpr double kAngstromM = 1e-10;
  static const double tau = kAngstromM * std::sqrt(kAmuKg / kEvJ) * 1e15;
  return tau;
}

ForceProvider lj_provider(const data::LjParameters &p) {
  return [p](const MolecularFrame &f) {
    auto r = data::lennard_jones(f.positions, p);
    return PotentialResult{r.energy, std::move(r.forces)};
  };
}

template <typename T>
ForceProvider model_provider(const model::ModelParameters<T> &p,
                             const codebook::QuantileCodebook &cb,
                             const tokens::Vocabulary &vocab, ModelProviderOptions options) {
  auto frozen = std::make_shared<std::optional<std::vector<std::int32_t>>>();
  return [&p, &cb, &vocab, options, frozen](const MolecularFrame &f) {
    auto seq = tokens::encode_frame(f, cb, vocab, tokens::Mode::Finetune);
    if (options.freeze_tokens) {
      if (!*frozen) {
        *frozen = seq.token_ids;
      } else if ((*frozen)->size() != seq.token_ids.size()) {
        throw std::invalid_argument("frozen token ids belong to a different molecule");
      } else {
        seq.token_ids = **frozen;
      }
    }
    auto ef = options.mode == ForceMode::Conservative ? model::conservative_forces(p, seq)
                                                      : model::predict_energy_forces(p, seq);
    return PotentialResult{ef.energy, std::move(ef.forces)};
  };
}

ProviderError::ProviderError(std::size_t step, const std::string &what)
    : std::runtime_error("force provider failed at step " + std::to_string(step) + ": " + what),
      step_(step) {}

namespace {

bool finite(const std::vector<Vec3> &v) {
  for (const auto &x : v) {
    if (!std::isfinite(x[0]) || !std::isfinite(x[1]) || !std::isfinite(x[2])) {
      return false;
    }
  }
  return true;
}

void check_finite(const MDState &s) {
  if (!finite(s.positions) || !finite(s.velocities)) {
    throw NonFiniteState("non-finite positions or velocities at step " + std::to_string(s.step));
  }
}

void kick(MDState &s, double dt) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      s.velocities[i][k] += dt * s.forces[i][k] / s.masses[i];
    }
  }
}

void drift(MDState &s, double dt) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      s.positions[i][k] += dt * s.velocities[i][k];
    }
  }
}

void ensure_forces(MDState &s, const ForceProvider &provider) {
  if (s.forces.size() != s.size()) {
    evaluate(s, provider);
  }
}

double to_internal(double dt_fs) {
  if (!(dt_fs > 0.0) || !std::isfinite(dt_fs)) {
    throw std::invalid_argument("timestep must be positive");
  }
  return dt_fs / time_unit_fs();
}

Vec3 cross(const Vec3 &a, const Vec3 &b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

} // namespace

MDState MDState::from_frame(const MolecularFrame &frame) {
  frame.validate();
  MDState s;
  s.positions = frame.positions;
  s.velocities.assign(frame.size(), Vec3{0, 0, 0});
  s.atomic_numbers = frame.atomic_numbers;
  for (int z : frame.atomic_numbers) {
    s.masses.push_back(data::atomic_mass(z));
  }
  s.charge = frame.charge;
  s.spin = frame.spin;
  return s;
}

MolecularFrame MDState::frame() const {
  MolecularFrame f;
  f.atomic_numbers = atomic_numbers;
  f.positions = positions;
  f.charge = charge;
  f.spin = spin;
  return f;
}

double MDState::kinetic_energy() const {
  double ke = 0.0;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto &v = velocities[i];
    ke += 0.5 * masses[i] * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  }
  return ke;
}

double MDState::temperature() const {
  return size() ? 2.0 * kinetic_energy() / (3.0 * static_cast<double>(size()) * kBoltzmann) : 0.0;
}

void MDState::validate() const {
  const std::size_t n = positions.size();
  if (velocities.size() != n || masses.size() != n || atomic_numbers.size() != n) {
    throw std::invalid_argument("MD state arrays disagree on the atom count");
  }
  for (double m : masses) {
    if (!(m > 0.0)) {
      throw std::invalid_argument("MD state masses must be positive");
    }
  }
}

void maxwell_boltzmann(MDState &s, double temperature_k, Rng &rng) {
  s.validate();
  if (!(temperature_k >= 0.0)) {
    throw std::invalid_argument("temperature must be non-negative");
  }
  std::normal_distribution<double> g;
  const std::size_t n = s.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double sd = std::sqrt(kBoltzmann * temperature_k / s.masses[i]);
    for (int k = 0; k < 3; ++k) {
      s.velocities[i][k] = sd * g(rng);
    }
  }
  double mass = 0.0;
  Eigen::Vector3d p = Eigen::Vector3d::Zero(), com = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mass += s.masses[i];
    p += s.masses[i] * Eigen::Vector3d(s.velocities[i].data());
    com += s.masses[i] * Eigen::Vector3d(s.positions[i].data());
  }
  const Eigen::Vector3d v_com = p / mass;
  com /= mass;
  for (auto &v : s.velocities) {
    for (int k = 0; k < 3; ++k) {
      v[k] -= v_com[k];
    }
  }
  if (n < 2) {
    return;
  }
  Eigen::Vector3d l = Eigen::Vector3d::Zero();
  Eigen::Matrix3d inertia = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d r = Eigen::Vector3d(s.positions[i].data()) - com;
    const Eigen::Vector3d v(s.velocities[i].data());
    l += s.masses[i] * r.cross(v);
    inertia += s.masses[i] * (r.squaredNorm() * Eigen::Matrix3d::Identity() - r * r.transpose());
  }
  // pseudo-inverse handles linear molecules
  const Eigen::Vector3d omega = inertia.completeOrthogonalDecomposition().solve(l);
  const Vec3 w{omega[0], omega[1], omega[2]};
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 r{s.positions[i][0] - com[0], s.positions[i][1] - com[1],
                 s.positions[i][2] - com[2]};
    const Vec3 rot = cross(w, r);
    for (int k = 0; k < 3; ++k) {
      s.velocities[i][k] -= rot[k];
    }
  }
}

void evaluate(MDState &s, const ForceProvider &provider) {
  s.validate();
  PotentialResult r;
  try {
    r = provider(s.frame());
  } catch (const std::exception &e) {
    throw ProviderError(s.step, e.what());
  }
  if (r.forces.size() != s.size()) {
    throw ProviderError(s.step, "returned " + std::to_string(r.forces.size()) +
                                    " force rows for " + std::to_string(s.size()) + " atoms");
  }
  if (!std::isfinite(r.energy) || !finite(r.forces)) {
    throw NonFiniteState("non-finite energy or forces at step " + std::to_string(s.step));
  }
  s.forces = std::move(r.forces);
  s.potential = r.energy;
}

void velocity_verlet_step(MDState &s, const ForceProvider &provider, double dt_fs) {
  const double dt = to_internal(dt_fs);
  ensure_forces(s, provider);
  kick(s, 0.5 * dt);
  drift(s, dt);
  ++s.step;
  check_finite(s);
  evaluate(s, provider);
  kick(s, 0.5 * dt);
  check_finite(s);
}

void langevin_step(MDState &s, const ForceProvider &provider, double dt_fs,
                   const Thermostat &th, Rng &rng) {
  if (!(th.temperature_k >= 0.0) || !(th.friction_per_fs >= 0.0)) {
    throw std::invalid_argument("thermostat temperature and friction must be non-negative");
  }
  const double dt = to_internal(dt_fs);
  ensure_forces(s, provider);
  kick(s, 0.5 * dt);
  drift(s, 0.5 * dt);
  const double c1 = std::exp(-th.friction_per_fs * dt_fs);
  const double c2 = std::sqrt(1.0 - c1 * c1);
  if (c2 > 0.0 && th.temperature_k > 0.0) {
    std::normal_distribution<double> g;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double sd = c2 * std::sqrt(kBoltzmann * th.temperature_k / s.masses[i]);
      for (int k = 0; k < 3; ++k) {
        s.velocities[i][k] = c1 * s.velocities[i][k] + sd * g(rng);
      }
    }
  } else if (c1 != 1.0) {
    for (auto &v : s.velocities) {
      for (double &x : v) {
        x *= c1;
      }
    }
  }
  drift(s, 0.5 * dt);
  ++s.step;
  check_finite(s);
  evaluate(s, provider);
  kick(s, 0.5 * dt);
  check_finite(s);
}

std::vector<double> Trajectory::total_energies() const {
  std::vector<double> out;
  for (const auto &s : samples) {
    out.push_back(s.total());
  }
  return out;
}

std::vector<MolecularFrame> Trajectory::frames() const {
  std::vector<MolecularFrame> out;
  for (const auto &s : samples) {
    MolecularFrame f;
    f.atomic_numbers = atomic_numbers;
    f.positions = s.positions;
    f.energy = s.potential;
    out.push_back(std::move(f));
  }
  return out;
}

namespace {

template <typename Step>
Trajectory run(MDState &s, const ForceProvider &provider, double dt_fs, std::size_t n_steps,
               std::size_t stride, Step step) {
  if (stride == 0) {
    throw std::invalid_argument("sample stride must be positive");
  }
  to_internal(dt_fs);
  Trajectory t;
  t.atomic_numbers = s.atomic_numbers;
  t.dt_fs = dt_fs;
  t.stride = stride;
  auto record = [&] {
    t.samples.push_back({s.step, static_cast<double>(s.step) * dt_fs, s.positions, s.potential,
                         s.kinetic_energy()});
  };
  try {
    ensure_forces(s, provider);
    record();
    for (std::size_t k = 1; k <= n_steps; ++k) {
      step(s);
      if (k % stride == 0) {
        record();
      }
    }
  } catch (const NonFiniteState &e) {
    t.unstable = true;
    t.diagnostic = e.what();
  }
  return t;
}

} // namespace

Trajectory run_nve(MDState &s, const ForceProvider &provider, double dt_fs, std::size_t n_steps,
                   std::size_t stride) {
  return run(s, provider, dt_fs, n_steps, stride,
             [&](MDState &st) { velocity_verlet_step(st, provider, dt_fs); });
}

Trajectory run_nvt(MDState &s, const ForceProvider &provider, double dt_fs, std::size_t n_steps,
                   std::size_t stride, const Thermostat &thermostat, Rng &rng) {
  auto t = run(s, provider, dt_fs, n_steps, stride,
               [&](MDState &st) { langevin_step(st, provider, dt_fs, thermostat, rng); });
  t.thermostat = thermostat;
  return t;
}

double energy_drift(std::span<const double> e) {
  if (e.empty()) {
    throw std::invalid_argument("energy_drift: empty trajectory");
  }
  double worst = 0.0;
  for (double x : e) {
    worst = std::max(worst, std::abs(x - e.front()));
  }
  return worst / std::max(std::abs(e.front()), 1e-12);
}

double energy_drift(const Trajectory &t) { return energy_drift(t.total_energies()); }

RadialHistogram h_of_r(std::span<const std::vector<Vec3>> frames, double r_max,
                       std::size_t n_bins) {
  if (!(r_max > 0.0)) {
    throw std::invalid_argument("h_of_r: r_max must be positive");
  }
  if (n_bins == 0) {
    throw std::invalid_argument("h_of_r: need at least one bin");
  }
  if (frames.empty()) {
    throw std::invalid_argument("h_of_r: no samples");
  }
  RadialHistogram h{r_max, std::vector<double>(n_bins, 0.0)};
  const double width = h.bin_width();
  for (const auto &r : frames) {
    const std::size_t n = r.size();
    if (n < 2) {
      throw std::invalid_argument("h_of_r: frames need at least two atoms");
    }
    const double w = 1.0 / (static_cast<double>(n * (n - 1)) * static_cast<double>(frames.size()));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double d = std::hypot(r[i][0] - r[j][0], r[i][1] - r[j][1], r[i][2] - r[j][2]);
        if (d < r_max) {
          const auto b = std::min(static_cast<std::size_t>(d / width), n_bins - 1);
          h.density[b] += 2.0 * w; // ordered pairs (i, j) and (j, i)
        }
      }
    }
  }
  for (double &x : h.density) {
    x /= width;
  }
  return h;
}

RadialHistogram h_of_r(const Trajectory &t, double r_max, std::size_t n_bins) {
  std::vector<std::vector<Vec3>> frames;
  for (const auto &s : t.samples) {
    frames.push_back(s.positions);
  }
  return h_of_r(frames, r_max, n_bins);
}

double h_mae(const RadialHistogram &a, const RadialHistogram &b) {
  if (a.bins() != b.bins() || a.r_max != b.r_max) {
    throw std::invalid_argument("h_mae: histograms use different binning");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < a.bins(); ++k) {
    s += std::abs(a.density[k] - b.density[k]);
  }
  return s * a.bin_width();
}

void to_json(nlohmann::json &j, const Thermostat &t) {
  j = nlohmann::json{{"temperature_k", t.temperature_k}, {"friction_per_fs", t.friction_per_fs}};
}

template ForceProvider model_provider<float>(const model::ModelParameters<float> &,
                                             const codebook::QuantileCodebook &,
                                             const tokens::Vocabulary &, ModelProviderOptions);
template ForceProvider model_provider<double>(const model::ModelParameters<double> &,
                                              const codebook::QuantileCodebook &,
                                              const tokens::Vocabulary &, ModelProviderOptions);

} // namespace graphfree::md
