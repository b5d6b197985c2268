#include <doctest.h>

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "fixtures.hpp"
#include "graphfree/md.hpp"

using namespace graphfree;
using namespace graphfree::md;
using fixtures::lj_codebook;
using fixtures::small_config;
using fixtures::vocab;

namespace {

MolecularFrame argon_trimer() {
  // equilateral triangle near the LJ minimum, slightly stretched
  const double r = 3.9;
  MolecularFrame f;
  f.atomic_numbers = {18, 18, 18};
  f.positions = {{0, 0, 0}, {r, 0, 0}, {0.5 * r, 0.5 * std::sqrt(3.0) * r, 0.1}};
  return f;
}

ForceProvider harmonic(double k) {
  return [k](const MolecularFrame &f) {
    PotentialResult r;
    for (const auto &x : f.positions) {
      r.energy += 0.5 * k * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
      r.forces.push_back({-k * x[0], -k * x[1], -k * x[2]});
    }
    return r;
  };
}

ForceProvider zero_force() {
  return [](const MolecularFrame &f) {
    return PotentialResult{0.0, std::vector<Vec3>(f.size(), Vec3{0, 0, 0})};
  };
}

MDState warm_trimer(double temperature, std::uint64_t seed) {
  auto s = MDState::from_frame(argon_trimer());
  Rng rng(seed);
  maxwell_boltzmann(s, temperature, rng);
  return s;
}

} // namespace

TEST_SUITE("md") {
  TEST_CASE("time unit") {
    CHECK(time_unit_fs() == doctest::Approx(10.1805).epsilon(1e-5));
  }

  TEST_CASE("providers") {
    const double sigma = 3.4, eps = 0.0104;
    MolecularFrame dimer;
    dimer.atomic_numbers = {18, 18};
    dimer.positions = {{0, 0, 0}, {std::pow(2.0, 1.0 / 6.0) * sigma, 0, 0}};
    const auto r = lj_provider()(dimer);
    CHECK(r.energy == doctest::Approx(-eps).epsilon(1e-12));
    for (const auto &f : r.forces) {
      for (double x : f) {
        CHECK(std::abs(x) <= 1e-12);
      }
    }

    const auto p = model::init_model<double>(small_config(16, 1, 32, 2), 3);
    const auto frame = argon_trimer();
    const auto seq = tokens::encode_frame(frame, lj_codebook(), vocab(), tokens::Mode::Finetune);
    const auto direct = model_provider(p, lj_codebook(), vocab())(frame);
    CHECK(direct.energy == model::predict_energy_forces(p, seq).energy);
    for (const auto &f : direct.forces) {
      CHECK(f == Vec3{0, 0, 0});
    }
    const auto cons =
        model_provider(p, lj_codebook(), vocab(), {.mode = ForceMode::Conservative})(frame);
    for (const auto &f : cons.forces) {
      CHECK(f == Vec3{0, 0, 0});
    }
  }

  TEST_CASE("frozen token ids are reused") {
    auto p = model::init_model<double>(small_config(16, 1, 32, 2), 3);
    fixtures::randomize_heads(p, 4);
    const auto a = argon_trimer();
    auto b = a;
    b.positions[0] = {-1.5, 0.7, 0.3};
    const auto provider = model_provider(p, lj_codebook(), vocab(),
                                         {.mode = ForceMode::Conservative, .freeze_tokens = true});
    provider(a);
    const auto got = provider(b);
    auto seq = tokens::encode_frame(b, lj_codebook(), vocab(), tokens::Mode::Finetune);
    const auto fresh = seq.token_ids;
    seq.token_ids = tokens::encode_frame(a, lj_codebook(), vocab(), tokens::Mode::Finetune).token_ids;
    REQUIRE(seq.token_ids != fresh);
    const auto expected = model::conservative_forces(p, seq);
    CHECK(got.energy == expected.energy);
    CHECK(got.forces == expected.forces);

    MolecularFrame other = a;
    other.atomic_numbers.push_back(18);
    other.positions.push_back({0, 0, 4});
    CHECK_THROWS(provider(other));
  }

  TEST_CASE("zero forces give uniform motion") {
    auto s = MDState::from_frame(argon_trimer());
    s.velocities = {{0.01, 0, 0}, {0, -0.02, 0}, {0.003, 0.004, 0.005}};
    const auto start = s;
    const double dt = 2.0;
    velocity_verlet_step(s, zero_force(), dt);
    const double dt_int = dt / time_unit_fs();
    for (std::size_t i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) {
        CHECK(s.velocities[i][k] == start.velocities[i][k]);
        CHECK(s.positions[i][k] ==
              doctest::Approx(start.positions[i][k] + start.velocities[i][k] * dt_int));
      }
    }
    CHECK(s.step == 1);
    CHECK_THROWS_AS(velocity_verlet_step(s, zero_force(), 0.0), std::invalid_argument);
  }

  TEST_CASE("harmonic oscillator period") {
    const double k = 2.0; // eV/Å²
    MolecularFrame f;
    f.atomic_numbers = {18};
    f.positions = {{0.1, 0, 0}};
    auto s = MDState::from_frame(f);
    const double period_fs = 2.0 * std::numbers::pi * std::sqrt(s.masses[0] / k) * time_unit_fs();
    const double dt = period_fs / 1000.0;
    const auto provider = harmonic(k);
    // time between successive upward zero crossings, linearly interpolated
    std::vector<double> crossings;
    double prev = s.positions[0][0];
    for (int step = 1; step <= 3500; ++step) {
      velocity_verlet_step(s, provider, dt);
      const double x = s.positions[0][0];
      if (prev < 0.0 && x >= 0.0) {
        crossings.push_back((step - 1 + prev / (prev - x)) * dt);
      }
      prev = x;
    }
    REQUIRE(crossings.size() >= 2);
    const double measured = crossings[1] - crossings[0];
    CHECK(std::abs(measured / period_fs - 1.0) < 1e-3);
  }

  TEST_CASE("velocity Verlet is time reversible") {
    auto s = warm_trimer(100.0, 1);
    const auto start = s.positions;
    const auto provider = lj_provider();
    for (int i = 0; i < 100; ++i) {
      velocity_verlet_step(s, provider, 1.0);
    }
    for (auto &v : s.velocities) {
      for (double &x : v) {
        x = -x;
      }
    }
    for (int i = 0; i < 100; ++i) {
      velocity_verlet_step(s, provider, 1.0);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < start.size(); ++i) {
      for (int k = 0; k < 3; ++k) {
        worst = std::max(worst, std::abs(s.positions[i][k] - start[i][k]));
      }
    }
    CHECK(worst < 1e-8);
  }

  TEST_CASE("NVE conserves energy on an LJ trimer") {
    auto s = warm_trimer(30.0, 2);
    const auto t = run_nve(s, lj_provider(), 1.0, 10000, 10);
    CHECK_FALSE(t.unstable);
    CHECK(t.samples.size() == 1001);
    const double drift = energy_drift(t);
    MESSAGE("relative drift ", drift);
    CHECK(drift < 1e-4);
  }

  TEST_CASE("trajectory sampling") {
    auto s = warm_trimer(50.0, 3);
    const auto zero = run_nve(s, lj_provider(), 1.0, 0, 1);
    REQUIRE(zero.samples.size() == 1);
    CHECK(zero.samples[0].step == 0);

    const auto t = run_nve(s, lj_provider(), 0.5, 10, 3);
    REQUIRE(t.samples.size() == 4);
    CHECK(t.samples[1].step == 3);
    CHECK(t.samples[3].step == 9);
    CHECK(t.samples[3].time_fs == doctest::Approx(4.5));
    CHECK(t.frames().size() == 4);
    CHECK(t.frames()[2].energy == t.samples[2].potential);
    CHECK_THROWS_AS(run_nve(s, lj_provider(), 1.0, 5, 0), std::invalid_argument);
  }

  TEST_CASE("non-finite forces truncate the run") {
    int calls = 0;
    const ForceProvider bad = [&calls](const MolecularFrame &f) {
      ++calls;
      auto r = data::lennard_jones(f.positions);
      if (calls > 5) {
        r.forces[0][1] = std::nan("");
      }
      return PotentialResult{r.energy, r.forces};
    };
    auto s = warm_trimer(50.0, 4);
    const auto t = run_nve(s, bad, 1.0, 20, 1);
    CHECK(t.unstable);
    CHECK(t.samples.size() == 5);
    CHECK(t.diagnostic.find("step 5") != std::string::npos);

    const ForceProvider throws = [](const MolecularFrame &) -> PotentialResult {
      throw std::runtime_error("boom");
    };
    auto s2 = warm_trimer(50.0, 4);
    CHECK_THROWS_AS(run_nve(s2, throws, 1.0, 3, 1), ProviderError);
    const ForceProvider wrong_shape = [](const MolecularFrame &) { return PotentialResult{}; };
    CHECK_THROWS_AS(evaluate(s2, wrong_shape), ProviderError);
  }

  TEST_CASE("Langevin limits and determinism") {
    auto a = warm_trimer(80.0, 5);
    auto b = a;
    Rng rng(1);
    const auto provider = lj_provider();
    for (int i = 0; i < 50; ++i) {
      velocity_verlet_step(a, provider, 1.0);
      langevin_step(b, provider, 1.0, Thermostat{0.0, 0.0}, rng);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) {
        CHECK(std::abs(a.positions[i][k] - b.positions[i][k]) <= 1e-12);
        CHECK(std::abs(a.velocities[i][k] - b.velocities[i][k]) <= 1e-12);
      }
    }

    auto c = warm_trimer(80.0, 6);
    auto d = c;
    Rng r1(9), r2(9);
    const auto tc = run_nvt(c, provider, 1.0, 200, 10, Thermostat{300.0, 0.01}, r1);
    const auto td = run_nvt(d, provider, 1.0, 200, 10, Thermostat{300.0, 0.01}, r2);
    CHECK(c.positions == d.positions);
    CHECK(tc.total_energies() == td.total_energies());
    REQUIRE(tc.thermostat);
    CHECK(tc.thermostat->temperature_k == 300.0);
    CHECK_THROWS_AS(langevin_step(c, provider, 1.0, Thermostat{-1.0, 0.01}, r1),
                    std::invalid_argument);
  }

  TEST_CASE("Langevin equipartition") {
    MolecularFrame f;
    for (int i = 0; i < 8; ++i) {
      f.atomic_numbers.push_back(18);
      f.positions.push_back({4.0 * (i % 2), 4.0 * ((i / 2) % 2), 4.0 * (i / 4)});
    }
    auto s = MDState::from_frame(f);
    Rng rng(17);
    maxwell_boltzmann(s, 300.0, rng);
    const auto t = run_nvt(s, lj_provider(), 2.0, 40000, 5, Thermostat{300.0, 0.01}, rng);
    double ke = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 200; k < t.samples.size(); ++k) {
      ke += t.samples[k].kinetic;
      ++used;
    }
    ke /= static_cast<double>(used);
    const double expected = 1.5 * 8.0 * kBoltzmann * 300.0;
    MESSAGE("mean KE ", ke, " expected ", expected);
    CHECK(std::abs(ke / expected - 1.0) < 0.05);
  }

  TEST_CASE("Maxwell-Boltzmann initialization") {
    MolecularFrame f;
    Rng pos(3);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    for (int i = 0; i < 600; ++i) {
      f.atomic_numbers.push_back(i % 3 ? 18 : 6);
      f.positions.push_back({u(pos), u(pos), u(pos)});
    }
    auto s = MDState::from_frame(f);
    Rng rng(4);
    maxwell_boltzmann(s, 500.0, rng);
    Vec3 p{0, 0, 0};
    Eigen::Vector3d com = Eigen::Vector3d::Zero();
    double mass = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      mass += s.masses[i];
      for (int k = 0; k < 3; ++k) {
        p[k] += s.masses[i] * s.velocities[i][k];
        com[k] += s.masses[i] * s.positions[i][k];
      }
    }
    com /= mass;
    Eigen::Vector3d l = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Eigen::Vector3d r = Eigen::Vector3d(s.positions[i].data()) - com;
      l += s.masses[i] * r.cross(Eigen::Vector3d(s.velocities[i].data()));
    }
    for (int k = 0; k < 3; ++k) {
      CHECK(std::abs(p[k]) < 1e-10);
      CHECK(std::abs(l[k]) < 1e-9);
    }
    CHECK(s.temperature() == doctest::Approx(500.0).epsilon(0.1));

    auto dimer = MDState::from_frame(argon_trimer());
    dimer.positions.pop_back();
    dimer.velocities.pop_back();
    dimer.masses.pop_back();
    dimer.atomic_numbers.pop_back();
    maxwell_boltzmann(dimer, 300.0, rng);
    for (const auto &v : dimer.velocities) {
      for (double x : v) {
        CHECK(std::isfinite(x));
      }
    }
    CHECK_THROWS_AS(maxwell_boltzmann(dimer, -1.0, rng), std::invalid_argument);
  }

  TEST_CASE("energy drift") {
    const std::vector<double> flat(10, -3.0);
    CHECK(energy_drift(flat) == 0.0);
    std::vector<double> ramp;
    for (int t = 0; t < 11; ++t) {
      ramp.push_back(-2.0 + 0.01 * t);
    }
    CHECK(energy_drift(ramp) == doctest::Approx(0.1 / 2.0));
    CHECK_THROWS_AS(energy_drift(std::vector<double>{}), std::invalid_argument);

    auto s = warm_trimer(40.0, 8);
    const auto t = run_nve(s, lj_provider(), 2.0, 50, 5);
    double worst = 0.0;
    const double e0 = t.samples[0].potential + t.samples[0].kinetic;
    for (const auto &smp : t.samples) {
      worst = std::max(worst, std::abs(smp.potential + smp.kinetic - e0));
    }
    CHECK(energy_drift(t) == doctest::Approx(worst / std::abs(e0)));
  }

  TEST_CASE("h(r) histogram") {
    const std::vector<std::vector<Vec3>> two{{{0, 0, 0}, {2.0, 0, 0}}};
    const auto h = h_of_r(two);
    CHECK(h.bins() == 200);
    double mass = 0.0;
    std::size_t occupied = 0;
    for (std::size_t k = 0; k < h.bins(); ++k) {
      mass += h.density[k] * h.bin_width();
      if (h.density[k] > 0.0) {
        ++occupied;
        CHECK(static_cast<double>(k) * h.bin_width() <= 2.0 + 1e-12);
        CHECK(static_cast<double>(k + 1) * h.bin_width() >= 2.0 - 1e-12);
      }
    }
    CHECK(occupied == 1);
    CHECK(std::abs(mass - 1.0) <= 1e-9);

    // brute force over ordered pairs on a short NVT trajectory
    auto s = warm_trimer(200.0, 9);
    Rng rng(10);
    const auto t = run_nvt(s, lj_provider(), 2.0, 300, 10, Thermostat{200.0, 0.05}, rng);
    const auto got = h_of_r(t, 8.0, 64);
    std::vector<double> expected(64, 0.0);
    const double width = 8.0 / 64.0;
    double inside = 0.0;
    for (const auto &smp : t.samples) {
      const auto &r = smp.positions;
      for (std::size_t i = 0; i < r.size(); ++i) {
        for (std::size_t j = 0; j < r.size(); ++j) {
          if (i == j) {
            continue;
          }
          const double d = std::sqrt((r[i][0] - r[j][0]) * (r[i][0] - r[j][0]) +
                                     (r[i][1] - r[j][1]) * (r[i][1] - r[j][1]) +
                                     (r[i][2] - r[j][2]) * (r[i][2] - r[j][2]));
          std::size_t bin = 0;
          while (bin < 64 && static_cast<double>(bin + 1) * width <= d) {
            ++bin;
          }
          if (bin < 64) {
            expected[bin] += 1.0 / (6.0 * static_cast<double>(t.samples.size()) * width);
            inside += 1.0;
          }
        }
      }
    }
    double total = 0.0;
    for (std::size_t k = 0; k < 64; ++k) {
      CHECK(got.density[k] == doctest::Approx(expected[k]).epsilon(1e-12));
      total += got.density[k] * width;
    }
    if (inside == 6.0 * static_cast<double>(t.samples.size())) {
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }

    // rigid rotation leaves every pair distance, hence h, unchanged
    Rng rot_rng(11);
    std::vector<std::vector<Vec3>> rotated;
    for (const auto &smp : t.samples) {
      const auto rot = data::random_rotation(rot_rng);
      std::vector<Vec3> r;
      for (const auto &x : smp.positions) {
        r.push_back(rot.apply(x));
      }
      rotated.push_back(std::move(r));
    }
    const auto h_rot = h_of_r(rotated, 8.0, 64);
    CHECK(h_mae(got, h_rot) <= 1e-12);

    CHECK_THROWS_AS(h_of_r(two, 0.0, 10), std::invalid_argument);
    CHECK_THROWS_AS(h_of_r(std::vector<std::vector<Vec3>>{}, 10.0, 10), std::invalid_argument);
  }

  TEST_CASE("h(r) MAE") {
    const std::vector<std::vector<Vec3>> a{{{0, 0, 0}, {2.0, 0, 0}}};
    const std::vector<std::vector<Vec3>> b{{{0, 0, 0}, {3.0, 0, 0}}};
    const auto ha = h_of_r(a), hb = h_of_r(b);
    CHECK(h_mae(ha, ha) == 0.0);
    CHECK(h_mae(ha, hb) == h_mae(hb, ha));
    CHECK(h_mae(ha, hb) == doctest::Approx(2.0));
    CHECK_THROWS_AS(h_mae(ha, h_of_r(a, 10.0, 100)), std::invalid_argument);
    CHECK_THROWS_AS(h_mae(ha, h_of_r(a, 9.0, 200)), std::invalid_argument);
  }
}
