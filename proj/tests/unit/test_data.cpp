#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "graphfree/data.hpp"

using namespace graphfree;
using namespace graphfree::data;

namespace {

double dist(const Vec3 &a, const Vec3 &b) {
  return std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
}

MolecularFrame random_frame(Rng &rng, bool with_labels) {
  std::uniform_int_distribution<int> n_atoms(1, 9), z(1, 118), q(-2, 2), s(0, 3);
  std::normal_distribution<double> g(0.0, 3.0);
  MolecularFrame f;
  const int n = n_atoms(rng);
  for (int i = 0; i < n; ++i) {
    f.atomic_numbers.push_back(z(rng));
    f.positions.push_back({g(rng), g(rng), g(rng)});
  }
  if (with_labels) {
    f.forces.emplace();
    for (int i = 0; i < n; ++i) {
      f.forces->push_back({g(rng) * 1e-3, g(rng), g(rng) * 1e5});
    }
    f.energy = g(rng) * 1e4;
  }
  f.charge = q(rng);
  f.spin = s(rng);
  return f;
}

} // namespace

TEST_SUITE("data") {
  TEST_CASE("parses a plain xyz block") {
    const auto frames = parse_xyz("2\nhydrogen\nH 0 0 0\nH 0 0 0.74\n");
    REQUIRE(frames.size() == 1);
    CHECK(frames[0].atomic_numbers == std::vector<int>{1, 1});
    CHECK(frames[0].positions[1][2] == 0.74);
    CHECK_FALSE(frames[0].energy.has_value());
    CHECK_FALSE(frames[0].forces.has_value());
  }

  TEST_CASE("comment line key-values carry energy, charge and spin") {
    const auto frames =
        parse_xyz("1\nenergy=-1.17 charge=-1 spin=2 Properties=species:S:1:pos:R:3\nO 1 2 3\n"
                  "1\nEnergy=\"4.5\"\n8 0 0 0\n");
    REQUIRE(frames.size() == 2);
    CHECK(*frames[0].energy == -1.17);
    CHECK(frames[0].charge == -1);
    CHECK(frames[0].spin == 2);
    CHECK(*frames[1].energy == 4.5);
    CHECK(frames[1].atomic_numbers[0] == 8);
  }

  TEST_CASE("seven-column rows carry forces") {
    const auto frames = parse_xyz("1\n\nAr 0 0 0 0.1 -0.2 0.3\n");
    REQUIRE(frames[0].forces.has_value());
    CHECK((*frames[0].forces)[0] == Vec3{0.1, -0.2, 0.3});
  }

  TEST_CASE("parse errors report the line") {
    auto line_of = [](std::string_view text) {
      try {
        parse_xyz(text);
      } catch (const ParseError &e) {
        return e.line();
      }
      return std::size_t{0};
    };
    CHECK(line_of("two\nx\nH 0 0 0\n") == 1);
    CHECK(line_of("1\nx\nXx 0 0 0\n") == 3);
    CHECK(line_of("2\nx\nH 0 0 0\nH 0 0\n") == 4);
    CHECK(line_of("3\nx\nH 0 0 0\n") > 0);
    CHECK(line_of("1\nx\nH 0 0 0 1 2\n") == 3);
  }

  TEST_CASE("writer output") {
    CHECK(write_xyz(std::span<const MolecularFrame>{}).empty());
    MolecularFrame f;
    f.atomic_numbers = {18};
    f.positions = {{1.0, 2.0, 3.0}};
    const std::string text = write_xyz(std::span(&f, 1));
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
    CHECK(parse_xyz(text).front() == f);
  }

  TEST_CASE("parse(write(x)) reproduces random frames") {
    Rng rng(42);
    std::vector<MolecularFrame> frames;
    for (int i = 0; i < 100; ++i) {
      frames.push_back(random_frame(rng, i % 3 != 0));
    }
    const auto back = parse_xyz(write_xyz(frames));
    REQUIRE(back.size() == frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
      CHECK(back[i] == frames[i]);
    }
  }

  TEST_CASE("frame validation") {
    MolecularFrame f;
    f.atomic_numbers = {1, 119};
    f.positions = {{0, 0, 0}, {1, 0, 0}};
    CHECK_THROWS_AS(f.validate(), std::invalid_argument);
    f.atomic_numbers = {1};
    CHECK_THROWS_AS(f.validate(), std::invalid_argument);
  }

  TEST_CASE("element table") {
    CHECK(atomic_number("Ar") == 18);
    CHECK(element_symbol(35) == "Br");
    CHECK(atomic_number("Qq") == 0);
    CHECK(atomic_mass(18) == doctest::Approx(39.948));
    CHECK_THROWS(element_symbol(0));
  }

  TEST_CASE("random rotations are proper and orthogonal") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
      const auto r = random_rotation(rng);
      CHECK(std::abs(r.determinant() - 1.0) < 1e-10);
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          double dot = 0.0;
          for (int k = 0; k < 3; ++k) {
            dot += r(k, a) * r(k, b);
          }
          CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) < 1e-10);
        }
      }
    }
    RotationMatrix::Matrix reflect{{{1, 0, 0}, {0, 1, 0}, {0, 0, -1}}};
    CHECK_THROWS_AS(RotationMatrix{reflect}, std::invalid_argument);
  }

  TEST_CASE("rotation entries average to zero") {
    // Each entry of a uniform rotation has mean 0 and variance 1/3.
    Rng rng(2);
    constexpr int kSamples = 10000;
    std::array<std::array<double, 3>, 3> mean{};
    for (int s = 0; s < kSamples; ++s) {
      const auto r = random_rotation(rng);
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          mean[a][b] += r(a, b) / kSamples;
        }
      }
    }
    const double three_sigma = 3.0 * std::sqrt(1.0 / 3.0 / kSamples);
    for (const auto &row : mean) {
      for (double m : row) {
        CHECK(std::abs(m) < three_sigma);
      }
    }
  }

  TEST_CASE("augment_rotate keeps scalars and distances") {
    Rng rng(3);
    auto f = random_frame(rng, true);
    CHECK(augment_rotate(f, RotationMatrix::identity()) == f);
    for (int trial = 0; trial < 20; ++trial) {
      const auto r = random_rotation(rng);
      const auto g = augment_rotate(f, r);
      CHECK(g.energy == f.energy);
      CHECK(g.charge == f.charge);
      CHECK(g.spin == f.spin);
      for (std::size_t i = 0; i < f.size(); ++i) {
        for (std::size_t j = 0; j < f.size(); ++j) {
          CHECK(std::abs(dist(g.positions[i], g.positions[j]) -
                         dist(f.positions[i], f.positions[j])) < 1e-10);
        }
        CHECK(g.forces->at(i) == r.apply(f.forces->at(i)));
      }
    }
  }

  TEST_CASE("lennard-jones dimer reference points") {
    const LjParameters p;
    auto at_sigma = lennard_jones(std::vector<Vec3>{{0, 0, 0}, {0, 0, p.sigma}});
    CHECK(std::abs(at_sigma.energy) < 1e-15);
    const double rmin = std::pow(2.0, 1.0 / 6.0) * p.sigma;
    auto at_min = lennard_jones(std::vector<Vec3>{{0, 0, 0}, {rmin, 0, 0}});
    CHECK(at_min.energy == doctest::Approx(-p.epsilon).epsilon(1e-12));
    for (const auto &f : at_min.forces) {
      CHECK(std::hypot(f[0], f[1], f[2]) < 1e-10);
    }
  }

  TEST_CASE("lennard-jones forces match central differences of the energy") {
    Rng rng(4);
    const auto frames = generate_lj_dataset(20, 2, 8, rng);
    const double h = 1e-5;
    for (const auto &f : frames) {
      for (std::size_t i = 0; i < f.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
          auto plus = f.positions, minus = f.positions;
          plus[i][k] += h;
          minus[i][k] -= h;
          const double numeric =
              -(lennard_jones(plus).energy - lennard_jones(minus).energy) / (2 * h);
          const double analytic = (*f.forces)[i][k];
          CHECK(std::abs(numeric - analytic) <=
                1e-6 * std::max(std::abs(analytic), 1e-3));
        }
      }
    }
  }

  TEST_CASE("generated clusters respect sizes, spacing and Newton's third law") {
    Rng rng(5);
    const LjParameters p;
    const auto frames = generate_lj_dataset(200, 3, 12, rng);
    for (const auto &f : frames) {
      CHECK(f.size() >= 3);
      CHECK(f.size() <= 12);
      Vec3 net{};
      for (std::size_t i = 0; i < f.size(); ++i) {
        CHECK(f.atomic_numbers[i] == 18);
        for (int k = 0; k < 3; ++k) {
          net[k] += (*f.forces)[i][k];
        }
        for (std::size_t j = i + 1; j < f.size(); ++j) {
          CHECK(dist(f.positions[i], f.positions[j]) >= 0.8 * p.sigma);
        }
      }
      for (double c : net) {
        CHECK(std::abs(c) <= 1e-9);
      }
    }
    CHECK_THROWS_AS(generate_lj_dataset(1, 1, 3, rng), std::invalid_argument);
    CHECK_THROWS_AS(generate_lj_dataset(1, 5, 4, rng), std::invalid_argument);
    CHECK_THROWS_AS(generate_lj_dataset(1, 2, 17, rng), std::invalid_argument);
  }

  TEST_CASE("split sizes and determinism") {
    const std::array<double, 3> fr{0.8, 0.1, 0.1};
    Rng a(7), b(7);
    const auto s1 = split_dataset(10, fr, a);
    const auto s2 = split_dataset(10, fr, b);
    CHECK(s1.train.size() == 8);
    CHECK(s1.val.size() == 1);
    CHECK(s1.test.size() == 1);
    CHECK(s1.train == s2.train);
    CHECK(s1.test == s2.test);
    Rng c(1);
    CHECK_THROWS_AS(split_dataset(2, fr, c), std::invalid_argument);
    const std::array<double, 2> bad{0.5, 0.6};
    CHECK_THROWS_AS(split_dataset(10, bad, c), std::invalid_argument);
  }

  TEST_CASE("splits are disjoint and covering") {
    const std::array<double, 3> fr{0.7, 0.2, 0.1};
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const auto s = split_dataset(1000, fr, rng);
      std::vector<int> seen(1000, 0);
      for (const auto *part : {&s.train, &s.val, &s.test}) {
        for (auto i : *part) {
          ++seen[i];
        }
      }
      CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
    }
  }

  TEST_CASE("manifest json round trip") {
    DatasetManifest m;
    m.files = {"a.xyz", "b.xyz"};
    m.split.train = {0, 2};
    m.split.val = {1};
    const auto back = manifest_from_json(manifest_to_json(m));
    CHECK(back.files == m.files);
    CHECK(back.split.train == m.split.train);
    CHECK(back.split.val == m.split.val);
    CHECK(back.split.test.empty());
  }
}
