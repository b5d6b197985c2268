// SPDX-License-Identifier: Apache-2.0
#include "graphfree/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace graphfree::data {

RotationMatrix::RotationMatrix() : m_{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}} {}

RotationMatrix::RotationMatrix(const Matrix &m) : m_(m) {
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) {
        dot += m_[k][i] * m_[k][j];
      }
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-10) {
        throw std::invalid_argument("rotation matrix is not orthogonal");
      }
    }
  }
  if (std::abs(determinant() - 1.0) > 1e-10) {
    throw std::invalid_argument("rotation matrix determinant is not +1");
  }
}

Vec3 RotationMatrix::apply(const Vec3 &v) const {
  Vec3 out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = m_[i][0] * v[0] + m_[i][1] * v[1] + m_[i][2] * v[2];
  }
  return out;
}

Vec3 RotationMatrix::apply_transpose(const Vec3 &v) const {
  Vec3 out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = m_[0][i] * v[0] + m_[1][i] * v[1] + m_[2][i] * v[2];
  }
  return out;
}

RotationMatrix RotationMatrix::transpose() const {
  Matrix t{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      t[i][j] = m_[j][i];
    }
  }
  RotationMatrix r;
  r.m_ = t;
  return r;
}

double RotationMatrix::determinant() const {
  const auto &m = m_;
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

RotationMatrix random_rotation(Rng &rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double w = 0, x = 0, y = 0, z = 0, norm = 0;
  do {
    w = normal(rng);
    x = normal(rng);
    y = normal(rng);
    z = normal(rng);
    norm = std::sqrt(w * w + x * x + y * y + z * z);
  } while (norm < 1e-12);
  w /= norm;
  x /= norm;
  y /= norm;
  z /= norm;
  RotationMatrix::Matrix m{{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
                            {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
                            {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
  return RotationMatrix(m);
}

MolecularFrame augment_rotate(const MolecularFrame &frame, const RotationMatrix &r) {
  MolecularFrame out = frame;
  for (auto &p : out.positions) {
    p = r.apply(p);
  }
  if (out.forces) {
    for (auto &f : *out.forces) {
      f = r.apply(f);
    }
  }
  return out;
}

LjResult lennard_jones(std::span<const Vec3> positions, const LjParameters &p) {
  LjResult res;
  res.forces.assign(positions.size(), Vec3{0, 0, 0});
  const double s2 = p.sigma * p.sigma;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      Vec3 d{};
      double r2 = 0.0;
      for (int k = 0; k < 3; ++k) {
        d[k] = positions[i][k] - positions[j][k];
        r2 += d[k] * d[k];
      }
      const double sr6 = std::pow(s2 / r2, 3);
      const double sr12 = sr6 * sr6;
      res.energy += 4.0 * p.epsilon * (sr12 - sr6);
      // F_i = 24 eps / r^2 [2 (s/r)^12 - (s/r)^6] (r_i - r_j)
      const double coef = 24.0 * p.epsilon * (2.0 * sr12 - sr6) / r2;
      for (int k = 0; k < 3; ++k) {
        res.forces[i][k] += coef * d[k];
        res.forces[j][k] -= coef * d[k];
      }
    }
  }
  return res;
}

std::vector<MolecularFrame> generate_lj_dataset(std::size_t n_frames, int atoms_min,
                                                int atoms_max, Rng &rng,
                                                const LjParameters &p) {
  if (atoms_min < 2 || atoms_max < atoms_min || atoms_max > 16) {
    throw std::invalid_argument("LJ cluster sizes must satisfy 2 <= atoms_min <= atoms_max <= 16");
  }
  std::uniform_int_distribution<int> size_dist(atoms_min, atoms_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double min_d2 = std::pow(p.min_distance_factor * p.sigma, 2);

  std::vector<MolecularFrame> frames;
  frames.reserve(n_frames);
  while (frames.size() < n_frames) {
    const int n = size_dist(rng);
    std::vector<Vec3> pos{Vec3{0, 0, 0}};
    int attempts = 0;
    while (static_cast<int>(pos.size()) < n && attempts < 10000) {
      ++attempts;
      std::uniform_int_distribution<std::size_t> pick(0, pos.size() - 1);
      const Vec3 &anchor = pos[pick(rng)];
      Vec3 dir{normal(rng), normal(rng), normal(rng)};
      const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      if (norm < 1e-12) {
        continue;
      }
      const double dist =
          p.sigma * (p.grow_min_factor + (p.grow_max_factor - p.grow_min_factor) * unit(rng));
      Vec3 cand{};
      for (int k = 0; k < 3; ++k) {
        cand[k] = anchor[k] + dist * dir[k] / norm;
      }
      bool ok = true;
      for (const auto &q : pos) {
        double d2 = 0.0;
        for (int k = 0; k < 3; ++k) {
          d2 += (cand[k] - q[k]) * (cand[k] - q[k]);
        }
        if (d2 < min_d2) {
          ok = false;
          break;
        }
      }
      if (ok) {
        pos.push_back(cand);
      }
    }
    if (static_cast<int>(pos.size()) < n) {
      continue;
    }
    Vec3 center{0, 0, 0};
    for (const auto &q : pos) {
      for (int k = 0; k < 3; ++k) {
        center[k] += q[k] / static_cast<double>(n);
      }
    }
    for (auto &q : pos) {
      for (int k = 0; k < 3; ++k) {
        q[k] -= center[k];
      }
    }
    auto lj = lennard_jones(pos, p);
    MolecularFrame f;
    f.atomic_numbers.assign(static_cast<std::size_t>(n), p.atomic_number);
    f.positions = std::move(pos);
    f.forces = std::move(lj.forces);
    f.energy = lj.energy;
    frames.push_back(std::move(f));
  }
  return frames;
}

DatasetSplit split_dataset(std::size_t n, std::span<const double> fractions, Rng &rng) {
  if (fractions.empty() || fractions.size() > 3) {
    throw std::invalid_argument("split needs one to three fractions");
  }
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) {
      throw std::invalid_argument("split fractions must be positive");
    }
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must sum to 1");
  }
  if (n < fractions.size()) {
    throw std::invalid_argument("cannot split " + std::to_string(n) + " items into " +
                                std::to_string(fractions.size()) + " parts");
  }
  // largest-remainder rounding, then every part gets at least one item
  const std::size_t k = fractions.size();
  std::vector<std::size_t> sizes(k);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += sizes[i];
    remainders.emplace_back(exact - static_cast<double>(sizes[i]), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto &a, const auto &b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) {
    ++sizes[remainders[r % k].second];
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (sizes[i] == 0) {
      auto largest = std::max_element(sizes.begin(), sizes.end());
      --*largest;
      sizes[i] = 1;
    }
  }

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  DatasetSplit split;
  std::vector<std::size_t> *parts[3] = {&split.train, &split.val, &split.test};
  std::size_t offset = 0;
  for (std::size_t i = 0; i < k; ++i) {
    parts[i]->assign(perm.begin() + static_cast<std::ptrdiff_t>(offset),
                     perm.begin() + static_cast<std::ptrdiff_t>(offset + sizes[i]));
    std::sort(parts[i]->begin(), parts[i]->end());
    offset += sizes[i];
  }
  return split;
}

std::string manifest_to_json(const DatasetManifest &m) {
  nlohmann::json j;
  j["files"] = m.files;
  j["splits"] = {{"train", m.split.train}, {"val", m.split.val}, {"test", m.split.test}};
  return j.dump(2);
}

DatasetManifest manifest_from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  DatasetManifest m;
  m.files = j.at("files").get<std::vector<std::string>>();
  const auto &s = j.at("splits");
  m.split.train = s.value("train", std::vector<std::size_t>{});
  m.split.val = s.value("val", std::vector<std::size_t>{});
  m.split.test = s.value("test", std::vector<std::size_t>{});
  return m;
}

std::vector<MolecularFrame> select(std::span<const MolecularFrame> frames,
                                   std::span<const std::size_t> indices) {
  std::vector<MolecularFrame> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    out.push_back(frames[i]);
  }
  return out;
}

} // namespace graphfree::data
