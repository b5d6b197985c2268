// SPDX-License-Identifier: Apache-2.0
#include "graphfree/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <unsupported/Eigen/LevenbergMarquardt>

namespace graphfree::analysis {

using tokens::TokenType;

std::string to_string(Bucket b) {
  switch (b) {
  case Bucket::Positions:
    return "positions";
  case Bucket::Charge:
    return "charge";
  case Bucket::Spin:
    return "spin";
  case Bucket::Delimiter:
    return "delimiter";
  }
  return "unknown";
}

std::vector<Bucket> bucket_tokens(const DualSequence &seq) {
  std::vector<Bucket> out;
  out.reserve(seq.length());
  for (TokenType t : seq.types) {
    switch (t) {
    case TokenType::Element:
    case TokenType::Position:
      out.push_back(Bucket::Positions);
      break;
    case TokenType::Charge:
      out.push_back(Bucket::Charge);
      break;
    case TokenType::Spin:
      out.push_back(Bucket::Spin);
      break;
    default:
      out.push_back(Bucket::Delimiter);
    }
  }
  return out;
}

std::optional<double> TokenTypeMass::fraction(std::size_t layer, Bucket q, Bucket k) const {
  const auto &row = mass.at(layer)[static_cast<std::size_t>(q)];
  const double total = std::accumulate(row.begin(), row.end(), 0.0);
  if (total <= 0.0) {
    return std::nullopt;
  }
  return row[static_cast<std::size_t>(k)] / total;
}

void TokenTypeMass::merge(const TokenTypeMass &other) {
  if (layers == 0) {
    *this = other;
    return;
  }
  if (other.layers != layers) {
    throw std::invalid_argument("TokenTypeMass::merge: layer counts differ");
  }
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t q = 0; q < kBucketCount; ++q) {
      for (std::size_t k = 0; k < kBucketCount; ++k) {
        mass[l][q][k] += other.mass[l][q][k];
      }
    }
  }
}

TokenTypeMass attention_by_token_type(const AttentionRecord &record,
                                      std::span<const Bucket> buckets) {
  if (buckets.size() != record.length) {
    throw std::invalid_argument("attention_by_token_type: " + std::to_string(buckets.size()) +
                                " bucket labels for a record of length " +
                                std::to_string(record.length));
  }
  TokenTypeMass out;
  out.layers = record.layers;
  out.mass.assign(record.layers, {});
  const std::size_t t = record.length;
  for (std::size_t l = 0; l < record.layers; ++l) {
    for (std::size_t i = 0; i < t; ++i) {
      auto &row = out.mass[l][static_cast<std::size_t>(buckets[i])];
      for (std::size_t j = 0; j < t; ++j) {
        row[static_cast<std::size_t>(buckets[j])] += record.mean(l, i, j);
      }
    }
  }
  return out;
}

std::vector<AttentionSample> CapturedAttention::samples() const {
  std::vector<AttentionSample> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back({&records[i], &sequences[i], &frames[i]});
  }
  return out;
}

template <typename T>
CapturedAttention capture_attention(const model::ModelParameters<T> &p,
                                    std::span<const MolecularFrame> frames,
                                    const codebook::QuantileCodebook &cb,
                                    const tokens::Vocabulary &vocab, tokens::Mode mode) {
  CapturedAttention out;
  for (const auto &f : frames) {
    out.sequences.push_back(tokens::encode_frame(f, cb, vocab, mode));
    const auto &seq = out.sequences.back();
    auto r = mode == tokens::Mode::Pretrain ? model::forward_causal(p, seq, true)
                                            : model::forward_bidirectional(p, seq, true);
    out.records.push_back(std::move(*r.attention));
    out.frames.push_back(f);
  }
  return out;
}

Curve quantile_curve(std::span<const double> x, std::span<const double> y, std::size_t n_buckets) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("quantile_curve: x and y lengths differ");
  }
  if (n_buckets == 0) {
    throw std::invalid_argument("quantile_curve: need at least one bucket");
  }
  if (x.size() < n_buckets) {
    throw std::invalid_argument("quantile_curve: " + std::to_string(x.size()) +
                                " pairs for " + std::to_string(n_buckets) + " buckets");
  }
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> edges;
  for (std::size_t k = 1; k < n_buckets; ++k) {
    edges.push_back(x[order[k * x.size() / n_buckets]]);
  }
  struct Acc {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    double sx = 0.0, sy = 0.0;
    std::size_t n = 0;
  };
  std::vector<Acc> acc(n_buckets);
  for (std::size_t idx : order) {
    const auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), x[idx]) -
                                            edges.begin());
    auto &a = acc[b];
    a.lo = std::min(a.lo, x[idx]);
    a.hi = std::max(a.hi, x[idx]);
    a.sx += x[idx];
    a.sy += y[idx];
    ++a.n;
  }
  Curve out;
  for (const auto &a : acc) {
    if (a.n > 0) {
      const double n = static_cast<double>(a.n);
      out.push_back({a.lo, a.hi, a.sx / n, a.sy / n, a.n});
    }
  }
  return out;
}

namespace {

double distance(const Vec3 &a, const Vec3 &b) {
  return std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
}

void check_sample(const AttentionSample &s) {
  if (!s.record || !s.sequence || !s.frame) {
    throw std::invalid_argument("attention sample is missing a record, sequence or frame");
  }
  if (s.record->length != s.sequence->length()) {
    throw std::invalid_argument("attention record length " + std::to_string(s.record->length) +
                                " does not match sequence length " +
                                std::to_string(s.sequence->length()));
  }
  if (s.sequence->n_atoms != s.frame->size()) {
    throw std::invalid_argument("sequence and frame disagree on the atom count");
  }
}

std::size_t layer_count(std::span<const AttentionSample> samples) {
  if (samples.empty()) {
    throw std::invalid_argument("no attention samples");
  }
  const std::size_t layers = samples.front().record->layers;
  for (const auto &s : samples) {
    check_sample(s);
    if (s.record->layers != layers) {
      throw std::invalid_argument("attention samples disagree on the layer count");
    }
  }
  return layers;
}

// Token indices (element and position) of each atom.
std::vector<std::vector<std::size_t>> atom_tokens(const DualSequence &seq) {
  std::vector<std::vector<std::size_t>> out(seq.n_atoms);
  for (std::size_t t = 0; t < seq.length(); ++t) {
    if ((seq.types[t] == TokenType::Element || seq.types[t] == TokenType::Position) &&
        seq.atom_index[t] >= 0) {
      out[static_cast<std::size_t>(seq.atom_index[t])].push_back(t);
    }
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

} // namespace

std::vector<Curve> attention_vs_distance(std::span<const AttentionSample> samples,
                                         std::size_t n_quantiles) {
  const std::size_t layers = layer_count(samples);
  std::vector<std::vector<double>> xs(layers), ys(layers);
  for (const auto &s : samples) {
    const auto pos = s.sequence->position_tokens();
    const auto &r = s.frame->positions;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      for (std::size_t j = 0; j < pos.size(); ++j) {
        if (i == j) {
          continue;
        }
        const double d = distance(r[i], r[j]);
        for (std::size_t l = 0; l < layers; ++l) {
          xs[l].push_back(d);
          ys[l].push_back(s.record->mean(l, pos[i], pos[j]));
        }
      }
    }
  }
  std::vector<Curve> out;
  for (std::size_t l = 0; l < layers; ++l) {
    out.push_back(quantile_curve(xs[l], ys[l], n_quantiles));
  }
  return out;
}

double effective_radius(std::span<const double> attention, std::span<const double> distances,
                        double delta) {
  if (attention.empty()) {
    throw std::invalid_argument("effective_radius: empty attention row");
  }
  if (attention.size() != distances.size()) {
    throw std::invalid_argument("effective_radius: attention and distance lengths differ");
  }
  if (!(delta > 0.0) || delta > 1.0) {
    throw std::invalid_argument("effective_radius: delta must lie in (0, 1]");
  }
  double total = 0.0;
  for (double a : attention) {
    if (!(a >= 0.0) || !std::isfinite(a)) {
      throw std::invalid_argument("effective_radius: scores must be finite and non-negative");
    }
    total += a;
  }
  if (!(total > 0.0)) {
    throw std::invalid_argument("effective_radius: attention row carries no mass");
  }
  std::vector<std::size_t> order(attention.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return distances[a] < distances[b]; });
  constexpr double kTol = 1e-12;
  double cum = 0.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double d = distances[order[k]];
    while (k < order.size() && distances[order[k]] == d) {
      cum += attention[order[k]] / total;
      ++k;
    }
    if (cum >= delta - kTol) {
      return d;
    }
  }
  return distances[order.back()];
}

std::vector<double> effective_radii(const AttentionSample &s, std::size_t layer, double delta) {
  check_sample(s);
  if (layer >= s.record->layers) {
    throw std::out_of_range("effective_radii: layer " + std::to_string(layer) + " of " +
                            std::to_string(s.record->layers));
  }
  const auto pos = s.sequence->position_tokens();
  const auto owned = atom_tokens(*s.sequence);
  const auto &r = s.frame->positions;
  const std::size_t n = pos.size();
  std::vector<double> out(n), row(n), dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double a = 0.0;
      for (std::size_t t : owned[j]) {
        a += s.record->mean(layer, pos[i], t);
      }
      row[j] = a;
      dist[j] = i == j ? 0.0 : distance(r[i], r[j]);
    }
    out[i] = effective_radius(row, dist, delta);
  }
  return out;
}

std::vector<Curve> radius_vs_density(std::span<const AttentionSample> samples, double delta,
                                     std::size_t n_percentiles) {
  const std::size_t layers = layer_count(samples);
  std::vector<double> xs;
  std::vector<std::vector<double>> ys(layers);
  for (const auto &s : samples) {
    const auto &r = s.frame->positions;
    const std::size_t n = r.size();
    if (n < 2) {
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> d;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) {
          d.push_back(distance(r[i], r[j]));
        }
      }
      xs.push_back(median(std::move(d)));
    }
    for (std::size_t l = 0; l < layers; ++l) {
      const auto radii = effective_radii(s, l, delta);
      ys[l].insert(ys[l].end(), radii.begin(), radii.end());
    }
  }
  std::vector<Curve> out;
  for (std::size_t l = 0; l < layers; ++l) {
    out.push_back(quantile_curve(xs, ys[l], n_percentiles));
  }
  return out;
}

std::vector<HeadCurves> per_head_curves(std::span<const AttentionSample> samples,
                                        std::size_t n_quantiles) {
  const std::size_t layers = layer_count(samples);
  const std::size_t heads = samples.front().record->heads;
  struct Pool {
    std::vector<double> d, a;
    std::map<std::size_t, std::pair<double, std::size_t>> rank; // rank -> (sum, count)
  };
  std::vector<Pool> pools(layers * heads);
  for (const auto &s : samples) {
    if (s.record->heads != heads) {
      throw std::invalid_argument("attention samples disagree on the head count");
    }
    const auto pos = s.sequence->position_tokens();
    const auto &r = s.frame->positions;
    const std::size_t n = pos.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> others;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) {
          others.push_back(j);
        }
      }
      std::stable_sort(others.begin(), others.end(), [&](auto a, auto b) {
        return distance(r[i], r[a]) < distance(r[i], r[b]);
      });
      for (std::size_t k = 0; k < others.size(); ++k) {
        const std::size_t j = others[k];
        const double d = distance(r[i], r[j]);
        for (std::size_t l = 0; l < layers; ++l) {
          for (std::size_t h = 0; h < heads; ++h) {
            auto &pool = pools[l * heads + h];
            const double a = (*s.record)(l, h, pos[i], pos[j]);
            pool.d.push_back(d);
            pool.a.push_back(a);
            auto &slot = pool.rank[k + 1];
            slot.first += a;
            ++slot.second;
          }
        }
      }
    }
  }
  std::vector<HeadCurves> out;
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto &pool = pools[l * heads + h];
      HeadCurves c;
      c.layer = l;
      c.head = h;
      c.by_distance = quantile_curve(pool.d, pool.a, n_quantiles);
      for (const auto &[rank, acc] : pool.rank) {
        const auto x = static_cast<double>(rank);
        c.by_rank.push_back({x, x, x, acc.first / static_cast<double>(acc.second), acc.second});
      }
      out.push_back(std::move(c));
    }
  }
  return out;
}

template <typename T>
ForceFn model_forces(const model::ModelParameters<T> &p, const codebook::QuantileCodebook &cb,
                     const tokens::Vocabulary &vocab, bool conservative) {
  return [&p, &cb, &vocab, conservative](const MolecularFrame &frame) {
    const auto seq = tokens::encode_frame(frame, cb, vocab, tokens::Mode::Finetune);
    return conservative ? model::conservative_forces(p, seq).forces
                        : model::predict_energy_forces(p, seq).forces;
  };
}

namespace {

std::optional<double> cosine(const std::vector<Vec3> &a, const std::vector<Vec3> &b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("force arrays differ in atom count");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      dot += a[i][k] * b[i][k];
      na += a[i][k] * a[i][k];
      nb += b[i][k] * b[i][k];
    }
  }
  if (na == 0.0 || nb == 0.0) {
    return std::nullopt;
  }
  return dot / std::sqrt(na * nb);
}

std::vector<data::RotationMatrix> sample_rotations(std::size_t n, Rng &rng) {
  std::vector<data::RotationMatrix> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(data::random_rotation(rng));
  }
  return out;
}

} // namespace

CosineSummary equivariance_cossim(const ForceFn &forces, const MolecularFrame &frame,
                                  std::span<const data::RotationMatrix> rotations) {
  if (rotations.empty()) {
    throw std::invalid_argument("equivariance_cossim: no rotations");
  }
  const auto base = forces(frame);
  CosineSummary s;
  double sum = 0.0;
  for (const auto &rot : rotations) {
    std::vector<Vec3> rotated_base;
    for (const auto &f : base) {
      rotated_base.push_back(rot.apply(f));
    }
    const auto c = cosine(rotated_base, forces(data::augment_rotate(frame, rot)));
    if (c) {
      sum += *c;
      ++s.used;
    } else {
      ++s.excluded;
    }
  }
  s.mean = s.used ? sum / static_cast<double>(s.used) : std::nan("");
  return s;
}

CosineSummary equivariance_cossim(const ForceFn &forces, const MolecularFrame &frame,
                                  std::size_t n_rotations, Rng &rng) {
  return equivariance_cossim(forces, frame, sample_rotations(n_rotations, rng));
}

std::vector<Vec3> frame_average_forces(const ForceFn &forces, const MolecularFrame &frame,
                                       std::span<const data::RotationMatrix> rotations) {
  if (rotations.empty()) {
    throw std::invalid_argument("frame_average_forces: no rotations");
  }
  std::vector<Vec3> out(frame.size(), Vec3{0, 0, 0});
  for (const auto &rot : rotations) {
    const auto f = forces(data::augment_rotate(frame, rot));
    for (std::size_t i = 0; i < out.size(); ++i) {
      const Vec3 back = rot.apply_transpose(f[i]);
      for (int k = 0; k < 3; ++k) {
        out[i][k] += back[k];
      }
    }
  }
  for (auto &v : out) {
    for (double &x : v) {
      x /= static_cast<double>(rotations.size());
    }
  }
  return out;
}

std::vector<Vec3> frame_average_forces(const ForceFn &forces, const MolecularFrame &frame,
                                       std::size_t n_rotations, Rng &rng) {
  return frame_average_forces(forces, frame, sample_rotations(n_rotations, rng));
}

template <typename T>
double sequence_log_prob(const model::ModelParameters<T> &p, const DualSequence &seq) {
  if (seq.mode != tokens::Mode::Pretrain) {
    throw std::invalid_argument("sequence_log_prob needs a pretrain-mode sequence");
  }
  const auto logits = model::forward_causal(p, seq).values;
  const std::size_t v = logits.cols();
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < seq.length(); ++t) {
    const T *row = logits.data.data() + t * v;
    const double mx = static_cast<double>(*std::max_element(row, row + v));
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      z += std::exp(static_cast<double>(row[c]) - mx);
    }
    const auto next = static_cast<std::size_t>(seq.token_ids[t + 1]);
    total += static_cast<double>(row[next]) - mx - std::log(z);
  }
  return total;
}

double ScalingFit::predict(double n) const { return std::pow(n / n_c, alpha); }

ScalingFit fit_power_law(std::span<const std::array<double, 2>> points) {
  if (points.size() < 2) {
    throw std::invalid_argument("fit_power_law: need at least two points");
  }
  const auto m = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd a(m, 2);
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto [n, l] = points[static_cast<std::size_t>(i)];
    if (!(n > 0.0) || !(l > 0.0)) {
      throw std::invalid_argument("fit_power_law: N and L must be positive");
    }
    a(i, 0) = std::log(n);
    a(i, 1) = 1.0;
    y(i) = std::log(l);
  }
  const Eigen::Vector2d x = a.colPivHouseholderQr().solve(y);
  ScalingFit f;
  f.alpha = x(0);
  if (!(std::abs(f.alpha) > 1e-12) || !std::isfinite(f.alpha)) {
    throw std::invalid_argument("fit_power_law: flat or degenerate data (alpha = 0)");
  }
  f.n_c = std::exp(-x(1) / f.alpha);
  const Eigen::VectorXd r = y - a * x;
  f.residuals.assign(r.data(), r.data() + r.size());
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  f.r_squared = ss_tot > 0.0 ? 1.0 - r.squaredNorm() / ss_tot : 1.0;
  return f;
}

double JointScalingFit::predict(double n, double d) const {
  return l_inf + a * std::pow(n, -alpha) + b * std::pow(d, -beta);
}

namespace {

// Residuals ln(prediction) - ln(L) over theta = (ln L_inf, ln A, ln alpha, ln B, ln beta).
struct JointResidual : Eigen::DenseFunctor<double> {
  std::vector<double> ln_n, ln_d, ln_l;

  JointResidual(std::vector<double> n, std::vector<double> d, std::vector<double> l)
      : Eigen::DenseFunctor<double>(5, static_cast<int>(n.size())), ln_n(std::move(n)),
        ln_d(std::move(d)), ln_l(std::move(l)) {}

  struct Terms {
    double linf, tn, td, alpha, beta, total;
  };

  Terms terms(const InputType &x, std::size_t i) const {
    Terms t{};
    t.linf = std::exp(x(0));
    t.alpha = std::exp(x(2));
    t.beta = std::exp(x(4));
    t.tn = std::exp(x(1) - t.alpha * ln_n[i]);
    t.td = std::exp(x(3) - t.beta * ln_d[i]);
    t.total = t.linf + t.tn + t.td;
    return t;
  }

  int operator()(const InputType &x, ValueType &fvec) const {
    for (std::size_t i = 0; i < ln_n.size(); ++i) {
      fvec(static_cast<Eigen::Index>(i)) = std::log(terms(x, i).total) - ln_l[i];
    }
    return 0;
  }

  int df(const InputType &x, JacobianType &jac) const {
    for (std::size_t i = 0; i < ln_n.size(); ++i) {
      const auto t = terms(x, i);
      const auto r = static_cast<Eigen::Index>(i);
      jac(r, 0) = t.linf / t.total;
      jac(r, 1) = t.tn / t.total;
      jac(r, 2) = -t.tn * t.alpha * ln_n[i] / t.total;
      jac(r, 3) = t.td / t.total;
      jac(r, 4) = -t.td * t.beta * ln_d[i] / t.total;
    }
    return 0;
  }
};

std::size_t distinct(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

} // namespace

JointScalingFit fit_joint_scaling(std::span<const std::array<double, 3>> points,
                                  const JointFitOptions &options) {
  if (points.size() < 6) {
    throw std::invalid_argument("fit_joint_scaling: need at least 6 points, got " +
                                std::to_string(points.size()));
  }
  std::vector<double> ns, ds, ls;
  for (const auto &[n, d, l] : points) {
    if (!(n > 0.0) || !(d > 0.0) || !(l > 0.0)) {
      throw std::invalid_argument("fit_joint_scaling: N, D and L must be positive");
    }
    ns.push_back(n);
    ds.push_back(d);
    ls.push_back(l);
  }
  if (distinct(ns) < 2 || distinct(ds) < 2) {
    throw std::invalid_argument("fit_joint_scaling: N and D must each take two or more values");
  }
  const auto [lmin_it, lmax_it] = std::minmax_element(ls.begin(), ls.end());
  const double lmin = *lmin_it, lmax = *lmax_it;
  JointScalingFit best;
  if (lmax - lmin <= 1e-12 * lmax) {
    best.degenerate = true;
    best.l_inf = lmin;
    return best;
  }

  std::vector<double> ln_n, ln_d, ln_l;
  for (std::size_t i = 0; i < ns.size(); ++i) {
    ln_n.push_back(std::log(ns[i]));
    ln_d.push_back(std::log(ds[i]));
    ln_l.push_back(std::log(ls[i]));
  }
  JointResidual functor(ln_n, ln_d, ln_l);
  const auto m = static_cast<Eigen::Index>(ns.size());

  Rng rng(options.seed);
  std::uniform_real_distribution<double> log_exp(std::log(0.02), std::log(2.0));
  std::uniform_real_distribution<double> floor_frac(0.0, 0.95);
  double best_cost = std::numeric_limits<double>::infinity();
  const std::size_t starts = std::max<std::size_t>(options.starts, 1);
  for (std::size_t s = 0; s < starts; ++s) {
    const double alpha = s == 0 ? 0.3 : std::exp(log_exp(rng));
    const double beta = s == 0 ? 0.3 : std::exp(log_exp(rng));
    const double linf = std::max((s == 0 ? 0.5 : floor_frac(rng)) * lmin, 1e-6 * lmin);
    // Linear least squares for A and B at the sampled exponents.
    Eigen::MatrixXd a(m, 2);
    Eigen::VectorXd y(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      a(i, 0) = std::exp(-alpha * ln_n[static_cast<std::size_t>(i)]);
      a(i, 1) = std::exp(-beta * ln_d[static_cast<std::size_t>(i)]);
      y(i) = ls[static_cast<std::size_t>(i)] - linf;
    }
    Eigen::Vector2d ab = a.colPivHouseholderQr().solve(y);
    const double floor_a = 1e-3 * (lmax - lmin) * std::exp(alpha * ln_n.front());
    const double floor_b = 1e-3 * (lmax - lmin) * std::exp(beta * ln_d.front());
    Eigen::VectorXd x(5);
    x << std::log(linf), std::log(std::isfinite(ab(0)) && ab(0) > 0 ? ab(0) : floor_a),
        std::log(alpha), std::log(std::isfinite(ab(1)) && ab(1) > 0 ? ab(1) : floor_b),
        std::log(beta);
    Eigen::LevenbergMarquardt<JointResidual> lm(functor);
    lm.setMaxfev(4000);
    lm.setXtol(1e-14);
    lm.setFtol(1e-14);
    lm.minimize(x);
    Eigen::VectorXd r(m);
    functor(x, r);
    const double cost = r.squaredNorm();
    if (std::isfinite(cost) && cost < best_cost) {
      best_cost = cost;
      best.l_inf = std::exp(x(0));
      best.a = std::exp(x(1));
      best.alpha = std::exp(x(2));
      best.b = std::exp(x(3));
      best.beta = std::exp(x(4));
      best.rmse_log = std::sqrt(cost / static_cast<double>(m));
    }
  }
  if (!std::isfinite(best_cost)) {
    throw std::runtime_error("fit_joint_scaling: no start converged to a finite residual");
  }
  return best;
}

IsoFlopCurve isoflop_curve(const JointScalingFit &fit, double flops,
                           const IsoFlopOptions &options) {
  if (!(flops > 0.0)) {
    throw std::invalid_argument("isoflop_curve: compute budget must be positive");
  }
  if (fit.degenerate) {
    throw std::invalid_argument("isoflop_curve: scaling fit is degenerate");
  }
  if (options.grid < 3 || !(options.n_min > 0.0) || !(options.n_max > options.n_min)) {
    throw std::invalid_argument("isoflop_curve: invalid grid");
  }
  const double k = options.flops_per_param_token;
  auto point = [&](double ln_n) {
    const double n = std::exp(ln_n);
    const double d = flops / (k * n);
    return IsoFlopPoint{n, d, fit.predict(n, d)};
  };
  IsoFlopCurve c;
  c.flops = flops;
  const double lo = std::log(options.n_min), hi = std::log(options.n_max);
  const double step = (hi - lo) / static_cast<double>(options.grid - 1);
  for (std::size_t i = 0; i < options.grid; ++i) {
    const auto p = point(lo + step * static_cast<double>(i));
    if (p.d >= 1.0 && p.n >= 1.0) {
      c.points.push_back(p);
    }
  }
  if (c.points.empty()) {
    throw std::invalid_argument("isoflop_curve: budget too small for any model on the grid");
  }
  const auto it = std::min_element(c.points.begin(), c.points.end(),
                                   [](const auto &a, const auto &b) { return a.loss < b.loss; });
  // Golden-section refinement on the bracketing grid cells.
  double a = std::log(it->n) - step, b = std::log(it->n) + step;
  a = std::max(a, std::log(c.points.front().n));
  b = std::min(b, std::log(c.points.back().n));
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - g * (b - a), x2 = a + g * (b - a);
  double f1 = point(x1).loss, f2 = point(x2).loss;
  for (int iter = 0; iter < 200 && b - a > 1e-12; ++iter) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - g * (b - a);
      f1 = point(x1).loss;
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + g * (b - a);
      f2 = point(x2).loss;
    }
  }
  c.optimum = point(0.5 * (a + b));
  if (it->loss < c.optimum.loss) {
    c.optimum = *it;
  }
  return c;
}

void to_json(nlohmann::json &j, const ScalingFit &f) {
  j = nlohmann::json{{"alpha", f.alpha},
                     {"n_c", f.n_c},
                     {"r_squared", f.r_squared},
                     {"residuals", f.residuals}};
}

void to_json(nlohmann::json &j, const JointScalingFit &f) {
  j = nlohmann::json{{"l_inf", f.l_inf}, {"a", f.a},
                     {"alpha", f.alpha}, {"b", f.b},
                     {"beta", f.beta},   {"rmse_log", f.rmse_log},
                     {"degenerate", f.degenerate}};
}

void to_json(nlohmann::json &j, const IsoFlopCurve &c) {
  auto pts = nlohmann::json::array();
  for (const auto &p : c.points) {
    pts.push_back({{"n", p.n}, {"d", p.d}, {"loss", p.loss}});
  }
  j = nlohmann::json{
      {"flops", c.flops},
      {"optimum", {{"n", c.optimum.n}, {"d", c.optimum.d}, {"loss", c.optimum.loss}}},
      {"points", pts}};
}

void to_json(nlohmann::json &j, const CurvePoint &p) {
  j = nlohmann::json{{"lo", p.lo},           {"hi", p.hi},         {"midpoint", p.midpoint()},
                     {"x_mean", p.x_mean},   {"y_mean", p.y_mean}, {"count", p.count}};
}

#define GRAPHFREE_INSTANTIATE(T)                                                                   \
  template CapturedAttention capture_attention<T>(                                                 \
      const model::ModelParameters<T> &, std::span<const MolecularFrame>,                          \
      const codebook::QuantileCodebook &, const tokens::Vocabulary &, tokens::Mode);               \
  template ForceFn model_forces<T>(const model::ModelParameters<T> &,                              \
                                   const codebook::QuantileCodebook &, const tokens::Vocabulary &, \
                                   bool);                                                          \
  template double sequence_log_prob<T>(const model::ModelParameters<T> &, const DualSequence &);

GRAPHFREE_INSTANTIATE(float)
GRAPHFREE_INSTANTIATE(double)

} // namespace graphfree::analysis
