// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "graphfree/codebook.hpp"
#include "graphfree/data.hpp"
#include "graphfree/model.hpp"
#include "graphfree/tokenizer.hpp"

namespace graphfree::analysis {

using model::AttentionRecord;
using tokens::DualSequence;

// ---------------------------------------------------------------------------
// Attention bookkeeping

enum class Bucket : std::uint8_t { Positions, Charge, Spin, Delimiter };
inline constexpr std::size_t kBucketCount = 4;

std::string to_string(Bucket b);

/// Element and position tokens are Positions; every other non-charge,
/// non-spin token is a Delimiter.
std::vector<Bucket> bucket_tokens(const DualSequence &seq);

/// Head-averaged attention mass from each query bucket into each key bucket.
struct TokenTypeMass {
  std::size_t layers = 0;
  /// mass[l][q][k]: summed head-averaged scores.
  std::vector<std::array<std::array<double, kBucketCount>, kBucketCount>> mass;

  /// Fraction of bucket q's attention landing on bucket k; nullopt when no
  /// query of bucket q was seen.
  std::optional<double> fraction(std::size_t layer, Bucket q, Bucket k) const;
  /// Adds another table (same layer count).
  void merge(const TokenTypeMass &other);
};

TokenTypeMass attention_by_token_type(const AttentionRecord &record,
                                      std::span<const Bucket> buckets);

/// One analysed sequence: its attention, token layout and coordinates.
struct AttentionSample {
  const AttentionRecord *record = nullptr;
  const DualSequence *sequence = nullptr;
  const MolecularFrame *frame = nullptr;
};

/// Captures attention for every frame (bidirectional for finetune mode,
/// causal for pretrain mode).
struct CapturedAttention {
  std::vector<DualSequence> sequences;
  std::vector<AttentionRecord> records;
  std::vector<MolecularFrame> frames;

  std::vector<AttentionSample> samples() const;
};

template <typename T>
CapturedAttention capture_attention(const model::ModelParameters<T> &p,
                                    std::span<const MolecularFrame> frames,
                                    const codebook::QuantileCodebook &cb,
                                    const tokens::Vocabulary &vocab, tokens::Mode mode);

struct CurvePoint {
  double lo = 0.0;   // bucket lower bound of x
  double hi = 0.0;   // bucket upper bound of x
  double x_mean = 0.0;
  double y_mean = 0.0;
  std::size_t count = 0;

  double midpoint() const { return 0.5 * (lo + hi); }
};

using Curve = std::vector<CurvePoint>;

/// Groups (x, y) pairs into quantile buckets of x and averages each bucket.
/// Edges sit at sorted-x ranks k*P/n; ties never straddle a bucket, so
/// empty buckets are dropped. Throws when there are fewer pairs than buckets.
Curve quantile_curve(std::span<const double> x, std::span<const double> y, std::size_t n_buckets);

/// Per layer, head-averaged attention between position tokens of distinct
/// atoms against their separation.
std::vector<Curve> attention_vs_distance(std::span<const AttentionSample> samples,
                                         std::size_t n_quantiles);

/// Smallest distance at which the renormalized cumulative attention reaches
/// delta. Atoms at equal distance enter together. Self sits at distance 0.
double effective_radius(std::span<const double> attention, std::span<const double> distances,
                        double delta = 0.9);

/// Effective radius of every atom in one layer: the row is the head-averaged
/// attention from the atom's position token, summed over each atom's element
/// and position tokens.
std::vector<double> effective_radii(const AttentionSample &sample, std::size_t layer,
                                    double delta = 0.9);

/// Per layer: mean effective radius against percentile buckets of each atom's
/// median distance to the other atoms. Frames with one atom are skipped.
std::vector<Curve> radius_vs_density(std::span<const AttentionSample> samples, double delta,
                                     std::size_t n_percentiles);

struct HeadCurves {
  std::size_t layer = 0;
  std::size_t head = 0;
  Curve by_distance;
  /// Mean score at neighbour rank 1..k (x = rank). Every ordered pair of
  /// distinct atoms falls in exactly one rank.
  Curve by_rank;
};

std::vector<HeadCurves> per_head_curves(std::span<const AttentionSample> samples,
                                        std::size_t n_quantiles);

// ---------------------------------------------------------------------------
// Equivariance

using ForceFn = std::function<std::vector<Vec3>(const MolecularFrame &)>;

/// Direct-head forces (or -dE/dr when conservative).
template <typename T>
ForceFn model_forces(const model::ModelParameters<T> &p, const codebook::QuantileCodebook &cb,
                     const tokens::Vocabulary &vocab, bool conservative = false);

struct CosineSummary {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0; // rotations where either force array is all zero
};

/// Mean over rotations of cossim(R F(r), F(R r)) with both n x 3 arrays flattened.
CosineSummary equivariance_cossim(const ForceFn &forces, const MolecularFrame &frame,
                                  std::span<const data::RotationMatrix> rotations);
CosineSummary equivariance_cossim(const ForceFn &forces, const MolecularFrame &frame,
                                  std::size_t n_rotations, Rng &rng);

/// mean_R R^T F(R r).
std::vector<Vec3> frame_average_forces(const ForceFn &forces, const MolecularFrame &frame,
                                       std::span<const data::RotationMatrix> rotations);
std::vector<Vec3> frame_average_forces(const ForceFn &forces, const MolecularFrame &frame,
                                       std::size_t n_rotations, Rng &rng);

// ---------------------------------------------------------------------------
// Likelihood

/// Sum over predicted positions of log p(token_{t+1} | prefix). Pretrain mode only.
template <typename T>
double sequence_log_prob(const model::ModelParameters<T> &p, const DualSequence &seq);

// ---------------------------------------------------------------------------
// Scaling laws

/// L(N) = (N / N_c)^alpha, fitted in log space.
struct ScalingFit {
  double alpha = 0.0;
  double n_c = 0.0;
  double r_squared = 0.0;
  std::vector<double> residuals; // ln L - ln L_fit

  double predict(double n) const;
};

ScalingFit fit_power_law(std::span<const std::array<double, 2>> points);

/// L(N, D) = L_inf + A N^-alpha + B D^-beta.
struct JointScalingFit {
  double l_inf = 0.0;
  double a = 0.0;
  double alpha = 0.0;
  double b = 0.0;
  double beta = 0.0;
  double rmse_log = 0.0;
  bool degenerate = false;

  double predict(double n, double d) const;
};

struct JointFitOptions {
  std::size_t starts = 24;
  std::uint64_t seed = 0;
};

/// Log-space Levenberg-Marquardt from several starts; the lowest residual wins.
/// Constant losses return a fit flagged degenerate.
JointScalingFit fit_joint_scaling(std::span<const std::array<double, 3>> points,
                                  const JointFitOptions &options = {});

struct IsoFlopPoint {
  double n = 0.0;
  double d = 0.0;
  double loss = 0.0;
};

struct IsoFlopCurve {
  double flops = 0.0;
  std::vector<IsoFlopPoint> points;
  IsoFlopPoint optimum;
};

struct IsoFlopOptions {
  double flops_per_param_token = 6.0; // C = k * N * D
  double n_min = 1e3;
  double n_max = 1e13;
  std::size_t grid = 241;
};

/// Substitutes D = C / (k N), sweeps N on a log grid and refines the minimum
/// by golden-section search in ln N.
IsoFlopCurve isoflop_curve(const JointScalingFit &fit, double flops,
                           const IsoFlopOptions &options = {});

void to_json(nlohmann::json &j, const ScalingFit &f);
void to_json(nlohmann::json &j, const JointScalingFit &f);
void to_json(nlohmann::json &j, const IsoFlopCurve &c);
void to_json(nlohmann::json &j, const CurvePoint &p);

} // namespace graphfree::analysis
