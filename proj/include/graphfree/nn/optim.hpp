// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "graphfree/nn/array.hpp"

namespace graphfree::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Array<T>> m;
  std::vector<Array<T>> v;
  std::int64_t step = 0;

  /// Zero moments shaped like params.
  static AdamState zeros_like(std::span<const Array<T>> params, AdamConfig config = {});
};

/// One bias-corrected Adam update. Weight decay is decoupled:
/// p -= lr * weight_decay * p before the moment step.
template <typename T>
void adam_step(std::span<Array<T>> params, std::span<const Array<T>> grads, AdamState<T> &state,
               double lr, double weight_decay = 0.0);

struct ClipResult {
  double norm = 0.0;      // global L2 norm before clipping
  double post_norm = 0.0; // recomputed after clipping
  bool finite = true;
  bool clipped = false;
};

/// Scales grads in place so their global norm is at most max_norm. Non-finite
/// gradients are left untouched and reported through `finite`.
template <typename T>
ClipResult clip_global_norm(std::span<Array<T>> grads, double max_norm);

/// Evaluates the loss; fills grads (shaped like params) when non-null.
using Objective = std::function<double(const std::vector<Array<double>> &params,
                                       std::vector<Array<double>> *grads)>;

struct GradCheckOptions {
  double eps = 1e-6;
  /// Denominator floor for the relative error.
  double floor = 1e-6;
  /// Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  /// Five-point stencil (error O(eps^4)) instead of the three-point one.
  bool fourth_order = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Central differences against the analytic gradient, reporting the worst
/// coordinate by |a - n| / max(|a|, |n|, floor).
GradCheckResult finite_difference_check(const Objective &f, std::vector<Array<double>> params,
                                        const GradCheckOptions &options = {});

} // namespace graphfree::nn
