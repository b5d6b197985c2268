// SPDX-License-Identifier: Apache-2.0
#include "graphfree/nn/optim.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace graphfree::nn {

template <typename T>
AdamState<T> AdamState<T>::zeros_like(std::span<const Array<T>> params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const auto &p : params) {
    s.m.emplace_back(p.shape, T(0));
    s.v.emplace_back(p.shape, T(0));
  }
  return s;
}

template <typename T>
void adam_step(std::span<Array<T>> params, std::span<const Array<T>> grads, AdamState<T> &state,
               double lr, double weight_decay) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " +
                     std::to_string(state.m.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape != grads[i].shape) {
      throw ShapeError("adam_step", params[i].shape, grads[i].shape);
    }
    if (params[i].shape != state.m[i].shape) {
      throw ShapeError("adam_step moments", params[i].shape, state.m[i].shape);
    }
  }
  const auto &c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double step_size = lr / bc1;
  const double decay = 1.0 - lr * weight_decay;
  using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Vec>;
  using ConstMap = Eigen::Map<const Vec>;
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = static_cast<Eigen::Index>(params[i].size());
    Map p(params[i].data.data(), n);
    ConstMap g(grads[i].data.data(), n);
    Map m(state.m[i].data.data(), n);
    Map v(state.v[i].data.data(), n);
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.square();
    if (weight_decay != 0.0) {
      p *= static_cast<T>(decay);
    }
    p -= static_cast<T>(step_size) * m / ((v * inv_bc2).sqrt() + static_cast<T>(c.eps));
  }
}

namespace {

template <typename T>
double global_norm(std::span<Array<T>> grads) {
  double sq = 0.0;
  for (const auto &g : grads) {
    for (T x : g.data) {
      sq += static_cast<double>(x) * static_cast<double>(x);
    }
  }
  return std::sqrt(sq);
}

} // namespace

template <typename T>
ClipResult clip_global_norm(std::span<Array<T>> grads, double max_norm) {
  if (!(max_norm > 0.0)) {
    throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  }
  ClipResult r;
  r.norm = global_norm(grads);
  r.post_norm = r.norm;
  r.finite = std::isfinite(r.norm);
  if (r.finite && r.norm > max_norm) {
    // Shrink slightly below the limit so rounding in T cannot overshoot it.
    const double margin = 1.0 - 8.0 * static_cast<double>(std::numeric_limits<T>::epsilon());
    const T s = static_cast<T>(max_norm / r.norm * margin);
    for (auto &g : grads) {
      for (T &x : g.data) {
        x *= s;
      }
    }
    r.clipped = true;
    r.post_norm = global_norm(grads);
  }
  return r;
}

GradCheckResult finite_difference_check(const Objective &f, std::vector<Array<double>> params,
                                        const GradCheckOptions &options) {
  if (!(options.eps > 0.0) || !std::isfinite(options.eps)) {
    throw std::invalid_argument("finite_difference_check: eps must be positive and finite");
  }
  std::vector<Array<double>> grads;
  for (const auto &p : params) {
    grads.emplace_back(p.shape, 0.0);
  }
  f(params, &grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape != params[i].shape) {
      throw ShapeError("finite_difference_check gradient", params[i].shape, grads[i].shape);
    }
  }

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<std::size_t> coords(params[pi].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param > 0 && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t k : coords) {
      double &x = params[pi].data[k];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        const double v = f(params, nullptr);
        x = saved;
        return v;
      };
      const double h = options.eps;
      double numeric = (at(h) - at(-h)) / (2.0 * h);
      if (options.fourth_order) {
        numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      }
      const double analytic = grads[pi].data[k];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double err = std::abs(analytic - numeric) / denom;
      ++result.checked;
      if (err > result.max_rel_error || !std::isfinite(err)) {
        result.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        result.worst_param = pi;
        result.worst_index = k;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(std::span<Array<float>>, std::span<const Array<float>>,
                               AdamState<float> &, double, double);
template void adam_step<double>(std::span<Array<double>>, std::span<const Array<double>>,
                                AdamState<double> &, double, double);
template ClipResult clip_global_norm<float>(std::span<Array<float>>, double);
template ClipResult clip_global_norm<double>(std::span<Array<double>>, double);

} // namespace graphfree::nn
