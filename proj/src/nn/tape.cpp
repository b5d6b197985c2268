// SPDX-License-Identifier: Apache-2.0
#include "graphfree/nn/tape.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace graphfree::nn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

template <typename T>
MapConstMat<T> cmat(const T *p, std::size_t r, std::size_t c) {
  return MapConstMat<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
MapMat<T> mmat(T *p, std::size_t r, std::size_t c) {
  return MapMat<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

bool is_suffix(const Shape &full, const Shape &tail) {
  if (tail.size() > full.size()) {
    return false;
  }
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

} // namespace

template <typename T>
Var Tape<T>::push(Array<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::set_backprop(Var v, std::function<void()> fn) {
  nodes_[v.id].backprop = std::move(fn);
}

template <typename T>
Array<T> &Tape<T>::grad_ref(std::uint32_t id) {
  auto &n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape != n.value.shape) {
    n.grad = Array<T>(n.value.shape, T(0));
  }
  return n.grad;
}

template <typename T>
Array<T> Tape<T>::grad(Var v) const {
  const auto &n = node(v);
  if (n.grad.shape == n.value.shape && n.grad.size() == n.value.size()) {
    return n.grad;
  }
  return Array<T>(n.value.shape, T(0));
}

template <typename T>
Var Tape<T>::leaf(Array<T> value, bool requires_grad) {
  return push(std::move(value), requires_grad);
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b, bool transpose_b) {
  const auto &av = node(a).value;
  const auto &bv = node(b).value;
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  if (bv.rank() == 2) {
    const std::size_t k = transpose_b ? bv.dim(1) : bv.dim(0);
    const std::size_t n = transpose_b ? bv.dim(0) : bv.dim(1);
    if (av.rank() < 1 || av.cols() != k) {
      throw ShapeError("matmul", av.shape, bv.shape);
    }
    const std::size_t r = av.rows();
    Shape out_shape = av.shape;
    out_shape.back() = n;
    Array<T> out(out_shape);
    auto A = cmat(av.data.data(), r, k);
    auto C = mmat(out.data.data(), r, n);
    if (transpose_b) {
      C.noalias() = A * cmat(bv.data.data(), n, k).transpose();
    } else {
      C.noalias() = A * cmat(bv.data.data(), k, n);
    }
    Var out_v = push(std::move(out), rg);
    if (rg) {
      set_backprop(out_v, [this, a, b, out_v, r, k, n, transpose_b] {
        const auto &g = nodes_[out_v.id].grad;
        auto G = cmat(g.data.data(), r, n);
        if (nodes_[a.id].requires_grad) {
          auto GA = mmat(grad_ref(a.id).data.data(), r, k);
          const auto &bd = nodes_[b.id].value.data;
          if (transpose_b) {
            GA.noalias() += G * cmat(bd.data(), n, k);
          } else {
            GA.noalias() += G * cmat(bd.data(), k, n).transpose();
          }
        }
        if (nodes_[b.id].requires_grad) {
          auto A = cmat(nodes_[a.id].value.data.data(), r, k);
          if (transpose_b) {
            auto GB = mmat(grad_ref(b.id).data.data(), n, k);
            GB.noalias() += G.transpose() * A;
          } else {
            auto GB = mmat(grad_ref(b.id).data.data(), k, n);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
    }
    return out_v;
  }
  if (bv.rank() != 3 || av.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw ShapeError("matmul", av.shape, bv.shape);
  }
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) {
    throw ShapeError("matmul", av.shape, bv.shape);
  }
  Array<T> out({batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    auto A = cmat(av.data.data() + s * m * k, m, k);
    auto C = mmat(out.data.data() + s * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * cmat(bv.data.data() + s * n * k, n, k).transpose();
    } else {
      C.noalias() = A * cmat(bv.data.data() + s * k * n, k, n);
    }
  }
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, a, b, out_v, batch, m, k, n, transpose_b] {
      const auto &g = nodes_[out_v.id].grad;
      const bool ga = nodes_[a.id].requires_grad;
      const bool gb = nodes_[b.id].requires_grad;
      T *ga_p = ga ? grad_ref(a.id).data.data() : nullptr;
      T *gb_p = gb ? grad_ref(b.id).data.data() : nullptr;
      const T *a_p = nodes_[a.id].value.data.data();
      const T *b_p = nodes_[b.id].value.data.data();
      for (std::size_t s = 0; s < batch; ++s) {
        auto G = cmat(g.data.data() + s * m * n, m, n);
        if (ga) {
          auto GA = mmat(ga_p + s * m * k, m, k);
          if (transpose_b) {
            GA.noalias() += G * cmat(b_p + s * n * k, n, k);
          } else {
            GA.noalias() += G * cmat(b_p + s * k * n, k, n).transpose();
          }
        }
        if (gb) {
          auto A = cmat(a_p + s * m * k, m, k);
          if (transpose_b) {
            mmat(gb_p + s * n * k, n, k).noalias() += G.transpose() * A;
          } else {
            mmat(gb_p + s * k * n, k, n).noalias() += A.transpose() * G;
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const auto &av = node(a).value;
  const auto &bv = node(b).value;
  const bool broadcast = av.shape != bv.shape;
  if (broadcast && (!is_suffix(av.shape, bv.shape) || bv.size() == 0)) {
    throw ShapeError("add", av.shape, bv.shape);
  }
  Array<T> out = av;
  const std::size_t m = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] += bv.data[broadcast ? i % m : i];
  }
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, a, b, out_v, m, broadcast] {
      const auto &g = nodes_[out_v.id].grad.data;
      if (nodes_[a.id].requires_grad) {
        auto &ga = grad_ref(a.id).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
        }
      }
      if (nodes_[b.id].requires_grad) {
        auto &gb = grad_ref(b.id).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[broadcast ? i % m : i] += g[i];
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const auto &av = node(a).value;
  const auto &bv = node(b).value;
  if (av.shape != bv.shape) {
    throw ShapeError("mul", av.shape, bv.shape);
  }
  Array<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] *= bv.data[i];
  }
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, a, b, out_v] {
      const auto &g = nodes_[out_v.id].grad.data;
      if (nodes_[a.id].requires_grad) {
        auto &ga = grad_ref(a.id).data;
        const auto &bd = nodes_[b.id].value.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * bd[i];
        }
      }
      if (nodes_[b.id].requires_grad) {
        auto &gb = grad_ref(b.id).data;
        const auto &ad = nodes_[a.id].value.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += g[i] * ad[i];
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::scale(Var a, T s) {
  Array<T> out = node(a).value;
  for (auto &x : out.data) {
    x *= s;
  }
  const bool rg = node(a).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, a, out_v, s] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &ga = grad_ref(a.id).data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += s * g[i];
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::sum(Var a) {
  T total = 0;
  for (T x : node(a).value.data) {
    total += x;
  }
  const bool rg = node(a).requires_grad;
  Var out_v = push(Array<T>(Shape{}, total), rg);
  if (rg) {
    set_backprop(out_v, [this, a, out_v] {
      const T g = nodes_[out_v.id].grad.data[0];
      for (auto &x : grad_ref(a.id).data) {
        x += g;
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::reshape(Var a, Shape shape) {
  const auto &av = node(a).value;
  if (element_count(shape) != av.size()) {
    throw ShapeError("reshape", av.shape, shape);
  }
  Array<T> out(std::move(shape), av.data);
  const bool rg = node(a).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, a, out_v] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &ga = grad_ref(a.id).data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::embedding_lookup(Var table, std::vector<std::int32_t> ids) {
  const auto &tv = node(table).value;
  if (tv.rank() != 2) {
    throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_string(tv.shape));
  }
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  Array<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::out_of_range("token id " + std::to_string(ids[r]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const bool rg = node(table).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, table, out_v, ids = std::move(ids), d] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &gt = grad_ref(table.id).data;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        const std::size_t base = static_cast<std::size_t>(ids[r]) * d;
        for (std::size_t c = 0; c < d; ++c) {
          gt[base + c] += g[r * d + c];
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::rms_norm(Var x, Var gain, T eps) {
  const auto &xv = node(x).value;
  const auto &gv = node(gain).value;
  const std::size_t d = xv.cols();
  if (gv.size() != d) {
    throw ShapeError("rms_norm", xv.shape, gv.shape);
  }
  const std::size_t rows = xv.rows();
  Array<T> out(xv.shape);
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T *xp = xv.data.data() + r * d;
    T ms = 0;
    for (std::size_t c = 0; c < d; ++c) {
      ms += xp[c] * xp[c];
    }
    ms /= static_cast<T>(d);
    inv[r] = T(1) / std::sqrt(ms + eps);
    T *op = out.data.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) {
      op[c] = xp[c] * inv[r] * gv.data[c];
    }
  }
  const bool rg = node(x).requires_grad || node(gain).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, x, gain, out_v, inv = std::move(inv), rows, d] {
      const auto &g = nodes_[out_v.id].grad.data;
      const auto &xd = nodes_[x.id].value.data;
      const auto &gd = nodes_[gain.id].value.data;
      const bool gx = nodes_[x.id].requires_grad;
      const bool gg = nodes_[gain.id].requires_grad;
      T *gx_p = gx ? grad_ref(x.id).data.data() : nullptr;
      T *gg_p = gg ? grad_ref(gain.id).data.data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const T *xp = xd.data() + r * d;
        const T *gp = g.data() + r * d;
        const T s = inv[r];
        if (gg) {
          for (std::size_t c = 0; c < d; ++c) {
            gg_p[c] += gp[c] * xp[c] * s;
          }
        }
        if (gx) {
          // dx = s * (dxhat - xhat * mean(dxhat * xhat))
          T dot = 0;
          for (std::size_t c = 0; c < d; ++c) {
            dot += gp[c] * gd[c] * xp[c] * s;
          }
          dot /= static_cast<T>(d);
          T *out = gx_p + r * d;
          for (std::size_t c = 0; c < d; ++c) {
            out[c] += s * (gp[c] * gd[c] - xp[c] * s * dot);
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::silu_gate(Var gate, Var up) {
  const auto &av = node(gate).value;
  const auto &bv = node(up).value;
  if (av.shape != bv.shape) {
    throw ShapeError("silu_gate", av.shape, bv.shape);
  }
  Array<T> out(av.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T a = av.data[i];
    out.data[i] = a / (T(1) + std::exp(-a)) * bv.data[i];
  }
  const bool rg = node(gate).requires_grad || node(up).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, gate, up, out_v] {
      const auto &g = nodes_[out_v.id].grad.data;
      const auto &ad = nodes_[gate.id].value.data;
      const auto &bd = nodes_[up.id].value.data;
      const bool ga = nodes_[gate.id].requires_grad;
      const bool gb = nodes_[up.id].requires_grad;
      T *ga_p = ga ? grad_ref(gate.id).data.data() : nullptr;
      T *gb_p = gb ? grad_ref(up.id).data.data() : nullptr;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T a = ad[i];
        const T sig = T(1) / (T(1) + std::exp(-a));
        if (ga) {
          ga_p[i] += g[i] * bd[i] * sig * (T(1) + a * (T(1) - sig));
        }
        if (gb) {
          gb_p[i] += g[i] * a * sig;
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::softmax_lastdim(Var x) {
  const auto &xv = node(x).value;
  const std::size_t d = xv.cols(), rows = xv.rows();
  Array<T> out(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T *xp = xv.data.data() + r * d;
    T *op = out.data.data() + r * d;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < d; ++c) {
      mx = std::max(mx, xp[c]);
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      continue; // fully masked row stays zero
    }
    T total = 0;
    for (std::size_t c = 0; c < d; ++c) {
      op[c] = std::exp(xp[c] - mx);
      total += op[c];
    }
    for (std::size_t c = 0; c < d; ++c) {
      op[c] /= total;
    }
  }
  const bool rg = node(x).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, x, out_v, rows, d] {
      const auto &g = nodes_[out_v.id].grad.data;
      const auto &y = nodes_[out_v.id].value.data;
      auto &gx = grad_ref(x.id).data;
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) {
          dot += g[r * d + c] * y[r * d + c];
        }
        for (std::size_t c = 0; c < d; ++c) {
          gx[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::masked_fill(Var x, KeepMask keep) {
  const auto &xv = node(x).value;
  if (xv.rank() != 4 || !keep || keep->size() != xv.dim(0) * xv.dim(2) * xv.dim(3)) {
    throw ShapeError("masked_fill: mask of " + std::to_string(keep ? keep->size() : 0) +
                     " entries does not fit scores " + shape_string(xv.shape));
  }
  const std::size_t batch = xv.dim(0), heads = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Array<T> out = xv;
  const auto &mask = *keep;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T *p = out.data.data() + (b * heads + h) * plane;
      const std::uint8_t *m = mask.data() + b * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (!m[i]) {
          p[i] = -std::numeric_limits<T>::infinity();
        }
      }
    }
  }
  const bool rg = node(x).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, x, out_v, keep, batch, heads, plane] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &gx = grad_ref(x.id).data;
      const auto &mask = *keep;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = (b * heads + h) * plane;
          const std::uint8_t *m = mask.data() + b * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (m[i]) {
              gx[base + i] += g[base + i];
            }
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::cross_entropy(Var logits, std::vector<std::int32_t> targets) {
  const auto &lv = node(logits).value;
  const std::size_t v = lv.cols(), rows = lv.rows();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " logit rows");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t < 0) {
      continue;
    }
    if (static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy target " + std::to_string(t) + " outside " +
                              std::to_string(v) + " classes");
    }
    const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> row(lv.data.data() + r * v,
                                                                    static_cast<Eigen::Index>(v));
    const T mx = row.maxCoeff();
    const double z = static_cast<double>((row - mx).exp().sum());
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[t]);
    ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("cross_entropy: every target is ignored");
  }
  const bool rg = node(logits).requires_grad;
  Var out_v = push(Array<T>(Shape{}, static_cast<T>(total / static_cast<double>(count))), rg);
  if (rg) {
    set_backprop(out_v, [this, logits, out_v, targets = std::move(targets), v, rows, count] {
      const T g = nodes_[out_v.id].grad.data[0] / static_cast<T>(count);
      const auto &ld = nodes_[logits.id].value.data;
      auto &gl = grad_ref(logits.id).data;
      for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0) {
          continue;
        }
        const auto n = static_cast<Eigen::Index>(v);
        const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> row(ld.data() + r * v, n);
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> grow(gl.data() + r * v, n);
        const Eigen::Array<T, Eigen::Dynamic, 1> e = (row - row.maxCoeff()).exp();
        grow += (g / e.sum()) * e;
        grow[targets[r]] -= g;
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::mean_abs_error(Var pred, Array<T> target, std::vector<T> weights) {
  const auto &pv = node(pred).value;
  if (pv.size() != target.size() || (!weights.empty() && weights.size() != pv.size())) {
    throw ShapeError("mean_abs_error", pv.shape, target.shape);
  }
  if (pv.size() == 0) {
    throw std::invalid_argument("mean_abs_error on empty input");
  }
  const std::size_t n = pv.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += (weights.empty() ? T(1) : weights[i]) * std::abs(pv.data[i] - target.data[i]);
  }
  const bool rg = node(pred).requires_grad;
  Var out_v = push(Array<T>(Shape{}, total / static_cast<T>(n)), rg);
  if (rg) {
    set_backprop(out_v, [this, pred, out_v, target = std::move(target),
                         weights = std::move(weights), n] {
      const T g = nodes_[out_v.id].grad.data[0] / static_cast<T>(n);
      const auto &pd = nodes_[pred.id].value.data;
      auto &gp = grad_ref(pred.id).data;
      for (std::size_t i = 0; i < n; ++i) {
        const T diff = pd[i] - target.data[i];
        const T sign = diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0));
        gp[i] += g * sign * (weights.empty() ? T(1) : weights[i]);
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::split_heads(Var x, std::size_t heads) {
  const auto &xv = node(x).value;
  if (xv.rank() != 3 || heads == 0 || xv.dim(2) % heads != 0) {
    throw ShapeError("split_heads: cannot split " + shape_string(xv.shape) + " into " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t batch = xv.dim(0), len = xv.dim(1), dh = xv.dim(2) / heads;
  Array<T> out({batch, heads, len, dh});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(xv.data.data() + ((b * len + t) * heads + h) * dh, dh,
                    out.data.data() + ((b * heads + h) * len + t) * dh);
      }
    }
  }
  const bool rg = node(x).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, x, out_v, batch, len, heads, dh] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &gx = grad_ref(x.id).data;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T *src = g.data() + ((b * heads + h) * len + t) * dh;
            T *dst = gx.data() + ((b * len + t) * heads + h) * dh;
            for (std::size_t c = 0; c < dh; ++c) {
              dst[c] += src[c];
            }
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::merge_heads(Var x) {
  const auto &xv = node(x).value;
  if (xv.rank() != 4) {
    throw ShapeError("merge_heads: expected rank 4, got " + shape_string(xv.shape));
  }
  const std::size_t batch = xv.dim(0), heads = xv.dim(1), len = xv.dim(2), dh = xv.dim(3);
  Array<T> out({batch, len, heads * dh});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < len; ++t) {
        std::copy_n(xv.data.data() + ((b * heads + h) * len + t) * dh, dh,
                    out.data.data() + ((b * len + t) * heads + h) * dh);
      }
    }
  }
  const bool rg = node(x).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, x, out_v, batch, len, heads, dh] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &gx = grad_ref(x.id).data;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t t = 0; t < len; ++t) {
            const T *src = g.data() + ((b * len + t) * heads + h) * dh;
            T *dst = gx.data() + ((b * heads + h) * len + t) * dh;
            for (std::size_t c = 0; c < dh; ++c) {
              dst[c] += src[c];
            }
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::gather_rows(Var x, std::vector<std::size_t> rows) {
  const auto &xv = node(x).value;
  const std::size_t c = xv.cols(), n_rows = xv.rows();
  Array<T> out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " of " +
                              std::to_string(n_rows));
    }
    std::copy_n(xv.data.data() + rows[i] * c, c, out.data.data() + i * c);
  }
  const bool rg = node(x).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, x, out_v, rows = std::move(rows), c] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &gx = grad_ref(x.id).data;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t k = 0; k < c; ++k) {
          gx[rows[i] * c + k] += g[i * c + k];
        }
      }
    });
  }
  return out_v;
}

template <typename T>
Var Tape<T>::segment_sum(Var x, std::vector<std::size_t> offsets) {
  const auto &xv = node(x).value;
  const std::size_t c = xv.cols();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != xv.rows() ||
      !std::is_sorted(offsets.begin(), offsets.end())) {
    throw ShapeError("segment_sum: offsets do not partition " + shape_string(xv.shape));
  }
  const std::size_t segments = offsets.size() - 1;
  Array<T> out({segments, c}, T(0));
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
      for (std::size_t k = 0; k < c; ++k) {
        out.data[s * c + k] += xv.data[r * c + k];
      }
    }
  }
  const bool rg = node(x).requires_grad;
  Var out_v = push(std::move(out), rg);
  if (rg) {
    set_backprop(out_v, [this, x, out_v, offsets = std::move(offsets), c, segments] {
      const auto &g = nodes_[out_v.id].grad.data;
      auto &gx = grad_ref(x.id).data;
      for (std::size_t s = 0; s < segments; ++s) {
        for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
          for (std::size_t k = 0; k < c; ++k) {
            gx[r * c + k] += g[s * c + k];
          }
        }
      }
    });
  }
  return out_v;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  const auto &lv = node(loss).value;
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(lv.shape));
  }
  for (auto &n : nodes_) {
    n.grad = Array<T>();
  }
  if (!nodes_[loss.id].requires_grad) {
    return;
  }
  grad_ref(loss.id).data[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto &n = nodes_[i];
    if (n.backprop && n.grad.size() == n.value.size() && !n.grad.data.empty()) {
      n.backprop();
    }
  }
}

template class Tape<float>;
template class Tape<double>;

} // namespace graphfree::nn
