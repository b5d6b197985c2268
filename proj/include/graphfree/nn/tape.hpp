// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "graphfree/nn/array.hpp"

namespace graphfree::nn {

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

/// Boolean keep-mask shared between attention layers; 1 = attend, 0 = -inf.
using KeepMask = std::shared_ptr<const std::vector<std::uint8_t>>;

/// Reverse-mode tape. Every primitive appends one node holding its forward
/// value and, when any input needs a gradient, its adjoint rule. A tape is
/// single-use: record, call backward() once, read grad().
template <typename T>
class Tape {
public:
  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var leaf(Array<T> value, bool requires_grad = false);

  const Array<T> &value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient after backward(); an all-zero array when nothing flowed into v.
  Array<T> grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// a[..., K] x b[K, N], or batched a[B, M, K] x b[B, K, N].
  /// With transpose_b the last two axes of b are swapped first.
  Var matmul(Var a, Var b, bool transpose_b = false);
  /// Elementwise sum; b may also match the trailing axes of a (broadcast).
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T s);
  Var sum(Var a);
  Var reshape(Var a, Shape shape);
  Var embedding_lookup(Var table, std::vector<std::int32_t> ids);
  Var rms_norm(Var x, Var gain, T eps = T(1e-6));
  /// silu(gate) * up.
  Var silu_gate(Var gate, Var up);
  Var softmax_lastdim(Var x);
  /// x has shape [B, H, Tq, Tk]; keep has B*Tq*Tk entries and is broadcast over H.
  Var masked_fill(Var x, KeepMask keep);
  /// Mean token cross-entropy; targets of -1 are ignored.
  Var cross_entropy(Var logits, std::vector<std::int32_t> targets);
  /// sum_i w_i |pred_i - target_i| / n (w_i = 1 when weights are empty).
  Var mean_abs_error(Var pred, Array<T> target, std::vector<T> weights = {});
  /// [B, T, H*D] -> [B, H, T, D].
  Var split_heads(Var x, std::size_t heads);
  /// [B, H, T, D] -> [B, T, H*D].
  Var merge_heads(Var x);
  Var gather_rows(Var x, std::vector<std::size_t> rows);
  /// Sums row ranges [offsets[s], offsets[s+1]).
  Var segment_sum(Var x, std::vector<std::size_t> offsets);

  /// Propagates d(loss)/d(node) to every node that requires a gradient.
  void backward(Var loss);

private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    std::function<void()> backprop;
  };

  Var push(Array<T> value, bool requires_grad);
  void set_backprop(Var v, std::function<void()> fn);
  Array<T> &grad_ref(std::uint32_t id);
  const Node &node(Var v) const { return nodes_.at(v.id); }

  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

} // namespace graphfree::nn
