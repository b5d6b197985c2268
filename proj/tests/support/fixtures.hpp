#pragma once

#include <vector>

#include "graphfree/codebook.hpp"
#include "graphfree/data.hpp"
#include "graphfree/model.hpp"
#include "graphfree/nn/optim.hpp"
#include "graphfree/tokenizer.hpp"

namespace fixtures {

using namespace graphfree;

/// Codebook fitted once on a wide LJ pool so every default bin count is satisfiable.
inline const codebook::QuantileCodebook &lj_codebook() {
  static const codebook::QuantileCodebook cb = [] {
    Rng rng(100);
    return codebook::fit_codebook(data::generate_lj_dataset(3000, 2, 12, rng));
  }();
  return cb;
}

inline const tokens::Vocabulary &vocab() {
  static const tokens::Vocabulary v = tokens::build_vocab(lj_codebook());
  return v;
}

inline std::vector<MolecularFrame> lj_frames(std::size_t n, int lo, int hi, std::uint64_t seed) {
  Rng rng(seed);
  return data::generate_lj_dataset(n, lo, hi, rng);
}

inline std::vector<tokens::DualSequence> encode_all(const std::vector<MolecularFrame> &frames,
                                                    tokens::Mode mode) {
  std::vector<tokens::DualSequence> out;
  for (const auto &f : frames) {
    out.push_back(tokens::encode_frame(f, lj_codebook(), vocab(), mode));
  }
  return out;
}

inline model::ModelConfig small_config(int d, int layers, int inter, int heads,
                                       model::Precision precision = model::Precision::Float64) {
  model::ModelConfig c;
  c.hidden_dim = d;
  c.n_layers = layers;
  c.intermediate_size = inter;
  c.n_heads = heads;
  c.vocab_size = vocab().size();
  c.precision = precision;
  return c;
}

/// Randomizes the zero-initialized head outputs so every parameter carries gradient.
inline void randomize_heads(model::ModelParameters<double> &p, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 0.1);
  for (const char *name : {"energy_head.w_down", "force_head.w_down"}) {
    for (auto &x : p.at(name).data) {
      x = g(rng);
    }
  }
}

/// Causal cross-entropy plus a smooth probe of both heads under the bidirectional mask.
inline nn::GradCheckResult model_gradient_check(const model::ModelParameters<double> &base,
                                                const std::vector<tokens::DualSequence> &pre,
                                                const std::vector<tokens::DualSequence> &fine,
                                                const nn::GradCheckOptions &options) {
  using namespace graphfree::model;
  const Batch causal = make_batch(pre, MaskKind::Causal);
  const Batch bidir = make_batch(fine, MaskKind::Bidirectional);
  std::vector<std::int32_t> targets(causal.token_ids.size(), -1);
  for (std::size_t s = 0; s < causal.size; ++s) {
    for (std::size_t t = 0; t + 1 < causal.lengths[s]; ++t) {
      targets[s * causal.max_length + t] = causal.token_ids[s * causal.max_length + t + 1];
    }
  }
  nn::Objective f = [&](const std::vector<nn::Array<double>> &tensors,
                        std::vector<nn::Array<double>> *grads) {
    ModelParameters<double> p = base;
    p.tensors = tensors;
    const GraphOptions opts{.params_require_grad = grads != nullptr};
    Graph<double> a;
    build_hidden(a, p, causal, opts);
    const nn::Var ce = a.tape.cross_entropy(logits(a, p), targets);
    Graph<double> b;
    build_hidden(b, p, bidir, opts);
    auto &t = b.tape;
    const nn::Var e = energy_head(b, p, bidir);
    const nn::Var fr = force_head(b, p, bidir);
    nn::Array<double> w(t.value(fr).shape);
    for (std::size_t i = 0; i < w.size(); ++i) {
      w.data[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    }
    const nn::Var probe = t.add(t.sum(e), t.sum(t.mul(fr, t.leaf(std::move(w)))));
    const double head = t.value(probe).item();
    if (grads) {
      a.tape.backward(ce);
      t.backward(probe);
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto ga = a.tape.grad(a.params[i]);
        const auto gb = t.grad(b.params[i]);
        for (std::size_t k = 0; k < ga.size(); ++k) {
          ga.data[k] += gb.data[k];
        }
        (*grads)[i] = std::move(ga);
      }
    }
    return a.tape.value(ce).item() + head;
  };
  return nn::finite_difference_check(f, base.tensors, options);
}

} // namespace fixtures
