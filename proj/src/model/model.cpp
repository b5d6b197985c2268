// SPDX-License-Identifier: Apache-2.0
#include "graphfree/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace graphfree::model {

using nn::Var;
using tokens::DualSequence;

std::string to_string(Precision p) { return p == Precision::Float32 ? "float32" : "float64"; }

Precision precision_from_string(const std::string &s) {
  if (s == "float32" || s == "f32") {
    return Precision::Float32;
  }
  if (s == "float64" || s == "f64") {
    return Precision::Float64;
  }
  throw std::invalid_argument("unknown precision '" + s + "' (expected float32 or float64)");
}

void ModelConfig::validate() const {
  if (hidden_dim <= 0 || n_layers < 0 || intermediate_size <= 0 || n_heads <= 0 ||
      vocab_size <= 0) {
    throw std::invalid_argument("model config: sizes must be positive (layers may be 0)");
  }
  if (hidden_dim % n_heads != 0) {
    throw std::invalid_argument("model config: hidden_dim " + std::to_string(hidden_dim) +
                                " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (continuous_width != tokens::kContinuousWidth) {
    throw std::invalid_argument("model config: continuous_width must be " +
                                std::to_string(tokens::kContinuousWidth));
  }
}

void to_json(nlohmann::json &j, const ModelConfig &c) {
  j = {{"hidden_dim", c.hidden_dim},
       {"n_layers", c.n_layers},
       {"intermediate_size", c.intermediate_size},
       {"n_heads", c.n_heads},
       {"vocab_size", c.vocab_size},
       {"continuous_width", c.continuous_width},
       {"precision", to_string(c.precision)}};
}

void from_json(const nlohmann::json &j, ModelConfig &c) {
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.intermediate_size = j.at("intermediate_size").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.continuous_width = j.value("continuous_width", tokens::kContinuousWidth);
  c.precision = precision_from_string(j.value("precision", std::string("float32")));
}

std::vector<ParamSpec> parameter_layout(const ModelConfig &c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.hidden_dim);
  const auto inter = static_cast<std::size_t>(c.intermediate_size);
  const auto vocab = static_cast<std::size_t>(c.vocab_size);
  const auto width = static_cast<std::size_t>(c.continuous_width);
  std::vector<ParamSpec> specs;
  specs.push_back({"embed.tokens", {vocab, d}, InitKind::Normal, true});
  specs.push_back({"embed.continuous", {width, d}, InitKind::Normal, true});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    specs.push_back({p + "attn_norm", {d}, InitKind::Ones, false});
    specs.push_back({p + "wq", {d, d}, InitKind::Normal, false});
    specs.push_back({p + "wk", {d, d}, InitKind::Normal, false});
    specs.push_back({p + "wv", {d, d}, InitKind::Normal, false});
    specs.push_back({p + "wo", {d, d}, InitKind::Normal, false});
    specs.push_back({p + "ffn_norm", {d}, InitKind::Ones, false});
    specs.push_back({p + "w_gate", {d, inter}, InitKind::Normal, false});
    specs.push_back({p + "w_up", {d, inter}, InitKind::Normal, false});
    specs.push_back({p + "w_down", {inter, d}, InitKind::Normal, false});
  }
  specs.push_back({"final_norm", {d}, InitKind::Ones, false});
  specs.push_back({"lm_head", {d, vocab}, InitKind::Normal, true});
  for (const auto &[head, out] : {std::pair{"energy_head.", std::size_t{1}},
                                  std::pair{"force_head.", std::size_t{3}}}) {
    specs.push_back({std::string(head) + "w_gate", {d, d}, InitKind::Normal, false});
    specs.push_back({std::string(head) + "w_up", {d, d}, InitKind::Normal, false});
    specs.push_back({std::string(head) + "w_down", {d, out}, InitKind::Zeros, false});
  }
  return specs;
}

ParamCount count_params(const ModelConfig &c) {
  c.validate();
  const std::int64_t d = c.hidden_dim, inter = c.intermediate_size, vocab = c.vocab_size,
                     w = c.continuous_width;
  const std::int64_t per_layer = 4 * d * d + 3 * d * inter + 2 * d;
  const std::int64_t heads = (2 * d * d + d) + (2 * d * d + 3 * d);
  ParamCount pc;
  pc.non_embedding = c.n_layers * per_layer + d + heads;
  pc.total = pc.non_embedding + vocab * d + w * d + d * vocab;
  return pc;
}

double estimate_flops(double non_embedding_params, double n_tokens) {
  if (!(n_tokens > 0.0)) {
    throw std::invalid_argument("estimate_flops: n_tokens must be positive");
  }
  return 6.0 * non_embedding_params * n_tokens;
}

double estimate_flops(const ModelConfig &config, double n_tokens) {
  return estimate_flops(static_cast<double>(count_params(config).non_embedding), n_tokens);
}

double EnergyReference::operator()(std::span<const int> atomic_numbers) const {
  double e = offset;
  for (int z : atomic_numbers) {
    if (auto it = per_element.find(z); it != per_element.end()) {
      e += it->second;
    }
  }
  return e;
}

void to_json(nlohmann::json &j, const EnergyReference &r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto &[z, c] : r.per_element) {
    per[std::to_string(z)] = c;
  }
  j = {{"per_element", per}, {"offset", r.offset}};
}

void from_json(const nlohmann::json &j, EnergyReference &r) {
  r.per_element.clear();
  for (const auto &[k, v] : j.at("per_element").items()) {
    r.per_element[std::stoi(k)] = v.get<double>();
  }
  r.offset = j.at("offset").get<double>();
}

double AttentionRecord::mean(std::size_t l, std::size_t i, std::size_t j) const {
  double s = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    s += (*this)(l, h, i, j);
  }
  return s / static_cast<double>(heads);
}

template <typename T>
std::size_t ModelParameters<T>::index(const std::string &name) const {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].name == name) {
      return i;
    }
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename T>
std::size_t ModelParameters<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto &t : tensors) {
    n += t.size();
  }
  return n;
}

template <typename T>
ModelParameters<T> init_model(const ModelConfig &config, std::uint64_t seed) {
  const bool wants_double = config.precision == Precision::Float64;
  if (wants_double != std::is_same_v<T, double>) {
    throw std::invalid_argument("init_model: precision " + to_string(config.precision) +
                                " does not match the parameter type");
  }
  ModelParameters<T> p;
  p.config = config;
  p.specs = parameter_layout(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double kStd = 0.02;
  for (const auto &s : p.specs) {
    Array<T> a(s.shape, T(0));
    switch (s.init) {
    case InitKind::Ones:
      std::fill(a.data.begin(), a.data.end(), T(1));
      break;
    case InitKind::Zeros:
      break;
    case InitKind::Normal:
      for (auto &x : a.data) {
        double z;
        do {
          z = normal(rng);
        } while (std::abs(z) > 2.0);
        x = static_cast<T>(kStd * z);
      }
      break;
    }
    p.tensors.push_back(std::move(a));
  }
  return p;
}

Batch make_batch(std::span<const DualSequence> seqs, MaskKind mask) {
  if (seqs.empty()) {
    throw std::invalid_argument("make_batch: no sequences");
  }
  Batch b;
  b.size = seqs.size();
  b.mask = mask;
  for (const auto &s : seqs) {
    if (s.length() == 0) {
      throw std::invalid_argument("make_batch: empty sequence");
    }
    b.lengths.push_back(s.length());
    b.max_length = std::max(b.max_length, s.length());
  }
  const std::size_t len = b.max_length, width = tokens::kContinuousWidth;
  b.token_ids.assign(b.size * len, 0);
  b.continuous.assign(b.size * len * width, 0.0);
  auto keep = std::make_shared<std::vector<std::uint8_t>>(b.size * len * len, 0);
  b.atom_offset.push_back(0);
  for (std::size_t s = 0; s < b.size; ++s) {
    const auto &seq = seqs[s];
    const std::size_t n = seq.length();
    for (std::size_t t = 0; t < n; ++t) {
      b.token_ids[s * len + t] = seq.token_ids[t];
      for (std::size_t c = 0; c < width; ++c) {
        b.continuous[(s * len + t) * width + c] = seq.continuous[t][c];
      }
    }
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (mask == MaskKind::Bidirectional || j <= i) {
          (*keep)[(s * len + i) * len + j] = 1;
        }
      }
    }
    for (std::size_t t : seq.position_tokens()) {
      b.atom_rows.push_back(s * len + t);
    }
    b.atom_offset.push_back(b.atom_rows.size());
  }
  b.keep = std::move(keep);
  return b;
}

template <typename T>
void build_hidden(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch,
                  const GraphOptions &options) {
  auto &tape = g.tape;
  if (tape.size() != 0) {
    throw std::logic_error("build_hidden: graph already recorded");
  }
  const auto &c = p.config;
  const std::size_t d = static_cast<std::size_t>(c.hidden_dim);
  const std::size_t heads = static_cast<std::size_t>(c.n_heads);
  const std::size_t dh = d / heads;
  const std::size_t bsz = batch.size, len = batch.max_length, rows = bsz * len;

  g.params.clear();
  for (const auto &t : p.tensors) {
    g.params.push_back(tape.leaf(t, options.params_require_grad));
  }
  auto param = [&](const std::string &name) { return g.params[p.index(name)]; };

  Array<T> cont({rows, static_cast<std::size_t>(tokens::kContinuousWidth)});
  std::transform(batch.continuous.begin(), batch.continuous.end(), cont.data.begin(),
                 [](double x) { return static_cast<T>(x); });
  g.continuous = tape.leaf(std::move(cont), options.continuous_requires_grad);

  Var h = tape.add(tape.embedding_lookup(param("embed.tokens"), batch.token_ids),
                   tape.matmul(g.continuous, param("embed.continuous")));

  const T score_scale = T(1) / std::sqrt(static_cast<T>(dh));
  g.attention.clear();
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    Var x = tape.rms_norm(h, param(pre + "attn_norm"));
    auto project = [&](const char *w) {
      Var y = tape.reshape(tape.matmul(x, param(pre + w)), {bsz, len, d});
      return tape.reshape(tape.split_heads(y, heads), {bsz * heads, len, dh});
    };
    Var q = project("wq");
    Var k = project("wk");
    Var v = project("wv");
    Var scores = tape.scale(tape.matmul(q, k, true), score_scale);
    scores = tape.masked_fill(tape.reshape(scores, {bsz, heads, len, len}), batch.keep);
    Var attn = tape.softmax_lastdim(scores);
    g.attention.push_back(attn);
    Var ctx = tape.matmul(tape.reshape(attn, {bsz * heads, len, len}), v);
    ctx = tape.merge_heads(tape.reshape(ctx, {bsz, heads, len, dh}));
    ctx = tape.matmul(tape.reshape(ctx, {rows, d}), param(pre + "wo"));
    h = tape.add(h, ctx);

    Var y = tape.rms_norm(h, param(pre + "ffn_norm"));
    Var gated = tape.silu_gate(tape.matmul(y, param(pre + "w_gate")),
                               tape.matmul(y, param(pre + "w_up")));
    h = tape.add(h, tape.matmul(gated, param(pre + "w_down")));
  }
  g.hidden = tape.rms_norm(h, param("final_norm"));
}

template <typename T>
Var logits(Graph<T> &g, const ModelParameters<T> &p) {
  return g.tape.matmul(g.hidden, g.params[p.index("lm_head")]);
}

namespace {

template <typename T>
Var gated_head(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch,
               const std::string &prefix) {
  auto &tape = g.tape;
  if (batch.atom_rows.empty()) {
    throw std::invalid_argument("readout: batch has no atom position tokens");
  }
  Var x = tape.gather_rows(g.hidden, batch.atom_rows);
  Var gated = tape.silu_gate(tape.matmul(x, g.params[p.index(prefix + "w_gate")]),
                             tape.matmul(x, g.params[p.index(prefix + "w_up")]));
  return tape.matmul(gated, g.params[p.index(prefix + "w_down")]);
}

} // namespace

template <typename T>
Var energy_head(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch) {
  return gated_head(g, p, batch, "energy_head.");
}

template <typename T>
Var force_head(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch) {
  return gated_head(g, p, batch, "force_head.");
}

template <typename T>
AttentionRecord extract_attention(const Graph<T> &g, const Batch &batch, std::size_t b) {
  if (b >= batch.size) {
    throw std::out_of_range("extract_attention: sequence " + std::to_string(b));
  }
  AttentionRecord rec;
  rec.layers = g.attention.size();
  rec.length = batch.lengths[b];
  const std::size_t len = batch.max_length;
  if (rec.layers == 0) {
    return rec;
  }
  rec.heads = g.tape.value(g.attention[0]).dim(1);
  rec.scores.resize(rec.layers * rec.heads * rec.length * rec.length);
  for (std::size_t l = 0; l < rec.layers; ++l) {
    const auto &a = g.tape.value(g.attention[l]).data;
    for (std::size_t h = 0; h < rec.heads; ++h) {
      for (std::size_t i = 0; i < rec.length; ++i) {
        const std::size_t src = ((b * rec.heads + h) * len + i) * len;
        const std::size_t dst = ((l * rec.heads + h) * rec.length + i) * rec.length;
        for (std::size_t j = 0; j < rec.length; ++j) {
          rec.scores[dst + j] = static_cast<double>(a[src + j]);
        }
      }
    }
  }
  return rec;
}

template <typename T>
Array<T> embed_inputs(const ModelParameters<T> &p, const DualSequence &seq) {
  nn::Tape<T> tape;
  Array<T> cont({seq.length(), static_cast<std::size_t>(tokens::kContinuousWidth)});
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (std::size_t c = 0; c < cont.cols(); ++c) {
      cont.at(t, c) = static_cast<T>(seq.continuous[t][c]);
    }
  }
  Var e = tape.embedding_lookup(tape.leaf(p.at("embed.tokens")), seq.token_ids);
  Var w = tape.matmul(tape.leaf(std::move(cont)), tape.leaf(p.at("embed.continuous")));
  return tape.value(tape.add(e, w));
}

namespace {

template <typename T>
ForwardResult<T> forward_single(const ModelParameters<T> &p, const DualSequence &seq,
                                MaskKind mask, bool capture, bool want_logits) {
  if (seq.length() == 0) {
    throw std::invalid_argument("forward: empty sequence");
  }
  const Batch batch = make_batch(std::span(&seq, 1), mask);
  Graph<T> g;
  build_hidden(g, p, batch, {});
  ForwardResult<T> out;
  out.values = g.tape.value(want_logits ? logits(g, p) : g.hidden);
  if (capture) {
    out.attention = extract_attention(g, batch, 0);
  }
  return out;
}

template <typename T>
std::vector<EnergyForces> read_predictions(const ModelParameters<T> &p,
                                           std::span<const DualSequence> seqs,
                                           const Array<T> &energies, const Array<T> *forces,
                                           const Batch &batch) {
  std::vector<EnergyForces> out(seqs.size());
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    double e = 0.0;
    for (std::size_t a = batch.atom_offset[s]; a < batch.atom_offset[s + 1]; ++a) {
      e += static_cast<double>(energies.data[a]);
    }
    out[s].energy = p.reference(seqs[s].atomic_numbers()) + p.scale.energy * e;
    out[s].forces.resize(seqs[s].n_atoms);
    if (forces) {
      for (std::size_t a = batch.atom_offset[s]; a < batch.atom_offset[s + 1]; ++a) {
        auto &f = out[s].forces[a - batch.atom_offset[s]];
        for (std::size_t k = 0; k < 3; ++k) {
          f[k] = p.scale.force * static_cast<double>(forces->at(a, k));
        }
      }
    }
  }
  return out;
}

void require_finetune(const DualSequence &seq) {
  if (seq.mode != tokens::Mode::Finetune) {
    throw std::invalid_argument("energy/force prediction needs a finetune-mode sequence");
  }
  if (seq.n_atoms == 0 || seq.atom_index.size() != seq.length()) {
    throw std::invalid_argument("energy/force prediction needs the atom index map");
  }
}

} // namespace

template <typename T>
ForwardResult<T> forward_causal(const ModelParameters<T> &p, const DualSequence &seq,
                                bool capture_attention) {
  return forward_single(p, seq, MaskKind::Causal, capture_attention, true);
}

template <typename T>
ForwardResult<T> forward_bidirectional(const ModelParameters<T> &p, const DualSequence &seq,
                                       bool capture_attention) {
  return forward_single(p, seq, MaskKind::Bidirectional, capture_attention, false);
}

template <typename T>
std::vector<EnergyForces> predict_energy_forces(const ModelParameters<T> &p,
                                                std::span<const DualSequence> seqs) {
  for (const auto &s : seqs) {
    require_finetune(s);
  }
  const Batch batch = make_batch(seqs, MaskKind::Bidirectional);
  Graph<T> g;
  build_hidden(g, p, batch, {});
  const Var e = energy_head(g, p, batch);
  const Var f = force_head(g, p, batch);
  return read_predictions(p, seqs, g.tape.value(e), &g.tape.value(f), batch);
}

template <typename T>
EnergyForces predict_energy_forces(const ModelParameters<T> &p, const DualSequence &seq) {
  return predict_energy_forces(p, std::span(&seq, 1)).front();
}

template <typename T>
EnergyForces conservative_forces(const ModelParameters<T> &p, const DualSequence &seq) {
  require_finetune(seq);
  const Batch batch = make_batch(std::span(&seq, 1), MaskKind::Bidirectional);
  Graph<T> g;
  build_hidden(g, p, batch, {.params_require_grad = false, .continuous_requires_grad = true});
  const Var e = energy_head(g, p, batch);
  auto out = read_predictions<T>(p, std::span(&seq, 1), g.tape.value(e), nullptr, batch).front();
  if (!std::isfinite(out.energy)) {
    throw std::runtime_error("conservative_forces: energy is not finite");
  }
  const Var total = g.tape.sum(e);
  g.tape.backward(total);
  const Array<T> grad = g.tape.grad(g.continuous);
  for (std::size_t a = 0; a < batch.atom_rows.size(); ++a) {
    for (std::size_t k = 0; k < 3; ++k) {
      out.forces[a][k] = -p.scale.energy * static_cast<double>(grad.at(batch.atom_rows[a], k));
    }
  }
  return out;
}

#define GRAPHFREE_INSTANTIATE(T)                                                                   \
  template struct ModelParameters<T>;                                                              \
  template ModelParameters<T> init_model<T>(const ModelConfig &, std::uint64_t);                   \
  template void build_hidden<T>(Graph<T> &, const ModelParameters<T> &, const Batch &,             \
                                const GraphOptions &);                                             \
  template Var logits<T>(Graph<T> &, const ModelParameters<T> &);                                  \
  template Var energy_head<T>(Graph<T> &, const ModelParameters<T> &, const Batch &);              \
  template Var force_head<T>(Graph<T> &, const ModelParameters<T> &, const Batch &);               \
  template AttentionRecord extract_attention<T>(const Graph<T> &, const Batch &, std::size_t);     \
  template Array<T> embed_inputs<T>(const ModelParameters<T> &, const DualSequence &);             \
  template ForwardResult<T> forward_causal<T>(const ModelParameters<T> &, const DualSequence &,    \
                                              bool);                                               \
  template ForwardResult<T> forward_bidirectional<T>(const ModelParameters<T> &,                   \
                                                     const DualSequence &, bool);                  \
  template EnergyForces predict_energy_forces<T>(const ModelParameters<T> &,                       \
                                                 const DualSequence &);                            \
  template std::vector<EnergyForces> predict_energy_forces<T>(const ModelParameters<T> &,          \
                                                              std::span<const DualSequence>);      \
  template EnergyForces conservative_forces<T>(const ModelParameters<T> &, const DualSequence &);

GRAPHFREE_INSTANTIATE(float)
GRAPHFREE_INSTANTIATE(double)

} // namespace graphfree::model
