// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "graphfree/data.hpp"
#include "graphfree/nn/array.hpp"
#include "graphfree/nn/tape.hpp"
#include "graphfree/tokenizer.hpp"

namespace graphfree::model {

using nn::Array;
using nn::Shape;

enum class Precision { Float32, Float64 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string &s);

struct ModelConfig {
  int hidden_dim = 64;
  int n_layers = 2;
  int intermediate_size = 256;
  int n_heads = 4;
  int vocab_size = 7272;
  int continuous_width = tokens::kContinuousWidth;
  Precision precision = Precision::Float32;

  void validate() const;
  bool operator==(const ModelConfig &) const = default;
};

void to_json(nlohmann::json &j, const ModelConfig &c);
void from_json(const nlohmann::json &j, ModelConfig &c);

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t non_embedding = 0;
};

/// Closed form. non_embedding leaves out the token table, the continuous
/// input projection and the logit head.
ParamCount count_params(const ModelConfig &config);

/// Training cost under the 6 * N * D rule.
double estimate_flops(double non_embedding_params, double n_tokens);
double estimate_flops(const ModelConfig &config, double n_tokens);

enum class InitKind { Normal, Ones, Zeros };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::Normal;
  bool embedding = false;
};

/// Every trainable tensor in storage order.
std::vector<ParamSpec> parameter_layout(const ModelConfig &config);

/// E_ref(frame) = sum_Z n_Z * c_Z + offset.
struct EnergyReference {
  std::map<int, double> per_element;
  double offset = 0.0;

  double operator()(std::span<const int> atomic_numbers) const;
  bool operator==(const EnergyReference &) const = default;
};

void to_json(nlohmann::json &j, const EnergyReference &r);
void from_json(const nlohmann::json &j, EnergyReference &r);

/// Output units: E = E_ref + energy_scale * sum_i e_i, F_i = force_scale * f_i.
struct OutputScale {
  double energy = 1.0;
  double force = 1.0;
  bool operator==(const OutputScale &) const = default;
};

template <typename T>
struct ModelParameters {
  ModelConfig config;
  std::vector<ParamSpec> specs;
  std::vector<Array<T>> tensors;
  EnergyReference reference;
  OutputScale scale;

  std::size_t index(const std::string &name) const;
  Array<T> &at(const std::string &name) { return tensors[index(name)]; }
  const Array<T> &at(const std::string &name) const { return tensors[index(name)]; }
  std::size_t scalar_count() const;
};

template <typename T>
ModelParameters<T> init_model(const ModelConfig &config, std::uint64_t seed);

/// Post-softmax scores of one sequence, laid out [layer][head][query][key].
struct AttentionRecord {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t length = 0;
  std::vector<double> scores;

  double operator()(std::size_t l, std::size_t h, std::size_t i, std::size_t j) const {
    return scores[((l * heads + h) * length + i) * length + j];
  }
  /// Head-averaged score.
  double mean(std::size_t l, std::size_t i, std::size_t j) const;
};

enum class MaskKind { Causal, Bidirectional };

/// Right-padded batch. Padded keys are masked out for every query.
struct Batch {
  std::size_t size = 0;
  std::size_t max_length = 0;
  MaskKind mask = MaskKind::Causal;
  std::vector<std::size_t> lengths;
  std::vector<std::int32_t> token_ids;  // size * max_length
  std::vector<double> continuous;       // size * max_length * 4
  nn::KeepMask keep;                    // size * max_length * max_length
  std::vector<std::size_t> atom_rows;   // flat row of each atom's position token
  std::vector<std::size_t> atom_offset; // size + 1 offsets into atom_rows
};

Batch make_batch(std::span<const tokens::DualSequence> seqs, MaskKind mask);

/// Parameter leaves plus the hidden-state graph of one batch.
template <typename T>
struct Graph {
  nn::Tape<T> tape;
  std::vector<nn::Var> params;
  nn::Var continuous;           // [B*T, 4] input leaf
  nn::Var hidden;               // [B*T, d] after the final norm
  std::vector<nn::Var> attention; // per layer, [B, H, T, T]
};

struct GraphOptions {
  bool params_require_grad = false;
  bool continuous_requires_grad = false;
};

/// Records embedding, transformer blocks and final norm on a fresh tape.
template <typename T>
void build_hidden(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch,
                  const GraphOptions &options);

template <typename T>
nn::Var logits(Graph<T> &g, const ModelParameters<T> &p);
/// Per-atom energies [N, 1] and forces [N, 3] in normalized units.
template <typename T>
nn::Var energy_head(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch);
template <typename T>
nn::Var force_head(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch);

/// Extracts sequence b's attention from a recorded graph.
template <typename T>
AttentionRecord extract_attention(const Graph<T> &g, const Batch &batch, std::size_t b);

template <typename T>
struct ForwardResult {
  Array<T> values; // [T, V] logits or [T, d] hidden states
  std::optional<AttentionRecord> attention;
};

/// h_t = E[token_t] + W_cont c_t.
template <typename T>
Array<T> embed_inputs(const ModelParameters<T> &p, const tokens::DualSequence &seq);

template <typename T>
ForwardResult<T> forward_causal(const ModelParameters<T> &p, const tokens::DualSequence &seq,
                                bool capture_attention = false);

template <typename T>
ForwardResult<T> forward_bidirectional(const ModelParameters<T> &p,
                                       const tokens::DualSequence &seq,
                                       bool capture_attention = false);

struct EnergyForces {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

/// Direct heads: per-atom energies summed plus the reference, forces read
/// at each atom's position token.
template <typename T>
EnergyForces predict_energy_forces(const ModelParameters<T> &p, const tokens::DualSequence &seq);

template <typename T>
std::vector<EnergyForces> predict_energy_forces(const ModelParameters<T> &p,
                                                std::span<const tokens::DualSequence> seqs);

/// Energy head only; forces are -dE/dr through the continuous coordinates of
/// the position tokens, with the discrete ids held fixed.
template <typename T>
EnergyForces conservative_forces(const ModelParameters<T> &p, const tokens::DualSequence &seq);

} // namespace graphfree::model
