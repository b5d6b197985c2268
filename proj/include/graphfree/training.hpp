// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "graphfree/codebook.hpp"
#include "graphfree/data.hpp"
#include "graphfree/model.hpp"
#include "graphfree/nn/optim.hpp"
#include "graphfree/tokenizer.hpp"

namespace graphfree::training {

using model::EnergyReference;
using model::ModelParameters;
using model::OutputScale;

enum class Stage { Pretrain, Finetune };

std::string to_string(Stage s);
Stage stage_from_string(const std::string &s);

struct TrainConfig {
  Stage stage = Stage::Finetune;
  double peak_lr = 3e-4;
  double weight_decay = 1e-3;
  std::size_t batch_size = 16; // frames
  std::size_t epochs = 60;
  /// Overrides epochs when non-zero.
  std::size_t max_steps = 0;
  double warmup_fraction = 0.1;
  double clip_norm = 100.0;
  double lambda_energy = 1.0;
  double lambda_force = 1.0;
  std::uint64_t seed = 0;
  bool rotation_augment = false;
  /// Energy head only; forces come from -dE/dr at inference.
  bool conservative = false;

  static TrainConfig pretrain_defaults();
  static TrainConfig finetune_defaults();
  void validate() const;
  bool operator==(const TrainConfig &) const = default;
};

void to_json(nlohmann::json &j, const TrainConfig &c);
void from_json(const nlohmann::json &j, TrainConfig &c);

/// Linear warmup from 0 to peak over warmup_fraction * total steps, then
/// cosine decay to 0 at step == total.
double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_fraction, double peak);

/// Least squares E ~ sum_Z n_Z c_Z + b. Falls back to a mean energy per atom
/// when the composition matrix is rank deficient.
EnergyReference fit_energy_reference(std::span<const MolecularFrame> frames);

/// Energy scale: spread of the per-atom reference residual. Force scale: RMS
/// force component. Either falls back to 1 when the data carry no spread.
OutputScale fit_output_scale(std::span<const MolecularFrame> frames, const EnergyReference &ref);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;      // before clipping
  double clipped_norm = 0.0;   // after clipping
  bool skipped = false;
  std::size_t skips = 0;       // cumulative
  bool operator==(const StepRecord &) const = default;
};

void write_metrics_csv(std::ostream &out, std::span<const StepRecord> history);

/// Skips non-finite steps; three skips inside a 100-step window halve the
/// learning rate and reset the window.
class InstabilityGuard {
public:
  static constexpr std::size_t kWindow = 100;
  static constexpr std::size_t kMaxSkips = 3;

  /// Returns true when the step must be skipped.
  bool observe(std::size_t step, bool finite);
  double lr_factor() const { return lr_factor_; }
  std::size_t total_skips() const { return total_; }
  std::size_t halvings() const { return halvings_; }

  void restore(double lr_factor, std::size_t total_skips, std::size_t halvings);

private:
  std::deque<std::size_t> recent_;
  double lr_factor_ = 1.0;
  std::size_t total_ = 0;
  std::size_t halvings_ = 0;
};

/// Everything a checkpoint restores.
template <typename T>
struct TrainState {
  ModelParameters<T> params;
  nn::AdamState<T> adam;
  TrainConfig config;
  std::size_t step = 0;
  std::uint32_t codebook_hash = 0;
  std::vector<StepRecord> history;
  InstabilityGuard guard;

  static TrainState fresh(ModelParameters<T> params, const TrainConfig &config,
                          std::uint32_t codebook_hash);
};

struct TrainData {
  std::span<const MolecularFrame> frames;
  const codebook::QuantileCodebook &codebook;
  const tokens::Vocabulary &vocab;
};

using StepCallback = std::function<void(const StepRecord &)>;

/// Total optimizer steps implied by the config for n frames.
std::size_t planned_steps(const TrainConfig &config, std::size_t n_frames);

/// Next-token cross entropy under the causal mask. Resumes from state.step
/// and runs to the planned step count, or to stop_at when that is non-zero.
template <typename T>
void pretrain(TrainState<T> &state, const TrainData &data, const StepCallback &on_step = {},
              std::size_t stop_at = 0);

/// Direct energy and force regression under the bidirectional mask.
/// Fits the energy reference and output scale on first use (step 0).
template <typename T>
void finetune(TrainState<T> &state, const TrainData &data, const StepCallback &on_step = {},
              std::size_t stop_at = 0);

/// Mean next-token loss of one batch (no gradient).
template <typename T>
double cross_entropy_loss(const ModelParameters<T> &p,
                          std::span<const tokens::DualSequence> pretrain_seqs);

struct Metrics {
  double energy_mae_mev = 0.0;        // per structure
  double force_mae_mev_per_a = 0.0;   // over atoms and components
  std::optional<double> cross_entropy;
  std::size_t frames = 0;
};

void to_json(nlohmann::json &j, const Metrics &m);

/// Metrics of given predictions against labelled frames.
Metrics compute_metrics(std::span<const model::EnergyForces> predictions,
                        std::span<const MolecularFrame> frames);

struct EvalOptions {
  bool conservative = false;
  bool cross_entropy = false;
  std::size_t batch_size = 32;
};

struct Evaluation {
  Metrics metrics;
  std::vector<model::EnergyForces> predictions;
};

template <typename T>
Evaluation evaluate(const ModelParameters<T> &p, std::span<const MolecularFrame> frames,
                       const codebook::QuantileCodebook &cb, const tokens::Vocabulary &vocab,
                    const EvalOptions &options = {});

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class CodebookMismatch : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};

template <typename T>
void save_checkpoint(std::ostream &out, const TrainState<T> &state);
template <typename T>
void save_checkpoint(const std::string &path, const TrainState<T> &state);

/// Verifies the trailing CRC-32 first. When given, the expected hash must
/// equal the stored codebook hash.
template <typename T>
TrainState<T> load_checkpoint(std::istream &in,
                              std::optional<std::uint32_t> expected_codebook_hash = {});
template <typename T>
TrainState<T> load_checkpoint(const std::string &path,
                              std::optional<std::uint32_t> expected_codebook_hash = {});

/// Precision recorded in a checkpoint header, for dispatch before loading.
model::Precision checkpoint_precision(const std::string &path);

} // namespace graphfree::training
