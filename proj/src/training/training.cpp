// SPDX-License-Identifier: Apache-2.0
#include "graphfree/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <zlib.h>

namespace graphfree::training {

using model::Batch;
using model::Graph;
using model::MaskKind;
using nn::Array;
using nn::Shape;
using nn::Var;
using tokens::DualSequence;
using tokens::Mode;

std::string to_string(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }

Stage stage_from_string(const std::string &s) {
  if (s == "pretrain") {
    return Stage::Pretrain;
  }
  if (s == "finetune") {
    return Stage::Finetune;
  }
  throw std::invalid_argument("unknown stage '" + s + "'");
}

TrainConfig TrainConfig::pretrain_defaults() {
  TrainConfig c;
  c.stage = Stage::Pretrain;
  c.peak_lr = 3e-4;
  c.weight_decay = 0.0;
  c.warmup_fraction = 0.05;
  c.clip_norm = 1.0;
  c.epochs = 10;
  return c;
}

TrainConfig TrainConfig::finetune_defaults() { return TrainConfig{}; }

void TrainConfig::validate() const {
  auto fail = [](const std::string &m) { throw std::invalid_argument("train config: " + m); };
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) {
    fail("peak_lr must be positive");
  }
  if (weight_decay < 0.0 || !std::isfinite(weight_decay)) {
    fail("weight_decay must be non-negative");
  }
  if (batch_size == 0) {
    fail("batch_size must be positive");
  }
  if (epochs == 0 && max_steps == 0) {
    fail("epochs or max_steps must be positive");
  }
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
    fail("warmup_fraction must lie in [0, 1]");
  }
  if (!(clip_norm > 0.0)) {
    fail("clip_norm must be positive");
  }
  if (lambda_energy < 0.0 || lambda_force < 0.0 || lambda_energy + lambda_force == 0.0) {
    fail("loss weights must be non-negative and not both zero");
  }
}

void to_json(nlohmann::json &j, const TrainConfig &c) {
  j = nlohmann::json{{"stage", to_string(c.stage)},
                     {"peak_lr", c.peak_lr},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"max_steps", c.max_steps},
                     {"warmup_fraction", c.warmup_fraction},
                     {"clip_norm", c.clip_norm},
                     {"lambda_energy", c.lambda_energy},
                     {"lambda_force", c.lambda_force},
                     {"seed", c.seed},
                     {"rotation_augment", c.rotation_augment},
                     {"conservative", c.conservative}};
}

void from_json(const nlohmann::json &j, TrainConfig &c) {
  const Stage stage = stage_from_string(j.value("stage", to_string(c.stage)));
  if (stage != c.stage) {
    c = stage == Stage::Pretrain ? TrainConfig::pretrain_defaults()
                                 : TrainConfig::finetune_defaults();
  }
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.lambda_energy = j.value("lambda_energy", c.lambda_energy);
  c.lambda_force = j.value("lambda_force", c.lambda_force);
  c.seed = j.value("seed", c.seed);
  c.rotation_augment = j.value("rotation_augment", c.rotation_augment);
  c.conservative = j.value("conservative", c.conservative);
}

double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_fraction,
                   double peak) {
  if (total_steps == 0) {
    throw std::invalid_argument("lr_schedule: total_steps must be positive");
  }
  if (step > total_steps) {
    throw std::out_of_range("lr_schedule: step " + std::to_string(step) + " beyond total " +
                            std::to_string(total_steps));
  }
  const double s = static_cast<double>(step);
  const double total = static_cast<double>(total_steps);
  const double warm = warmup_fraction * total;
  if (s < warm) {
    return peak * s / warm;
  }
  if (warm >= total) {
    return peak;
  }
  const double progress = (s - warm) / (total - warm);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

EnergyReference fit_energy_reference(std::span<const MolecularFrame> frames) {
  if (frames.empty()) {
    throw std::invalid_argument("fit_energy_reference: no frames");
  }
  std::set<int> elements;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!frames[i].energy) {
      throw std::invalid_argument("fit_energy_reference: frame " + std::to_string(i) +
                                  " has no energy");
    }
    elements.insert(frames[i].atomic_numbers.begin(), frames[i].atomic_numbers.end());
  }
  const std::vector<int> zs(elements.begin(), elements.end());
  const auto rows = static_cast<Eigen::Index>(frames.size());
  const auto cols = static_cast<Eigen::Index>(zs.size() + 1);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, cols);
  Eigen::VectorXd e(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto &f = frames[static_cast<std::size_t>(r)];
    for (int z : f.atomic_numbers) {
      const auto c = std::lower_bound(zs.begin(), zs.end(), z) - zs.begin();
      a(r, c) += 1.0;
    }
    a(r, cols - 1) = 1.0;
    e(r) = *f.energy;
  }

  EnergyReference ref;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() == cols) {
    const Eigen::VectorXd x = qr.solve(e);
    for (std::size_t k = 0; k < zs.size(); ++k) {
      ref.per_element[zs[k]] = x(static_cast<Eigen::Index>(k));
    }
    ref.offset = x(cols - 1);
  } else {
    double per_atom = 0.0;
    for (const auto &f : frames) {
      per_atom += *f.energy / static_cast<double>(f.size());
    }
    per_atom /= static_cast<double>(frames.size());
    for (int z : zs) {
      ref.per_element[z] = per_atom;
    }
  }
  for (const auto &[z, c] : ref.per_element) {
    if (!std::isfinite(c)) {
      throw std::runtime_error("fit_energy_reference: non-finite coefficient for Z=" +
                               std::to_string(z));
    }
  }
  return ref;
}

OutputScale fit_output_scale(std::span<const MolecularFrame> frames, const EnergyReference &ref) {
  OutputScale s;
  double sum = 0.0, sq = 0.0, fsq = 0.0;
  std::size_t nf = 0, ncomp = 0;
  for (const auto &f : frames) {
    if (f.energy) {
      const double r = (*f.energy - ref(f.atomic_numbers)) / static_cast<double>(f.size());
      sum += r;
      sq += r * r;
      ++nf;
    }
    if (f.forces) {
      for (const auto &v : *f.forces) {
        for (double x : v) {
          fsq += x * x;
          ++ncomp;
        }
      }
    }
  }
  if (nf > 1) {
    const double mean = sum / static_cast<double>(nf);
    const double var = sq / static_cast<double>(nf) - mean * mean;
    if (var > 1e-24) {
      s.energy = std::sqrt(var);
    }
  }
  if (ncomp > 0 && fsq > 1e-24) {
    s.force = std::sqrt(fsq / static_cast<double>(ncomp));
  }
  return s;
}

void write_metrics_csv(std::ostream &out, std::span<const StepRecord> history) {
  out << "step,lr,loss,grad_norm,clipped_norm,skipped,skips\n";
  out.precision(10);
  for (const auto &r : history) {
    out << r.step << ',' << r.lr << ',' << r.loss << ',' << r.grad_norm << ',' << r.clipped_norm
        << ',' << (r.skipped ? 1 : 0) << ',' << r.skips << '\n';
  }
}

bool InstabilityGuard::observe(std::size_t step, bool finite) {
  while (!recent_.empty() && recent_.front() + kWindow <= step) {
    recent_.pop_front();
  }
  if (finite) {
    return false;
  }
  ++total_;
  recent_.push_back(step);
  if (recent_.size() >= kMaxSkips) {
    lr_factor_ *= 0.5;
    ++halvings_;
    recent_.clear();
  }
  return true;
}

void InstabilityGuard::restore(double lr_factor, std::size_t total_skips, std::size_t halvings) {
  recent_.clear();
  lr_factor_ = lr_factor;
  total_ = total_skips;
  halvings_ = halvings;
}

template <typename T>
TrainState<T> TrainState<T>::fresh(ModelParameters<T> params, const TrainConfig &config,
                                   std::uint32_t codebook_hash) {
  config.validate();
  TrainState s;
  s.adam = nn::AdamState<T>::zeros_like(params.tensors);
  s.params = std::move(params);
  s.config = config;
  s.codebook_hash = codebook_hash;
  return s;
}

std::size_t planned_steps(const TrainConfig &config, std::size_t n_frames) {
  if (config.max_steps > 0) {
    return config.max_steps;
  }
  if (n_frames == 0) {
    throw std::invalid_argument("no training frames");
  }
  const std::size_t per_epoch = (n_frames + config.batch_size - 1) / config.batch_size;
  return per_epoch * config.epochs;
}

namespace {

// Frame indices of optimizer step `step`. Each epoch reshuffles from a seed
// derived from (seed, epoch), so a resumed run sees the same batches.
std::vector<std::size_t> batch_indices(const TrainConfig &c, std::size_t n, std::size_t step) {
  const std::size_t per_epoch = (n + c.batch_size - 1) / c.batch_size;
  const std::size_t epoch = step / per_epoch;
  const std::size_t b = step % per_epoch;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{c.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x5eed}};
  Rng rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t lo = b * c.batch_size;
  const std::size_t hi = std::min(n, lo + c.batch_size);
  return {order.begin() + static_cast<long>(lo), order.begin() + static_cast<long>(hi)};
}

std::vector<MolecularFrame> batch_frames(const TrainConfig &c, const TrainData &data,
                                         std::size_t step) {
  std::vector<MolecularFrame> out;
  const auto idx = batch_indices(c, data.frames.size(), step);
  std::seed_seq seq{c.seed, static_cast<std::uint64_t>(step), std::uint64_t{0xa11}};
  Rng rng(seq);
  for (std::size_t i : idx) {
    if (c.rotation_augment) {
      out.push_back(data::augment_rotate(data.frames[i], data::random_rotation(rng)));
    } else {
      out.push_back(data.frames[i]);
    }
  }
  return out;
}

std::vector<DualSequence> encode(std::span<const MolecularFrame> frames, const TrainData &data,
                                 Mode mode) {
  std::vector<DualSequence> seqs;
  seqs.reserve(frames.size());
  for (const auto &f : frames) {
    seqs.push_back(tokens::encode_frame(f, data.codebook, data.vocab, mode));
  }
  return seqs;
}

std::vector<std::int32_t> next_token_targets(const Batch &b) {
  std::vector<std::int32_t> targets(b.token_ids.size(), -1);
  for (std::size_t s = 0; s < b.size; ++s) {
    for (std::size_t t = 0; t + 1 < b.lengths[s]; ++t) {
      targets[s * b.max_length + t] = b.token_ids[s * b.max_length + t + 1];
    }
  }
  return targets;
}

template <typename T>
Var finetune_loss(Graph<T> &g, const ModelParameters<T> &p, const Batch &batch,
                  std::span<const MolecularFrame> frames, const TrainConfig &c) {
  auto &t = g.tape;
  Var loss;
  auto accumulate = [&](Var term, double weight) {
    term = t.scale(term, static_cast<T>(weight));
    loss = loss.valid() ? t.add(loss, term) : term;
  };
  if (c.lambda_energy > 0.0) {
    const Var e = model::energy_head(g, p, batch);
    const Var total = t.scale(t.segment_sum(e, batch.atom_offset), static_cast<T>(p.scale.energy));
    Array<T> target(Shape{frames.size(), 1});
    std::vector<T> weights(frames.size());
    for (std::size_t s = 0; s < frames.size(); ++s) {
      const auto &f = frames[s];
      if (!f.energy) {
        throw std::invalid_argument("finetune: frame without energy label");
      }
      target.data[s] = static_cast<T>(*f.energy - p.reference(f.atomic_numbers));
      weights[s] = static_cast<T>(1.0 / static_cast<double>(f.size()));
    }
    accumulate(t.mean_abs_error(total, std::move(target), std::move(weights)), c.lambda_energy);
  }
  if (c.lambda_force > 0.0 && !c.conservative) {
    const Var f = t.scale(model::force_head(g, p, batch), static_cast<T>(p.scale.force));
    Array<T> target(Shape{batch.atom_rows.size(), 3});
    std::size_t a = 0;
    for (const auto &fr : frames) {
      if (!fr.forces) {
        throw std::invalid_argument("finetune: frame without force labels");
      }
      for (const auto &v : *fr.forces) {
        for (std::size_t k = 0; k < 3; ++k) {
          target.data[a * 3 + k] = static_cast<T>(v[k]);
        }
        ++a;
      }
    }
    accumulate(t.mean_abs_error(f, std::move(target)), c.lambda_force);
  }
  if (!loss.valid()) {
    throw std::invalid_argument("finetune: conservative mode needs lambda_energy > 0");
  }
  return loss;
}

// Shared optimizer loop. build_loss records the loss graph for one step.
template <typename T, typename BuildLoss>
void run_training(TrainState<T> &state, const TrainData &data, const StepCallback &on_step,
                  std::size_t stop_at, BuildLoss &&build_loss) {
  const auto &c = state.config;
  c.validate();
  if (data.frames.empty()) {
    throw std::invalid_argument("no training frames");
  }
  const std::uint32_t hash = codebook::content_hash(data.codebook);
  if (state.codebook_hash != hash) {
    throw CodebookMismatch("training codebook differs from the one recorded in the state");
  }
  const std::size_t total = planned_steps(c, data.frames.size());
  const std::size_t end = stop_at > 0 ? std::min(stop_at, total) : total;
  auto &params = state.params;
  while (state.step < end) {
    const std::size_t step = state.step;
    const auto frames = batch_frames(c, data, step);
    Graph<T> g;
    const Var loss = build_loss(g, std::span<const MolecularFrame>(frames));
    const double value = static_cast<double>(g.tape.value(loss).item());

    StepRecord rec;
    rec.step = step;
    rec.lr = lr_schedule(step, total, c.warmup_fraction, c.peak_lr) * state.guard.lr_factor();
    rec.loss = value;
    bool skip = state.guard.observe(step, std::isfinite(value));
    if (!skip) {
      g.tape.backward(loss);
      std::vector<Array<T>> grads;
      grads.reserve(g.params.size());
      for (const Var v : g.params) {
        grads.push_back(g.tape.grad(v));
      }
      const auto clip = nn::clip_global_norm<T>(grads, c.clip_norm);
      rec.grad_norm = clip.norm;
      rec.clipped_norm = clip.post_norm;
      skip = state.guard.observe(step, clip.finite);
      if (!skip) {
        nn::adam_step<T>(params.tensors, grads, state.adam, rec.lr, c.weight_decay);
      }
    }
    rec.skipped = skip;
    rec.skips = state.guard.total_skips();
    state.history.push_back(rec);
    ++state.step;
    if (on_step) {
      on_step(rec);
    }
  }
}

} // namespace

template <typename T>
void pretrain(TrainState<T> &state, const TrainData &data, const StepCallback &on_step,
              std::size_t stop_at) {
  if (state.config.stage != Stage::Pretrain) {
    throw std::invalid_argument("pretrain called with a finetune config");
  }
  run_training(state, data, on_step, stop_at, [&](Graph<T> &g, std::span<const MolecularFrame> frames) {
    const auto seqs = encode(frames, data, Mode::Pretrain);
    const Batch batch = model::make_batch(seqs, MaskKind::Causal);
    model::build_hidden(g, state.params, batch, {.params_require_grad = true});
    return g.tape.cross_entropy(model::logits(g, state.params), next_token_targets(batch));
  });
}

template <typename T>
void finetune(TrainState<T> &state, const TrainData &data, const StepCallback &on_step,
              std::size_t stop_at) {
  if (state.config.stage != Stage::Finetune) {
    throw std::invalid_argument("finetune called with a pretrain config");
  }
  if (state.step == 0) {
    state.params.reference = fit_energy_reference(data.frames);
    state.params.scale = fit_output_scale(data.frames, state.params.reference);
  }
  run_training(state, data, on_step, stop_at, [&](Graph<T> &g, std::span<const MolecularFrame> frames) {
    const auto seqs = encode(frames, data, Mode::Finetune);
    const Batch batch = model::make_batch(seqs, MaskKind::Bidirectional);
    model::build_hidden(g, state.params, batch, {.params_require_grad = true});
    return finetune_loss(g, state.params, batch, frames, state.config);
  });
}

namespace {

template <typename T>
std::pair<double, std::size_t> cross_entropy_sum(const ModelParameters<T> &p,
                                                 std::span<const DualSequence> seqs) {
  for (const auto &s : seqs) {
    if (s.mode != Mode::Pretrain) {
      throw std::invalid_argument("cross entropy needs pretrain-mode sequences");
    }
  }
  const Batch batch = model::make_batch(seqs, MaskKind::Causal);
  const auto targets = next_token_targets(batch);
  const auto count = static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [](std::int32_t t) { return t >= 0; }));
  Graph<T> g;
  model::build_hidden(g, p, batch, {});
  const Var ce = g.tape.cross_entropy(model::logits(g, p), targets);
  return {static_cast<double>(g.tape.value(ce).item()) * static_cast<double>(count), count};
}

} // namespace

template <typename T>
double cross_entropy_loss(const ModelParameters<T> &p, std::span<const DualSequence> seqs) {
  const auto [sum, count] = cross_entropy_sum(p, seqs);
  return sum / static_cast<double>(count);
}

void to_json(nlohmann::json &j, const Metrics &m) {
  j = nlohmann::json{{"energy_mae_mev", m.energy_mae_mev},
                     {"force_mae_mev_per_angstrom", m.force_mae_mev_per_a},
                     {"frames", m.frames}};
  if (m.cross_entropy) {
    j["cross_entropy"] = *m.cross_entropy;
  }
}

Metrics compute_metrics(std::span<const model::EnergyForces> predictions,
                        std::span<const MolecularFrame> frames) {
  if (predictions.size() != frames.size()) {
    throw std::invalid_argument("compute_metrics: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(frames.size()) + " frames");
  }
  if (frames.empty()) {
    throw std::invalid_argument("compute_metrics: no frames");
  }
  Metrics m;
  m.frames = frames.size();
  double e_abs = 0.0, f_abs = 0.0;
  std::size_t comps = 0;
  for (std::size_t s = 0; s < frames.size(); ++s) {
    const auto &f = frames[s];
    if (!f.energy || !f.forces) {
      throw std::invalid_argument("compute_metrics: frame " + std::to_string(s) +
                                  " lacks energy or force labels");
    }
    if (predictions[s].forces.size() != f.size()) {
      throw std::invalid_argument("compute_metrics: atom count mismatch in frame " +
                                  std::to_string(s));
    }
    e_abs += std::abs(predictions[s].energy - *f.energy);
    for (std::size_t a = 0; a < f.size(); ++a) {
      for (std::size_t k = 0; k < 3; ++k) {
        f_abs += std::abs(predictions[s].forces[a][k] - (*f.forces)[a][k]);
        ++comps;
      }
    }
  }
  m.energy_mae_mev = 1000.0 * e_abs / static_cast<double>(frames.size());
  m.force_mae_mev_per_a = 1000.0 * f_abs / static_cast<double>(comps);
  return m;
}

template <typename T>
Evaluation evaluate(const ModelParameters<T> &p, std::span<const MolecularFrame> frames,
                    const codebook::QuantileCodebook &cb, const tokens::Vocabulary &vocab,
                    const EvalOptions &options) {
  if (options.batch_size == 0) {
    throw std::invalid_argument("evaluate: batch_size must be positive");
  }
  Evaluation out;
  std::vector<DualSequence> seqs;
  for (const auto &f : frames) {
    seqs.push_back(tokens::encode_frame(f, cb, vocab, Mode::Finetune));
  }
  for (std::size_t lo = 0; lo < seqs.size(); lo += options.batch_size) {
    const std::size_t hi = std::min(seqs.size(), lo + options.batch_size);
    if (options.conservative) {
      for (std::size_t i = lo; i < hi; ++i) {
        out.predictions.push_back(model::conservative_forces(p, seqs[i]));
      }
    } else {
      auto part = model::predict_energy_forces(
          p, std::span<const DualSequence>(seqs).subspan(lo, hi - lo));
      std::move(part.begin(), part.end(), std::back_inserter(out.predictions));
    }
  }
  out.metrics = compute_metrics(out.predictions, frames);
  if (options.cross_entropy) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t lo = 0; lo < frames.size(); lo += options.batch_size) {
      const std::size_t hi = std::min(frames.size(), lo + options.batch_size);
      std::vector<DualSequence> pre;
      for (std::size_t i = lo; i < hi; ++i) {
        pre.push_back(tokens::encode_frame(frames[i], cb, vocab, Mode::Pretrain));
      }
      const auto [s, n] = cross_entropy_sum(p, pre);
      sum += s;
      count += n;
    }
    out.metrics.cross_entropy = sum / static_cast<double>(count);
  }
  return out;
}

// Checkpoint layout: "GFCKPT01", u64 header length, JSON header, raw
// parameter tensors, Adam first and second moments, CRC-32 of all preceding
// bytes. Scalars are little-endian.
namespace {

constexpr char kMagic[8] = {'G', 'F', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

void put_u64(std::string &buf, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  buf.append(b, 8);
}

template <typename T>
void put_array(std::string &buf, const Array<T> &a) {
  buf.append(reinterpret_cast<const char *>(a.data.data()), a.data.size() * sizeof(T));
}

nlohmann::json history_json(std::span<const StepRecord> history) {
  auto arr = nlohmann::json::array();
  for (const auto &r : history) {
    arr.push_back({r.step, r.lr, r.loss, r.grad_norm, r.clipped_norm, r.skipped, r.skips});
  }
  return arr;
}

std::vector<StepRecord> history_from_json(const nlohmann::json &arr) {
  std::vector<StepRecord> out;
  for (const auto &e : arr) {
    StepRecord r;
    r.step = e.at(0).get<std::size_t>();
    r.lr = e.at(1).get<double>();
    r.loss = e.at(2).is_null() ? std::nan("") : e.at(2).get<double>();
    r.grad_norm = e.at(3).is_null() ? std::nan("") : e.at(3).get<double>();
    r.clipped_norm = e.at(4).is_null() ? std::nan("") : e.at(4).get<double>();
    r.skipped = e.at(5).get<bool>();
    r.skips = e.at(6).get<std::size_t>();
    out.push_back(r);
  }
  return out;
}

std::uint32_t crc_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef *>(bytes.data() + pos), chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

struct ParsedHeader {
  nlohmann::json header;
  std::size_t payload_offset = 0;
};

ParsedHeader parse_header(const std::string &bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 + 4) {
    throw CheckpointError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  }
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc_of(std::string_view(bytes).substr(0, bytes.size() - 4)) != stored) {
    throw CheckpointError("checkpoint checksum mismatch (file corrupt or truncated)");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a graphfree checkpoint");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (16 + hlen + 4 > bytes.size()) {
    throw CheckpointError("checkpoint header length out of range");
  }
  ParsedHeader p;
  p.header = nlohmann::json::parse(bytes.substr(16, hlen));
  p.payload_offset = 16 + hlen;
  return p;
}

std::string slurp(std::istream &in) {
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

template <typename T>
void save_checkpoint(std::ostream &out, const TrainState<T> &state) {
  const auto &p = state.params;
  nlohmann::json h;
  h["format"] = 1;
  h["precision"] = model::to_string(p.config.precision);
  h["model"] = p.config;
  h["train"] = state.config;
  h["step"] = state.step;
  h["codebook_hash"] = state.codebook_hash;
  h["reference"] = p.reference;
  h["scale"] = {{"energy", p.scale.energy}, {"force", p.scale.force}};
  auto tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    tensors.push_back({{"name", p.specs[i].name}, {"shape", p.tensors[i].shape}});
  }
  h["tensors"] = tensors;
  h["adam"] = {{"step", state.adam.step},
               {"beta1", state.adam.config.beta1},
               {"beta2", state.adam.config.beta2},
               {"eps", state.adam.config.eps}};
  h["guard"] = {{"lr_factor", state.guard.lr_factor()},
                {"skips", state.guard.total_skips()},
                {"halvings", state.guard.halvings()}};
  h["history"] = history_json(state.history);

  const std::string header = h.dump();
  std::string buf(kMagic, sizeof(kMagic));
  put_u64(buf, header.size());
  buf += header;
  for (const auto &t : p.tensors) {
    put_array(buf, t);
  }
  for (const auto &t : state.adam.m) {
    put_array(buf, t);
  }
  for (const auto &t : state.adam.v) {
    put_array(buf, t);
  }
  const std::uint32_t crc = crc_of(buf);
  buf.append(reinterpret_cast<const char *>(&crc), 4);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) {
    throw CheckpointError("checkpoint write failed");
  }
}

template <typename T>
void save_checkpoint(const std::string &path, const TrainState<T> &state) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw CheckpointError("cannot open " + tmp + " for writing");
    }
    save_checkpoint(out, state);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError("cannot move checkpoint into place at " + path);
  }
}

template <typename T>
TrainState<T> load_checkpoint(std::istream &in, std::optional<std::uint32_t> expected_hash) {
  const std::string bytes = slurp(in);
  const auto [h, offset] = parse_header(bytes);
  try {
    if (h.at("format").get<int>() != 1) {
      throw CheckpointError("unsupported checkpoint format " + h.at("format").dump());
    }
    const auto config = h.at("model").get<model::ModelConfig>();
    const auto want = sizeof(T) == sizeof(double) ? model::Precision::Float64
                                                  : model::Precision::Float32;
    if (config.precision != want) {
      throw CheckpointError("checkpoint holds " + model::to_string(config.precision) +
                            " parameters, requested " + model::to_string(want));
    }
    const auto hash = h.at("codebook_hash").get<std::uint32_t>();
    if (expected_hash && *expected_hash != hash) {
      throw CodebookMismatch("checkpoint codebook hash " + std::to_string(hash) +
                             " does not match the supplied codebook (" +
                             std::to_string(*expected_hash) + ")");
    }

    TrainState<T> s;
    s.params.config = config;
    s.params.specs = model::parameter_layout(config);
    s.params.reference = h.at("reference").get<EnergyReference>();
    s.params.scale.energy = h.at("scale").at("energy").get<double>();
    s.params.scale.force = h.at("scale").at("force").get<double>();
    s.config = h.at("train").get<TrainConfig>();
    s.step = h.at("step").get<std::size_t>();
    s.codebook_hash = hash;
    s.history = history_from_json(h.at("history"));
    const auto &g = h.at("guard");
    s.guard.restore(g.at("lr_factor").get<double>(), g.at("skips").get<std::size_t>(),
                    g.at("halvings").get<std::size_t>());

    const auto &tensors = h.at("tensors");
    if (tensors.size() != s.params.specs.size()) {
      throw CheckpointError("checkpoint lists " + std::to_string(tensors.size()) +
                            " tensors, layout expects " + std::to_string(s.params.specs.size()));
    }
    std::size_t pos = offset;
    const std::size_t end = bytes.size() - 4;
    auto take = [&](const nn::Shape &shape) {
      Array<T> a(shape);
      const std::size_t n = a.data.size() * sizeof(T);
      if (pos + n > end) {
        throw CheckpointError("checkpoint payload shorter than its header declares");
      }
      std::memcpy(a.data.data(), bytes.data() + pos, n);
      pos += n;
      return a;
    };
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto &spec = s.params.specs[i];
      if (tensors[i].at("name").get<std::string>() != spec.name ||
          tensors[i].at("shape").get<nn::Shape>() != spec.shape) {
        throw CheckpointError("checkpoint tensor " + std::to_string(i) + " does not match " +
                              spec.name);
      }
      s.params.tensors.push_back(take(spec.shape));
    }
    const auto &adam = h.at("adam");
    s.adam.config = {adam.at("beta1").get<double>(), adam.at("beta2").get<double>(),
                     adam.at("eps").get<double>()};
    s.adam.step = adam.at("step").get<std::int64_t>();
    for (const auto &spec : s.params.specs) {
      s.adam.m.push_back(take(spec.shape));
    }
    for (const auto &spec : s.params.specs) {
      s.adam.v.push_back(take(spec.shape));
    }
    if (pos != end) {
      throw CheckpointError("checkpoint has " + std::to_string(end - pos) + " trailing bytes");
    }
    return s;
  } catch (const nlohmann::json::exception &e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
}

template <typename T>
TrainState<T> load_checkpoint(const std::string &path, std::optional<std::uint32_t> expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError("cannot open checkpoint " + path);
  }
  return load_checkpoint<T>(in, expected);
}

model::Precision checkpoint_precision(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError("cannot open checkpoint " + path);
  }
  const auto [h, offset] = parse_header(slurp(in));
  return model::precision_from_string(h.at("precision").get<std::string>());
}

#define GRAPHFREE_INSTANTIATE(T)                                                                   \
  template struct TrainState<T>;                                                                   \
  template void pretrain<T>(TrainState<T> &, const TrainData &, const StepCallback &,              \
                            std::size_t);                                                          \
  template void finetune<T>(TrainState<T> &, const TrainData &, const StepCallback &,              \
                            std::size_t);                                                          \
  template double cross_entropy_loss<T>(const ModelParameters<T> &,                                \
                                        std::span<const DualSequence>);                            \
  template Evaluation evaluate<T>(const ModelParameters<T> &, std::span<const MolecularFrame>,     \
                                  const codebook::QuantileCodebook &, const tokens::Vocabulary &,  \
                                  const EvalOptions &);                                            \
  template void save_checkpoint<T>(std::ostream &, const TrainState<T> &);                         \
  template void save_checkpoint<T>(const std::string &, const TrainState<T> &);                    \
  template TrainState<T> load_checkpoint<T>(std::istream &, std::optional<std::uint32_t>);         \
  template TrainState<T> load_checkpoint<T>(const std::string &, std::optional<std::uint32_t>);

GRAPHFREE_INSTANTIATE(float)
GRAPHFREE_INSTANTIATE(double)

} // namespace graphfree::training
