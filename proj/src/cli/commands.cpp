// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "cli/framework.hpp"
#include "graphfree/analysis.hpp"
#include "graphfree/codebook.hpp"
#include "graphfree/data.hpp"
#include "graphfree/md.hpp"
#include "graphfree/model.hpp"
#include "graphfree/tokenizer.hpp"
#include "graphfree/training.hpp"

namespace graphfree::cli {

namespace {

using training::TrainConfig;
using training::TrainState;

json u(std::uint64_t v) { return json(v); }

std::vector<Param> join(std::vector<Param> a, const std::vector<Param> &b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Param out_param() {
  return {"out", "", "run directory (default: $GRAPHFREE_OUTPUT_ROOT or ./runs, timestamped)"};
}

std::vector<MolecularFrame> load_frames(const Context &c, const std::string &key) {
  auto frames = data::read_xyz_file(c.path(key));
  if (frames.empty()) {
    throw std::runtime_error("no frames in " + c.path(key));
  }
  return frames;
}

std::vector<MolecularFrame> first_frames(std::vector<MolecularFrame> frames, std::size_t n) {
  if (n > 0 && frames.size() > n) {
    frames.resize(n);
  }
  return frames;
}

/// Runs fn(i) for i in [0, n) over `workers` threads; results keep index order.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)> &fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) {
          fn(i);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto &t : pool) {
    t.join();
  }
  for (const auto &e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
}

tokens::Mode mode_from(const Context &c) {
  const auto m = c.get<std::string>("mode");
  if (m == "pretrain") {
    return tokens::Mode::Pretrain;
  }
  if (m == "finetune") {
    return tokens::Mode::Finetune;
  }
  throw UsageError("--mode must be pretrain or finetune, got '" + m + "'");
}

struct Assets {
  codebook::QuantileCodebook cb;
  tokens::Vocabulary vocab;
};

Assets load_assets(const Context &c) {
  Assets a{codebook::load(c.path("codebook")), {}};
  a.vocab = tokens::build_vocab(a.cb);
  return a;
}

/// Loads a checkpoint in its stored precision and hands it to fn.
template <typename F>
void with_checkpoint(const std::string &path, std::optional<std::uint32_t> hash, F &&fn) {
  if (training::checkpoint_precision(path) == model::Precision::Float64) {
    auto s = training::load_checkpoint<double>(path, hash);
    fn(s);
  } else {
    auto s = training::load_checkpoint<float>(path, hash);
    fn(s);
  }
}

// ---------------------------------------------------------------------------

std::vector<Param> model_params() {
  const model::ModelConfig d;
  return {{"hidden_dim", d.hidden_dim, "model width"},
          {"n_layers", d.n_layers, "transformer blocks"},
          {"intermediate_size", d.intermediate_size, "feed-forward width"},
          {"n_heads", d.n_heads, "attention heads"},
          {"precision", model::to_string(d.precision), "float32 or float64"}};
}

model::ModelConfig model_config(const Context &c, std::size_t vocab_size) {
  model::ModelConfig m;
  m.hidden_dim = c.get<int>("hidden_dim");
  m.n_layers = c.get<int>("n_layers");
  m.intermediate_size = c.get<int>("intermediate_size");
  m.n_heads = c.get<int>("n_heads");
  m.vocab_size = static_cast<int>(vocab_size);
  try {
    m.precision = model::precision_from_string(c.get<std::string>("precision"));
    m.validate();
  } catch (const std::invalid_argument &e) {
    throw UsageError(e.what());
  }
  return m;
}

std::vector<Param> train_params(const TrainConfig &d, bool finetune) {
  std::vector<Param> p{{"peak_lr", d.peak_lr, "peak learning rate"},
                       {"weight_decay", d.weight_decay, "decoupled weight decay"},
                       {"batch_size", u(d.batch_size), "frames per step"},
                       {"epochs", u(d.epochs), "passes over the training set"},
                       {"max_steps", u(d.max_steps), "step budget overriding epochs (0: off)"},
                       {"warmup_fraction", d.warmup_fraction, "linear warmup share of all steps"},
                       {"clip_norm", d.clip_norm, "global gradient-norm clip"},
                       {"seed", u(d.seed), "initialization and batching seed"},
                       {"log_every", u(50), "progress line interval in steps"}};
  if (finetune) {
    p.push_back({"lambda_energy", d.lambda_energy, "energy loss weight"});
    p.push_back({"lambda_force", d.lambda_force, "force loss weight"});
    p.push_back({"rotation_augment", d.rotation_augment, "random rotation per step"});
    p.push_back({"conservative", d.conservative, "train the energy head only (forces = -dE/dr)"});
  }
  return p;
}

TrainConfig train_config(const Context &c, training::Stage stage) {
  TrainConfig t = stage == training::Stage::Pretrain ? TrainConfig::pretrain_defaults()
                                                     : TrainConfig::finetune_defaults();
  t.peak_lr = c.get<double>("peak_lr");
  t.weight_decay = c.get<double>("weight_decay");
  t.batch_size = c.get<std::size_t>("batch_size");
  t.epochs = c.get<std::size_t>("epochs");
  t.max_steps = c.get<std::size_t>("max_steps");
  t.warmup_fraction = c.get<double>("warmup_fraction");
  t.clip_norm = c.get<double>("clip_norm");
  t.seed = c.get<std::uint64_t>("seed");
  if (stage == training::Stage::Finetune) {
    t.lambda_energy = c.get<double>("lambda_energy");
    t.lambda_force = c.get<double>("lambda_force");
    t.rotation_augment = c.get<bool>("rotation_augment");
    t.conservative = c.get<bool>("conservative");
  }
  try {
    t.validate();
  } catch (const std::invalid_argument &e) {
    throw UsageError(e.what());
  }
  return t;
}

Table metrics_table(const training::Metrics &m) {
  Table t{{"frames", "energy_mae_meV", "force_mae_meV_per_A", "cross_entropy"}, {}};
  t.rows.push_back({std::to_string(m.frames), num(m.energy_mae_mev), num(m.force_mae_mev_per_a),
                    m.cross_entropy ? num(*m.cross_entropy) : ""});
  return t;
}

template <typename T>
void finish_training(Context &c, const TrainState<T> &state, const std::string &stage) {
  training::save_checkpoint(c.output("checkpoint.gfckpt").string(), state);
  std::ostringstream csv;
  training::write_metrics_csv(csv, state.history);
  c.write_file("metrics.csv", csv.str());
  const auto counts = model::count_params(state.params.config);
  json summary{{"stage", stage},
               {"steps", state.step},
               {"params_total", counts.total},
               {"params_non_embedding", counts.non_embedding},
               {"skipped_steps", state.guard.total_skips()},
               {"lr_halvings", state.guard.halvings()}};
  if (!state.history.empty()) {
    summary["final_loss"] = state.history.back().loss;
  }
  c.write_json("summary.json", summary);
  Table t{{"stage", "steps", "final_loss", "non_embedding_params", "skipped"}, {}};
  t.rows.push_back({stage, std::to_string(state.step),
                    state.history.empty() ? "" : num(state.history.back().loss),
                    std::to_string(counts.non_embedding),
                    std::to_string(state.guard.total_skips())});
  t.print(c.out);
}

training::StepCallback progress(Context &c) {
  const auto every = c.get<std::size_t>("log_every");
  return [&c, every](const training::StepRecord &r) {
    if (every > 0 && (r.step + 1) % every == 0) {
      c.out << "step " << r.step + 1 << "  loss " << num(r.loss) << "  lr " << num(r.lr)
            << (r.skipped ? "  skipped" : "") << "\n";
    }
  };
}

// ---------------------------------------------------------------------------

void gen_data(Context &c) {
  Rng rng(c.get<std::uint64_t>("seed"));
  data::LjParameters lj;
  lj.epsilon = c.get<double>("lj_epsilon");
  lj.sigma = c.get<double>("lj_sigma");
  const auto n = c.get<std::size_t>("n_frames");
  const int lo = c.get<int>("atoms_min"), hi = c.get<int>("atoms_max");
  if (n == 0 || lo < 1 || hi < lo) {
    throw UsageError("need n_frames > 0 and 1 <= atoms_min <= atoms_max");
  }
  const auto frames = data::generate_lj_dataset(n, lo, hi, rng, lj);
  const auto fractions = c.get<std::vector<double>>("split");
  data::DatasetSplit split;
  try {
    split = data::split_dataset(frames.size(), fractions, rng);
  } catch (const std::invalid_argument &e) {
    throw UsageError(e.what());
  }
  c.write_file("frames.xyz", data::write_xyz(frames));
  data::DatasetManifest m{{"frames.xyz"}, split};
  Table t{{"split", "frames", "file"}, {}};
  const std::pair<const char *, const std::vector<std::size_t> *> parts[] = {
      {"train", &split.train}, {"val", &split.val}, {"test", &split.test}};
  for (const auto &[name, idx] : parts) {
    if (idx->empty()) {
      continue;
    }
    const std::string file = std::string(name) + ".xyz";
    c.write_file(file, data::write_xyz(data::select(frames, *idx)));
    t.rows.push_back({name, std::to_string(idx->size()), file});
  }
  c.write_file("split.json", data::manifest_to_json(m));
  t.print(c.out);
}

void fit_codebook(Context &c) {
  const auto frames = load_frames(c, "data");
  codebook::CodebookConfig cfg;
  cfg.position_grid_bins = c.get<int>("position_bins");
  cfg.position_1d_bins = c.get<int>("position_1d_bins");
  cfg.force_bins = c.get<int>("force_bins");
  cfg.energy_bins = c.get<int>("energy_bins");
  cfg.fit_forces = c.get<bool>("fit_forces");
  cfg.fit_energy = c.get<bool>("fit_energy");
  const auto cb = codebook::fit_codebook(frames, cfg);
  codebook::save(c.output("codebook.json").string(), cb);
  const auto vocab = tokens::build_vocab(cb);
  Table t{{"frames", "grid_cells", "force_bins", "energy_bins", "vocab", "hash"}, {}};
  t.rows.push_back({std::to_string(frames.size()), std::to_string(cb.grid_cells()),
                    std::to_string(cb.force_axis[0].bins), std::to_string(cb.energy.bins),
                    std::to_string(vocab.size()), std::to_string(codebook::content_hash(cb))});
  t.print(c.out);
  c.write_file("codebook_summary.csv", t.csv());
}

void tokenize(Context &c) {
  const auto frames = load_frames(c, "data");
  const auto a = load_assets(c);
  const auto mode = mode_from(c);
  std::vector<tokens::DualSequence> seqs(frames.size());
  parallel_for(frames.size(), c.get<std::size_t>("workers"), [&](std::size_t i) {
    seqs[i] = tokens::encode_frame(frames[i], a.cb, a.vocab, mode);
  });
  std::ostringstream bin;
  tokens::write_records(bin, seqs);
  c.write_file("sequences.gfseq", bin.str());
  std::string preview;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, seqs.size()); ++i) {
    preview += tokens::render(seqs[i], a.vocab) + "\n";
  }
  c.write_file("preview.txt", preview);
  std::size_t total = 0;
  for (const auto &s : seqs) {
    total += s.length();
  }
  Table t{{"frames", "tokens", "mean_length", "mode"}, {}};
  t.rows.push_back({std::to_string(seqs.size()), std::to_string(total),
                    num(static_cast<double>(total) / static_cast<double>(seqs.size())),
                    c.get<std::string>("mode")});
  t.print(c.out);
  c.write_file("tokenize_summary.csv", t.csv());
}

void pretrain(Context &c) {
  const auto frames = load_frames(c, "data");
  const auto a = load_assets(c);
  const auto hash = codebook::content_hash(a.cb);
  const training::TrainData data{frames, a.cb, a.vocab};
  auto go = [&](auto &state) {
    c.out << "pretraining " << frames.size() << " frames, "
          << training::planned_steps(state.config, frames.size()) << " steps from step "
          << state.step << "\n";
    training::pretrain(state, data, progress(c));
    finish_training(c, state, "pretrain");
  };
  if (c.has("resume")) {
    with_checkpoint(c.path("resume"), hash, go);
    return;
  }
  const auto mc = model_config(c, a.vocab.size());
  const auto tc = train_config(c, training::Stage::Pretrain);
  if (mc.precision == model::Precision::Float64) {
    auto s = TrainState<double>::fresh(model::init_model<double>(mc, tc.seed), tc, hash);
    go(s);
  } else {
    auto s = TrainState<float>::fresh(model::init_model<float>(mc, tc.seed), tc, hash);
    go(s);
  }
}

void finetune(Context &c) {
  const auto frames = load_frames(c, "data");
  const auto a = load_assets(c);
  const auto hash = codebook::content_hash(a.cb);
  const training::TrainData data{frames, a.cb, a.vocab};
  auto go = [&](auto &state) {
    c.out << "finetuning " << frames.size() << " frames, "
          << training::planned_steps(state.config, frames.size()) << " steps from step "
          << state.step << "\n";
    training::finetune(state, data, progress(c));
    finish_training(c, state, "finetune");
    if (c.has("val")) {
      const auto val = load_frames(c, "val");
      const auto ev = training::evaluate(state.params, val, a.cb, a.vocab,
                                         {.conservative = state.config.conservative});
      c.out << "validation\n";
      const auto t = metrics_table(ev.metrics);
      t.print(c.out);
      c.write_file("val_metrics.csv", t.csv());
      c.write_json("val_metrics.json", ev.metrics);
    }
  };
  if (c.has("resume")) {
    with_checkpoint(c.path("resume"), hash, go);
    return;
  }
  const auto tc = train_config(c, training::Stage::Finetune);
  if (c.has("init")) {
    with_checkpoint(c.path("init"), hash, [&](auto &pre) {
      using State = std::decay_t<decltype(pre)>;
      auto s = State::fresh(std::move(pre.params), tc, hash);
      go(s);
    });
    return;
  }
  const auto mc = model_config(c, a.vocab.size());
  if (mc.precision == model::Precision::Float64) {
    auto s = TrainState<double>::fresh(model::init_model<double>(mc, tc.seed), tc, hash);
    go(s);
  } else {
    auto s = TrainState<float>::fresh(model::init_model<float>(mc, tc.seed), tc, hash);
    go(s);
  }
}

void eval(Context &c) {
  const auto frames = load_frames(c, "data");
  std::vector<model::EnergyForces> preds;
  training::Metrics metrics;
  if (c.has("predictions")) {
    const auto p = data::read_xyz_file(c.path("predictions"));
    if (p.size() != frames.size()) {
      throw std::runtime_error("predictions hold " + std::to_string(p.size()) +
                               " frames, data holds " + std::to_string(frames.size()));
    }
    for (const auto &f : p) {
      if (!f.energy || !f.forces) {
        throw std::runtime_error("prediction frames need energy and forces");
      }
      preds.push_back({*f.energy, *f.forces});
    }
    metrics = training::compute_metrics(preds, frames);
  } else {
    if (!c.has("checkpoint") || !c.has("codebook")) {
      throw UsageError("eval needs --predictions or both --checkpoint and --codebook");
    }
    const auto a = load_assets(c);
    const training::EvalOptions opts{.conservative = c.get<bool>("conservative"),
                                     .cross_entropy = c.get<bool>("cross_entropy"),
                                     .batch_size = c.get<std::size_t>("batch_size")};
    with_checkpoint(c.path("checkpoint"), codebook::content_hash(a.cb), [&](auto &state) {
      auto ev = training::evaluate(state.params, frames, a.cb, a.vocab, opts);
      metrics = ev.metrics;
      preds = std::move(ev.predictions);
    });
    std::vector<MolecularFrame> out;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      MolecularFrame f = frames[i];
      f.energy = preds[i].energy;
      f.forces = preds[i].forces;
      out.push_back(std::move(f));
    }
    c.write_file("predictions.xyz", data::write_xyz(out));
  }
  Table per{{"frame", "atoms", "energy_ref", "energy_pred", "energy_abs_err_meV",
             "force_mae_meV_per_A"},
            {}};
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto &f = frames[i];
    double fe = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) {
      for (int d = 0; d < 3; ++d) {
        fe += std::abs(preds[i].forces[k][d] - (*f.forces)[k][d]);
      }
    }
    per.rows.push_back({std::to_string(i), std::to_string(f.size()), num(*f.energy),
                        num(preds[i].energy), num(1e3 * std::abs(preds[i].energy - *f.energy)),
                        num(1e3 * fe / static_cast<double>(3 * f.size()))});
  }
  c.write_file("per_frame.csv", per.csv());
  const auto t = metrics_table(metrics);
  t.print(c.out);
  c.write_file("metrics.csv", t.csv());
  c.write_json("metrics.json", metrics);
}

Table curve_table(const std::vector<analysis::Curve> &curves) {
  Table t{{"layer", "lo", "hi", "midpoint", "x_mean", "y_mean", "count"}, {}};
  for (std::size_t l = 0; l < curves.size(); ++l) {
    for (const auto &p : curves[l]) {
      t.rows.push_back({std::to_string(l), num(p.lo), num(p.hi), num(p.midpoint()),
                        num(p.x_mean), num(p.y_mean), std::to_string(p.count)});
    }
  }
  return t;
}

void attn_analyze(Context &c) {
  const auto frames = first_frames(load_frames(c, "data"), c.get<std::size_t>("max_frames"));
  const auto a = load_assets(c);
  const auto mode = mode_from(c);
  const auto nq = c.get<std::size_t>("n_quantiles");
  const auto np = c.get<std::size_t>("n_percentiles");
  const double delta = c.get<double>("delta");
  with_checkpoint(c.path("checkpoint"), codebook::content_hash(a.cb), [&](auto &state) {
    const auto cap = analysis::capture_attention(state.params, std::span(frames), a.cb, a.vocab,
                                                 mode);
    const auto samples = cap.samples();

    analysis::TokenTypeMass mass;
    for (const auto &s : samples) {
      mass.merge(analysis::attention_by_token_type(*s.record, analysis::bucket_tokens(*s.sequence)));
    }
    Table mt{{"layer", "query", "key", "fraction"}, {}};
    for (std::size_t l = 0; l < mass.layers; ++l) {
      for (std::size_t q = 0; q < analysis::kBucketCount; ++q) {
        for (std::size_t k = 0; k < analysis::kBucketCount; ++k) {
          const auto f = mass.fraction(l, analysis::Bucket(q), analysis::Bucket(k));
          if (f) {
            mt.rows.push_back({std::to_string(l), to_string(analysis::Bucket(q)),
                               to_string(analysis::Bucket(k)), num(*f)});
          }
        }
      }
    }
    c.write_file("token_type_mass.csv", mt.csv());

    const auto dist = analysis::attention_vs_distance(samples, nq);
    c.write_file("attention_distance.csv", curve_table(dist).csv());
    const auto radius = analysis::radius_vs_density(samples, delta, np);
    c.write_file("radius_density.csv", curve_table(radius).csv());

    Table hd{{"layer", "head", "lo", "hi", "midpoint", "x_mean", "y_mean", "count"}, {}};
    Table hr{{"layer", "head", "rank", "y_mean", "count"}, {}};
    for (const auto &h : analysis::per_head_curves(samples, nq)) {
      for (const auto &p : h.by_distance) {
        hd.rows.push_back({std::to_string(h.layer), std::to_string(h.head), num(p.lo), num(p.hi),
                           num(p.midpoint()), num(p.x_mean), num(p.y_mean),
                           std::to_string(p.count)});
      }
      for (const auto &p : h.by_rank) {
        hr.rows.push_back({std::to_string(h.layer), std::to_string(h.head), num(p.x_mean),
                           num(p.y_mean), std::to_string(p.count)});
      }
    }
    c.write_file("per_head_distance.csv", hd.csv());
    c.write_file("per_head_rank.csv", hr.csv());

    Table summary{{"layer", "positions_to_positions", "mean_effective_radius_A"}, {}};
    json js = json::array();
    for (std::size_t l = 0; l < mass.layers; ++l) {
      const auto pp =
          mass.fraction(l, analysis::Bucket::Positions, analysis::Bucket::Positions).value_or(0.0);
      double rsum = 0.0;
      std::size_t rn = 0;
      for (const auto &s : samples) {
        for (double r : analysis::effective_radii(s, l, delta)) {
          rsum += r;
          ++rn;
        }
      }
      const double mean_r = rn ? rsum / static_cast<double>(rn) : 0.0;
      summary.rows.push_back({std::to_string(l), num(pp), num(mean_r)});
      js.push_back({{"layer", l}, {"positions_to_positions", pp}, {"mean_effective_radius", mean_r}});
    }
    summary.print(c.out);
    c.write_json("summary.json", {{"frames", frames.size()}, {"delta", delta}, {"layers", js}});
  });
}

std::vector<std::vector<double>> read_numeric_csv(const std::string &path) {
  std::ifstream f(path);
  if (!f) {
    throw std::runtime_error("cannot open " + path);
  }
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      char *end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (cell.empty() || end == cell.c_str()) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (rows.empty() && lineno == 1) {
        continue; // header
      }
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": non-numeric row");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void scaling_fit(Context &c) {
  const auto rows = read_numeric_csv(c.path("points"));
  const auto kind = c.get<std::string>("kind");
  if (kind == "power") {
    std::vector<std::array<double, 2>> pts;
    for (const auto &r : rows) {
      if (r.size() != 2) {
        throw std::runtime_error("power fit expects rows N,L");
      }
      pts.push_back({r[0], r[1]});
    }
    const auto fit = analysis::fit_power_law(pts);
    Table res{{"N", "L", "L_fit", "log_residual"}, {}};
    for (std::size_t i = 0; i < pts.size(); ++i) {
      res.rows.push_back({num(pts[i][0]), num(pts[i][1]), num(fit.predict(pts[i][0])),
                          num(fit.residuals[i])});
    }
    c.write_file("residuals.csv", res.csv());
    json j = fit;
    j["kind"] = "power";
    c.write_json("fit.json", j);
    Table t{{"alpha", "N_c", "r_squared"}, {{num(fit.alpha), num(fit.n_c), num(fit.r_squared)}}};
    t.print(c.out);
    c.write_file("fit.csv", t.csv());
  } else if (kind == "joint") {
    std::vector<std::array<double, 3>> pts;
    for (const auto &r : rows) {
      if (r.size() != 3) {
        throw std::runtime_error("joint fit expects rows N,D,L");
      }
      pts.push_back({r[0], r[1], r[2]});
    }
    const auto fit = analysis::fit_joint_scaling(
        pts, {.starts = c.get<std::size_t>("starts"), .seed = c.get<std::uint64_t>("seed")});
    Table res{{"N", "D", "L", "L_fit", "log_residual"}, {}};
    for (const auto &p : pts) {
      const double pred = fit.predict(p[0], p[1]);
      res.rows.push_back(
          {num(p[0]), num(p[1]), num(p[2]), num(pred), num(std::log(pred) - std::log(p[2]))});
    }
    c.write_file("residuals.csv", res.csv());
    json j = fit;
    j["kind"] = "joint";
    c.write_json("fit.json", j);
    Table t{{"L_inf", "A", "alpha", "B", "beta", "rmse_log", "degenerate"},
            {{num(fit.l_inf), num(fit.a), num(fit.alpha), num(fit.b), num(fit.beta),
              num(fit.rmse_log), fit.degenerate ? "true" : "false"}}};
    t.print(c.out);
    c.write_file("fit.csv", t.csv());
  } else {
    throw UsageError("--kind must be power or joint, got '" + kind + "'");
  }
}

void isoflop(Context &c) {
  analysis::JointScalingFit fit;
  if (c.has("fit")) {
    std::ifstream f(c.path("fit"));
    const auto j = json::parse(f);
    if (j.value("kind", "joint") != "joint") {
      throw std::runtime_error(c.path("fit") + " is not a joint scaling fit");
    }
    fit.l_inf = j.at("l_inf").get<double>();
    fit.a = j.at("a").get<double>();
    fit.alpha = j.at("alpha").get<double>();
    fit.b = j.at("b").get<double>();
    fit.beta = j.at("beta").get<double>();
    fit.degenerate = j.value("degenerate", false);
  } else {
    fit.l_inf = c.get<double>("l_inf");
    fit.a = c.get<double>("a");
    fit.alpha = c.get<double>("alpha");
    fit.b = c.get<double>("b");
    fit.beta = c.get<double>("beta");
  }
  const analysis::IsoFlopOptions opts{.flops_per_param_token = c.get<double>("flops_per_param_token"),
                                      .n_min = c.get<double>("n_min"),
                                      .n_max = c.get<double>("n_max"),
                                      .grid = c.get<std::size_t>("grid")};
  Table curve{{"flops", "N", "D", "loss"}, {}};
  Table optima{{"flops", "N_opt", "D_opt", "loss_opt"}, {}};
  json all = json::array();
  for (double flops : c.get<std::vector<double>>("flops")) {
    const auto iso = analysis::isoflop_curve(fit, flops, opts);
    for (const auto &p : iso.points) {
      curve.rows.push_back({num(flops), num(p.n), num(p.d), num(p.loss)});
    }
    optima.rows.push_back(
        {num(flops), num(iso.optimum.n), num(iso.optimum.d), num(iso.optimum.loss)});
    all.push_back(iso);
  }
  c.write_file("isoflop.csv", curve.csv());
  c.write_file("optima.csv", optima.csv());
  c.write_json("isoflop.json", {{"fit", fit}, {"curves", all}});
  optima.print(c.out);
}

MolecularFrame jitter(const MolecularFrame &f, double sigma, Rng &rng) {
  std::normal_distribution<double> g(0.0, sigma);
  MolecularFrame out = f;
  for (auto &p : out.positions) {
    for (double &x : p) {
      x += g(rng);
    }
  }
  return out;
}

void logprob(Context &c) {
  const auto frames = load_frames(c, "data");
  const auto a = load_assets(c);
  const double noise = c.get<double>("noise");
  Rng rng(c.get<std::uint64_t>("seed"));
  Table t{{"frame", "atoms", "tokens", "log_prob", "log_prob_per_token"}, {}};
  if (noise > 0.0) {
    t.header.push_back("log_prob_noisy");
  }
  double clean_sum = 0.0, noisy_sum = 0.0;
  with_checkpoint(c.path("checkpoint"), codebook::content_hash(a.cb), [&](auto &state) {
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const auto seq = tokens::encode_frame(frames[i], a.cb, a.vocab, tokens::Mode::Pretrain);
      const double lp = analysis::sequence_log_prob(state.params, seq);
      clean_sum += lp;
      std::vector<std::string> row{std::to_string(i), std::to_string(frames[i].size()),
                                   std::to_string(seq.length()), num(lp),
                                   num(lp / static_cast<double>(seq.length() - 1))};
      if (noise > 0.0) {
        const auto noisy = tokens::encode_frame(jitter(frames[i], noise, rng), a.cb, a.vocab,
                                                tokens::Mode::Pretrain);
        const double ln = analysis::sequence_log_prob(state.params, noisy);
        noisy_sum += ln;
        row.push_back(num(ln));
      }
      t.rows.push_back(std::move(row));
    }
  });
  c.write_file("logprob.csv", t.csv());
  const double n = static_cast<double>(frames.size());
  json summary{{"frames", frames.size()}, {"mean_log_prob", clean_sum / n}};
  Table s{{"frames", "mean_log_prob"}, {{std::to_string(frames.size()), num(clean_sum / n)}}};
  if (noise > 0.0) {
    summary["noise_A"] = noise;
    summary["mean_log_prob_noisy"] = noisy_sum / n;
    s.header.push_back("mean_log_prob_noisy");
    s.rows[0].push_back(num(noisy_sum / n));
  }
  c.write_json("summary.json", summary);
  s.print(c.out);
}

void run_md(Context &c) {
  const auto frames = load_frames(c, "data");
  const auto index = c.get<std::size_t>("frame_index");
  if (index >= frames.size()) {
    throw UsageError("--frame_index " + std::to_string(index) + " out of range (" +
                     std::to_string(frames.size()) + " frames)");
  }
  const auto ensemble = c.get<std::string>("ensemble");
  if (ensemble != "nve" && ensemble != "nvt") {
    throw UsageError("--ensemble must be nve or nvt");
  }
  const auto force_mode = c.get<std::string>("force_mode");
  if (force_mode != "direct" && force_mode != "conservative") {
    throw UsageError("--force_mode must be direct or conservative");
  }
  const md::Thermostat th{c.get<double>("temperature_k"), c.get<double>("friction_per_fs")};
  double init_t = c.get<double>("init_temperature_k");
  if (init_t < 0.0) {
    init_t = th.temperature_k;
  }
  Rng rng(c.get<std::uint64_t>("seed"));

  auto simulate = [&](const md::ForceProvider &provider) {
    auto state = md::MDState::from_frame(frames[index]);
    md::maxwell_boltzmann(state, init_t, rng);
    const auto dt = c.get<double>("dt_fs");
    const auto steps = c.get<std::size_t>("steps");
    const auto stride = c.get<std::size_t>("stride");
    return ensemble == "nve" ? md::run_nve(state, provider, dt, steps, stride)
                             : md::run_nvt(state, provider, dt, steps, stride, th, rng);
  };

  md::Trajectory traj;
  const auto provider_name = c.get<std::string>("provider");
  if (provider_name == "lj") {
    data::LjParameters lj;
    lj.epsilon = c.get<double>("lj_epsilon");
    lj.sigma = c.get<double>("lj_sigma");
    traj = simulate(md::lj_provider(lj));
  } else if (provider_name == "model") {
    if (!c.has("checkpoint") || !c.has("codebook")) {
      throw UsageError("--provider=model needs --checkpoint and --codebook");
    }
    const auto a = load_assets(c);
    with_checkpoint(c.path("checkpoint"), codebook::content_hash(a.cb), [&](auto &state) {
      const md::ModelProviderOptions opts{
          .mode = force_mode == "conservative" ? md::ForceMode::Conservative : md::ForceMode::Direct,
          .freeze_tokens = c.get<bool>("freeze_tokens")};
      traj = simulate(md::model_provider(state.params, a.cb, a.vocab, opts));
    });
  } else {
    throw UsageError("--provider must be lj or model");
  }

  c.write_file("trajectory.xyz", data::write_xyz(traj.frames()));
  Table e{{"step", "time_fs", "potential_eV", "kinetic_eV", "total_eV", "temperature_K"}, {}};
  double t_sum = 0.0;
  const double n_atoms = static_cast<double>(frames[index].size());
  for (const auto &s : traj.samples) {
    const double temp = 2.0 * s.kinetic / (3.0 * n_atoms * md::kBoltzmann);
    t_sum += temp;
    e.rows.push_back({std::to_string(s.step), num(s.time_fs), num(s.potential), num(s.kinetic),
                      num(s.total()), num(temp)});
  }
  c.write_file("energies.csv", e.csv());

  json summary{{"samples", traj.samples.size()},
               {"ensemble", ensemble},
               {"provider", provider_name},
               {"unstable", traj.unstable},
               {"energy_drift", md::energy_drift(traj)},
               {"mean_temperature_k", t_sum / static_cast<double>(traj.samples.size())}};
  if (!traj.diagnostic.empty()) {
    summary["diagnostic"] = traj.diagnostic;
  }
  const double r_max = c.get<double>("r_max");
  const auto bins = c.get<std::size_t>("n_bins");
  if (n_atoms >= 2) {
    const auto h = md::h_of_r(traj, r_max, bins);
    Table ht{{"r_lo", "r_hi", "h"}, {}};
    for (std::size_t k = 0; k < h.bins(); ++k) {
      ht.rows.push_back({num(static_cast<double>(k) * h.bin_width()),
                         num(static_cast<double>(k + 1) * h.bin_width()), num(h.density[k])});
    }
    c.write_file("h_r.csv", ht.csv());
    if (c.has("reference")) {
      std::vector<std::vector<Vec3>> ref;
      for (const auto &f : data::read_xyz_file(c.path("reference"))) {
        ref.push_back(f.positions);
      }
      summary["h_mae"] = md::h_mae(h, md::h_of_r(ref, r_max, bins));
    }
  }
  c.write_json("summary.json", summary);
  Table s{{"samples", "energy_drift", "mean_T_K", "unstable"},
          {{std::to_string(traj.samples.size()), num(summary["energy_drift"].get<double>()),
            num(summary["mean_temperature_k"].get<double>()), traj.unstable ? "true" : "false"}}};
  if (summary.contains("h_mae")) {
    s.header.push_back("h_mae");
    s.rows[0].push_back(num(summary["h_mae"].get<double>()));
  }
  s.print(c.out);
  if (traj.unstable) {
    c.out << "warning: " << traj.diagnostic << "\n";
  }
}

void equivariance(Context &c) {
  const auto frames = first_frames(load_frames(c, "data"), c.get<std::size_t>("max_frames"));
  const auto a = load_assets(c);
  const auto n_rot = c.get<std::size_t>("n_rotations");
  const auto n_avg = c.get<std::size_t>("frame_average");
  if (n_rot == 0) {
    throw UsageError("--n_rotations must be positive");
  }
  Rng rng(c.get<std::uint64_t>("seed"));
  Table t{{"frame", "atoms", "cossim", "excluded"}, {}};
  if (n_avg > 0) {
    t.header.push_back("cossim_frame_averaged");
  }
  double raw_sum = 0.0, avg_sum = 0.0;
  std::size_t used = 0;
  with_checkpoint(c.path("checkpoint"), codebook::content_hash(a.cb), [&](auto &state) {
    const auto fn = analysis::model_forces(state.params, a.cb, a.vocab, c.get<bool>("conservative"));
    const std::uint64_t avg_seed = rng();
    const analysis::ForceFn averaged = [&](const MolecularFrame &f) {
      Rng local(avg_seed);
      return analysis::frame_average_forces(fn, f, n_avg, local);
    };
    for (std::size_t i = 0; i < frames.size(); ++i) {
      std::vector<data::RotationMatrix> rots;
      for (std::size_t k = 0; k < n_rot; ++k) {
        rots.push_back(data::random_rotation(rng));
      }
      const auto s = analysis::equivariance_cossim(fn, frames[i], rots);
      std::vector<std::string> row{std::to_string(i), std::to_string(frames[i].size()),
                                   num(s.mean), std::to_string(s.excluded)};
      if (s.used > 0) {
        raw_sum += s.mean;
        ++used;
      }
      if (n_avg > 0) {
        const auto sa = analysis::equivariance_cossim(averaged, frames[i], rots);
        row.push_back(num(sa.mean));
        if (s.used > 0) {
          avg_sum += sa.mean;
        }
      }
      t.rows.push_back(std::move(row));
    }
  });
  c.write_file("equivariance.csv", t.csv());
  const double mean = used ? raw_sum / static_cast<double>(used) : std::nan("");
  json summary{{"frames", frames.size()}, {"rotations", n_rot}, {"mean_cossim", mean}};
  Table s{{"frames", "rotations", "mean_cossim"},
          {{std::to_string(frames.size()), std::to_string(n_rot), num(mean)}}};
  if (n_avg > 0) {
    const double am = used ? avg_sum / static_cast<double>(used) : std::nan("");
    summary["frame_average_rotations"] = n_avg;
    summary["mean_cossim_frame_averaged"] = am;
    s.header.push_back("mean_cossim_frame_averaged");
    s.rows[0].push_back(num(am));
  }
  c.write_json("summary.json", summary);
  s.print(c.out);
}

} // namespace

std::vector<Command> commands() {
  const auto pre = TrainConfig::pretrain_defaults();
  const auto fine = TrainConfig::finetune_defaults();
  const Param codebook_in = input("codebook", "codebook JSON from fit-codebook");
  const Param checkpoint_in = input("checkpoint", "model checkpoint");
  return {
      {"gen-data",
       "Generate Lennard-Jones clusters with analytic labels and a train/val/test split",
       {out_param(),
        {"seed", u(0), "random seed"},
        {"n_frames", u(1000), "number of clusters"},
        {"atoms_min", 2, "smallest cluster"},
        {"atoms_max", 12, "largest cluster"},
        {"split", json::array({0.8, 0.1, 0.1}), "train,val,test fractions"},
        {"lj_epsilon", data::LjParameters{}.epsilon, "well depth (eV)"},
        {"lj_sigma", data::LjParameters{}.sigma, "length scale (Å)"}},
       gen_data},
      {"fit-codebook",
       "Fit quantile bin edges for positions, forces and energies",
       {input("data", "training frames (xyz)"),
        out_param(),
        {"position_bins", 10, "grid bins per axis"},
        {"position_1d_bins", 512, "auxiliary per-axis position bins"},
        {"force_bins", 4096, "force component bins"},
        {"energy_bins", 2048, "energy bins"},
        {"fit_forces", true, "fit force edges"},
        {"fit_energy", true, "fit energy edges"}},
       fit_codebook},
      {"tokenize",
       "Encode frames as dual discrete/continuous sequences",
       {input("data", "frames (xyz)"), codebook_in, out_param(),
        {"mode", "finetune", "pretrain or finetune"},
        {"workers", u(1), "encoding threads"}},
       tokenize},
      {"pretrain",
       "Next-token pretraining under the causal mask",
       join(join({input("data", "training frames (xyz)"), codebook_in, out_param(),
                  input("resume", "checkpoint to continue", false)},
                 model_params()),
            train_params(pre, false)),
       pretrain},
      {"finetune",
       "Energy and force regression under the bidirectional mask",
       join(join({input("data", "training frames (xyz)"), codebook_in, out_param(),
                  input("init", "pretrained checkpoint to start from", false),
                  input("resume", "finetune checkpoint to continue", false),
                  input("val", "validation frames evaluated after training", false)},
                 model_params()),
            train_params(fine, true)),
       finetune},
      {"eval",
       "Energy and force MAE of a checkpoint or of a predictions file",
       {input("data", "labelled frames (xyz)"),
        input("checkpoint", "model checkpoint", false),
        input("codebook", "codebook JSON", false),
        input("predictions", "predicted frames (xyz) instead of a model", false),
        out_param(),
        {"conservative", false, "forces from -dE/dr"},
        {"cross_entropy", false, "also report next-token cross entropy"},
        {"batch_size", u(32), "frames per forward pass"}},
       eval},
      {"attn-analyze",
       "Attention by token type, against distance, effective radius and per-head curves",
       {input("data", "frames (xyz)"), codebook_in, checkpoint_in, out_param(),
        {"mode", "finetune", "pretrain (causal) or finetune (bidirectional)"},
        {"max_frames", u(100), "frames analysed (0: all)"},
        {"n_quantiles", u(20), "distance quantile buckets"},
        {"n_percentiles", u(10), "median-distance percentile buckets"},
        {"delta", 0.9, "attention share defining the effective radius"}},
       attn_analyze},
      {"scaling-fit",
       "Fit L(N) = (N/N_c)^alpha or L(N, D) = L_inf + A N^-alpha + B D^-beta",
       {input("points", "CSV rows N,L (power) or N,D,L (joint)"), out_param(),
        {"kind", "power", "power or joint"},
        {"starts", u(24), "joint fit restarts"},
        {"seed", u(0), "restart seed"}},
       scaling_fit},
      {"isoflop",
       "Loss along fixed-compute curves and the compute-optimal model size",
       {input("fit", "fit.json from scaling-fit --kind=joint", false), out_param(),
        {"l_inf", 0.0, "irreducible loss (without --fit)"},
        {"a", 0.0, "model-size coefficient"},
        {"alpha", 0.0, "model-size exponent"},
        {"b", 0.0, "data coefficient"},
        {"beta", 0.0, "data exponent"},
        {"flops", json::array({1e15, 1e16, 1e17, 1e18}), "compute budgets"},
        {"flops_per_param_token", 6.0, "C = k N D"},
        {"n_min", 1e3, "smallest model on the grid"},
        {"n_max", 1e13, "largest model on the grid"},
        {"grid", u(241), "grid points in ln N"}},
       isoflop},
      {"logprob",
       "Sequence log-probability under a pretrained model",
       {input("data", "frames (xyz)"), codebook_in, checkpoint_in, out_param(),
        {"noise", 0.0, "also score copies with Gaussian coordinate noise of this sd (Å)"},
        {"seed", u(0), "noise seed"}},
       logprob},
      {"md",
       "NVE or Langevin NVT dynamics with h(r) and energy drift",
       {input("data", "starting structures (xyz)"), out_param(),
        input("checkpoint", "model checkpoint (provider=model)", false),
        input("codebook", "codebook JSON (provider=model)", false),
        input("reference", "reference trajectory (xyz) for h(r) MAE", false),
        {"frame_index", u(0), "structure to simulate"},
        {"provider", "lj", "lj or model"},
        {"force_mode", "direct", "direct or conservative (provider=model)"},
        {"freeze_tokens", false, "keep the first step's cell ids"},
        {"ensemble", "nvt", "nve or nvt"},
        {"dt_fs", 0.5, "timestep (fs)"},
        {"steps", u(1000), "integration steps"},
        {"stride", u(10), "sampling stride"},
        {"temperature_k", 300.0, "thermostat temperature (K)"},
        {"friction_per_fs", 0.01, "Langevin friction (1/fs)"},
        {"init_temperature_k", -1.0, "initial velocity temperature (negative: thermostat value)"},
        {"seed", u(0), "velocity and noise seed"},
        {"r_max", 10.0, "h(r) range (Å)"},
        {"n_bins", u(200), "h(r) bins"},
        {"lj_epsilon", data::LjParameters{}.epsilon, "well depth (eV)"},
        {"lj_sigma", data::LjParameters{}.sigma, "length scale (Å)"}},
       run_md},
      {"equivariance",
       "Rotation equivariance of predicted forces, optionally with frame averaging",
       {input("data", "frames (xyz)"), codebook_in, checkpoint_in, out_param(),
        {"n_rotations", u(20), "random rotations per frame"},
        {"max_frames", u(20), "frames evaluated (0: all)"},
        {"frame_average", u(0), "rotations in the frame-averaged predictor (0: off)"},
        {"conservative", false, "forces from -dE/dr"},
        {"seed", u(0), "rotation seed"}},
       equivariance},
  };
}

} // namespace graphfree::cli
