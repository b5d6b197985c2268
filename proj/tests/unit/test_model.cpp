#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"

using namespace graphfree;
using namespace graphfree::model;
using fixtures::small_config;

namespace {

std::vector<tokens::DualSequence> finetune_seqs(std::size_t n, std::uint64_t seed) {
  return fixtures::encode_all(fixtures::lj_frames(n, 2, 6, seed), tokens::Mode::Finetune);
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

} // namespace

TEST_SUITE("model") {
  TEST_CASE("config validation") {
    auto c = small_config(30, 1, 64, 4);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_config(32, 1, 0, 4);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_THROWS_AS(init_model<float>(small_config(32, 1, 64, 4), 0), std::invalid_argument);
  }

  TEST_CASE("parameter counts") {
    ModelConfig table_row;
    table_row.hidden_dim = 256;
    table_row.n_layers = 4;
    table_row.intermediate_size = 1024;
    table_row.n_heads = 4;
    const auto pc = count_params(table_row);
    CHECK(std::abs(static_cast<double>(pc.non_embedding) - 5e6) <= 0.15 * 5e6);

    auto zero = small_config(16, 0, 32, 2);
    const std::int64_t d = 16;
    CHECK(count_params(zero).non_embedding == d + (2 * d * d + d) + (2 * d * d + 3 * d));

    for (auto c : {small_config(32, 2, 64, 4), small_config(24, 3, 40, 3), zero}) {
      const auto p = init_model<double>(c, 1);
      std::int64_t total = 0, non_embedding = 0;
      for (std::size_t i = 0; i < p.specs.size(); ++i) {
        const auto n = static_cast<std::int64_t>(p.tensors[i].size());
        CHECK(p.tensors[i].shape == p.specs[i].shape);
        total += n;
        non_embedding += p.specs[i].embedding ? 0 : n;
      }
      CHECK(count_params(c).total == total);
      CHECK(count_params(c).non_embedding == non_embedding);
    }
  }

  TEST_CASE("flop accounting") {
    CHECK(estimate_flops(1e9, 2e9) == doctest::Approx(1.2e19));
    const auto c = small_config(64, 2, 128, 4);
    CHECK(estimate_flops(c, 2000.0) == doctest::Approx(2.0 * estimate_flops(c, 1000.0)));
    CHECK_THROWS_AS(estimate_flops(1e6, 0.0), std::invalid_argument);

    // Largest scaling configuration, with the pretraining budget of roughly 2e9 tokens over
    // 10 epochs of 4e6 structures and the same structures in finetune layout for 60 epochs.
    ModelConfig big;
    big.hidden_dim = 1792;
    big.n_layers = 23;
    big.intermediate_size = 7168;
    big.n_heads = 14;
    const double structures = 4e6;
    const double pre_tokens = 2e9;
    const double atoms = (pre_tokens / (10 * structures) - 11.0) / 5.0;
    const double fine_tokens =
        60 * structures * static_cast<double>(tokens::sequence_length(
                              static_cast<std::size_t>(std::lround(atoms)), tokens::Mode::Finetune));
    const double total = estimate_flops(big, pre_tokens + fine_tokens);
    CHECK(total > 8.5e19 / 10);
    CHECK(total < 8.5e19 * 10);
  }

  TEST_CASE("initialization") {
    const auto c = small_config(32, 2, 64, 4);
    const auto a = init_model<double>(c, 9);
    const auto b = init_model<double>(c, 9);
    CHECK(a.tensors == b.tensors);
    CHECK(init_model<double>(c, 10).tensors != a.tensors);
    for (std::size_t i = 0; i < a.specs.size(); ++i) {
      const auto &t = a.tensors[i];
      switch (a.specs[i].init) {
      case InitKind::Ones:
        CHECK(std::all_of(t.data.begin(), t.data.end(), [](double x) { return x == 1.0; }));
        break;
      case InitKind::Zeros:
        CHECK(std::all_of(t.data.begin(), t.data.end(), [](double x) { return x == 0.0; }));
        break;
      case InitKind::Normal:
        CHECK(std::all_of(t.data.begin(), t.data.end(),
                          [](double x) { return std::abs(x) <= 0.04; }));
        break;
      }
    }
  }

  TEST_CASE("embedding is additive and position-free") {
    auto p = init_model<double>(small_config(16, 1, 32, 2), 2);
    auto seq = finetune_seqs(1, 3).front();
    const auto h = embed_inputs(p, seq);
    CHECK(h.shape == Shape{seq.length(), 16});
    const auto &table = p.at("embed.tokens");
    const auto &wc = p.at("embed.continuous");
    for (std::size_t t = 0; t < seq.length(); ++t) {
      for (std::size_t k = 0; k < 16; ++k) {
        double expect = table.at(static_cast<std::size_t>(seq.token_ids[t]), k);
        for (std::size_t c = 0; c < 4; ++c) {
          expect += seq.continuous[t][c] * wc.at(c, k);
        }
        CHECK(h.at(t, k) == doctest::Approx(expect).epsilon(1e-14));
        if (seq.types[t] == tokens::TokenType::Element) {
          CHECK(h.at(t, k) == table.at(static_cast<std::size_t>(seq.token_ids[t]), k));
        }
      }
    }
    // Two atoms of the same element give identical element-token embeddings.
    const auto pos = seq.position_tokens();
    for (std::size_t k = 0; k < 16; ++k) {
      CHECK(h.at(pos[0] - 1, k) == h.at(pos[1] - 1, k));
    }
    auto doubled = p;
    for (auto &x : doubled.at("embed.continuous").data) {
      x *= 2.0;
    }
    const auto h2 = embed_inputs(doubled, seq);
    for (std::size_t t = 0; t < seq.length(); ++t) {
      for (std::size_t k = 0; k < 16; ++k) {
        const double base = table.at(static_cast<std::size_t>(seq.token_ids[t]), k);
        CHECK(h2.at(t, k) - base == doctest::Approx(2.0 * (h.at(t, k) - base)).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("causal forward ignores the future") {
    const auto p = init_model<double>(small_config(32, 2, 64, 4), 4);
    auto seqs = fixtures::encode_all(fixtures::lj_frames(5, 2, 6, 5), tokens::Mode::Pretrain);
    for (const auto &seq : seqs) {
      const auto base = forward_causal(p, seq, true);
      CHECK(base.values.shape == Shape{seq.length(), static_cast<std::size_t>(p.config.vocab_size)});
      const auto &rec = *base.attention;
      for (std::size_t l = 0; l < rec.layers; ++l) {
        for (std::size_t h = 0; h < rec.heads; ++h) {
          for (std::size_t i = 0; i < rec.length; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < rec.length; ++j) {
              if (j > i) {
                CHECK(rec(l, h, i, j) == 0.0);
              }
              row += rec(l, h, i, j);
            }
            CHECK(std::abs(row - 1.0) < 1e-12);
          }
        }
      }
      const std::size_t cut = seq.length() / 2;
      auto changed = seq;
      for (std::size_t t = cut + 1; t < seq.length(); ++t) {
        changed.token_ids[t] = (changed.token_ids[t] + 17) % p.config.vocab_size;
        changed.continuous[t][3] += 0.5;
      }
      const auto other = forward_causal(p, changed);
      for (std::size_t t = 0; t <= cut; ++t) {
        for (std::size_t v = 0; v < base.values.cols(); ++v) {
          CHECK(std::abs(other.values.at(t, v) - base.values.at(t, v)) <= 1e-12);
        }
      }
    }
  }

  TEST_CASE("bidirectional forward is permutation equivariant") {
    const auto p = init_model<double>(small_config(32, 2, 64, 4), 6);
    const auto frame = fixtures::lj_frames(1, 5, 5, 7).front();
    const auto seq = tokens::encode_frame(frame, fixtures::lj_codebook(), fixtures::vocab(),
                                          tokens::Mode::Finetune);
    auto swapped_frame = frame;
    std::swap(swapped_frame.positions[1], swapped_frame.positions[3]);
    std::swap((*swapped_frame.forces)[1], (*swapped_frame.forces)[3]);
    const auto swapped = tokens::encode_frame(swapped_frame, fixtures::lj_codebook(),
                                              fixtures::vocab(), tokens::Mode::Finetune);
    const auto a = forward_bidirectional(p, seq, true);
    const auto b = forward_bidirectional(p, swapped);
    CHECK(a.values.shape == Shape{seq.length(), 32});
    const auto pa = seq.position_tokens();
    std::vector<std::size_t> map(seq.length());
    std::iota(map.begin(), map.end(), std::size_t{0});
    for (int k : {-1, 0}) {
      map[pa[1] + k] = pa[3] + k;
      map[pa[3] + k] = pa[1] + k;
    }
    for (std::size_t t = 0; t < seq.length(); ++t) {
      for (std::size_t k = 0; k < 32; ++k) {
        CHECK(std::abs(a.values.at(t, k) - b.values.at(map[t], k)) <=
              1e-9 * std::max(1.0, std::abs(a.values.at(t, k))));
      }
    }
    const auto &rec = *a.attention;
    for (std::size_t l = 0; l < rec.layers; ++l) {
      for (std::size_t i = 0; i < rec.length; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < rec.length; ++j) {
          row += rec(l, 0, i, j);
          CHECK(rec(l, 0, i, j) > 0.0);
        }
        CHECK(std::abs(row - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("zero-initialized heads predict the reference energy and no force") {
    auto p = init_model<double>(small_config(32, 2, 64, 4), 8);
    p.reference.per_element[18] = -0.03;
    p.reference.offset = 0.2;
    for (const auto &seq : finetune_seqs(4, 9)) {
      const auto ef = predict_energy_forces(p, seq);
      CHECK(ef.energy == doctest::Approx(0.2 - 0.03 * static_cast<double>(seq.n_atoms)));
      CHECK(ef.forces.size() == seq.n_atoms);
      for (const auto &f : ef.forces) {
        CHECK(f == Vec3{0, 0, 0});
      }
      const auto cf = conservative_forces(p, seq);
      for (const auto &f : cf.forces) {
        CHECK(f == Vec3{0, 0, 0});
      }
    }
    auto pre = fixtures::encode_all(fixtures::lj_frames(1, 2, 3, 1), tokens::Mode::Pretrain);
    CHECK_THROWS_AS(predict_energy_forces(p, pre.front()), std::invalid_argument);
  }

  TEST_CASE("atom permutations permute forces and keep the energy") {
    auto p = init_model<double>(small_config(32, 2, 64, 4), 10);
    fixtures::randomize_heads(p, 11);
    const auto frames = fixtures::lj_frames(3, 4, 7, 12);
    Rng rng(13);
    for (const auto &frame : frames) {
      const auto seq = tokens::encode_frame(frame, fixtures::lj_codebook(), fixtures::vocab(),
                                            tokens::Mode::Finetune);
      const auto base = predict_energy_forces(p, seq);
      for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> perm(frame.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        MolecularFrame g = frame;
        for (std::size_t i = 0; i < perm.size(); ++i) {
          g.positions[i] = frame.positions[perm[i]];
        }
        const auto ef = predict_energy_forces(
            p, tokens::encode_frame(g, fixtures::lj_codebook(), fixtures::vocab(),
                                    tokens::Mode::Finetune));
        CHECK(rel(ef.energy, base.energy) <= 1e-9);
        for (std::size_t i = 0; i < perm.size(); ++i) {
          for (int k = 0; k < 3; ++k) {
            CHECK(std::abs(ef.forces[i][k] - base.forces[perm[i]][k]) <=
                  1e-9 * std::max(1e-12, std::abs(base.forces[perm[i]][k])));
          }
        }
      }
    }
  }

  TEST_CASE("batched predictions equal single predictions") {
    auto p = init_model<double>(small_config(32, 2, 64, 4), 14);
    fixtures::randomize_heads(p, 15);
    const auto seqs = finetune_seqs(6, 16);
    const auto batched = predict_energy_forces<double>(p, seqs);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const auto single = predict_energy_forces(p, seqs[s]);
      CHECK(rel(batched[s].energy, single.energy) < 1e-12);
      for (std::size_t i = 0; i < single.forces.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
          CHECK(std::abs(batched[s].forces[i][k] - single.forces[i][k]) < 1e-12);
        }
      }
    }
  }

  TEST_CASE("conservative forces are the negative energy gradient") {
    auto p = init_model<double>(small_config(32, 2, 64, 4), 17);
    fixtures::randomize_heads(p, 18);
    p.scale.energy = 0.7;
    for (const auto &seq : finetune_seqs(3, 19)) {
      const auto cf = conservative_forces(p, seq);
      const auto pos = seq.position_tokens();
      const double h = 1e-5;
      for (std::size_t a = 0; a < seq.n_atoms; ++a) {
        for (int k = 0; k < 3; ++k) {
          auto up = seq, down = seq;
          up.continuous[pos[a]][k] += h;
          down.continuous[pos[a]][k] -= h;
          const double numeric = -(predict_energy_forces(p, up).energy -
                                   predict_energy_forces(p, down).energy) / (2 * h);
          CHECK(std::abs(numeric - cf.forces[a][k]) <=
                1e-4 * std::max(std::abs(cf.forces[a][k]), 1e-6));
        }
      }
    }
  }

  TEST_CASE("full model gradients match central differences") {
    auto p = init_model<double>(small_config(32, 2, 64, 4), 20);
    fixtures::randomize_heads(p, 21);
    const auto frames = fixtures::lj_frames(2, 2, 4, 22);
    const auto pre = fixtures::encode_all(frames, tokens::Mode::Pretrain);
    const auto fine = fixtures::encode_all(frames, tokens::Mode::Finetune);
    const auto r = fixtures::model_gradient_check(
        p, pre, fine, {.eps = 1e-3, .floor = 1e-6, .max_coords_per_param = 12, .seed = 3, .fourth_order = true});
    INFO("worst param " << p.specs[r.worst_param].name << " index " << r.worst_index
                        << " analytic " << r.analytic << " numeric " << r.numeric);
    CHECK(r.max_rel_error < 1e-5);
    CHECK(r.checked > 300);
  }
}
