#include <doctest.h>

#include <regex>
#include <sstream>

#include "graphfree/tokenizer.hpp"

using namespace graphfree;
using namespace graphfree::tokens;

namespace {

const codebook::QuantileCodebook &lj_codebook() {
  static const codebook::QuantileCodebook cb = [] {
    Rng rng(100);
    return codebook::fit_codebook(data::generate_lj_dataset(3000, 2, 12, rng));
  }();
  return cb;
}

MolecularFrame labelled_frame(std::vector<int> z, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 2.0);
  MolecularFrame f;
  f.atomic_numbers = std::move(z);
  f.forces.emplace();
  for (std::size_t i = 0; i < f.atomic_numbers.size(); ++i) {
    f.positions.push_back({g(rng), g(rng), g(rng)});
    f.forces->push_back({g(rng) * 0.01, g(rng) * 0.01, g(rng) * 0.01});
  }
  f.energy = -0.05;
  f.charge = 1;
  f.spin = 2;
  return f;
}

} // namespace

TEST_SUITE("tokenizer") {
  TEST_CASE("default vocabulary layout") {
    const auto v = build_vocab();
    CHECK(v.size() == 10 + 118 + 1000 + 2048 + 4096);
    CHECK(v.size() == 7272);
    CHECK(v.id(Special::Bos) == 0);
    const std::array<IdRange, 5> ranges{v.special, v.element, v.position, v.energy, v.force};
    for (std::size_t i = 1; i < ranges.size(); ++i) {
      CHECK(ranges[i].begin == ranges[i - 1].end());
    }
    CHECK(v.text(v.element_id(35)) == "a_35");
    CHECK(v.text(v.position_id(579)) == "<NUM_579>");
    CHECK(v.text(v.energy_id(125)) == "<NUM_target_125>");
    CHECK(v.text(v.force_id(214)) == "<NUM_force_214>");
    CHECK(build_vocab(lj_codebook()) == v);
    CHECK_THROWS_AS(v.text(7272), std::out_of_range);
  }

  TEST_CASE("sequence lengths") {
    CHECK(sequence_length(1, Mode::Pretrain) == 16);
    CHECK(sequence_length(1, Mode::Finetune) == 9);
    CHECK(sequence_length(8, Mode::Pretrain) == 51);
    CHECK_THROWS_AS(sequence_length(0, Mode::Pretrain), std::invalid_argument);
  }

  TEST_CASE("pretrain layout follows the discretized-string listing") {
    const auto vocab = build_vocab();
    const auto f = labelled_frame({35, 35, 6, 1, 1, 8, 1, 1}, 1);
    const auto seq = encode_frame(f, lj_codebook(), vocab, Mode::Pretrain);
    CHECK(seq.length() == 51);
    // Collapse numeric ids so only the token classes remain.
    std::string text = render(seq, vocab);
    text = std::regex_replace(text, std::regex("<NUM_force_\\d+>"), "F");
    text = std::regex_replace(text, std::regex("<NUM_target_\\d+>"), "E");
    text = std::regex_replace(text, std::regex("<NUM_\\d+>"), "P");
    std::string forces;
    for (int i = 0; i < 24; ++i) {
      forces += " F";
    }
    CHECK(text == "<BOS> [CHARGE] [SPIN] [POS] a_35 P a_35 P a_6 P a_1 P a_1 P a_8 P a_1 P a_1 P "
                  "[POS_END] [TARGET] E [TARGET_END] [FORCE]" +
                      forces + " [FORCE_END] <EOS>");
  }

  TEST_CASE("continuous stream carriers and placeholders") {
    const auto vocab = build_vocab();
    const auto f = labelled_frame({6, 1, 8}, 2);
    const auto seq = encode_frame(f, lj_codebook(), vocab, Mode::Pretrain);
    REQUIRE(seq.continuous.size() == seq.length());
    REQUIRE(seq.types.size() == seq.length());
    std::size_t force_seen = 0;
    for (std::size_t t = 0; t < seq.length(); ++t) {
      const auto &c = seq.continuous[t];
      switch (seq.types[t]) {
      case TokenType::Element:
      case TokenType::Special:
        CHECK(c == std::array<double, 4>{0, 0, 0, 0});
        break;
      case TokenType::Position: {
        const auto &p = f.positions[static_cast<std::size_t>(seq.atom_index[t])];
        CHECK(c == std::array<double, 4>{p[0], p[1], p[2], 0});
        break;
      }
      case TokenType::Force: {
        const auto a = static_cast<std::size_t>(seq.atom_index[t]);
        CHECK(c[3] == (*f.forces)[a][force_seen % 3]);
        ++force_seen;
        break;
      }
      case TokenType::Energy:
        CHECK(c == std::array<double, 4>{0, 0, 0, *f.energy});
        break;
      case TokenType::Charge:
        CHECK(c[3] == 1.0);
        break;
      case TokenType::Spin:
        CHECK(c[3] == 2.0);
        break;
      }
      if (seq.atom_index[t] != kNoAtom) {
        CHECK(seq.atom_index[t] >= 0);
        CHECK(static_cast<std::size_t>(seq.atom_index[t]) < f.size());
      }
    }
    CHECK(force_seen == 9);
    CHECK(seq.atomic_numbers() == f.atomic_numbers);
  }

  TEST_CASE("finetune mode carries no label tokens") {
    const auto vocab = build_vocab();
    const auto f = labelled_frame({1, 1, 8, 6}, 3);
    const auto seq = encode_frame(f, lj_codebook(), vocab, Mode::Finetune);
    CHECK(seq.length() == 15);
    for (auto id : seq.token_ids) {
      CHECK_FALSE(vocab.energy.contains(id));
      CHECK_FALSE(vocab.force.contains(id));
    }
    CHECK(seq.token_ids[seq.length() - 2] == vocab.id(Special::Target));
    CHECK(seq.token_ids.back() == vocab.id(Special::Eos));
    CHECK(seq.position_tokens().size() == 4);
  }

  TEST_CASE("encoding errors") {
    const auto vocab = build_vocab();
    MolecularFrame empty;
    CHECK_THROWS_AS(encode_frame(empty, lj_codebook(), vocab, Mode::Finetune), std::invalid_argument);
    auto f = labelled_frame({1, 1}, 4);
    f.energy.reset();
    CHECK_THROWS_AS(encode_frame(f, lj_codebook(), vocab, Mode::Pretrain), std::invalid_argument);
    CHECK_NOTHROW(encode_frame(f, lj_codebook(), vocab, Mode::Finetune));
  }

  TEST_CASE("decode recovers the frame") {
    const auto vocab = build_vocab();
    const auto f = labelled_frame({18, 18, 18, 18, 18}, 5);
    const auto seq = encode_frame(f, lj_codebook(), vocab, Mode::Pretrain);
    CHECK(encode_frame(f, lj_codebook(), vocab, Mode::Pretrain) == seq);
    const auto back = decode_sequence(seq, lj_codebook(), vocab);
    CHECK(back.atomic_numbers == f.atomic_numbers);
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (int k = 0; k < 3; ++k) {
        CHECK(std::abs(back.positions[i][k] - f.positions[i][k]) <= 1e-12);
      }
    }
    CHECK(*back.forces == *f.forces);
    CHECK(*back.energy == *f.energy);
    CHECK(back.charge == f.charge);
    CHECK(back.spin == f.spin);

    const auto coarse = decode_sequence(seq, lj_codebook(), vocab, DecodeSource::Discrete);
    CHECK(coarse.atomic_numbers == f.atomic_numbers);
    for (std::size_t i = 0; i < f.size(); ++i) {
      CHECK(codebook::encode_position(coarse.positions[i], lj_codebook()) ==
            codebook::encode_position(f.positions[i], lj_codebook()));
    }

    const auto ft = decode_sequence(encode_frame(f, lj_codebook(), vocab, Mode::Finetune),
                                    lj_codebook(), vocab);
    CHECK(ft.atomic_numbers == f.atomic_numbers);
    CHECK_FALSE(ft.forces.has_value());
    CHECK_FALSE(ft.energy.has_value());
  }

  TEST_CASE("grammar violations carry the offending index") {
    const auto vocab = build_vocab();
    const auto f = labelled_frame({1, 6}, 6);
    auto seq = encode_frame(f, lj_codebook(), vocab, Mode::Pretrain);
    auto truncated = seq;
    truncated.token_ids.resize(10);
    truncated.continuous.resize(10);
    truncated.types.resize(10);
    truncated.atom_index.resize(10);
    CHECK_THROWS_AS(decode_sequence(truncated, lj_codebook(), vocab), GrammarError);

    auto extra_force = seq;
    const std::size_t at = seq.length() - 2; // before FORCE_END
    extra_force.token_ids.insert(extra_force.token_ids.begin() + static_cast<long>(at),
                                 vocab.force_id(3));
    extra_force.continuous.insert(extra_force.continuous.begin() + static_cast<long>(at),
                                  std::array<double, 4>{});
    extra_force.types.insert(extra_force.types.begin() + static_cast<long>(at), TokenType::Force);
    extra_force.atom_index.insert(extra_force.atom_index.begin() + static_cast<long>(at), 0);
    try {
      decode_sequence(extra_force, lj_codebook(), vocab);
      FAIL("expected GrammarError");
    } catch (const GrammarError &e) {
      CHECK(e.index() <= extra_force.length());
    }
  }

  TEST_CASE("binary record stream round trip") {
    const auto vocab = build_vocab();
    std::vector<DualSequence> records;
    for (std::uint64_t s = 0; s < 6; ++s) {
      const auto f = labelled_frame(std::vector<int>(s + 1, 18), 10 + s);
      records.push_back(encode_frame(f, lj_codebook(), vocab, s % 2 ? Mode::Finetune : Mode::Pretrain));
    }
    std::stringstream buf;
    write_records(buf, records);
    CHECK(read_records(buf, vocab) == records);

    std::string bytes = buf.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS(read_records(cut, vocab));
    std::stringstream bad_magic("NOTMAGIC");
    CHECK_THROWS(read_records(bad_magic, vocab));
  }
}
