// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "graphfree/codebook.hpp"
#include "graphfree/data.hpp"

namespace graphfree::tokens {

enum class Special : std::int32_t {
  Bos = 0,
  Eos,
  Pos,
  PosEnd,
  Target,
  TargetEnd,
  Force,
  ForceEnd,
  Charge,
  Spin,
};
inline constexpr int kSpecialCount = 10;
inline constexpr int kElementCount = 118;

enum class TokenType : std::uint8_t { Special, Element, Position, Energy, Force, Charge, Spin };

enum class Mode : std::uint8_t { Pretrain, Finetune };

struct IdRange {
  std::int32_t begin = 0;
  std::int32_t size = 0;
  std::int32_t end() const { return begin + size; }
  bool contains(std::int32_t id) const { return id >= begin && id < end(); }
  bool operator==(const IdRange &) const = default;
};

/// Fixed id layout: specials, elements a_1..a_118, position cells,
/// energy bins, force bins.
struct Vocabulary {
  IdRange special, element, position, energy, force;

  std::int32_t size() const { return force.end(); }
  std::int32_t id(Special s) const { return special.begin + static_cast<std::int32_t>(s); }
  std::int32_t element_id(int z) const;
  std::int32_t position_id(int cell) const;
  std::int32_t energy_id(int bin) const;
  std::int32_t force_id(int bin) const;
  /// Human-readable token text, e.g. "a_35", "<NUM_579>", "<NUM_force_214>".
  std::string text(std::int32_t id) const;

  bool operator==(const Vocabulary &) const = default;
};

struct VocabularyConfig {
  int position_cells = 1000;
  int energy_bins = 2048;
  int force_bins = 4096;
};

Vocabulary build_vocab(const VocabularyConfig &config = {});
Vocabulary build_vocab(const codebook::CodebookConfig &config);
/// Sizes taken from a fitted codebook; unfitted energy/force channels use
/// the default bin counts so ids stay stable.
Vocabulary build_vocab(const codebook::QuantileCodebook &cb);

inline constexpr int kContinuousWidth = 4;
inline constexpr std::int32_t kNoAtom = -1;

/// Parallel discrete and continuous streams. Continuous rows are
/// (c0, c1, c2, c3): xyz on position tokens, the scalar on energy, force,
/// charge and spin tokens, zeros elsewhere.
struct DualSequence {
  Mode mode = Mode::Pretrain;
  std::size_t n_atoms = 0;
  std::vector<std::int32_t> token_ids;
  std::vector<std::array<double, kContinuousWidth>> continuous;
  std::vector<TokenType> types;
  std::vector<std::int32_t> atom_index;

  std::size_t length() const { return token_ids.size(); }
  /// Token index of each atom's position-cell token.
  std::vector<std::size_t> position_tokens() const;
  /// Atomic numbers in atom order, read from the element tokens.
  std::vector<int> atomic_numbers() const;

  bool operator==(const DualSequence &) const = default;
};

class GrammarError : public std::runtime_error {
public:
  GrammarError(std::size_t index, const std::string &what)
      : std::runtime_error("token " + std::to_string(index) + ": " + what), index_(index) {}
  std::size_t index() const { return index_; }

private:
  std::size_t index_;
};

std::size_t sequence_length(std::size_t n_atoms, Mode mode);

DualSequence encode_frame(const MolecularFrame &frame, const codebook::QuantileCodebook &cb,
                          const Vocabulary &vocab, Mode mode);

enum class DecodeSource { Continuous, Discrete };

/// Rebuilds the frame. Elements are always exact; real values come from the
/// continuous rows or from bin representatives.
MolecularFrame decode_sequence(const DualSequence &seq, const codebook::QuantileCodebook &cb,
                               const Vocabulary &vocab,
                               DecodeSource source = DecodeSource::Continuous);

/// Space-separated token text in sequence order.
std::string render(const DualSequence &seq, const Vocabulary &vocab);

// Binary record stream, little-endian. See docs/FORMATS.md.
void write_records(std::ostream &out, const std::vector<DualSequence> &records);
std::vector<DualSequence> read_records(std::istream &in, const Vocabulary &vocab);
void write_records_file(const std::string &path, const std::vector<DualSequence> &records);
std::vector<DualSequence> read_records_file(const std::string &path, const Vocabulary &vocab);

} // namespace graphfree::tokens
