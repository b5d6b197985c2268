// SPDX-License-Identifier: Apache-2.0
#include "graphfree/tokenizer.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace graphfree::tokens {

static_assert(std::endian::native == std::endian::little,
              "record stream I/O assumes a little-endian host");

std::int32_t Vocabulary::element_id(int z) const {
  if (z < 1 || z > kElementCount) {
    throw std::out_of_range("atomic number out of range: " + std::to_string(z));
  }
  return element.begin + z - 1;
}

std::int32_t Vocabulary::position_id(int cell) const {
  if (cell < 0 || cell >= position.size) {
    throw std::out_of_range("position cell out of range: " + std::to_string(cell));
  }
  return position.begin + cell;
}

std::int32_t Vocabulary::energy_id(int bin) const {
  if (bin < 0 || bin >= energy.size) {
    throw std::out_of_range("energy bin out of range: " + std::to_string(bin));
  }
  return energy.begin + bin;
}

std::int32_t Vocabulary::force_id(int bin) const {
  if (bin < 0 || bin >= force.size) {
    throw std::out_of_range("force bin out of range: " + std::to_string(bin));
  }
  return force.begin + bin;
}

std::string Vocabulary::text(std::int32_t id) const {
  static const char *names[kSpecialCount] = {"<BOS>",    "<EOS>",        "[POS]",   "[POS_END]",
                                             "[TARGET]", "[TARGET_END]", "[FORCE]", "[FORCE_END]",
                                             "[CHARGE]", "[SPIN]"};
  if (special.contains(id)) {
    return names[id - special.begin];
  }
  if (element.contains(id)) {
    return "a_" + std::to_string(id - element.begin + 1);
  }
  if (position.contains(id)) {
    return "<NUM_" + std::to_string(id - position.begin) + ">";
  }
  if (energy.contains(id)) {
    return "<NUM_target_" + std::to_string(id - energy.begin) + ">";
  }
  if (force.contains(id)) {
    return "<NUM_force_" + std::to_string(id - force.begin) + ">";
  }
  throw std::out_of_range("token id out of range: " + std::to_string(id));
}

Vocabulary build_vocab(const VocabularyConfig &config) {
  Vocabulary v;
  v.special = {0, kSpecialCount};
  v.element = {v.special.end(), kElementCount};
  v.position = {v.element.end(), config.position_cells};
  v.energy = {v.position.end(), config.energy_bins};
  v.force = {v.energy.end(), config.force_bins};
  return v;
}

Vocabulary build_vocab(const codebook::CodebookConfig &config) {
  const int k = config.position_grid_bins;
  return build_vocab(VocabularyConfig{k * k * k, config.energy_bins, config.force_bins});
}

Vocabulary build_vocab(const codebook::QuantileCodebook &cb) {
  VocabularyConfig c;
  c.position_cells = cb.grid_cells();
  if (cb.has_energy()) {
    c.energy_bins = cb.energy.bins;
  }
  if (cb.has_forces()) {
    c.force_bins = cb.force_axis[0].bins;
  }
  return build_vocab(c);
}

std::size_t sequence_length(std::size_t n_atoms, Mode mode) {
  if (n_atoms < 1) {
    throw std::invalid_argument("sequence needs at least one atom");
  }
  return mode == Mode::Pretrain ? 5 * n_atoms + 11 : 2 * n_atoms + 7;
}

std::vector<int> DualSequence::atomic_numbers() const {
  std::vector<int> z(n_atoms, 0);
  for (std::size_t t = 0; t < token_ids.size(); ++t) {
    if (types[t] == TokenType::Element && atom_index[t] >= 0 &&
        static_cast<std::size_t>(atom_index[t]) < n_atoms) {
      z[static_cast<std::size_t>(atom_index[t])] = token_ids[t] - kSpecialCount + 1;
    }
  }
  return z;
}

std::vector<std::size_t> DualSequence::position_tokens() const {
  std::vector<std::size_t> out(n_atoms);
  std::size_t found = 0;
  for (std::size_t t = 0; t < token_ids.size(); ++t) {
    if (types[t] == TokenType::Position) {
      if (atom_index[t] < 0 || static_cast<std::size_t>(atom_index[t]) >= n_atoms) {
        throw GrammarError(t, "position token without a valid atom index");
      }
      out[static_cast<std::size_t>(atom_index[t])] = t;
      ++found;
    }
  }
  if (found != n_atoms) {
    throw GrammarError(token_ids.size(), "expected " + std::to_string(n_atoms) +
                                             " position tokens, found " + std::to_string(found));
  }
  return out;
}

namespace {

struct Builder {
  DualSequence seq;
  void push(std::int32_t id, TokenType type, std::array<double, 4> c = {0, 0, 0, 0},
            std::int32_t atom = kNoAtom) {
    seq.token_ids.push_back(id);
    seq.continuous.push_back(c);
    seq.types.push_back(type);
    seq.atom_index.push_back(atom);
  }
};

struct Layout {
  Mode mode = Mode::Pretrain;
  std::size_t n_atoms = 0;
  std::vector<TokenType> types;
  std::vector<std::int32_t> atom_index;
  std::vector<std::size_t> element_tokens, position_tokens, force_tokens;
  std::size_t energy_token = 0;
};

// Validates the section grammar and recovers types and atom indices from ids alone.
Layout parse_layout(const std::vector<std::int32_t> &ids, const Vocabulary &v) {
  Layout l;
  const std::size_t t_len = ids.size();
  l.types.assign(t_len, TokenType::Special);
  l.atom_index.assign(t_len, kNoAtom);
  std::size_t t = 0;
  auto expect = [&](Special s) {
    if (t >= t_len) {
      throw GrammarError(t, "sequence truncated, expected " + v.text(v.id(s)));
    }
    if (ids[t] != v.id(s)) {
      throw GrammarError(t, "expected " + v.text(v.id(s)));
    }
    ++t;
  };
  expect(Special::Bos);
  expect(Special::Charge);
  l.types[t - 1] = TokenType::Charge;
  expect(Special::Spin);
  l.types[t - 1] = TokenType::Spin;
  expect(Special::Pos);
  while (t < t_len && ids[t] != v.id(Special::PosEnd)) {
    if (!v.element.contains(ids[t])) {
      throw GrammarError(t, "expected an element token");
    }
    if (t + 1 >= t_len || !v.position.contains(ids[t + 1])) {
      throw GrammarError(t + 1, "expected a position token after the element token");
    }
    const auto atom = static_cast<std::int32_t>(l.n_atoms++);
    l.types[t] = TokenType::Element;
    l.types[t + 1] = TokenType::Position;
    l.atom_index[t] = l.atom_index[t + 1] = atom;
    l.element_tokens.push_back(t);
    l.position_tokens.push_back(t + 1);
    t += 2;
  }
  if (l.n_atoms == 0) {
    throw GrammarError(t, "sequence has no atoms");
  }
  expect(Special::PosEnd);
  expect(Special::Target);
  if (t < t_len && ids[t] == v.id(Special::Eos)) {
    l.mode = Mode::Finetune;
    ++t;
  } else {
    l.mode = Mode::Pretrain;
    if (t >= t_len || !v.energy.contains(ids[t])) {
      throw GrammarError(t, "expected an energy token");
    }
    l.types[t] = TokenType::Energy;
    l.energy_token = t++;
    expect(Special::TargetEnd);
    expect(Special::Force);
    std::size_t count = 0;
    while (t < t_len && v.force.contains(ids[t])) {
      l.types[t] = TokenType::Force;
      l.atom_index[t] = static_cast<std::int32_t>(count / 3);
      l.force_tokens.push_back(t);
      ++count;
      ++t;
    }
    if (count != 3 * l.n_atoms) {
      throw GrammarError(t, "expected " + std::to_string(3 * l.n_atoms) +
                                " force tokens, found " + std::to_string(count));
    }
    expect(Special::ForceEnd);
    expect(Special::Eos);
  }
  if (t != t_len) {
    throw GrammarError(t, "trailing tokens after <EOS>");
  }
  return l;
}

} // namespace

DualSequence encode_frame(const MolecularFrame &frame, const codebook::QuantileCodebook &cb,
                          const Vocabulary &vocab, Mode mode) {
  frame.validate();
  const std::size_t n = frame.size();
  if (n == 0) {
    throw std::invalid_argument("cannot encode a frame with zero atoms");
  }
  if (mode == Mode::Pretrain && (!frame.energy || !frame.forces)) {
    throw std::invalid_argument("pretrain encoding needs energy and forces");
  }
  if (vocab.position.size != cb.grid_cells()) {
    throw std::invalid_argument("vocabulary and codebook disagree on the position grid");
  }
  Builder b;
  b.seq.mode = mode;
  b.seq.n_atoms = n;
  b.seq.token_ids.reserve(sequence_length(n, mode));
  b.push(vocab.id(Special::Bos), TokenType::Special);
  b.push(vocab.id(Special::Charge), TokenType::Charge, {0, 0, 0, double(frame.charge)});
  b.push(vocab.id(Special::Spin), TokenType::Spin, {0, 0, 0, double(frame.spin)});
  b.push(vocab.id(Special::Pos), TokenType::Special);
  for (std::size_t a = 0; a < n; ++a) {
    const auto atom = static_cast<std::int32_t>(a);
    const auto &r = frame.positions[a];
    b.push(vocab.element_id(frame.atomic_numbers[a]), TokenType::Element, {0, 0, 0, 0}, atom);
    b.push(vocab.position_id(codebook::encode_position(r, cb)), TokenType::Position,
           {r[0], r[1], r[2], 0}, atom);
  }
  b.push(vocab.id(Special::PosEnd), TokenType::Special);
  b.push(vocab.id(Special::Target), TokenType::Special);
  if (mode == Mode::Pretrain) {
    if (!cb.has_energy() || !cb.has_forces()) {
      throw std::invalid_argument("pretrain encoding needs energy and force codebooks");
    }
    const double e = *frame.energy;
    b.push(vocab.energy_id(codebook::encode_value(e, cb.energy)), TokenType::Energy,
           {0, 0, 0, e});
    b.push(vocab.id(Special::TargetEnd), TokenType::Special);
    b.push(vocab.id(Special::Force), TokenType::Special);
    for (std::size_t a = 0; a < n; ++a) {
      for (int k = 0; k < 3; ++k) {
        const double f = (*frame.forces)[a][k];
        b.push(vocab.force_id(codebook::encode_value(f, cb.force_axis[k])), TokenType::Force,
               {0, 0, 0, f}, static_cast<std::int32_t>(a));
      }
    }
    b.push(vocab.id(Special::ForceEnd), TokenType::Special);
  }
  b.push(vocab.id(Special::Eos), TokenType::Special);
  return std::move(b.seq);
}

MolecularFrame decode_sequence(const DualSequence &seq, const codebook::QuantileCodebook &cb,
                               const Vocabulary &vocab, DecodeSource source) {
  if (seq.continuous.size() != seq.length()) {
    throw GrammarError(std::min(seq.continuous.size(), seq.length()),
                       "continuous stream length differs from token stream");
  }
  const Layout l = parse_layout(seq.token_ids, vocab);
  const bool cont = source == DecodeSource::Continuous;
  MolecularFrame f;
  f.charge = static_cast<int>(std::lround(seq.continuous[1][3]));
  f.spin = static_cast<int>(std::lround(seq.continuous[2][3]));
  for (std::size_t a = 0; a < l.n_atoms; ++a) {
    f.atomic_numbers.push_back(seq.token_ids[l.element_tokens[a]] - vocab.element.begin + 1);
    const std::size_t t = l.position_tokens[a];
    if (cont) {
      const auto &c = seq.continuous[t];
      f.positions.push_back({c[0], c[1], c[2]});
    } else {
      f.positions.push_back(codebook::decode_position(seq.token_ids[t] - vocab.position.begin, cb));
    }
  }
  if (l.mode == Mode::Pretrain) {
    const std::size_t et = l.energy_token;
    f.energy = cont ? seq.continuous[et][3]
                    : codebook::decode_bin(seq.token_ids[et] - vocab.energy.begin, cb.energy);
    std::vector<Vec3> forces(l.n_atoms);
    for (std::size_t i = 0; i < l.force_tokens.size(); ++i) {
      const std::size_t t = l.force_tokens[i];
      const int axis = static_cast<int>(i % 3);
      forces[i / 3][axis] =
          cont ? seq.continuous[t][3]
               : codebook::decode_bin(seq.token_ids[t] - vocab.force.begin, cb.force_axis[axis]);
    }
    f.forces = std::move(forces);
  }
  return f;
}

std::string render(const DualSequence &seq, const Vocabulary &vocab) {
  std::string out;
  for (std::size_t t = 0; t < seq.length(); ++t) {
    if (t) {
      out += ' ';
    }
    out += vocab.text(seq.token_ids[t]);
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'G', 'F', 'T', 'O', 'K', 'S', '0', '1'};

template <typename T>
void put(std::ostream &out, const T &v) {
  out.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <typename T>
bool get(std::istream &in, T &v) {
  return static_cast<bool>(in.read(reinterpret_cast<char *>(&v), sizeof(T)));
}

} // namespace

void write_records(std::ostream &out, const std::vector<DualSequence> &records) {
  out.write(kMagic, sizeof(kMagic));
  for (const auto &r : records) {
    put(out, static_cast<std::uint32_t>(r.length()));
    put(out, static_cast<std::uint32_t>(r.n_atoms));
    out.write(reinterpret_cast<const char *>(r.token_ids.data()),
              static_cast<std::streamsize>(r.length() * sizeof(std::int32_t)));
    out.write(reinterpret_cast<const char *>(r.continuous.data()),
              static_cast<std::streamsize>(r.length() * kContinuousWidth * sizeof(double)));
    for (auto t : r.types) {
      put(out, static_cast<std::uint8_t>(t));
    }
  }
}

std::vector<DualSequence> read_records(std::istream &in, const Vocabulary &vocab) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a token record stream (bad magic)");
  }
  std::vector<DualSequence> out;
  std::uint32_t t_len = 0;
  while (get(in, t_len)) {
    std::uint32_t n = 0;
    if (!get(in, n)) {
      throw std::runtime_error("record stream truncated in header");
    }
    DualSequence s;
    s.n_atoms = n;
    s.token_ids.resize(t_len);
    s.continuous.resize(t_len);
    std::vector<std::uint8_t> tags(t_len);
    in.read(reinterpret_cast<char *>(s.token_ids.data()),
            static_cast<std::streamsize>(t_len * sizeof(std::int32_t)));
    in.read(reinterpret_cast<char *>(s.continuous.data()),
            static_cast<std::streamsize>(t_len * kContinuousWidth * sizeof(double)));
    in.read(reinterpret_cast<char *>(tags.data()), static_cast<std::streamsize>(t_len));
    if (!in) {
      throw std::runtime_error("record stream truncated in record " + std::to_string(out.size()));
    }
    const Layout l = parse_layout(s.token_ids, vocab);
    if (l.n_atoms != n) {
      throw std::runtime_error("record " + std::to_string(out.size()) +
                               " atom count disagrees with its tokens");
    }
    s.mode = l.mode;
    s.atom_index = l.atom_index;
    s.types.resize(t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
      s.types[t] = static_cast<TokenType>(tags[t]);
      if (s.types[t] != l.types[t]) {
        throw std::runtime_error("record " + std::to_string(out.size()) +
                                 " has a type tag inconsistent with token " + std::to_string(t));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_records_file(const std::string &path, const std::vector<DualSequence> &records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  write_records(out, records);
}

std::vector<DualSequence> read_records_file(const std::string &path, const Vocabulary &vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  return read_records(in, vocab);
}

} // namespace graphfree::tokens
