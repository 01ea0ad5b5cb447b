#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stnat/tensor.hpp"
#include "stnat/wire.hpp"

namespace stnat {

// ---------------------------------------------------------------------------
// Vocabulary. PAD, UNK, EOS occupy the last three ids (in that order); CTC
// blank is not a vocabulary entry, it is the extra column 0 of the CTC head.
// ---------------------------------------------------------------------------

class Vocab {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kEos = "<eos>";

  Vocab() = default;

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4)
      throw FormatError("vocab: need at least one character plus PAD/UNK/EOS");
    const std::size_t n = tokens_.size();
    if (tokens_[n - 3] != kPad || tokens_[n - 2] != kUnk ||
        tokens_[n - 1] != kEos)
      throw FormatError(
          "vocab: the last three tokens must be <pad>, <unk>, <eos>");
    for (std::size_t i = 0; i < n; ++i) {
      if (tokens_[i].empty())
        throw FormatError("vocab: empty token at id " + std::to_string(i));
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw FormatError("vocab: duplicate token '" + tokens_[i] + "'");
    }
  }

  // Content characters plus the reserved tail.
  static Vocab from_characters(std::vector<std::string> chars) {
    chars.push_back(kPad);
    chars.push_back(kUnk);
    chars.push_back(kEos);
    return Vocab(std::move(chars));
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocab '" + path + "'");
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocab(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write vocab '" + path + "'");
    for (const auto& t : tokens_) out << t << "\n";
  }

  std::size_t size() const { return tokens_.size(); }
  TokenId pad_id() const { return static_cast<TokenId>(tokens_.size() - 3); }
  TokenId unk_id() const { return static_cast<TokenId>(tokens_.size() - 2); }
  TokenId eos_id() const { return static_cast<TokenId>(tokens_.size() - 1); }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw UsageError("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  // Character-level tokenization; unknown characters map to UNK.
  TokenSequence tokenize(const std::string& text) const {
    TokenSequence out;
    for (const auto& ch : utf8_split(text)) {
      const auto it = index_.find(ch);
      out.push_back(it == index_.end() ? unk_id() : it->second);
    }
    return out;
  }

  std::string detokenize(const TokenSequence& ids) const {
    std::string out;
    for (TokenId id : ids) out += token(id);
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Utterance: features are consumed from FMAT files or synthesized, never
// extracted from audio. 10 ms frame shift semantics.
// ---------------------------------------------------------------------------

// Reserved ids are a pure function of the vocabulary size (last three ids,
// in PAD/UNK/EOS order), so they can be derived where only a ModelConfig is
// at hand.
inline TokenId reserved_pad_id(std::size_t vocab_size) {
  return static_cast<TokenId>(vocab_size - 3);
}
inline TokenId reserved_unk_id(std::size_t vocab_size) {
  return static_cast<TokenId>(vocab_size - 2);
}
inline TokenId reserved_eos_id(std::size_t vocab_size) {
  return static_cast<TokenId>(vocab_size - 1);
}

using Boundary = std::pair<std::size_t, std::size_t>;  // [start, end) frames

struct Utterance {
  std::string id;
  Tensor<float> features;  // [frames x feat_dim]
  TokenSequence transcript;
  std::vector<Boundary> boundaries;  // synthetic data only

  std::size_t frames() const { return features.defined() ? features.rows() : 0; }
  double audio_seconds() const { return static_cast<double>(frames()) * 0.010; }
};

// ---------------------------------------------------------------------------
// FMAT feature file: "FMAT", u32 version = 1, u32 rows, u32 cols, then
// rows*cols little-endian f32, row-major. Round trips are bit-exact.
// ---------------------------------------------------------------------------

inline void write_features(const Tensor<float>& mat, const std::string& path) {
  if (mat.rank() != 2) throw UsageError("write_features: rank-2 tensor required");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  wire::write_bytes(out, "FMAT");
  wire::write_u32(out, 1);
  wire::write_u32(out, static_cast<std::uint32_t>(mat.rows()));
  wire::write_u32(out, static_cast<std::uint32_t>(mat.cols()));
  for (float v : mat.v()) wire::write_f32(out, v);
  if (!out) throw IoError("short write to '" + path + "'");
}

inline Tensor<float> read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  if (wire::read_bytes(in, 4, path) != "FMAT")
    throw FormatError(path + ": bad magic, not an FMAT file");
  const std::uint32_t version = wire::read_u32(in, path);
  if (version != 1)
    throw FormatError(path + ": unsupported FMAT version " +
                      std::to_string(version));
  const std::uint64_t rows = wire::read_u32(in, path);
  const std::uint64_t cols = wire::read_u32(in, path);
  const std::uint64_t count = rows * cols;
  if (count > (std::uint64_t(1) << 31))
    throw FormatError(path + ": extent overflow (" + std::to_string(rows) +
                      " x " + std::to_string(cols) + ")");
  std::vector<float> vals(static_cast<std::size_t>(count));
  for (auto& v : vals) v = wire::read_f32(in, path);
  return Tensor<float>(
      Shape{static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)},
      std::move(vals));
}

// ---------------------------------------------------------------------------
// Manifest: UTF-8 TSV rows `id<TAB>feature-path<TAB>transcript`; feature
// paths resolve relative to the manifest's directory. Features load eagerly.
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto tab = line.find('\t', pos);
    if (tab == std::string::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, tab - pos));
    pos = tab + 1;
  }
  return out;
}

inline std::vector<Utterance> load_manifest(const std::string& path,
                                            const Vocab& vocab,
                                            bool load_feats = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<Utterance> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = path + ":" + std::to_string(lineno);
    const auto cols = split_tabs(line);
    if (cols.size() != 3)
      throw FormatError(where + ": expected id<TAB>features<TAB>transcript, "
                                "got " + std::to_string(cols.size()) +
                        " fields");
    Utterance u;
    u.id = cols[0];
    if (u.id.empty()) throw FormatError(where + ": empty utterance id");
    if (!seen.insert(u.id).second)
      throw FormatError(where + ": duplicate utterance id '" + u.id + "'");
    if (cols[2].empty())
      throw FormatError(where + ": empty transcript (CTC needs at least one "
                                "character)");
    u.transcript = vocab.tokenize(cols[2]);
    if (load_feats) {
      const auto feat_path = std::filesystem::path(cols[1]).is_absolute()
                                 ? cols[1]
                                 : (base / cols[1]).string();
      try {
        u.features = read_features(feat_path);
      } catch (const Error& e) {
        throw IoError(where + ": " + e.what());
      }
    }
    out.push_back(std::move(u));
  }
  return out;
}

// Boundaries sidecar: `id<TAB>start:end<TAB>start:end...`, one row per
// utterance, intervals in feature frames.
inline void save_boundaries(const std::vector<Utterance>& utts,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const auto& u : utts) {
    out << u.id;
    for (const auto& [s, e] : u.boundaries) out << "\t" << s << ":" << e;
    out << "\n";
  }
}

inline std::unordered_map<std::string, std::vector<Boundary>> load_boundaries(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open boundaries '" + path + "'");
  std::unordered_map<std::string, std::vector<Boundary>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = path + ":" + std::to_string(lineno);
    const auto cols = split_tabs(line);
    std::vector<Boundary> bounds;
    for (std::size_t i = 1; i < cols.size(); ++i) {
      const auto colon = cols[i].find(':');
      if (colon == std::string::npos)
        throw FormatError(where + ": expected start:end, got '" + cols[i] + "'");
      bounds.emplace_back(std::stoull(cols[i].substr(0, colon)),
                          std::stoull(cols[i].substr(colon + 1)));
    }
    if (!out.emplace(cols[0], std::move(bounds)).second)
      throw FormatError(where + ": duplicate id '" + cols[0] + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic speech-like corpus. Each content character owns a fixed random
// feature template; an utterance renders a random character sequence as
// per-character segments of template+noise separated by silence gaps, with
// ground-truth boundaries recorded. Fully deterministic per seed.
// ---------------------------------------------------------------------------

struct SynthParams {
  std::size_t n_utts = 160;
  std::size_t vocab_chars = 20;
  std::size_t min_len = 2, max_len = 12;  // characters per utterance
  std::size_t min_seg = 4, max_seg = 10;  // frames per character
  std::size_t min_sil = 0, max_sil = 6;   // silence frames between characters
  double noise_sigma = 0.1;
  std::size_t feat_dim = 40;
};

struct SynthCorpus {
  Vocab vocab;
  std::vector<Utterance> utterances;
  std::vector<std::vector<float>> templates;  // per content character
};

inline std::vector<std::string> synth_character_set(std::size_t n) {
  static const std::string pool =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  if (n < 1 || n > pool.size())
    throw UsageError("synth: vocab_chars must lie in [1, " +
                     std::to_string(pool.size()) + "]");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(std::string(1, pool[i]));
  return out;
}

inline SynthCorpus synth_corpus(const SynthParams& p, std::uint64_t seed) {
  if (p.n_utts == 0) throw UsageError("synth: n_utts must be positive");
  if (p.min_len < 1 || p.max_len < p.min_len || p.max_seg < p.min_seg ||
      p.max_sil < p.min_sil || p.min_seg < 1)
    throw UsageError("synth: degenerate length parameters");
  SynthCorpus corpus;
  corpus.vocab = Vocab::from_characters(synth_character_set(p.vocab_chars));

  Rng template_rng = Rng::derive(seed, 1);
  corpus.templates.resize(p.vocab_chars);
  for (auto& tpl : corpus.templates) {
    tpl.resize(p.feat_dim);
    for (auto& v : tpl) v = static_cast<float>(template_rng.normal());
  }

  Rng rng = Rng::derive(seed, 2);
  char idbuf[32];
  for (std::size_t n = 0; n < p.n_utts; ++n) {
    Utterance u;
    std::snprintf(idbuf, sizeof(idbuf), "utt%05zu", n);
    u.id = idbuf;
    const std::size_t len = static_cast<std::size_t>(
        rng.range(static_cast<std::int64_t>(p.min_len),
                  static_cast<std::int64_t>(p.max_len)));
    std::vector<std::size_t> chars(len), seg_len(len), sil_len(len);
    std::size_t total = 0;
    for (std::size_t i = 0; i < len; ++i) {
      chars[i] = rng.below(p.vocab_chars);
      seg_len[i] = static_cast<std::size_t>(
          rng.range(static_cast<std::int64_t>(p.min_seg),
                    static_cast<std::int64_t>(p.max_seg)));
      sil_len[i] = i + 1 < len
                       ? static_cast<std::size_t>(rng.range(
                             static_cast<std::int64_t>(p.min_sil),
                             static_cast<std::int64_t>(p.max_sil)))
                       : 0;
      total += seg_len[i] + sil_len[i];
    }
    u.features = Tensor<float>(Shape{total, p.feat_dim});
    std::size_t t = 0;
    for (std::size_t i = 0; i < len; ++i) {
      u.transcript.push_back(static_cast<TokenId>(chars[i]));
      u.boundaries.emplace_back(t, t + seg_len[i]);
      for (std::size_t f = 0; f < seg_len[i]; ++f, ++t)
        for (std::size_t d = 0; d < p.feat_dim; ++d)
          u.features.at(t, d) =
              corpus.templates[chars[i]][d] +
              static_cast<float>(rng.normal() * p.noise_sigma);
      for (std::size_t f = 0; f < sil_len[i]; ++f, ++t)
        for (std::size_t d = 0; d < p.feat_dim; ++d)
          u.features.at(t, d) = static_cast<float>(rng.normal() * p.noise_sigma);
    }
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Batching: epoch-seeded shuffle, optional length bucketing, zero padding
// with exact frame masks.
// ---------------------------------------------------------------------------

struct Batch {
  Tensor<float> features;              // {B, T_max, F}
  std::vector<std::size_t> frame_len;  // true frames per utterance
  std::vector<TokenId> padded_targets; // B x L_max, PAD-filled
  std::vector<std::size_t> target_len;
  std::size_t target_width = 0;
  std::vector<std::uint8_t> frame_mask;  // B x T_max, 1 exactly on real frames
  std::vector<std::size_t> order;        // source utterance indices

  std::size_t size() const { return frame_len.size(); }
  std::size_t max_frames() const {
    return features.defined() && features.rank() == 3 ? features.shape()[1] : 0;
  }
  std::size_t feat_dim() const {
    return features.defined() && features.rank() == 3 ? features.shape()[2] : 0;
  }

  Tensor<float> utterance_features(std::size_t b) const {
    const std::size_t t_max = max_frames(), f = feat_dim();
    Tensor<float> out(Shape{t_max, f});
    std::copy_n(features.v().data() + b * t_max * f, t_max * f,
                out.v().data());
    return out;
  }

  TokenSequence utterance_target(std::size_t b) const {
    TokenSequence out(target_len[b]);
    std::copy_n(padded_targets.data() + b * target_width, target_len[b],
                out.begin());
    return out;
  }
};

inline std::vector<Batch> make_batches(const std::vector<Utterance>& utts,
                                       std::size_t batch_size, Rng& rng,
                                       bool sort_by_length, TokenId pad_id) {
  if (batch_size == 0) throw UsageError("make_batches: batch_size must be > 0");
  std::vector<std::size_t> idx(utts.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng.below(i)]);
  if (sort_by_length)
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) {
                       return utts[a].frames() < utts[b].frames();
                     });
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < idx.size(); i += batch_size)
    groups.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                        idx.begin() + static_cast<std::ptrdiff_t>(
                                          std::min(i + batch_size, idx.size())));
  if (sort_by_length)
    for (std::size_t i = groups.size(); i > 1; --i)
      std::swap(groups[i - 1], groups[rng.below(i)]);

  std::vector<Batch> out;
  for (const auto& group : groups) {
    Batch b;
    b.order = group;
    std::size_t t_max = 0, l_max = 0, f = 0;
    for (std::size_t u : group) {
      t_max = std::max(t_max, utts[u].frames());
      l_max = std::max(l_max, utts[u].transcript.size());
      f = utts[u].features.cols();
    }
    const std::size_t n = group.size();
    b.features = Tensor<float>(Shape{n, t_max, f});
    b.frame_mask.assign(n * t_max, 0);
    b.padded_targets.assign(n * l_max, pad_id);
    b.target_width = l_max;
    for (std::size_t i = 0; i < n; ++i) {
      const Utterance& u = utts[group[i]];
      b.frame_len.push_back(u.frames());
      b.target_len.push_back(u.transcript.size());
      std::copy_n(u.features.v().data(), u.frames() * f,
                  b.features.v().data() + i * t_max * f);
      std::fill_n(b.frame_mask.begin() + static_cast<std::ptrdiff_t>(i * t_max),
                  u.frames(), std::uint8_t{1});
      std::copy_n(u.transcript.begin(), u.transcript.size(),
                  b.padded_targets.begin() +
                      static_cast<std::ptrdiff_t>(i * l_max));
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace stnat
