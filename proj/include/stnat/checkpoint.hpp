#pragma once

#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stnat/config.hpp"
#include "stnat/lm.hpp"
#include "stnat/network.hpp"
#include "stnat/wire.hpp"

namespace stnat {

// Checkpoint container ("STNT" for ASR models, "STLM" for language models):
//   magic(4) version(u32=1) cfg_len(u32) cfg_text
//   n_tensors(u32) then per tensor:
//     name_len(u32) name rank(u32) extents(u32 each) values(f32 LE)
// Values are stored as 32-bit floats regardless of the in-memory precision.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct RawCheckpoint {
  std::string cfg_text;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

template <class Real>
inline void write_checkpoint(
    const std::string& path, const char* magic, const std::string& cfg_text,
    const std::vector<std::pair<std::string, Tensor<Real>>>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  wire::write_bytes(out, magic);
  wire::write_u32(out, kCheckpointVersion);
  wire::write_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
  wire::write_bytes(out, cfg_text);
  wire::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    wire::write_u32(out, static_cast<std::uint32_t>(name.size()));
    wire::write_bytes(out, name);
    wire::write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape())
      wire::write_u32(out, static_cast<std::uint32_t>(e));
    for (Real v : t.v()) wire::write_f32(out, static_cast<float>(v));
  }
  if (!out) throw IoError("short write to '" + path + "'");
}

inline RawCheckpoint read_checkpoint(const std::string& path,
                                     const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const std::string magic = wire::read_bytes(in, 4, path);
  if (magic != expected_magic)
    throw FormatError(path + ": bad magic '" + magic + "', expected '" +
                      expected_magic + "'");
  const std::uint32_t version = wire::read_u32(in, path);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(version));
  RawCheckpoint raw;
  const std::uint32_t cfg_len = wire::read_u32(in, path);
  raw.cfg_text = wire::read_bytes(in, cfg_len, path);
  const std::uint32_t n_tensors = wire::read_u32(in, path);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::uint32_t name_len = wire::read_u32(in, path);
    std::string name = wire::read_bytes(in, name_len, path);
    const std::uint32_t rank = wire::read_u32(in, path);
    if (rank > 4) throw FormatError(path + ": implausible tensor rank");
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t e = wire::read_u32(in, path);
      shape.push_back(e);
      count *= e;
    }
    if (count > (std::uint64_t(1) << 31))
      throw FormatError(path + ": extent overflow in tensor '" + name + "'");
    std::vector<float> vals(static_cast<std::size_t>(count));
    for (auto& v : vals) v = wire::read_f32(in, path + " tensor " + name);
    raw.tensors.emplace_back(std::move(name),
                             Tensor<float>(std::move(shape), std::move(vals)));
  }
  return raw;
}

namespace detail {

// Fills the model/LM parameter set from raw tensors; every expected name
// must appear exactly once with the right shape, and nothing extra.
template <class Real>
void fill_named(const std::string& path,
                std::vector<std::pair<std::string, Tensor<Real>>> expected,
                const std::vector<std::pair<std::string, Tensor<float>>>& got) {
  std::unordered_map<std::string, Tensor<Real>> want;
  for (auto& [name, t] : expected) want.emplace(name, t);
  if (got.size() != want.size())
    throw FormatError(path + ": expected " + std::to_string(want.size()) +
                      " tensors, found " + std::to_string(got.size()));
  for (const auto& [name, src] : got) {
    const auto it = want.find(name);
    if (it == want.end())
      throw FormatError(path + ": unexpected tensor '" + name + "'");
    Tensor<Real> dst = it->second;
    if (src.shape() != dst.shape())
      throw FormatError(path + ": tensor '" + name + "' has shape " +
                        shape_str(src.shape()) + ", expected " +
                        shape_str(dst.shape()));
    for (std::size_t i = 0; i < src.size(); ++i)
      dst.v()[i] = static_cast<Real>(src.v()[i]);
    want.erase(it);
  }
}

}  // namespace detail

template <class Real>
void save_model(const ModelParams<Real>& m, const std::string& path) {
  write_checkpoint(path, "STNT", serialize_model_config(m.cfg),
                   m.named_params());
}

template <class Real = float>
ModelParams<Real> load_model(const std::string& path) {
  const RawCheckpoint raw = read_checkpoint(path, "STNT");
  const ModelConfig cfg = parse_model_config(raw.cfg_text);
  Rng dummy(0);
  ModelParams<Real> m = ModelParams<Real>::init(cfg, dummy);
  detail::fill_named(path, m.named_params(), raw.tensors);
  return m;
}

inline std::string serialize_lm_config(const LmConfig& c) {
  std::ostringstream o;
  o << "n_blocks = " << c.n_blocks << "\n"
    << "d_model = " << c.d_model << "\n"
    << "n_heads = " << c.n_heads << "\n"
    << "d_ff = " << c.d_ff << "\n"
    << "context_limit = " << c.context_limit << "\n"
    << "vocab_size = " << c.vocab_size << "\n";
  return o.str();
}

inline LmConfig parse_lm_config(const std::string& text) {
  LmConfig cfg;
  for (const auto& e : parse_kv_text(text)) {
    const std::string where = "lm config line " + std::to_string(e.line);
    if (e.key == "n_blocks") cfg.n_blocks = parse_size(e.value, where);
    else if (e.key == "d_model") cfg.d_model = parse_size(e.value, where);
    else if (e.key == "n_heads") cfg.n_heads = parse_size(e.value, where);
    else if (e.key == "d_ff") cfg.d_ff = parse_size(e.value, where);
    else if (e.key == "context_limit") cfg.context_limit = parse_size(e.value, where);
    else if (e.key == "vocab_size") cfg.vocab_size = parse_size(e.value, where);
    else throw FormatError(where + ": unknown key '" + e.key + "'");
  }
  return cfg;
}

template <class Real>
void save_lm(const LmParams<Real>& lm, const std::string& path) {
  write_checkpoint(path, "STLM", serialize_lm_config(lm.cfg),
                   lm.named_params());
}

template <class Real = float>
LmParams<Real> load_lm(const std::string& path) {
  const RawCheckpoint raw = read_checkpoint(path, "STLM");
  const LmConfig cfg = parse_lm_config(raw.cfg_text);
  Rng dummy(0);
  LmParams<Real> lm = LmParams<Real>::init(cfg, dummy);
  detail::fill_named(path, lm.named_params(), raw.tensors);
  return lm;
}

// Arithmetic mean of k checkpoints with identical configs (accumulated in
// double; k identical checkpoints average to themselves bit-exactly).
inline ModelParams<float> average_checkpoints(
    const std::vector<std::string>& paths) {
  if (paths.empty()) throw UsageError("average_checkpoints: no checkpoints");
  RawCheckpoint base = read_checkpoint(paths[0], "STNT");
  std::vector<std::vector<double>> acc(base.tensors.size());
  for (std::size_t t = 0; t < base.tensors.size(); ++t)
    acc[t].assign(base.tensors[t].second.v().begin(),
                  base.tensors[t].second.v().end());
  for (std::size_t i = 1; i < paths.size(); ++i) {
    const RawCheckpoint other = read_checkpoint(paths[i], "STNT");
    if (other.cfg_text != base.cfg_text)
      throw FormatError(paths[i] + ": config differs from " + paths[0] +
                        "; refusing to average");
    if (other.tensors.size() != base.tensors.size())
      throw FormatError(paths[i] + ": tensor count differs");
    for (std::size_t t = 0; t < base.tensors.size(); ++t) {
      if (other.tensors[t].first != base.tensors[t].first ||
          other.tensors[t].second.shape() != base.tensors[t].second.shape())
        throw FormatError(paths[i] + ": tensor layout differs at '" +
                          base.tensors[t].first + "'");
      const auto& src = other.tensors[t].second.v();
      for (std::size_t j = 0; j < src.size(); ++j)
        acc[t][j] += static_cast<double>(src[j]);
    }
  }
  const double k = static_cast<double>(paths.size());
  for (std::size_t t = 0; t < base.tensors.size(); ++t) {
    auto& dst = base.tensors[t].second.v();
    for (std::size_t j = 0; j < dst.size(); ++j)
      dst[j] = static_cast<float>(acc[t][j] / k);
  }
  const ModelConfig cfg = parse_model_config(base.cfg_text);
  Rng dummy(0);
  ModelParams<float> m = ModelParams<float>::init(cfg, dummy);
  detail::fill_named(paths[0], m.named_params(), base.tensors);
  return m;
}

}  // namespace stnat
