#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stnat/network.hpp"

namespace stnat {

struct TrainConfig {
  std::size_t warmup_steps = 400;
  double lr_scale = 1.0;
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  std::size_t n_time_masks = 2;
  std::size_t max_time_width = 6;
  std::size_t n_freq_masks = 1;
  std::size_t max_freq_width = 8;
  std::size_t average_last_k = 10;
  bool sort_by_length = true;

  void validate() const {
    if (warmup_steps < 1) throw UsageError("config: warmup_steps must be >= 1");
    if (average_last_k < 1)
      throw UsageError("config: average_last_k must be >= 1");
    if (epochs < 1 || batch_size < 1)
      throw UsageError("config: epochs and batch_size must be >= 1");
    if (lr_scale <= 0) throw UsageError("config: lr_scale must be positive");
  }
};

// ---------------------------------------------------------------------------
// key = value text, '#' comments. Serialization is canonical (fixed key
// order, shortest round-trip float formatting) so identical configs produce
// identical bytes.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError(where + ": bad number '" + s + "'");
  return v;
}

inline std::size_t parse_size(const std::string& s, const std::string& where) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError(where + ": bad integer '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& where) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw FormatError(where + ": bad boolean '" + s + "'");
}

struct KvEntry {
  std::string key, value;
  std::size_t line = 0;
};

inline std::vector<KvEntry> parse_kv_text(const std::string& text) {
  std::vector<KvEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  const auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line " + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    KvEntry e;
    e.key = trim(line.substr(0, eq));
    e.value = trim(line.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty())
      throw FormatError("config line " + std::to_string(lineno) +
                        ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

inline bool apply_model_key(ModelConfig& cfg, const KvEntry& e) {
  const std::string where = "config line " + std::to_string(e.line);
  if (e.key == "mode") cfg.mode = mode_from_name(e.value);
  else if (e.key == "n_enc_blocks") cfg.n_enc_blocks = parse_size(e.value, where);
  else if (e.key == "n_dec_blocks") cfg.n_dec_blocks = parse_size(e.value, where);
  else if (e.key == "n_heads") cfg.n_heads = parse_size(e.value, where);
  else if (e.key == "d_model") cfg.d_model = parse_size(e.value, where);
  else if (e.key == "d_ff") cfg.d_ff = parse_size(e.value, where);
  else if (e.key == "feat_dim") cfg.feat_dim = parse_size(e.value, where);
  else if (e.key == "vocab_size") cfg.vocab_size = parse_size(e.value, where);
  else if (e.key == "alpha") cfg.alpha = parse_double(e.value, where);
  else if (e.key == "beta") cfg.beta = parse_double(e.value, where);
  else if (e.key == "dropout") cfg.dropout = parse_double(e.value, where);
  else if (e.key == "fixed_mask_len") cfg.fixed_mask_len = parse_size(e.value, where);
  else return false;
  return true;
}

inline bool apply_train_key(TrainConfig& cfg, const KvEntry& e) {
  const std::string where = "config line " + std::to_string(e.line);
  if (e.key == "warmup_steps") cfg.warmup_steps = parse_size(e.value, where);
  else if (e.key == "lr_scale") cfg.lr_scale = parse_double(e.value, where);
  else if (e.key == "epochs") cfg.epochs = parse_size(e.value, where);
  else if (e.key == "batch_size") cfg.batch_size = parse_size(e.value, where);
  else if (e.key == "n_time_masks") cfg.n_time_masks = parse_size(e.value, where);
  else if (e.key == "max_time_width") cfg.max_time_width = parse_size(e.value, where);
  else if (e.key == "n_freq_masks") cfg.n_freq_masks = parse_size(e.value, where);
  else if (e.key == "max_freq_width") cfg.max_freq_width = parse_size(e.value, where);
  else if (e.key == "average_last_k") cfg.average_last_k = parse_size(e.value, where);
  else if (e.key == "sort_by_length") cfg.sort_by_length = parse_bool(e.value, where);
  else return false;
  return true;
}

inline std::string serialize_model_config(const ModelConfig& c) {
  std::ostringstream o;
  o << "mode = " << mode_name(c.mode) << "\n"
    << "n_enc_blocks = " << c.n_enc_blocks << "\n"
    << "n_dec_blocks = " << c.n_dec_blocks << "\n"
    << "n_heads = " << c.n_heads << "\n"
    << "d_model = " << c.d_model << "\n"
    << "d_ff = " << c.d_ff << "\n"
    << "feat_dim = " << c.feat_dim << "\n"
    << "vocab_size = " << c.vocab_size << "\n"
    << "alpha = " << format_double(c.alpha) << "\n"
    << "beta = " << format_double(c.beta) << "\n"
    << "dropout = " << format_double(c.dropout) << "\n"
    << "fixed_mask_len = " << c.fixed_mask_len << "\n";
  return o.str();
}

inline std::string serialize_train_config(const TrainConfig& c) {
  std::ostringstream o;
  o << "warmup_steps = " << c.warmup_steps << "\n"
    << "lr_scale = " << format_double(c.lr_scale) << "\n"
    << "epochs = " << c.epochs << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "n_time_masks = " << c.n_time_masks << "\n"
    << "max_time_width = " << c.max_time_width << "\n"
    << "n_freq_masks = " << c.n_freq_masks << "\n"
    << "max_freq_width = " << c.max_freq_width << "\n"
    << "average_last_k = " << c.average_last_k << "\n"
    << "sort_by_length = " << (c.sort_by_length ? "true" : "false") << "\n";
  return o.str();
}

// Strict: every key must belong to ModelConfig.
inline ModelConfig parse_model_config(const std::string& text) {
  ModelConfig cfg;
  for (const auto& e : parse_kv_text(text))
    if (!apply_model_key(cfg, e))
      throw FormatError("config line " + std::to_string(e.line) +
                        ": unknown model key '" + e.key + "'");
  return cfg;
}

// A run config mixes model and training keys in one flat file.
inline std::pair<ModelConfig, TrainConfig> parse_run_config(
    const std::string& text) {
  ModelConfig mc;
  TrainConfig tc;
  for (const auto& e : parse_kv_text(text))
    if (!apply_model_key(mc, e) && !apply_train_key(tc, e))
      throw FormatError("config line " + std::to_string(e.line) +
                        ": unknown key '" + e.key + "'");
  return {mc, tc};
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace stnat
