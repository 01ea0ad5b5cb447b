#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stnat {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything user-facing throws one of these.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API contract (non-scalar loss, bad axis, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

// A caller violated a documented precondition (e.g. build_ce_target with
// T' < T).
class ContractError : public Error {
 public:
  using Error::Error;
};

// On-disk container is malformed (bad magic, truncation, extent overflow).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// The CTC target cannot be aligned inside the available frames.
class CtcInfeasibleError : public Error {
 public:
  using Error::Error;
};

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// ---------------------------------------------------------------------------
// Seeded randomness. The mt19937_64 engine is bit-specified by the standard;
// the distributions are hand-rolled here so that corpora and checkpoints
// reproduce across standard libraries.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Independent stream derived from (seed, stream); used to give each
  // epoch / purpose its own deterministic generator.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(splitmix64(seed ^ splitmix64(stream)));
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, n), rejection-sampled (no modulo bias).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw UsageError("Rng::below: n must be positive");
    const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t limit = max - max % n;
    std::uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
  }

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw UsageError("Rng::range: empty interval");
    return lo + static_cast<std::int64_t>(
                    below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// UTF-8 code point splitting (character-level tokenization).
// ---------------------------------------------------------------------------

inline std::vector<std::string> utf8_split(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char lead = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (lead >= 0xF0)
      len = 4;
    else if (lead >= 0xE0)
      len = 3;
    else if (lead >= 0xC0)
      len = 2;
    if (i + len > s.size()) len = 1;  // tolerate truncated trailing byte
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace stnat
