#pragma once

// Shared plumbing: error types mapped to CLI exit codes, a portable seeded
// RNG (stdlib distributions are implementation-defined, so draws are rolled
// by hand), content hashing for split fingerprints, and a tiny logger driven
// by the SUMMAFUSION_LOG environment variable.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace summafusion {

// Exit code 1: bad usage / bad config.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exit code 2: malformed or inconsistent data.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exit code 3: numerical failure (divergence, non-finite values).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a. Used for data fingerprints and per-tensor init seeds.
std::uint64_t fnv1a(const void* data, std::size_t len,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& s);

std::uint64_t splitmix64(std::uint64_t x);

// mt19937_64 engine with hand-rolled draws so that streams are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Rejection sampling, unbiased.
  std::uint64_t below(std::uint64_t n);

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  bool bernoulli(double p) { return next_unit() < p; }

  // Box-Muller, cosine branch only (two uniforms per draw, no cached spare).
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  // k distinct indices drawn from [0, n), returned sorted ascending.
  std::vector<std::size_t> sample_without_replacement(std::size_t n,
                                                      std::size_t k);

 private:
  std::mt19937_64 engine_;
};

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level();
void log_error(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

// Whitespace tokenization; consecutive separators collapse.
std::vector<std::string> split_words(const std::string& text);

std::string lowercase(const std::string& s);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace summafusion
