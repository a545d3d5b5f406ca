#pragma once

#include <cmath>
#include <cstdint>
#include <locale>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace evssl {

// ---------------------------------------------------------------------------
// Errors. Three kinds, mapped to CLI exit codes: Usage -> 1, Data/Numeric -> 2.
// ---------------------------------------------------------------------------

enum class ErrorKind { Usage, Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  (os << ... << args);
  return os.str();
}

[[noreturn]] inline void throw_usage(const std::string& msg) {
  throw Error(ErrorKind::Usage, msg);
}
[[noreturn]] inline void throw_data(const std::string& msg) {
  throw Error(ErrorKind::Data, msg);
}
[[noreturn]] inline void throw_numeric(const std::string& msg) {
  throw Error(ErrorKind::Numeric, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

// Stamped into run headers so artifacts can be traced to a toolkit build.
constexpr const char* kToolVersion = "evssl/0.1.0";

// ---------------------------------------------------------------------------
// Seed derivation. Every random decision in the pipeline draws from an engine
// seeded by a splitmix64 hash chain over (global seed, stream tag, step, slot,
// ...), so batch assembly can run on any thread count and training can resume
// from a checkpoint without perturbing the stream.
// ---------------------------------------------------------------------------

constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr uint64_t mix_seed(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ull));
}

template <typename... Rest>
constexpr uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, Rest... rest) {
  return mix_seed(mix_seed(a, b), c, rest...);
}

// Stream tags keep derived seeds for unrelated purposes disjoint.
namespace seed_tag {
constexpr uint64_t init = 0x01;
constexpr uint64_t sample = 0x02;
constexpr uint64_t augment = 0x03;
constexpr uint64_t mask = 0x04;
constexpr uint64_t kmeans = 0x05;
constexpr uint64_t noise = 0x06;
constexpr uint64_t probe = 0x07;
constexpr uint64_t scene = 0x08;
constexpr uint64_t trajectory = 0x09;
}  // namespace seed_tag

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 raw output is fixed by the standard; the
// distributions are implemented here because the <random> distribution
// templates are not guaranteed to produce identical sequences across standard
// library implementations.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased draw from [0, n) by rejection.
  uint64_t uniform_index(uint64_t n) {
    require(n > 0, ErrorKind::Usage, "uniform_index: n must be positive");
    const uint64_t r = (UINT64_MAX % n + 1) % n;  // 2^64 mod n
    for (;;) {
      const uint64_t x = eng_();
      if (r == 0 || x <= UINT64_MAX - r) return x % n;
    }
  }

  // Standard normal, Box-Muller. Draws exactly two engine values per call;
  // no spare is cached, which keeps state save/restore trivial.
  double normal() {
    const double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1p-53;  // (0,1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal resampled until |z| <= 2, then scaled.
  double truncated_normal(double mean, double stddev) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return mean + stddev * z;
    }
  }

  // Knuth's product method, with rate splitting so exp(-rate) never
  // underflows. Sum of independent Poisson draws is Poisson.
  int64_t poisson(double rate) {
    require(rate >= 0.0 && std::isfinite(rate), ErrorKind::Usage,
            "poisson: rate must be finite and non-negative");
    int64_t total = 0;
    while (rate > 30.0) {
      total += poisson_small(30.0);
      rate -= 30.0;
    }
    return total + poisson_small(rate);
  }

  std::string save_state() const {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os << eng_;
    return os.str();
  }

  void load_state(const std::string& blob) {
    std::istringstream is(blob);
    is.imbue(std::locale::classic());
    is >> eng_;
    require(!is.fail(), ErrorKind::Data, "corrupt RNG state blob");
  }

  static constexpr double kPi = 3.14159265358979323846;

 private:
  int64_t poisson_small(double rate) {
    if (rate <= 0.0) return 0;
    const double limit = std::exp(-rate);
    int64_t k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  std::mt19937_64 eng_;
};

}  // namespace evssl
