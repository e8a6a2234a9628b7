#pragma once

// Shared basics: element types, shapes, error types, seeded RNG streams and
// small hashing utilities used across the library.

#include <cstdint>
#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dfa {

// ---------------------------------------------------------------------------
// Element type. f64 is the reference mode used by the gradient oracle and the
// determinism tests; f32 is the fast mode for timing and larger experiments.
// ---------------------------------------------------------------------------
enum class DType { f32, f64 };

inline size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }
DType dtype_from_name(std::string_view name);

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail);

// ---------------------------------------------------------------------------
// Hashing (FNV-1a). Used for config hashes and parameter checksums; not a
// cryptographic hash.
// ---------------------------------------------------------------------------
constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr uint64_t kFnvPrime = 0x100000001b3ull;

inline uint64_t fnv1a64(std::span<const std::byte> bytes, uint64_t h = kFnvOffset) {
  for (std::byte b : bytes) {
    h ^= static_cast<uint64_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
  return fnv1a64(std::as_bytes(std::span(s.data(), s.size())), h);
}

// ---------------------------------------------------------------------------
// RNG. All randomness in a run flows from one root seed; independent
// consumers (init, shuffling, augmentation, ...) get their own stream so that
// toggling one feature does not shift the draws of another.
// ---------------------------------------------------------------------------
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Derived stream: deterministic function of (seed, tag).
  static Rng stream(uint64_t seed, std::string_view tag) {
    return Rng(splitmix64(seed ^ fnv1a64(tag)));
  }

  std::mt19937_64& engine() { return eng_; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }
  bool coin() { return uniform_int(0, 1) == 1; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), eng_);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace dfa
