#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace eaa {

// Error taxonomy. Everything thrown by the library derives from Error so the
// C wrapper can map exceptions onto status codes without losing the kind.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ValueError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Distinct load failures; callers are expected to tell these apart.
struct BadMagicError : IoError {
  using IoError::IoError;
};

struct TruncatedFileError : IoError {
  using IoError::IoError;
};

struct ChecksumError : IoError {
  using IoError::IoError;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// SplitMix64. Chosen because its output is a pure function of 64-bit integer
// arithmetic: streams are reproducible bit-for-bit across platforms, which the
// data generator and the shuffle order depend on.
struct SplitMix64 {
  std::uint64_t state;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 significant bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Irwin-Hall approximation of a standard normal: sum of 12 uniforms minus 6.
  // Bounded in [-6,6] and free of transcendentals, so it is exactly
  // reproducible everywhere IEEE doubles are.
  double gauss() {
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += next_double();
    return s - 6.0;
  }

  // Uniform index in [0,n). Modulo bias is irrelevant here; determinism is not.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }
};

}  // namespace eaa
