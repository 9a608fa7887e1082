#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace otmatch {

enum class ErrorKind {
  NonFinite,
  DimensionMismatch,
  NonPSD,
  MassOutOfRange,
  RatioOutOfRange,
  IoError,
  FormatError,
  LengthMismatch,
  VersionMismatch,
  CorruptChecksum,
  ZeroVector,
  InvalidArgument,
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NonPSD: return "NonPSD";
    case ErrorKind::MassOutOfRange: return "MassOutOfRange";
    case ErrorKind::RatioOutOfRange: return "RatioOutOfRange";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::CorruptChecksum: return "CorruptChecksum";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Deterministic RNG: mt19937_64 bit stream with hand-rolled Box-Muller
// gaussians. std::normal_distribution is implementation-defined, which would
// break fixed-seed reproducibility across standard libraries; this class
// yields identical streams on any conforming implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_step(); }

  // Uniform double in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_step() >> 11) * 0x1.0p-53;
  }

  // Uniform double in (0, 1], safe as a log() argument.
  double uniform_open() {
    return (static_cast<double>(engine_step() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased-enough integer in [0, n): 128-bit multiply-shift.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(engine_step()) * n) >> 64);
  }

  // Standard normal via Box-Muller with the usual cached second value.
  double gaussian() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    double u1 = uniform_open();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double angle = kTwoPi * u2;
    cached_ = r * std::sin(angle);
    has_cached_ = true;
    return r * std::cos(angle);
  }

  double gaussian(double mean, double stddev) {
    return mean + stddev * gaussian();
  }

  // Fills row-major (row by row, left to right) for a pinned draw order.
  void fill_gaussian(Eigen::Ref<Eigen::MatrixXd> m, double mean, double stddev) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = gaussian(mean, stddev);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t engine_step() { return engine_(); }

  std::mt19937_64 engine_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

inline void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) throw Error(kind, message);
}

}  // namespace otmatch
