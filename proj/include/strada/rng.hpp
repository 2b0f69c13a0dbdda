#pragma once

// Counter-based random streams. A stream is keyed by (seed, stream id); its
// n-th output depends only on the key and n, so streams never interfere with
// each other no matter how draws are interleaved across threads.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

#include "strada/tensor.hpp"

namespace strada {

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed),
        stream_(stream),
        key_(detail::mix64(seed ^ detail::mix64(stream + 0x632BE59BD9B4E019ULL))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t position() const noexcept { return counter_; }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64() {
    ++counter_;
    const std::uint64_t x = key_ + counter_ * 0x9E3779B97F4A7C15ULL;
    return detail::mix64(x ^ (key_ >> 32 | key_ << 32));
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InputError("RngStream::below: empty range");
    // Lemire's multiply-shift with rejection for exact uniformity.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
      if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  // Marsaglia polar method; the spare value is kept in the stream.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  // Gamma(shape, 1) by Marsaglia-Tsang; shapes below 1 use the U^(1/a) boost.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw InputError("RngStream::gamma: shape must be positive");
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      double u;
      do u = uniform();
      while (u == 0.0);
      return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double chi_square(double dof) { return 2.0 * gamma(0.5 * dof); }

  // Standard normal truncated to [-limit, limit] by rejection.
  double truncated_normal(double limit) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= limit) return z;
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename T>
Tensor<T> standard_normal(RngStream& stream, Shape shape) {
  Tensor<T> out(std::move(shape));
  for (auto& x : out.data()) x = static_cast<T>(stream.normal());
  return out;
}

template <typename T>
Tensor<T> uniform(RngStream& stream, Shape shape) {
  Tensor<T> out(std::move(shape));
  for (auto& x : out.data()) x = static_cast<T>(stream.uniform());
  return out;
}

}  // namespace strada
