#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "cmt/tensor.hpp"

namespace cmt {

/// Seeded generator whose streams are identical across standard libraries:
/// only the engine (fully specified by the standard) comes from <random>; the
/// distributions are written out here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  Index below(Index n) { return static_cast<Index>(uniform() * static_cast<double>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// N(0, std^2) resampled until |x| <= bound * std.
  double trunc_normal(double std, double bound = 2.0) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= bound) return z * std;
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename Scalar>
Tensor<Scalar> random_normal(Shape shape, Rng& rng, double std = 1.0) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.normal() * std);
  return t;
}

template <typename Scalar>
Tensor<Scalar> random_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

template <typename Scalar>
Tensor<Scalar> trunc_normal(Shape shape, Rng& rng, double std) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.trunc_normal(std));
  return t;
}

}  // namespace cmt
