#ifndef RESNEST_RNG_HPP
#define RESNEST_RNG_HPP

#include <array>
#include <cstdint>

namespace resnest {

/// Deterministic generator: xoshiro256** seeded through splitmix64.
///
/// The stream depends only on (seed, stream) and integer arithmetic, so it is
/// identical on every platform. Derived floating-point draws (normal, gamma)
/// go through libm and are reproducible per platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in (0, 1); never returns 0, safe for logarithms.
  double uniform_open();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  bool bernoulli(double p) { return uniform() < p; }
  double normal();  // Box-Muller, one value per call

  /// log of a Gamma(shape, 1) draw (Marsaglia-Tsang, with the
  /// U^(1/shape) boost for shape < 1 applied in log space).
  double log_gamma_variate(double shape);

  /// Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
  double beta(double a, double b);

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

}  // namespace resnest

#endif  // RESNEST_RNG_HPP
