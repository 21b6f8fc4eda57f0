#ifndef RESNEST_VERIFY_HPP
#define RESNEST_VERIFY_HPP

#include "resnest/splat.hpp"

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace resnest {

/// One numeric check: `value` is compared against `tolerance` (value <=
/// tolerance passes unless the check states otherwise in `detail`).
struct CheckResult {
  std::string suite;
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  /// Negates the first split weight in the cardinality-major path; the
  /// equivalence suite must then fail.
  bool inject_sign_flip = false;
};

const std::vector<std::string>& suite_names();  // equivalence .. loss, then all

/// Runs one suite or "all"; throws ConfigError for an unknown name.
std::vector<CheckResult> run_suite(const std::string& suite, const VerifyOptions& options = {});

std::vector<CheckResult> verify_equivalence(const VerifyOptions& options);
std::vector<CheckResult> verify_gradcheck(const VerifyOptions& options);
std::vector<CheckResult> verify_attention(const VerifyOptions& options);
std::vector<CheckResult> verify_schedule(const VerifyOptions& options);
std::vector<CheckResult> verify_loss(const VerifyOptions& options);

bool all_passed(const std::vector<CheckResult>& checks);
void print_checks(std::ostream& out, const std::vector<CheckResult>& checks);

/// Random values for every parameter and BN running statistic: weights
/// ~ N(0, scale^2 / fan_in), biases ~ N(0, 0.1), BN gamma in [0.5, 1.5],
/// beta ~ N(0, 0.1), running mean ~ N(0, 0.1), running variance in [0.5, 1.5].
template <typename Scalar>
void randomize_unit(SplatUnit<Scalar>& unit, Rng& rng, double scale = 1.0) {
  auto fill = [&](Tensor<Scalar>& t, auto draw) {
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(draw());
  };
  unit.for_each_parameter([&](Parameter<Scalar>& p) {
    const auto& n = p.name;
    if (n.size() >= 6 && n.compare(n.size() - 6, 6, ".gamma") == 0) {
      fill(p.value, [&] { return 0.5 + rng.uniform(); });
    } else if (n.size() >= 5 && n.compare(n.size() - 5, 5, ".beta") == 0) {
      fill(p.value, [&] { return 0.1 * rng.normal(); });
    } else if (p.value.rank() == 1) {
      fill(p.value, [&] { return 0.1 * rng.normal(); });
    } else {
      const double sigma = scale / std::sqrt(double(p.value.size() / p.value.dim(0)));
      fill(p.value, [&] { return sigma * rng.normal(); });
    }
  });
  unit.for_each_buffer([&](const std::string& name, Tensor<Scalar>& t) {
    if (name.size() >= 4 && name.compare(name.size() - 4, 4, "_var") == 0) {
      fill(t, [&] { return 0.5 + rng.uniform(); });
    } else {
      fill(t, [&] { return 0.1 * rng.normal(); });
    }
  });
}

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(scale * rng.normal());
  return t;
}

}  // namespace resnest

#endif  // RESNEST_VERIFY_HPP
