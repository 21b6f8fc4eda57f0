#ifndef RESNEST_GRADCHECK_HPP
#define RESNEST_GRADCHECK_HPP

#include "resnest/layers.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace resnest {

/// |a - n| / max(1e-8, |a| + |n|)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct GradCheckEntry {
  std::string name;
  Index checked = 0;
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

/// Compares analytic gradients against central differences.
///
/// `loss` evaluates the scalar objective at the current parameter values.
/// `analytic` must leave d(loss)/d(param) in every Parameter::grad. At most
/// `max_per_param` entries per tensor are probed (evenly strided); 0 means all.
template <typename Scalar>
GradCheckReport grad_check(const std::function<double()>& loss,
                           const std::function<void()>& analytic,
                           const std::vector<Parameter<Scalar>*>& params, double h = 1e-5,
                           double tolerance = 1e-6, Index max_per_param = 0) {
  require(h > 0.0, "grad_check step h must be positive");
  for (auto* p : params) p->zero_grad();
  analytic();
  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto* p : params) {
    GradCheckEntry entry;
    entry.name = p->name;
    const Index n = p->value.size();
    const Index step = (max_per_param > 0 && n > max_per_param) ? n / max_per_param : 1;
    for (Index i = 0; i < n; i += step) {
      const Scalar saved = p->value[i];
      p->value[i] = static_cast<Scalar>(saved + h);
      const double up = loss();
      p->value[i] = static_cast<Scalar>(saved - h);
      const double down = loss();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(p->grad[i]);
      const double err = relative_error(a, numeric);
      ++entry.checked;
      if (err > entry.max_rel_error || entry.worst_index < 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        entry.worst_index = i;
        entry.worst_analytic = a;
        entry.worst_numeric = numeric;
      }
    }
    entry.passed = entry.max_rel_error <= tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

/// Scalar objective <w, y> with a fixed random projection w; its gradient
/// with respect to y is w.
template <typename Scalar>
double project(const Tensor<Scalar>& y, const Tensor<Scalar>& w) {
  require(y.shape() == w.shape(), "projection shape mismatch");
  double s = 0.0;
  for (Index i = 0; i < y.size(); ++i) s += double(y[i]) * double(w[i]);
  return s;
}

}  // namespace resnest

#endif  // RESNEST_GRADCHECK_HPP
