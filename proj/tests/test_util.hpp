#ifndef RESNEST_TEST_UTIL_HPP
#define RESNEST_TEST_UTIL_HPP

#include "resnest/gradcheck.hpp"
#include "resnest/ops.hpp"
#include "resnest/rng.hpp"

#include <functional>

namespace testing_util {

using resnest::Index;
using resnest::Rng;
using resnest::Shape;
using resnest::Tensor;

inline Tensor<double> randn(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline Index draw(Rng& rng, Index lo, Index hi) {  // inclusive
  return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

/// Direct-summation grouped cross-correlation; `macs` counts inner-loop
/// multiply-accumulates.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w,
                                 const Tensor<double>* bias, Index stride, Index pad, Index groups,
                                 Index* macs = nullptr) {
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), cin_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (wd + 2 * pad - kw) / stride + 1;
  const Index cout_g = cout / groups;
  (void)cin;
  Tensor<double> y({n, cout, ho, wo});
  Index count = 0;
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < cout; ++o)
      for (Index i = 0; i < ho; ++i)
        for (Index j = 0; j < wo; ++j) {
          double s = bias ? (*bias)[o] : 0.0;
          const Index g = o / cout_g;
          for (Index c = 0; c < cin_g; ++c)
            for (Index a = 0; a < kh; ++a)
              for (Index e = 0; e < kw; ++e) {
                ++count;
                const Index r = i * stride - pad + a;
                const Index q = j * stride - pad + e;
                if (r < 0 || r >= h || q < 0 || q >= wd) continue;
                s += x(b, g * cin_g + c, r, q) * w(o, c, a, e);
              }
          y(b, o, i, j) = s;
        }
  if (macs) *macs = count;
  return y;
}

/// Central-difference derivative of f with respect to every element of t.
inline Tensor<double> numeric_grad(Tensor<double>& t, const std::function<double()>& f,
                                   double h = 1e-6) {
  Tensor<double> g(t.shape());
  for (Index i = 0; i < t.size(); ++i) {
    const double saved = t[i];
    t[i] = saved + h;
    const double up = f();
    t[i] = saved - h;
    const double down = f();
    t[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double max_rel_error(const Tensor<double>& analytic, const Tensor<double>& numeric) {
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, resnest::relative_error(analytic[i], numeric[i]));
  }
  return worst;
}

}  // namespace testing_util

#endif  // RESNEST_TEST_UTIL_HPP
