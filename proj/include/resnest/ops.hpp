#ifndef RESNEST_OPS_HPP
#define RESNEST_OPS_HPP

#include "resnest/rng.hpp"
#include "resnest/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

namespace resnest {

// Forward and backward kernels. All kernels are pure functions of their
// arguments and accumulate in a fixed order, so results are bit-identical
// across calls.

struct ConvGeometry {
  Pair stride{1};
  Pair padding{0};
  Index groups = 1;
};

struct PoolGeometry {
  Pair kernel{1};
  Pair stride{1};
  Pair padding{0};
  bool count_includes_pad = true;
};

inline Index conv_out_extent(Index in, Index kernel, Index pad, Index stride,
                             const char* axis = "spatial") {
  const Index padded = in + 2 * pad;
  require(stride >= 1, std::string("stride must be >= 1 on ") + axis + " axis");
  require(kernel <= padded, std::string("kernel ") + std::to_string(kernel) +
                                " exceeds padded " + axis + " extent " + std::to_string(padded));
  return (padded - kernel) / stride + 1;
}

namespace detail {

struct ConvDims {
  Index n, cin, h, w, cout, kh, kw, ho, wo, groups, cin_g, cout_g;
  Index patch() const { return cin_g * kh * kw; }
  Index out_plane() const { return ho * wo; }
};

template <typename Scalar>
ConvDims conv_dims(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                   const ConvGeometry& g) {
  require(input.rank() == 4, "conv2d input must be rank 4 (N,C,H,W), got " +
                                 to_string(input.shape()));
  require(weight.rank() == 4, "conv2d weight must be rank 4 (Cout,Cin/g,kh,kw), got " +
                                  to_string(weight.shape()));
  require(g.groups >= 1, "conv2d groups must be >= 1");
  ConvDims d{};
  d.n = input.dim(0);
  d.cin = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.cout = weight.dim(0);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.groups = g.groups;
  require(d.cin % d.groups == 0, "conv2d input channels " + std::to_string(d.cin) +
                                     " not divisible by groups " + std::to_string(d.groups));
  require(d.cout % d.groups == 0, "conv2d output channels " + std::to_string(d.cout) +
                                      " not divisible by groups " + std::to_string(d.groups));
  d.cin_g = d.cin / d.groups;
  d.cout_g = d.cout / d.groups;
  require(weight.dim(1) == d.cin_g, "conv2d weight input-channel extent " +
                                        std::to_string(weight.dim(1)) + " != Cin/groups " +
                                        std::to_string(d.cin_g));
  d.ho = conv_out_extent(d.h, d.kh, g.padding.h, g.stride.h, "height");
  d.wo = conv_out_extent(d.w, d.kw, g.padding.w, g.stride.w, "width");
  return d;
}

template <typename Scalar>
bool is_pointwise(const ConvDims& d, const ConvGeometry& g) {
  return d.kh == 1 && d.kw == 1 && g.stride == Pair{1} && g.padding == Pair{0};
}

// Unfold one (sample, group) slice into a [cin_g*kh*kw, ho*wo] patch matrix.
template <typename Scalar>
void im2col(const Scalar* in, const ConvDims& d, const ConvGeometry& g,
            typename Tensor<Scalar>::RowMatrix& col) {
  col.resize(d.patch(), d.out_plane());
  for (Index c = 0; c < d.cin_g; ++c) {
    const Scalar* plane = in + c * d.h * d.w;
    for (Index ki = 0; ki < d.kh; ++ki) {
      for (Index kj = 0; kj < d.kw; ++kj) {
        Scalar* row = col.data() + ((c * d.kh + ki) * d.kw + kj) * d.out_plane();
        for (Index oh = 0; oh < d.ho; ++oh) {
          const Index ih = oh * g.stride.h - g.padding.h + ki;
          for (Index ow = 0; ow < d.wo; ++ow) {
            const Index iw = ow * g.stride.w - g.padding.w + kj;
            row[oh * d.wo + ow] =
                (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w) ? plane[ih * d.w + iw] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const typename Tensor<Scalar>::RowMatrix& col, const ConvDims& d,
            const ConvGeometry& g, Scalar* out) {
  for (Index c = 0; c < d.cin_g; ++c) {
    Scalar* plane = out + c * d.h * d.w;
    for (Index ki = 0; ki < d.kh; ++ki) {
      for (Index kj = 0; kj < d.kw; ++kj) {
        const Scalar* row = col.data() + ((c * d.kh + ki) * d.kw + kj) * d.out_plane();
        for (Index oh = 0; oh < d.ho; ++oh) {
          const Index ih = oh * g.stride.h - g.padding.h + ki;
          if (ih < 0 || ih >= d.h) continue;
          for (Index ow = 0; ow < d.wo; ++ow) {
            const Index iw = ow * g.stride.w - g.padding.w + kj;
            if (iw >= 0 && iw < d.w) plane[ih * d.w + iw] += row[oh * d.wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Grouped 2-D cross-correlation (no kernel flip) with zero padding.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const std::type_identity_t<Tensor<Scalar>>* bias,
                      const ConvGeometry& geometry) {
  const auto d = detail::conv_dims(input, weight, geometry);
  if (bias) {
    require(bias->size() == d.cout, "conv2d bias length " + std::to_string(bias->size()) +
                                        " != output channels " + std::to_string(d.cout));
  }
  Tensor<Scalar> out({d.n, d.cout, d.ho, d.wo});
  const auto w = weight.matrix(d.cout, d.patch());
  typename Tensor<Scalar>::RowMatrix col;
  const bool pointwise = detail::is_pointwise<Scalar>(d, geometry);
  for (Index n = 0; n < d.n; ++n) {
    for (Index grp = 0; grp < d.groups; ++grp) {
      const Index in_offset = (n * d.cin + grp * d.cin_g) * d.h * d.w;
      auto out_block =
          out.matrix(d.cout_g, d.out_plane(), (n * d.cout + grp * d.cout_g) * d.out_plane());
      const auto w_block = w.middleRows(grp * d.cout_g, d.cout_g);
      if (pointwise) {
        out_block.noalias() = w_block * input.matrix(d.cin_g, d.out_plane(), in_offset);
      } else {
        detail::im2col(input.data() + in_offset, d, geometry, col);
        out_block.noalias() = w_block * col;
      }
      if (bias) {
        for (Index o = 0; o < d.cout_g; ++o) out_block.row(o).array() += (*bias)[grp * d.cout_g + o];
      }
    }
  }
  return out;
}

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;  // empty when no bias was requested
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                  const ConvGeometry& geometry, const Tensor<Scalar>& grad_out,
                                  bool with_bias = false) {
  const auto d = detail::conv_dims(input, weight, geometry);
  require(grad_out.shape() == Shape{d.n, d.cout, d.ho, d.wo},
          "conv2d_backward grad shape " + to_string(grad_out.shape()) + " does not match output");
  ConvGrads<Scalar> grads{Tensor<Scalar>(input.shape()), Tensor<Scalar>(weight.shape()), {}};
  if (with_bias) grads.bias = Tensor<Scalar>({d.cout});
  const auto w = weight.matrix(d.cout, d.patch());
  auto dw = grads.weight.matrix(d.cout, d.patch());
  typename Tensor<Scalar>::RowMatrix col;
  typename Tensor<Scalar>::RowMatrix dcol;
  const bool pointwise = detail::is_pointwise<Scalar>(d, geometry);
  for (Index n = 0; n < d.n; ++n) {
    for (Index grp = 0; grp < d.groups; ++grp) {
      const Index in_offset = (n * d.cin + grp * d.cin_g) * d.h * d.w;
      const auto dy =
          grad_out.matrix(d.cout_g, d.out_plane(), (n * d.cout + grp * d.cout_g) * d.out_plane());
      const auto w_block = w.middleRows(grp * d.cout_g, d.cout_g);
      if (pointwise) {
        dw.middleRows(grp * d.cout_g, d.cout_g).noalias() +=
            dy * input.matrix(d.cin_g, d.out_plane(), in_offset).transpose();
        grads.input.matrix(d.cin_g, d.out_plane(), in_offset).noalias() +=
            w_block.transpose() * dy;
      } else {
        detail::im2col(input.data() + in_offset, d, geometry, col);
        dw.middleRows(grp * d.cout_g, d.cout_g).noalias() += dy * col.transpose();
        dcol.noalias() = w_block.transpose() * dy;
        detail::col2im(dcol, d, geometry, grads.input.data() + in_offset);
      }
      if (with_bias) {
        for (Index o = 0; o < d.cout_g; ++o) grads.bias[grp * d.cout_g + o] += dy.row(o).sum();
      }
    }
  }
  return grads;
}

namespace detail {

struct PoolDims {
  Index n, c, h, w, ho, wo;
};

template <typename Scalar>
PoolDims pool_dims(const Tensor<Scalar>& input, const PoolGeometry& g) {
  require(input.rank() == 4, "pooling input must be rank 4, got " + to_string(input.shape()));
  PoolDims d{input.dim(0), input.dim(1), input.dim(2), input.dim(3), 0, 0};
  d.ho = conv_out_extent(d.h, g.kernel.h, g.padding.h, g.stride.h, "height");
  d.wo = conv_out_extent(d.w, g.kernel.w, g.padding.w, g.stride.w, "width");
  return d;
}

// Visit every (input index, output index, divisor) triple of an average pool.
template <typename F>
void for_each_avg_window(const PoolDims& d, const PoolGeometry& g, F&& visit) {
  for (Index plane = 0; plane < d.n * d.c; ++plane) {
    for (Index oh = 0; oh < d.ho; ++oh) {
      const Index h0 = oh * g.stride.h - g.padding.h;
      const Index hs = std::max<Index>(h0, 0);
      const Index he = std::min<Index>(h0 + g.kernel.h, d.h);
      for (Index ow = 0; ow < d.wo; ++ow) {
        const Index w0 = ow * g.stride.w - g.padding.w;
        const Index ws = std::max<Index>(w0, 0);
        const Index we = std::min<Index>(w0 + g.kernel.w, d.w);
        const Index count = g.count_includes_pad ? g.kernel.h * g.kernel.w : (he - hs) * (we - ws);
        const Index out_index = (plane * d.ho + oh) * d.wo + ow;
        for (Index ih = hs; ih < he; ++ih) {
          for (Index iw = ws; iw < we; ++iw) {
            visit((plane * d.h + ih) * d.w + iw, out_index, count);
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& input, const PoolGeometry& geometry) {
  const auto d = detail::pool_dims(input, geometry);
  Tensor<Scalar> out({d.n, d.c, d.ho, d.wo});
  detail::for_each_avg_window(d, geometry, [&](Index in, Index o, Index count) {
    out[o] += input[in] / static_cast<Scalar>(count);
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> avg_pool2d_backward(const Shape& input_shape, const PoolGeometry& geometry,
                                   const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> grad_in(input_shape);
  const auto d = detail::pool_dims(grad_in, geometry);
  detail::for_each_avg_window(d, geometry, [&](Index in, Index o, Index count) {
    grad_in[in] += grad_out[o] / static_cast<Scalar>(count);
  });
  return grad_in;
}

template <typename Scalar>
struct MaxPoolResult {
  Tensor<Scalar> output;
  std::vector<Index> argmax;  // flat input index per output element
};

template <typename Scalar>
MaxPoolResult<Scalar> max_pool2d(const Tensor<Scalar>& input, const PoolGeometry& geometry) {
  const auto d = detail::pool_dims(input, geometry);
  MaxPoolResult<Scalar> result{Tensor<Scalar>({d.n, d.c, d.ho, d.wo}), {}};
  result.argmax.assign(static_cast<std::size_t>(result.output.size()), -1);
  result.output.fill(-std::numeric_limits<Scalar>::infinity());
  // Strict '>' keeps the first maximum in scan order.
  detail::for_each_avg_window(d, PoolGeometry{geometry.kernel, geometry.stride, geometry.padding, true},
                              [&](Index in, Index o, Index) {
                                if (input[in] > result.output[o]) {
                                  result.output[o] = input[in];
                                  result.argmax[static_cast<std::size_t>(o)] = in;
                                }
                              });
  return result;
}

template <typename Scalar>
Tensor<Scalar> max_pool2d_backward(const Shape& input_shape, const std::vector<Index>& argmax,
                                   const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> grad_in(input_shape);
  for (Index o = 0; o < grad_out.size(); ++o) grad_in[argmax[static_cast<std::size_t>(o)]] += grad_out[o];
  return grad_in;
}

/// Mean over H and W: [N,C,H,W] -> [N,C].
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
  require(input.rank() == 4, "global_avg_pool input must be rank 4, got " +
                                 to_string(input.shape()));
  const Index planes = input.dim(0) * input.dim(1);
  const Index area = input.dim(2) * input.dim(3);
  Tensor<Scalar> out({input.dim(0), input.dim(1)});
  out.vec() = input.matrix(planes, area).rowwise().sum() / static_cast<Scalar>(area);
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& input_shape, const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> grad_in(input_shape);
  const Index planes = input_shape[0] * input_shape[1];
  const Index area = input_shape[2] * input_shape[3];
  auto g = grad_in.matrix(planes, area);
  for (Index p = 0; p < planes; ++p) g.row(p).setConstant(grad_out[p] / static_cast<Scalar>(area));
  return grad_in;
}

namespace detail {

template <typename Scalar>
using StridedMap = Eigen::Map<typename Tensor<Scalar>::RowMatrix, 0, Eigen::OuterStride<>>;
template <typename Scalar>
using ConstStridedMap =
    Eigen::Map<const typename Tensor<Scalar>::RowMatrix, 0, Eigen::OuterStride<>>;

struct FcDims {
  Index n, f, o, groups, f_g, o_g;
};

template <typename Scalar>
FcDims fc_dims(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, Index groups) {
  require(input.rank() == 2, "fully_connected input must be rank 2 (N,F), got " +
                                 to_string(input.shape()));
  require(weight.rank() == 2, "fully_connected weight must be rank 2 (O,F/g), got " +
                                  to_string(weight.shape()));
  require(groups >= 1, "fully_connected groups must be >= 1");
  FcDims d{input.dim(0), input.dim(1), weight.dim(0), groups, 0, 0};
  require(d.f % groups == 0, "fully_connected input features " + std::to_string(d.f) +
                                 " not divisible by groups " + std::to_string(groups));
  require(d.o % groups == 0, "fully_connected output features " + std::to_string(d.o) +
                                 " not divisible by groups " + std::to_string(groups));
  d.f_g = d.f / groups;
  d.o_g = d.o / groups;
  require(weight.dim(1) == d.f_g, "fully_connected weight input extent " +
                                      std::to_string(weight.dim(1)) + " != F/groups " +
                                      std::to_string(d.f_g));
  return d;
}

}  // namespace detail

/// Grouped affine map: output group i reads only input group i.
template <typename Scalar>
Tensor<Scalar> fully_connected(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                               const std::type_identity_t<Tensor<Scalar>>* bias,
                               Index groups = 1) {
  const auto d = detail::fc_dims(input, weight, groups);
  if (bias) {
    require(bias->size() == d.o, "fully_connected bias length " + std::to_string(bias->size()) +
                                     " != output features " + std::to_string(d.o));
  }
  Tensor<Scalar> out({d.n, d.o});
  const auto w = weight.matrix(d.o, d.f_g);
  for (Index grp = 0; grp < groups; ++grp) {
    detail::ConstStridedMap<Scalar> x(input.data() + grp * d.f_g, d.n, d.f_g,
                                      Eigen::OuterStride<>(d.f));
    detail::StridedMap<Scalar> y(out.data() + grp * d.o_g, d.n, d.o_g, Eigen::OuterStride<>(d.o));
    y.noalias() = x * w.middleRows(grp * d.o_g, d.o_g).transpose();
  }
  if (bias) {
    for (Index n = 0; n < d.n; ++n) out.matrix(1, d.o, n * d.o) += bias->vec().transpose();
  }
  return out;
}

template <typename Scalar>
struct FcGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

template <typename Scalar>
FcGrads<Scalar> fully_connected_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                         const Tensor<Scalar>& grad_out, Index groups = 1,
                                         bool with_bias = false) {
  const auto d = detail::fc_dims(input, weight, groups);
  require(grad_out.shape() == Shape{d.n, d.o}, "fully_connected_backward grad shape mismatch");
  FcGrads<Scalar> grads{Tensor<Scalar>(input.shape()), Tensor<Scalar>(weight.shape()), {}};
  const auto w = weight.matrix(d.o, d.f_g);
  auto dw = grads.weight.matrix(d.o, d.f_g);
  for (Index grp = 0; grp < groups; ++grp) {
    detail::ConstStridedMap<Scalar> x(input.data() + grp * d.f_g, d.n, d.f_g,
                                      Eigen::OuterStride<>(d.f));
    detail::ConstStridedMap<Scalar> dy(grad_out.data() + grp * d.o_g, d.n, d.o_g,
                                       Eigen::OuterStride<>(d.o));
    detail::StridedMap<Scalar> dx(grads.input.data() + grp * d.f_g, d.n, d.f_g,
                                  Eigen::OuterStride<>(d.f));
    dw.middleRows(grp * d.o_g, d.o_g).noalias() = dy.transpose() * x;
    dx.noalias() = dy * w.middleRows(grp * d.o_g, d.o_g);
  }
  if (with_bias) {
    grads.bias = Tensor<Scalar>({d.o});
    grads.bias.vec() = grad_out.matrix(d.n, d.o).colwise().sum().transpose();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization over axis 1 of a rank-2 or rank-4 tensor.

template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;  // x-hat
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
  bool batch_statistics = true;
};

template <typename Scalar>
struct BatchNormResult {
  Tensor<Scalar> output;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> variance;  // biased
  BatchNormCache<Scalar> cache;
};

namespace detail {

template <typename Scalar>
void bn_check(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta) {
  require(input.rank() == 2 || input.rank() == 4,
          "batch_norm input must be rank 2 or 4, got " + to_string(input.shape()));
  require(gamma.size() == input.dim(1) && beta.size() == input.dim(1),
          "batch_norm scale/shift length must equal channel count " + std::to_string(input.dim(1)));
}

template <typename Scalar>
Index bn_inner(const Tensor<Scalar>& t) {
  return t.rank() == 4 ? t.dim(2) * t.dim(3) : 1;
}

}  // namespace detail

template <typename Scalar>
BatchNormResult<Scalar> batch_norm_train(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                                         const Tensor<Scalar>& beta, Scalar epsilon) {
  detail::bn_check(input, gamma, beta);
  const Index n = input.dim(0);
  const Index c = input.dim(1);
  const Index inner = detail::bn_inner(input);
  const auto count = static_cast<Scalar>(n * inner);
  BatchNormResult<Scalar> r;
  r.mean.setZero(c);
  r.variance.setZero(c);
  const auto x = input.matrix(n * c, inner);
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) r.mean[ch] += x.row(s * c + ch).sum();
  }
  r.mean /= count;
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      r.variance[ch] += (x.row(s * c + ch).array() - r.mean[ch]).square().sum();
    }
  }
  r.variance /= count;
  r.cache.inv_std = (r.variance.array() + epsilon).rsqrt().matrix();
  r.cache.normalized = Tensor<Scalar>(input.shape());
  r.output = Tensor<Scalar>(input.shape());
  auto xh = r.cache.normalized.matrix(n * c, inner);
  auto y = r.output.matrix(n * c, inner);
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index row = s * c + ch;
      xh.row(row) = (x.row(row).array() - r.mean[ch]) * r.cache.inv_std[ch];
      y.row(row) = xh.row(row).array() * gamma[ch] + beta[ch];
    }
  }
  return r;
}

/// Eval mode: normalize with running statistics.
template <typename Scalar>
BatchNormResult<Scalar> batch_norm_eval(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                                        const Tensor<Scalar>& beta,
                                        const Tensor<Scalar>& running_mean,
                                        const Tensor<Scalar>& running_var, Scalar epsilon) {
  detail::bn_check(input, gamma, beta);
  const Index n = input.dim(0);
  const Index c = input.dim(1);
  const Index inner = detail::bn_inner(input);
  BatchNormResult<Scalar> r;
  r.mean = running_mean.vec();
  r.variance = running_var.vec();
  r.cache.batch_statistics = false;
  r.cache.inv_std = (running_var.vec().array() + epsilon).rsqrt().matrix();
  r.cache.normalized = Tensor<Scalar>(input.shape());
  r.output = Tensor<Scalar>(input.shape());
  const auto x = input.matrix(n * c, inner);
  auto xh = r.cache.normalized.matrix(n * c, inner);
  auto y = r.output.matrix(n * c, inner);
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index row = s * c + ch;
      xh.row(row) = (x.row(row).array() - running_mean[ch]) * r.cache.inv_std[ch];
      y.row(row) = xh.row(row).array() * gamma[ch] + beta[ch];
    }
  }
  return r;
}

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const BatchNormCache<Scalar>& cache,
                                           const Tensor<Scalar>& gamma,
                                           const Tensor<Scalar>& grad_out) {
  const Tensor<Scalar>& xhat = cache.normalized;
  require(grad_out.shape() == xhat.shape(), "batch_norm_backward grad shape mismatch");
  const Index n = xhat.dim(0);
  const Index c = xhat.dim(1);
  const Index inner = detail::bn_inner(xhat);
  BatchNormGrads<Scalar> g{Tensor<Scalar>(xhat.shape()), Tensor<Scalar>({c}), Tensor<Scalar>({c})};
  const auto dy = grad_out.matrix(n * c, inner);
  const auto xh = xhat.matrix(n * c, inner);
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index row = s * c + ch;
      g.beta[ch] += dy.row(row).sum();
      g.gamma[ch] += dy.row(row).dot(xh.row(row));
    }
  }
  auto dx = g.input.matrix(n * c, inner);
  const auto count = static_cast<Scalar>(n * inner);
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index row = s * c + ch;
      const Scalar scale = gamma[ch] * cache.inv_std[ch];
      if (cache.batch_statistics) {
        dx.row(row) = scale / count *
                      (count * dy.row(row).array() - g.beta[ch] - xh.row(row).array() * g.gamma[ch]);
      } else {
        dx.row(row) = scale * dy.row(row);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations.

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  out.vec() = input.vec().cwiseMax(Scalar(0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g(input.shape());
  g.vec() = (input.vec().array() > Scalar(0)).select(grad_out.vec(), Scalar(0));
  return g;
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  // Branches avoid exp overflow for large |z|.
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  out.vec() = input.vec().unaryExpr([](Scalar z) { return sigmoid(z); });
  return out;
}

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& output, const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g(output.shape());
  g.vec() = (grad_out.vec().array() * output.vec().array() * (Scalar(1) - output.vec().array()))
                .matrix();
  return g;
}

namespace detail {

struct AxisDims {
  Index outer, length, inner;
};

inline AxisDims axis_dims(const Shape& shape, Index axis) {
  require(axis >= 0 && axis < static_cast<Index>(shape.size()),
          "softmax axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  AxisDims d{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) d.outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) {
    d.inner *= shape[static_cast<std::size_t>(i)];
  }
  return d;
}

}  // namespace detail

/// Max-subtracted softmax along `axis`.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& input, Index axis) {
  const auto d = detail::axis_dims(input.shape(), axis);
  Tensor<Scalar> out(input.shape());
  for (Index o = 0; o < d.outer; ++o) {
    for (Index i = 0; i < d.inner; ++i) {
      const Index base = o * d.length * d.inner + i;
      Scalar peak = input[base];
      for (Index l = 1; l < d.length; ++l) peak = std::max(peak, input[base + l * d.inner]);
      Scalar total = 0;
      for (Index l = 0; l < d.length; ++l) {
        const Scalar e = std::exp(input[base + l * d.inner] - peak);
        out[base + l * d.inner] = e;
        total += e;
      }
      for (Index l = 0; l < d.length; ++l) out[base + l * d.inner] /= total;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_backward(const Tensor<Scalar>& output, const Tensor<Scalar>& grad_out,
                                Index axis) {
  const auto d = detail::axis_dims(output.shape(), axis);
  Tensor<Scalar> g(output.shape());
  for (Index o = 0; o < d.outer; ++o) {
    for (Index i = 0; i < d.inner; ++i) {
      const Index base = o * d.length * d.inner + i;
      Scalar dot = 0;
      for (Index l = 0; l < d.length; ++l) {
        dot += output[base + l * d.inner] * grad_out[base + l * d.inner];
      }
      for (Index l = 0; l < d.length; ++l) {
        const Index k = base + l * d.inner;
        g[k] = output[k] * (grad_out[k] - dot);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Inverted dropout.

template <typename Scalar>
struct DropoutResult {
  Tensor<Scalar> output;
  Tensor<Scalar> mask;  // 0 or 1/(1-p); multiply the upstream gradient by it
};

template <typename Scalar>
DropoutResult<Scalar> dropout(const Tensor<Scalar>& input, double p, Rng& rng, Mode mode) {
  require(p >= 0.0 && p < 1.0, "dropout probability must be in [0, 1), got " + std::to_string(p));
  DropoutResult<Scalar> r{input, Tensor<Scalar>(input.shape(), Scalar(1))};
  if (mode == Mode::eval || p == 0.0) return r;
  const auto keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
  for (Index i = 0; i < input.size(); ++i) {
    r.mask[i] = rng.bernoulli(p) ? Scalar(0) : keep_scale;
  }
  r.output.vec().array() *= r.mask.vec().array();
  return r;
}

template <typename Scalar>
Tensor<Scalar> multiply(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(a.shape() == b.shape(), "elementwise multiply shape mismatch");
  Tensor<Scalar> out(a.shape());
  out.vec() = a.vec().cwiseProduct(b.vec());
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tensor<Scalar> out = a;
  out += b;
  return out;
}

}  // namespace resnest

#endif  // RESNEST_OPS_HPP
