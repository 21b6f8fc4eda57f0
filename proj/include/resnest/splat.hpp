#ifndef RESNEST_SPLAT_HPP
#define RESNEST_SPLAT_HPP

#include "resnest/layers.hpp"

#include <string>
#include <vector>

namespace resnest {

/// Parametrizes one Split-Attention unit.
///
/// The unit maps in_channels -> channels (C). Internally it produces
/// G = K*R featuremap groups of C/K channels each, computed by a unified
/// 1x1 convolution (in_channels -> mid) and a 3x3 convolution with G groups
/// (mid -> C*R).
struct SplatConfig {
  Index in_channels = 0;
  Index channels = 0;
  Index radix = 2;
  Index cardinality = 1;
  /// Output width of the unified 1x1 convolution; 0 selects C*R, giving every
  /// group a private C/K-wide 1x1 transform. The network bottleneck uses C.
  Index mid_channels = 0;
  /// Width of the first attention FC; 0 selects the default rule
  /// max(min_inner_per_group*K, C*R/reduction) rounded up to a multiple of K.
  Index attention_inner = 0;
  Index reduction = 4;
  Index min_inner_per_group = 32;
  Index stride = 1;
  bool fast = false;  // average-downsample before (true) or after the 3x3 conv
  bool attention = true;
  bool attention_bn = true;

  Index groups() const { return radix * cardinality; }
  Index group_width() const { return channels / cardinality; }
  Index split_channels() const { return channels * radix; }
  Index mid() const { return mid_channels > 0 ? mid_channels : channels * radix; }
  Index inner() const {
    if (attention_inner > 0) return attention_inner;
    const Index wanted = std::max(min_inner_per_group * cardinality, channels * radix / reduction);
    return (wanted + cardinality - 1) / cardinality * cardinality;
  }

  void validate() const {
    require(in_channels >= 1, "splat: in_channels must be >= 1");
    require(channels >= 1, "splat: channels must be >= 1");
    require(radix >= 1, "splat: radix must be >= 1, got " + std::to_string(radix));
    require(cardinality >= 1, "splat: cardinality must be >= 1, got " + std::to_string(cardinality));
    require(stride >= 1, "splat: stride must be >= 1");
    require(channels % cardinality == 0, "splat: channels " + std::to_string(channels) +
                                             " not divisible by cardinality " +
                                             std::to_string(cardinality));
    require(mid() % groups() == 0, "splat: 1x1 width " + std::to_string(mid()) +
                                       " not divisible by radix*cardinality " +
                                       std::to_string(groups()));
    require(inner() % cardinality == 0, "splat: attention_inner " + std::to_string(inner()) +
                                            " not divisible by cardinality " +
                                            std::to_string(cardinality));
  }
};

enum class LayoutDirection { cardinality_to_radix, radix_to_cardinality };

/// 3x3 stride-s average pool used for downsampling inside the unit.
inline PoolGeometry splat_downsample(Index stride) {
  return PoolGeometry{Pair{3}, Pair{stride}, Pair{1}, false};
}

// ---------------------------------------------------------------------------
// Parameter-free pieces of the unit. U is in radix-major order: featuremap
// group g = radix_index * K + cardinal_index occupies channels
// [g*C/K, (g+1)*C/K). Split weights and logits are [N, K, R, C/K].

/// Sum of the R splits of every cardinal group: [N, C*R, H, W] -> [N, C, H, W].
template <typename Scalar>
Tensor<Scalar> cardinal_fuse(const Tensor<Scalar>& splits, Index radix, Index cardinality) {
  require(splits.rank() == 4, "cardinal_fuse expects a rank-4 tensor");
  require(splits.dim(1) % (radix * cardinality) == 0,
          "cardinal_fuse: channels " + std::to_string(splits.dim(1)) +
              " not divisible by radix*cardinality");
  const Index n = splits.dim(0);
  const Index channels = splits.dim(1) / radix;
  const Index area = splits.dim(2) * splits.dim(3);
  Tensor<Scalar> out({n, channels, splits.dim(2), splits.dim(3)});
  for (Index s = 0; s < n; ++s) {
    auto dst = out.matrix(channels, area, s * channels * area);
    for (Index r = 0; r < radix; ++r) {
      dst += splits.matrix(channels, area, (s * radix + r) * channels * area);
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> cardinal_fuse_backward(const Tensor<Scalar>& grad_fused, Index radix) {
  const Index n = grad_fused.dim(0);
  const Index channels = grad_fused.dim(1);
  const Index area = grad_fused.dim(2) * grad_fused.dim(3);
  Tensor<Scalar> grad({n, channels * radix, grad_fused.dim(2), grad_fused.dim(3)});
  for (Index s = 0; s < n; ++s) {
    for (Index r = 0; r < radix; ++r) {
      grad.matrix(channels, area, (s * radix + r) * channels * area) =
          grad_fused.matrix(channels, area, s * channels * area);
    }
  }
  return grad;
}

/// Per-channel global context s; the [N, C] result is K concatenated s^k.
template <typename Scalar>
Tensor<Scalar> channel_stats(const Tensor<Scalar>& fused) {
  return global_avg_pool(fused);
}

/// Softmax across the radix axis when R > 1, elementwise sigmoid when R = 1.
template <typename Scalar>
Tensor<Scalar> r_softmax(const Tensor<Scalar>& logits) {
  require(logits.rank() == 4, "r_softmax expects logits shaped [N, K, R, C/K]");
  return logits.dim(2) > 1 ? softmax(logits, 2) : sigmoid(logits);
}

template <typename Scalar>
Tensor<Scalar> r_softmax_backward(const Tensor<Scalar>& weights, const Tensor<Scalar>& grad_weights) {
  return weights.dim(2) > 1 ? softmax_backward(weights, grad_weights, 2)
                            : sigmoid_backward(weights, grad_weights);
}

/// V^k_c = sum_i a^k_i(c) * U_{split i of group k}, broadcast over space.
template <typename Scalar>
Tensor<Scalar> weighted_fuse(const Tensor<Scalar>& splits, const Tensor<Scalar>& weights) {
  require(weights.rank() == 4, "weighted_fuse expects weights shaped [N, K, R, C/K]");
  const Index n = weights.dim(0);
  const Index k_count = weights.dim(1);
  const Index radix = weights.dim(2);
  const Index width = weights.dim(3);
  const Index channels = k_count * width;
  require(splits.rank() == 4 && splits.dim(0) == n && splits.dim(1) == channels * radix,
          "weighted_fuse: splits " + to_string(splits.shape()) + " incompatible with weights " +
              to_string(weights.shape()));
  const Index area = splits.dim(2) * splits.dim(3);
  Tensor<Scalar> out({n, channels, splits.dim(2), splits.dim(3)});
  for (Index s = 0; s < n; ++s) {
    for (Index k = 0; k < k_count; ++k) {
      for (Index r = 0; r < radix; ++r) {
        for (Index c = 0; c < width; ++c) {
          const Scalar a = weights(s, k, r, c);
          const Index src = (s * channels * radix + (r * k_count + k) * width + c) * area;
          const Index dst = (s * channels + k * width + c) * area;
          out.matrix(1, area, dst) += a * splits.matrix(1, area, src);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
struct WeightedFuseGrads {
  Tensor<Scalar> splits;
  Tensor<Scalar> weights;
};

template <typename Scalar>
WeightedFuseGrads<Scalar> weighted_fuse_backward(const Tensor<Scalar>& splits,
                                                 const Tensor<Scalar>& weights,
                                                 const Tensor<Scalar>& grad_out) {
  const Index n = weights.dim(0);
  const Index k_count = weights.dim(1);
  const Index radix = weights.dim(2);
  const Index width = weights.dim(3);
  const Index channels = k_count * width;
  const Index area = splits.dim(2) * splits.dim(3);
  WeightedFuseGrads<Scalar> g{Tensor<Scalar>(splits.shape()), Tensor<Scalar>(weights.shape())};
  for (Index s = 0; s < n; ++s) {
    for (Index k = 0; k < k_count; ++k) {
      for (Index r = 0; r < radix; ++r) {
        for (Index c = 0; c < width; ++c) {
          const Index src = (s * channels * radix + (r * k_count + k) * width + c) * area;
          const Index dst = (s * channels + k * width + c) * area;
          const auto dy = grad_out.matrix(1, area, dst);
          g.splits.matrix(1, area, src) = weights(s, k, r, c) * dy;
          g.weights(s, k, r, c) = (dy.array() * splits.matrix(1, area, src).array()).sum();
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

/// One Split-Attention unit with its parameters and forward tape.
///
/// forward() is the radix-major implementation: one unified 1x1 conv, one
/// grouped 3x3 conv with K*R groups and grouped attention FCs (K groups).
template <typename Scalar>
class SplatUnit {
 public:
  SplatUnit() = default;
  SplatUnit(const std::string& name, const SplatConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    conv1_ = Conv2d<Scalar>(name + ".conv1", cfg.in_channels, cfg.mid(), Pair{1},
                            ConvGeometry{Pair{1}, Pair{0}, 1}, false, rng);
    bn1_ = BatchNorm<Scalar>(name + ".bn1", cfg.mid());
    conv2_ = Conv2d<Scalar>(name + ".conv2", cfg.mid(), cfg.split_channels(), Pair{3},
                            ConvGeometry{Pair{1}, Pair{1}, cfg.groups()}, false, rng);
    bn2_ = BatchNorm<Scalar>(name + ".bn2", cfg.split_channels());
    if (cfg.attention) {
      fc1_ = Linear<Scalar>(name + ".fc1", cfg.channels, cfg.inner(), cfg.cardinality,
                            !cfg.attention_bn, rng);
      if (cfg.attention_bn) fc_bn_ = BatchNorm<Scalar>(name + ".fc_bn", cfg.inner());
      fc2_ = Linear<Scalar>(name + ".fc2", cfg.inner(), cfg.split_channels(), cfg.cardinality,
                            true, rng);
    }
  }

  const SplatConfig& config() const { return cfg_; }

  /// The G featuremap groups U, radix-major: [N, C*R, H', W'].
  Tensor<Scalar> split_transform(const Tensor<Scalar>& x, Mode mode) {
    require(x.rank() == 4 && x.dim(1) == cfg_.in_channels,
            "splat: expected input with " + std::to_string(cfg_.in_channels) + " channels, got " +
                to_string(x.shape()));
    auto t = bn1_.forward(conv1_.forward(x), mode);
    relu1_in_ = t;
    t = relu(t);
    if (pools_before()) {
      pool1_in_shape_ = t.shape();
      t = avg_pool2d(t, splat_downsample(cfg_.stride));
    }
    t = bn2_.forward(conv2_.forward(t), mode);
    relu2_in_ = t;
    t = relu(t);
    if (pools_after()) {
      pool2_in_shape_ = t.shape();
      t = avg_pool2d(t, splat_downsample(cfg_.stride));
    }
    return t;
  }

  /// Split-Attention output V: [N, C, H', W'].
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    splits_ = split_transform(x, mode);
    auto fused = cardinal_fuse(splits_, cfg_.radix, cfg_.cardinality);
    if (!cfg_.attention) return fused;
    fused_shape_ = fused.shape();
    const auto stats = channel_stats(fused);
    auto h = fc1_.forward(stats);
    if (cfg_.attention_bn) h = fc_bn_.forward(h, mode);
    fc_relu_in_ = h;
    const auto logits = fc2_.forward(relu(h));
    weights_ = r_softmax(logits.reshaped(logit_shape(x.dim(0))));
    return weighted_fuse(splits_, weights_);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) {
    Tensor<Scalar> d_splits;
    if (cfg_.attention) {
      auto g = weighted_fuse_backward(splits_, weights_, grad_out);
      d_splits = std::move(g.splits);
      auto d_logits = r_softmax_backward(weights_, g.weights);
      auto dh = fc2_.backward(d_logits.reshaped({grad_out.dim(0), cfg_.split_channels()}));
      dh = relu_backward(fc_relu_in_, dh);
      if (cfg_.attention_bn) dh = fc_bn_.backward(dh);
      const auto d_stats = fc1_.backward(dh);
      d_splits += cardinal_fuse_backward(global_avg_pool_backward(fused_shape_, d_stats),
                                         cfg_.radix);
    } else {
      d_splits = cardinal_fuse_backward(grad_out, cfg_.radix);
    }
    auto d = std::move(d_splits);
    if (pools_after()) d = avg_pool2d_backward(pool2_in_shape_, splat_downsample(cfg_.stride), d);
    d = conv2_.backward(bn2_.backward(relu_backward(relu2_in_, d)));
    if (pools_before()) d = avg_pool2d_backward(pool1_in_shape_, splat_downsample(cfg_.stride), d);
    return conv1_.backward(bn1_.backward(relu_backward(relu1_in_, d)));
  }

  /// Split weights a from the most recent forward, [N, K, R, C/K].
  const Tensor<Scalar>& last_weights() const { return weights_; }

  Conv2d<Scalar>& conv1() { return conv1_; }
  BatchNorm<Scalar>& bn1() { return bn1_; }
  Conv2d<Scalar>& conv2() { return conv2_; }
  BatchNorm<Scalar>& bn2() { return bn2_; }
  Linear<Scalar>& fc1() { return fc1_; }
  BatchNorm<Scalar>& fc_bn() { return fc_bn_; }
  Linear<Scalar>& fc2() { return fc2_; }
  const Conv2d<Scalar>& conv1() const { return conv1_; }
  const BatchNorm<Scalar>& bn1() const { return bn1_; }
  const Conv2d<Scalar>& conv2() const { return conv2_; }
  const BatchNorm<Scalar>& bn2() const { return bn2_; }
  const Linear<Scalar>& fc1() const { return fc1_; }
  const BatchNorm<Scalar>& fc_bn() const { return fc_bn_; }
  const Linear<Scalar>& fc2() const { return fc2_; }

  template <typename F>
  void for_each_parameter(F&& f) {
    conv1_.for_each_parameter(f);
    bn1_.for_each_parameter(f);
    conv2_.for_each_parameter(f);
    bn2_.for_each_parameter(f);
    if (cfg_.attention) {
      fc1_.for_each_parameter(f);
      if (cfg_.attention_bn) fc_bn_.for_each_parameter(f);
      fc2_.for_each_parameter(f);
    }
  }

  template <typename F>
  void for_each_buffer(F&& f) {
    bn1_.for_each_buffer(f);
    bn2_.for_each_buffer(f);
    if (cfg_.attention && cfg_.attention_bn) fc_bn_.for_each_buffer(f);
  }

 private:
  bool pools_before() const { return cfg_.stride > 1 && cfg_.fast; }
  bool pools_after() const { return cfg_.stride > 1 && !cfg_.fast; }
  Shape logit_shape(Index n) const {
    return {n, cfg_.cardinality, cfg_.radix, cfg_.group_width()};
  }

  SplatConfig cfg_;
  Conv2d<Scalar> conv1_;
  BatchNorm<Scalar> bn1_;
  Conv2d<Scalar> conv2_;
  BatchNorm<Scalar> bn2_;
  Linear<Scalar> fc1_;
  BatchNorm<Scalar> fc_bn_;
  Linear<Scalar> fc2_;

  Tensor<Scalar> relu1_in_, relu2_in_, fc_relu_in_, splits_, weights_;
  Shape pool1_in_shape_, pool2_in_shape_, fused_shape_;
};

// ---------------------------------------------------------------------------
// Cardinality-major reference path.

namespace detail {

template <typename Scalar>
Tensor<Scalar> channel_slice(const Tensor<Scalar>& t, Index start, Index count) {
  Shape shape = t.shape();
  const Index outer = shape[0];
  const Index channels = shape[1];
  const Index inner = t.size() / (outer * channels);
  if (t.rank() == 1) {
    return Tensor<Scalar>({count}, t.vec().segment(start, count).eval());
  }
  shape[1] = count;
  Tensor<Scalar> out(shape);
  for (Index o = 0; o < outer; ++o) {
    out.matrix(count, inner, o * count * inner) =
        t.matrix(count, inner, (o * channels + start) * inner);
  }
  return out;
}

// Leading-axis row block of a weight tensor.
template <typename Scalar>
Tensor<Scalar> row_block(const Tensor<Scalar>& t, Index start, Index count) {
  Shape shape = t.shape();
  const Index row = t.size() / shape[0];
  shape[0] = count;
  return Tensor<Scalar>(shape, t.vec().segment(start * row, count * row).eval());
}

template <typename Scalar>
Tensor<Scalar> bn_apply(const Tensor<Scalar>& x, const BatchNorm<Scalar>& bn, Index start,
                        Index count, Mode mode) {
  const auto eps = static_cast<Scalar>(BatchNorm<Scalar>::kEpsilon);
  const auto gamma = channel_slice(bn.gamma().value, start, count);
  const auto beta = channel_slice(bn.beta().value, start, count);
  if (mode == Mode::train) return batch_norm_train(x, gamma, beta, eps).output;
  return batch_norm_eval(x, gamma, beta, channel_slice(bn.running_mean(), start, count),
                         channel_slice(bn.running_var(), start, count), eps)
      .output;
}

}  // namespace detail

/// Fault injection for mutation tests of the verification suite.
struct CardinalityMajorHooks {
  bool negate_first_split_weight = false;
};

/// Split-Attention forward with cardinality-major parameter layout: group
/// g = cardinal_index * R + radix_index. Every featuremap group is computed
/// by its own dense transform and every cardinal group by its own dense FC
/// pair. Train-mode BN uses batch statistics without touching running stats.
template <typename Scalar>
Tensor<Scalar> splat_forward_cardinality_major(const Tensor<Scalar>& x, const SplatUnit<Scalar>& unit,
                                               Mode mode, const CardinalityMajorHooks& hooks = {}) {
  using detail::bn_apply;
  using detail::channel_slice;
  using detail::row_block;
  const SplatConfig& cfg = unit.config();
  const Index radix = cfg.radix;
  const Index k_count = cfg.cardinality;
  const Index width = cfg.group_width();
  const Index mid_g = cfg.mid() / cfg.groups();
  const Index inner_g = cfg.inner() / k_count;
  const Index n = x.dim(0);

  std::vector<Tensor<Scalar>> per_group_v;
  for (Index k = 0; k < k_count; ++k) {
    std::vector<Tensor<Scalar>> splits;
    for (Index r = 0; r < radix; ++r) {
      const Index g = k * radix + r;
      auto t = conv2d(x, row_block(unit.conv1().weight().value, g * mid_g, mid_g), nullptr,
                      ConvGeometry{Pair{1}, Pair{0}, 1});
      t = relu(bn_apply(t, unit.bn1(), g * mid_g, mid_g, mode));
      if (cfg.stride > 1 && cfg.fast) t = avg_pool2d(t, splat_downsample(cfg.stride));
      t = conv2d(t, row_block(unit.conv2().weight().value, g * width, width), nullptr,
                 ConvGeometry{Pair{1}, Pair{1}, 1});
      t = relu(bn_apply(t, unit.bn2(), g * width, width, mode));
      if (cfg.stride > 1 && !cfg.fast) t = avg_pool2d(t, splat_downsample(cfg.stride));
      splits.push_back(std::move(t));
    }
    Tensor<Scalar> fused = splits[0];
    for (Index r = 1; r < radix; ++r) fused += splits[static_cast<std::size_t>(r)];
    if (!cfg.attention) {
      per_group_v.push_back(std::move(fused));
      continue;
    }

    const auto stats = global_avg_pool(fused);  // s^k, [N, C/K]
    const Parameter<Scalar>* fc1_bias = unit.fc1().bias();
    Tensor<Scalar> b1;
    if (fc1_bias) b1 = channel_slice(fc1_bias->value, k * inner_g, inner_g);
    auto h = fully_connected(stats, row_block(unit.fc1().weight().value, k * inner_g, inner_g),
                             fc1_bias ? &b1 : nullptr);
    if (cfg.attention_bn) h = bn_apply(h, unit.fc_bn(), k * inner_g, inner_g, mode);
    h = relu(h);
    const auto b2 = channel_slice(unit.fc2().bias()->value, k * radix * width, radix * width);
    const auto logits = fully_connected(
        h, row_block(unit.fc2().weight().value, k * radix * width, radix * width), &b2);

    // Explicit per-(sample, channel) r-softmax over the R logits.
    Tensor<Scalar> a({n, radix, width});
    for (Index s = 0; s < n; ++s) {
      for (Index c = 0; c < width; ++c) {
        if (radix == 1) {
          a[s * width + c] = sigmoid(logits(s, c));
          continue;
        }
        Scalar peak = logits(s, c);
        for (Index r = 1; r < radix; ++r) peak = std::max(peak, logits(s, r * width + c));
        Scalar total = 0;
        for (Index r = 0; r < radix; ++r) total += std::exp(logits(s, r * width + c) - peak);
        for (Index r = 0; r < radix; ++r) {
          a[(s * radix + r) * width + c] = std::exp(logits(s, r * width + c) - peak) / total;
        }
      }
    }

    Tensor<Scalar> v(fused.shape());
    const Index area = v.dim(2) * v.dim(3);
    for (Index s = 0; s < n; ++s) {
      for (Index r = 0; r < radix; ++r) {
        const auto& u = splits[static_cast<std::size_t>(r)];
        for (Index c = 0; c < width; ++c) {
          Scalar weight = a[(s * radix + r) * width + c];
          if (hooks.negate_first_split_weight && r == 0) weight = -weight;
          const Index off = (s * width + c) * area;
          v.matrix(1, area, off) += weight * u.matrix(1, area, off);
        }
      }
    }
    per_group_v.push_back(std::move(v));
  }

  // V = Concat{V^1, ..., V^K}
  const Index area = per_group_v[0].dim(2) * per_group_v[0].dim(3);
  Tensor<Scalar> out({n, cfg.channels, per_group_v[0].dim(2), per_group_v[0].dim(3)});
  for (Index s = 0; s < n; ++s) {
    for (Index k = 0; k < k_count; ++k) {
      out.matrix(width, area, (s * cfg.channels + k * width) * area) =
          per_group_v[static_cast<std::size_t>(k)].matrix(width, area, s * width * area);
    }
  }
  return out;
}

namespace detail {

// Reorder the G channel blocks of a leading-axis tensor between layouts.
template <typename Scalar>
void permute_blocks(Tensor<Scalar>& t, Index radix, Index k_count, LayoutDirection direction) {
  const Index groups = radix * k_count;
  const Index block = t.size() / groups;
  const Tensor<Scalar> src = t;
  for (Index k = 0; k < k_count; ++k) {
    for (Index r = 0; r < radix; ++r) {
      const Index radix_major = r * k_count + k;
      const Index card_major = k * radix + r;
      const bool to_radix = direction == LayoutDirection::cardinality_to_radix;
      const Index from = to_radix ? card_major : radix_major;
      const Index to = to_radix ? radix_major : card_major;
      t.vec().segment(to * block, block) = src.vec().segment(from * block, block);
    }
  }
}

template <typename Scalar>
void permute_parameter(Parameter<Scalar>& p, Index radix, Index k_count, LayoutDirection d) {
  permute_blocks(p.value, radix, k_count, d);
  permute_blocks(p.grad, radix, k_count, d);
}

template <typename Scalar>
void permute_bn(BatchNorm<Scalar>& bn, Index radix, Index k_count, LayoutDirection d) {
  permute_parameter(bn.gamma(), radix, k_count, d);
  permute_parameter(bn.beta(), radix, k_count, d);
  permute_blocks(bn.running_mean(), radix, k_count, d);
  permute_blocks(bn.running_var(), radix, k_count, d);
}

}  // namespace detail

/// Bijective reindexing of the featuremap-group blocks (1x1 filters, 3x3
/// filters and their BN channels) between cardinality-major and
/// radix-major order. Attention FCs are already per cardinal group and
/// ordered (k, i, c) in both layouts, so they are left untouched.
template <typename Scalar>
SplatUnit<Scalar> permute_params(const SplatUnit<Scalar>& unit, LayoutDirection direction) {
  SplatUnit<Scalar> out = unit;
  const Index radix = unit.config().radix;
  const Index k_count = unit.config().cardinality;
  detail::permute_parameter(out.conv1().weight(), radix, k_count, direction);
  detail::permute_bn(out.bn1(), radix, k_count, direction);
  detail::permute_parameter(out.conv2().weight(), radix, k_count, direction);
  detail::permute_bn(out.bn2(), radix, k_count, direction);
  return out;
}

}  // namespace resnest

#endif  // RESNEST_SPLAT_HPP
