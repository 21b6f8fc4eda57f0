#ifndef RESNEST_NETWORK_HPP
#define RESNEST_NETWORK_HPP

#include "resnest/layers.hpp"
#include "resnest/network_config.hpp"
#include "resnest/regularization.hpp"
#include "resnest/splat.hpp"

#include <functional>
#include <string>
#include <vector>

namespace resnest {

template <typename Scalar>
class Stem {
 public:
  Stem() = default;
  Stem(const NetworkConfig& cfg, Rng& rng) : deep_(cfg.deep_stem) {
    const Index w = cfg.stem_width;
    const Index in = cfg.input_channels;
    if (deep_) {
      conv_[0] = Conv2d<Scalar>("stem.conv1", in, w, Pair{3}, {Pair{2}, Pair{1}, 1}, false, rng);
      bn_[0] = BatchNorm<Scalar>("stem.bn1", w);
      conv_[1] = Conv2d<Scalar>("stem.conv2", w, w, Pair{3}, {Pair{1}, Pair{1}, 1}, false, rng);
      bn_[1] = BatchNorm<Scalar>("stem.bn2", w);
      conv_[2] = Conv2d<Scalar>("stem.conv3", w, 2 * w, Pair{3}, {Pair{1}, Pair{1}, 1}, false, rng);
      bn_[2] = BatchNorm<Scalar>("stem.bn3", 2 * w);
    } else {
      conv_[0] = Conv2d<Scalar>("stem.conv1", in, 2 * w, Pair{7}, {Pair{2}, Pair{3}, 1}, false, rng);
      bn_[0] = BatchNorm<Scalar>("stem.bn1", 2 * w);
    }
  }

  static PoolGeometry max_pool() { return PoolGeometry{Pair{3}, Pair{2}, Pair{1}, true}; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    Tensor<Scalar> t = x;
    for (int i = 0; i < layers(); ++i) {
      t = bn_[i].forward(conv_[i].forward(t), mode);
      relu_in_[i] = t;
      t = relu(t);
    }
    pool_in_shape_ = t.shape();
    auto pooled = max_pool2d(t, max_pool());
    argmax_ = std::move(pooled.argmax);
    return std::move(pooled.output);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    auto d = max_pool2d_backward(pool_in_shape_, argmax_, dy);
    for (int i = layers() - 1; i >= 0; --i) {
      d = conv_[i].backward(bn_[i].backward(relu_backward(relu_in_[i], d)));
    }
    return d;
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    for (int i = 0; i < layers(); ++i) {
      conv_[i].for_each_parameter(f);
      bn_[i].for_each_parameter(f);
    }
  }
  template <typename F>
  void for_each_buffer(F&& f) {
    for (int i = 0; i < layers(); ++i) bn_[i].for_each_buffer(f);
  }

 private:
  int layers() const { return deep_ ? 3 : 1; }

  bool deep_ = true;
  Conv2d<Scalar> conv_[3];
  BatchNorm<Scalar> bn_[3];
  Tensor<Scalar> relu_in_[3];
  Shape pool_in_shape_;
  std::vector<Index> argmax_;
};

/// 2x2 stride-2 average pool in front of the projection shortcut.
inline PoolGeometry shortcut_downsample() { return PoolGeometry{Pair{2}, Pair{2}, Pair{0}, false}; }

/// Bottleneck block: Y = ReLU(branch(X) + shortcut(X)).
///
/// radix >= 1: branch = Split-Attention unit (its unified 1x1 conv is the
/// block's 1x1 reduce) -> 1x1 expand -> BN. radix == 0: the ResNet-D
/// interior 1x1 -> 3x3 (stride, K groups) -> 1x1, each followed by BN.
template <typename Scalar>
class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(const BlockConfig& cfg, Rng& rng) : cfg_(cfg) {
    const std::string& n = cfg.name;
    const Index width = cfg.group_width();
    if (cfg.radix >= 1) {
      splat_ = SplatUnit<Scalar>(n + ".splat", cfg.splat(), rng);
    } else {
      conv1_ = Conv2d<Scalar>(n + ".conv1", cfg.in_channels, width, Pair{1}, {}, false, rng);
      bn1_ = BatchNorm<Scalar>(n + ".bn1", width);
      conv2_ = Conv2d<Scalar>(n + ".conv2", width, width, Pair{3},
                              {Pair{cfg.stride}, Pair{1}, cfg.cardinality}, false, rng);
      bn2_ = BatchNorm<Scalar>(n + ".bn2", width);
    }
    conv3_ = Conv2d<Scalar>(n + ".conv3", width, cfg.out_channels(), Pair{1}, {}, false, rng);
    bn3_ = BatchNorm<Scalar>(n + ".bn3", cfg.out_channels(),
                             cfg.zero_init_residual ? Scalar(0) : Scalar(1));
    if (cfg.has_shortcut_conv()) {
      const Index conv_stride = cfg.avg_down ? 1 : cfg.stride;
      down_conv_ = Conv2d<Scalar>(n + ".down.conv", cfg.in_channels, cfg.out_channels(), Pair{1},
                                  {Pair{conv_stride}, Pair{0}, 1}, false, rng);
      down_bn_ = BatchNorm<Scalar>(n + ".down.bn", cfg.out_channels());
    }
  }

  const BlockConfig& config() const { return cfg_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode, Rng* rng) {
    auto branch = bn3_.forward(conv3_.forward(interior_forward(x, mode)), mode);
    dropblock_mask_ = Tensor<Scalar>();
    if (cfg_.dropblock && mode == Mode::train) {
      require(rng != nullptr, cfg_.name + ": DropBlock in train mode needs an Rng");
      const Index size =
          fitted_block_size(cfg_.dropblock_size, branch.dim(2), branch.dim(3));
      dropblock_mask_ = dropblock_mask<Scalar>(branch.shape(), size, cfg_.dropblock_prob, *rng);
      branch = multiply(branch, dropblock_mask_);
    }
    auto sum = add(branch, shortcut_forward(x, mode));
    require(sum.shape() == branch.shape(), cfg_.name + ": residual and shortcut shapes differ");
    pre_relu_ = sum;
    return relu(sum);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    const auto d_sum = relu_backward(pre_relu_, dy);
    auto d_branch = dropblock_mask_.empty() ? d_sum : multiply(d_sum, dropblock_mask_);
    auto dx = interior_backward(conv3_.backward(bn3_.backward(d_branch)));
    dx += shortcut_backward(d_sum);
    return dx;
  }

  /// ReLU(shortcut(X)), the block's output when its branch is silent.
  Tensor<Scalar> shortcut_only(const Tensor<Scalar>& x, Mode mode) {
    return relu(shortcut_forward(x, mode));
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    if (cfg_.radix >= 1) {
      splat_.for_each_parameter(f);
    } else {
      conv1_.for_each_parameter(f);
      bn1_.for_each_parameter(f);
      conv2_.for_each_parameter(f);
      bn2_.for_each_parameter(f);
    }
    conv3_.for_each_parameter(f);
    bn3_.for_each_parameter(f);
    if (cfg_.has_shortcut_conv()) {
      down_conv_.for_each_parameter(f);
      down_bn_.for_each_parameter(f);
    }
  }

  template <typename F>
  void for_each_buffer(F&& f) {
    if (cfg_.radix >= 1) {
      splat_.for_each_buffer(f);
    } else {
      bn1_.for_each_buffer(f);
      bn2_.for_each_buffer(f);
    }
    bn3_.for_each_buffer(f);
    if (cfg_.has_shortcut_conv()) down_bn_.for_each_buffer(f);
  }

  SplatUnit<Scalar>& splat() { return splat_; }
  BatchNorm<Scalar>& final_bn() { return bn3_; }

 private:
  Tensor<Scalar> interior_forward(const Tensor<Scalar>& x, Mode mode) {
    if (cfg_.radix >= 1) return splat_.forward(x, mode);
    auto t = bn1_.forward(conv1_.forward(x), mode);
    relu1_in_ = t;
    t = bn2_.forward(conv2_.forward(relu(t)), mode);
    relu2_in_ = t;
    return relu(t);
  }

  Tensor<Scalar> interior_backward(const Tensor<Scalar>& dy) {
    if (cfg_.radix >= 1) return splat_.backward(dy);
    auto d = conv2_.backward(bn2_.backward(relu_backward(relu2_in_, dy)));
    return conv1_.backward(bn1_.backward(relu_backward(relu1_in_, d)));
  }

  bool pools_shortcut() const { return cfg_.has_shortcut_conv() && cfg_.avg_down && cfg_.stride > 1; }

  Tensor<Scalar> shortcut_forward(const Tensor<Scalar>& x, Mode mode) {
    if (!cfg_.has_shortcut_conv()) return x;
    Tensor<Scalar> t = x;
    if (pools_shortcut()) {
      shortcut_in_shape_ = t.shape();
      t = avg_pool2d(t, shortcut_downsample());
    }
    return down_bn_.forward(down_conv_.forward(t), mode);
  }

  Tensor<Scalar> shortcut_backward(const Tensor<Scalar>& dy) {
    if (!cfg_.has_shortcut_conv()) return dy;
    auto d = down_conv_.backward(down_bn_.backward(dy));
    if (pools_shortcut()) d = avg_pool2d_backward(shortcut_in_shape_, shortcut_downsample(), d);
    return d;
  }

  BlockConfig cfg_;
  SplatUnit<Scalar> splat_;
  Conv2d<Scalar> conv1_, conv2_, conv3_, down_conv_;
  BatchNorm<Scalar> bn1_, bn2_, bn3_, down_bn_;
  Tensor<Scalar> relu1_in_, relu2_in_, pre_relu_, dropblock_mask_;
  Shape shortcut_in_shape_;
};

/// Stem, four stages of bottlenecks, global pooling, optional dropout and a
/// dense classifier.
template <typename Scalar>
class Network {
 public:
  Network(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    stem_ = Stem<Scalar>(cfg, rng);
    for (const auto& block : plan_blocks(cfg)) blocks_.emplace_back(block, rng);
    const Index features = blocks_.back().config().out_channels();
    fc_ = Linear<Scalar>("fc", features, cfg.num_classes, 1, true, rng);
  }

  const NetworkConfig& config() const { return cfg_; }

  /// Logits [N, num_classes]. Train mode needs an Rng when dropout or
  /// DropBlock is active.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode, Rng* rng = nullptr) {
    check_input(x);
    auto t = stem_.forward(x, mode);
    for (auto& block : blocks_) t = block.forward(t, mode, rng);
    return head_forward(t, mode, rng);
  }

  /// Gradient w.r.t. the input; parameter gradients are accumulated.
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_logits) {
    auto d = fc_.backward(grad_logits);
    if (!dropout_mask_.empty()) d = multiply(d, dropout_mask_);
    d = global_avg_pool_backward(feature_shape_, d);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) d = it->backward(d);
    return stem_.backward(d);
  }

  /// Forward with every residual branch removed: stem, shortcut chain, head.
  Tensor<Scalar> forward_shortcut_only(const Tensor<Scalar>& x, Mode mode) {
    check_input(x);
    auto t = stem_.forward(x, mode);
    for (auto& block : blocks_) t = block.shortcut_only(t, mode);
    return head_forward(t, Mode::eval, nullptr);
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    stem_.for_each_parameter(f);
    for (auto& block : blocks_) block.for_each_parameter(f);
    fc_.for_each_parameter(f);
  }

  template <typename F>
  void for_each_buffer(F&& f) {
    stem_.for_each_buffer(f);
    for (auto& block : blocks_) block.for_each_buffer(f);
  }

  std::vector<Parameter<Scalar>*> parameters() {
    std::vector<Parameter<Scalar>*> out;
    for_each_parameter([&](Parameter<Scalar>& p) { out.push_back(&p); });
    return out;
  }

  void zero_grad() {
    for_each_parameter([](Parameter<Scalar>& p) { p.zero_grad(); });
  }

  std::vector<Bottleneck<Scalar>>& blocks() { return blocks_; }
  Linear<Scalar>& classifier() { return fc_; }

 private:
  void check_input(const Tensor<Scalar>& x) const {
    require(x.rank() == 4, "network input must be [N, C, H, W], got " + to_string(x.shape()));
    require(x.dim(1) == cfg_.input_channels,
            "network expects " + std::to_string(cfg_.input_channels) + " input channels, got " +
                std::to_string(x.dim(1)));
    require(x.dim(2) >= kMinInputSize && x.dim(3) >= kMinInputSize,
            "input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                " is below the minimum size " + std::to_string(kMinInputSize) + "x" +
                std::to_string(kMinInputSize));
  }

  Tensor<Scalar> head_forward(const Tensor<Scalar>& features, Mode mode, Rng* rng) {
    feature_shape_ = features.shape();
    auto pooled = global_avg_pool(features);
    dropout_mask_ = Tensor<Scalar>();
    if (cfg_.dropout > 0.0 && mode == Mode::train) {
      require(rng != nullptr, "dropout in train mode needs an Rng");
      auto dropped = dropout(pooled, cfg_.dropout, *rng, mode);
      dropout_mask_ = std::move(dropped.mask);
      pooled = std::move(dropped.output);
    }
    return fc_.forward(pooled);
  }

  NetworkConfig cfg_;
  Stem<Scalar> stem_;
  std::vector<Bottleneck<Scalar>> blocks_;
  Linear<Scalar> fc_;
  Shape feature_shape_;
  Tensor<Scalar> dropout_mask_;
};

}  // namespace resnest

#endif  // RESNEST_NETWORK_HPP
