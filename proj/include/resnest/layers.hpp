#ifndef RESNEST_LAYERS_HPP
#define RESNEST_LAYERS_HPP

#include "resnest/ops.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <utility>

namespace resnest {

/// A named trainable tensor with its accumulated gradient.
/// decay_eligible holds for convolution and fully-connected weights only.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool decay_eligible = false;

  Parameter() = default;
  Parameter(std::string name_, Tensor<Scalar> value_, bool decay)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()), decay_eligible(decay) {}

  void zero_grad() { grad.set_zero(); }
};

/// Kaiming normal initialization, std = sqrt(2 / fan_in).
template <typename Scalar>
void kaiming_normal(Tensor<Scalar>& weight, Index fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < weight.size(); ++i) weight[i] = static_cast<Scalar>(stddev * rng.normal());
}

// Layers own their parameters plus the activations their backward needs.
// Each exposes for_each_parameter / for_each_buffer so containers can
// enumerate state in a stable order.

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, Index in_channels, Index out_channels, Pair kernel,
         ConvGeometry geometry, bool with_bias, Rng& rng)
      : geometry_(geometry) {
    require(in_channels % geometry.groups == 0,
            name + ": input channels " + std::to_string(in_channels) +
                " not divisible by groups " + std::to_string(geometry.groups));
    require(out_channels % geometry.groups == 0,
            name + ": output channels " + std::to_string(out_channels) +
                " not divisible by groups " + std::to_string(geometry.groups));
    const Index cin_g = in_channels / geometry.groups;
    weight_ = Parameter<Scalar>(name + ".weight",
                                Tensor<Scalar>({out_channels, cin_g, kernel.h, kernel.w}), true);
    kaiming_normal(weight_.value, cin_g * kernel.h * kernel.w, rng);
    if (with_bias) bias_ = Parameter<Scalar>(name + ".bias", Tensor<Scalar>({out_channels}), false);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    input_ = x;
    return conv2d(x, weight_.value, bias_ ? &bias_->value : nullptr, geometry_);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    auto g = conv2d_backward(input_, weight_.value, geometry_, dy, bias_.has_value());
    weight_.grad += g.weight;
    if (bias_) bias_->grad += g.bias;
    return std::move(g.input);
  }

  Parameter<Scalar>& weight() { return weight_; }
  const Parameter<Scalar>& weight() const { return weight_; }
  Parameter<Scalar>* bias() { return bias_ ? &*bias_ : nullptr; }
  const ConvGeometry& geometry() const { return geometry_; }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(weight_);
    if (bias_) f(*bias_);
  }
  template <typename F>
  void for_each_buffer(F&&) {}

 private:
  ConvGeometry geometry_;
  Parameter<Scalar> weight_;
  std::optional<Parameter<Scalar>> bias_;
  Tensor<Scalar> input_;
};

template <typename Scalar>
class BatchNorm {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  BatchNorm() = default;
  BatchNorm(const std::string& name, Index channels, Scalar gamma_init = Scalar(1))
      : gamma_(name + ".gamma", Tensor<Scalar>({channels}, gamma_init), false),
        beta_(name + ".beta", Tensor<Scalar>({channels}), false),
        running_mean_({channels}),
        running_var_({channels}, Scalar(1)),
        name_(name) {}

  /// Train mode uses batch statistics and updates the running estimates
  /// (unbiased variance). Eval mode before any update uses mean 0, var 1.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode) {
    const auto eps = static_cast<Scalar>(kEpsilon);
    if (mode == Mode::train) {
      auto r = batch_norm_train(x, gamma_.value, beta_.value, eps);
      const Index count = x.size() / x.dim(1);
      const auto m = static_cast<Scalar>(kMomentum);
      const Scalar unbias = count > 1 ? static_cast<Scalar>(count) / static_cast<Scalar>(count - 1)
                                      : Scalar(1);
      running_mean_.vec() = (Scalar(1) - m) * running_mean_.vec() + m * r.mean;
      running_var_.vec() = (Scalar(1) - m) * running_var_.vec() + m * unbias * r.variance;
      cache_ = std::move(r.cache);
      return std::move(r.output);
    }
    auto r = batch_norm_eval(x, gamma_.value, beta_.value, running_mean_, running_var_, eps);
    cache_ = std::move(r.cache);
    return std::move(r.output);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    auto g = batch_norm_backward(cache_, gamma_.value, dy);
    gamma_.grad += g.gamma;
    beta_.grad += g.beta;
    return std::move(g.input);
  }

  Parameter<Scalar>& gamma() { return gamma_; }
  Parameter<Scalar>& beta() { return beta_; }
  const Parameter<Scalar>& gamma() const { return gamma_; }
  const Parameter<Scalar>& beta() const { return beta_; }
  Tensor<Scalar>& running_mean() { return running_mean_; }
  Tensor<Scalar>& running_var() { return running_var_; }
  const Tensor<Scalar>& running_mean() const { return running_mean_; }
  const Tensor<Scalar>& running_var() const { return running_var_; }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(gamma_);
    f(beta_);
  }
  template <typename F>
  void for_each_buffer(F&& f) {
    f(name_ + ".running_mean", running_mean_);
    f(name_ + ".running_var", running_var_);
  }

 private:
  Parameter<Scalar> gamma_;
  Parameter<Scalar> beta_;
  Tensor<Scalar> running_mean_;
  Tensor<Scalar> running_var_;
  BatchNormCache<Scalar> cache_;
  std::string name_;
};

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, Index in_features, Index out_features, Index groups,
         bool with_bias, Rng& rng)
      : groups_(groups) {
    require(in_features % groups == 0, name + ": input features " + std::to_string(in_features) +
                                           " not divisible by groups " + std::to_string(groups));
    require(out_features % groups == 0, name + ": output features " +
                                            std::to_string(out_features) +
                                            " not divisible by groups " + std::to_string(groups));
    weight_ = Parameter<Scalar>(name + ".weight",
                                Tensor<Scalar>({out_features, in_features / groups}), true);
    kaiming_normal(weight_.value, in_features / groups, rng);
    if (with_bias) bias_ = Parameter<Scalar>(name + ".bias", Tensor<Scalar>({out_features}), false);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    input_ = x;
    return fully_connected(x, weight_.value, bias_ ? &bias_->value : nullptr, groups_);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    auto g = fully_connected_backward(input_, weight_.value, dy, groups_, bias_.has_value());
    weight_.grad += g.weight;
    if (bias_) bias_->grad += g.bias;
    return std::move(g.input);
  }

  Parameter<Scalar>& weight() { return weight_; }
  const Parameter<Scalar>& weight() const { return weight_; }
  Parameter<Scalar>* bias() { return bias_ ? &*bias_ : nullptr; }
  const Parameter<Scalar>* bias() const { return bias_ ? &*bias_ : nullptr; }
  Index groups() const { return groups_; }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(weight_);
    if (bias_) f(*bias_);
  }
  template <typename F>
  void for_each_buffer(F&&) {}

 private:
  Index groups_ = 1;
  Parameter<Scalar> weight_;
  std::optional<Parameter<Scalar>> bias_;
  Tensor<Scalar> input_;
};

}  // namespace resnest

#endif  // RESNEST_LAYERS_HPP
