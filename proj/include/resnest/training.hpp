#ifndef RESNEST_TRAINING_HPP
#define RESNEST_TRAINING_HPP

#include "resnest/checkpoint.hpp"
#include "resnest/network.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace resnest {

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct ScheduleConfig {
  double base_lr = 0.1;
  Index batch_size = 256;
  Index warmup_epochs = 5;
  Index total_epochs = 120;
  Index steps_per_epoch = 1;

  /// Linear scaling rule: (B / 256) * base_lr.
  double peak_lr() const { return static_cast<double>(batch_size) / 256.0 * base_lr; }
  Index warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  Index total_steps() const { return total_epochs * steps_per_epoch; }
  void validate() const;
};

/// Linear warmup to the peak rate, then half-cosine decay towards zero.
double lr_at(Index step, const ScheduleConfig& cfg);

// ---------------------------------------------------------------------------
// Loss

struct LossConfig {
  double smoothing = 0.1;
  Index num_classes = 1000;
  void validate() const;
};

template <typename Scalar>
struct LossResult {
  double loss = 0.0;           // mean over the batch
  Tensor<Scalar> grad;         // d(mean loss) / d(logits) = (q - p) / N
  Tensor<Scalar> probabilities;
};

template <typename Scalar>
Tensor<Scalar> one_hot(const std::vector<Index>& labels, Index num_classes) {
  require(num_classes >= 2, "need at least two classes");
  Tensor<Scalar> out(Shape{static_cast<Index>(labels.size()), num_classes});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    require(labels[n] >= 0 && labels[n] < num_classes,
            "label " + std::to_string(labels[n]) + " at row " + std::to_string(n) +
                " is outside [0, " + std::to_string(num_classes) + ")");
    out(static_cast<Index>(n), labels[n]) = Scalar(1);
  }
  return out;
}

/// p = (1 - eps) * y + eps / (K - 1) * (1 - y), rowwise. For a one-hot y this
/// puts 1 - eps on the true class and eps / (K - 1) elsewhere; rows that sum
/// to one keep summing to one.
template <typename Scalar>
Tensor<Scalar> smooth_targets(const Tensor<Scalar>& targets, double eps) {
  require(targets.rank() == 2 && targets.dim(1) >= 2, "targets must be [N, K] with K >= 2");
  require(eps >= 0.0 && eps < 1.0, "smoothing must be in [0, 1), got " + std::to_string(eps));
  const double off = eps / static_cast<double>(targets.dim(1) - 1);
  Tensor<Scalar> p(targets.shape());
  for (Index i = 0; i < p.size(); ++i) {
    const double y = static_cast<double>(targets[i]);
    p[i] = static_cast<Scalar>((1.0 - eps) * y + off * (1.0 - y));
  }
  return p;
}

/// Mean over rows of -sum_i p_i log q_i with q = softmax(logits).
template <typename Scalar>
LossResult<Scalar> soft_cross_entropy(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets) {
  require(logits.rank() == 2, "logits must be [N, K], got " + to_string(logits.shape()));
  require(targets.shape() == logits.shape(), "targets shape " + to_string(targets.shape()) +
                                                 " does not match logits " +
                                                 to_string(logits.shape()));
  const Index n = logits.dim(0);
  const Index k = logits.dim(1);
  LossResult<Scalar> out;
  out.grad = Tensor<Scalar>(logits.shape());
  out.probabilities = Tensor<Scalar>(logits.shape());
  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    double max = static_cast<double>(logits(r, 0));
    for (Index c = 1; c < k; ++c) max = std::max(max, static_cast<double>(logits(r, c)));
    double sum = 0.0;
    for (Index c = 0; c < k; ++c) sum += std::exp(static_cast<double>(logits(r, c)) - max);
    const double log_sum = std::log(sum);
    for (Index c = 0; c < k; ++c) {
      const double log_q = static_cast<double>(logits(r, c)) - max - log_sum;
      const double q = std::exp(log_q);
      const double p = static_cast<double>(targets(r, c));
      total -= p * log_q;
      out.probabilities(r, c) = static_cast<Scalar>(q);
      out.grad(r, c) = static_cast<Scalar>((q - p) / static_cast<double>(n));
    }
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

/// Label-smoothed cross-entropy on hard labels.
template <typename Scalar>
LossResult<Scalar> label_smooth_ce(const Tensor<Scalar>& logits, const std::vector<Index>& labels,
                                   double eps) {
  require(logits.rank() == 2, "logits must be [N, K], got " + to_string(logits.shape()));
  require(static_cast<Index>(labels.size()) == logits.dim(0),
          "got " + std::to_string(labels.size()) + " labels for " +
              std::to_string(logits.dim(0)) + " rows");
  return soft_cross_entropy(logits, smooth_targets(one_hot<Scalar>(labels, logits.dim(1)), eps));
}

/// Label-smoothed cross-entropy on soft (e.g. mixed) targets.
template <typename Scalar>
LossResult<Scalar> label_smooth_ce(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets,
                                   double eps) {
  return soft_cross_entropy(logits, smooth_targets(targets, eps));
}

// ---------------------------------------------------------------------------
// Mixup

struct MixupConfig {
  double alpha = 0.2;
  bool enabled = true;
};

template <typename Scalar>
struct MixupResult {
  Tensor<Scalar> inputs;
  Tensor<Scalar> targets;
  std::vector<double> lambdas;
};

/// x_hat[n] = l[n] x[n] + (1 - l[n]) x[N-1-n], same for the targets.
template <typename Scalar>
MixupResult<Scalar> mixup_batch(const Tensor<Scalar>& x, const Tensor<Scalar>& y,
                                const std::vector<double>& lambdas) {
  const Index n = x.dim(0);
  require(y.rank() == 2 && y.dim(0) == n, "mixup targets must be [N, K] matching the inputs");
  require(static_cast<Index>(lambdas.size()) == n, "mixup needs one lambda per example");
  MixupResult<Scalar> out{Tensor<Scalar>(x.shape()), Tensor<Scalar>(y.shape()), lambdas};
  const Index xs = x.size() / n;
  const Index ys = y.dim(1);
  for (Index i = 0; i < n; ++i) {
    const double l = lambdas[static_cast<std::size_t>(i)];
    require(l >= 0.0 && l <= 1.0, "mixup lambda must be in [0, 1]");
    const Index j = n - 1 - i;
    const auto a = static_cast<Scalar>(l);
    const auto b = static_cast<Scalar>(1.0 - l);
    out.inputs.vec().segment(i * xs, xs) = a * x.vec().segment(i * xs, xs) + b * x.vec().segment(j * xs, xs);
    out.targets.vec().segment(i * ys, ys) = a * y.vec().segment(i * ys, ys) + b * y.vec().segment(j * ys, ys);
  }
  return out;
}

/// Draws lambda ~ Beta(alpha, alpha) independently per example.
template <typename Scalar>
MixupResult<Scalar> mixup_batch(const Tensor<Scalar>& x, const Tensor<Scalar>& y, double alpha,
                                Rng& rng) {
  if (!(alpha > 0.0)) throw ConfigError("mixup alpha must be > 0, got " + std::to_string(alpha));
  std::vector<double> lambdas(static_cast<std::size_t>(x.dim(0)));
  for (auto& l : lambdas) l = rng.beta(alpha, alpha);
  return mixup_batch(x, y, lambdas);
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Classical momentum: v = m v + g + wd w (wd only for decay-eligible
/// parameters), then w -= lr v.
template <typename Scalar>
class Sgd {
 public:
  explicit Sgd(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Parameter<Scalar>*>& params, double lr) {
    const auto m = static_cast<Scalar>(cfg_.momentum);
    const auto wd = static_cast<Scalar>(cfg_.weight_decay);
    const auto rate = static_cast<Scalar>(lr);
    for (auto* p : params) {
      auto& v = velocity_for(*p);
      if (p->decay_eligible && cfg_.weight_decay != 0.0) {
        v.vec() = m * v.vec() + p->grad.vec() + wd * p->value.vec();
      } else {
        v.vec() = m * v.vec() + p->grad.vec();
      }
      p->value.vec() -= rate * v.vec();
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor<Scalar>>& velocities() const { return velocity_; }

  static std::string key(const std::string& param) { return "optimizer.velocity." + param; }

  void store(Checkpoint& ckpt) const {
    for (const auto& [name, v] : velocity_) ckpt.put(key(name), v);
  }

  /// Loads velocities for the given parameters; absent entries start at zero.
  void restore(const Checkpoint& ckpt, const std::vector<Parameter<Scalar>*>& params) {
    velocity_.clear();
    for (auto* p : params) {
      if (!ckpt.has(key(p->name))) continue;
      const auto& v = ckpt.get<Scalar>(key(p->name));
      if (v.shape() != p->value.shape()) {
        throw CheckpointError("velocity for '" + p->name + "' has the wrong shape");
      }
      velocity_[p->name] = v;
    }
  }

 private:
  Tensor<Scalar>& velocity_for(const Parameter<Scalar>& p) {
    auto it = velocity_.find(p.name);
    if (it == velocity_.end()) it = velocity_.emplace(p.name, Tensor<Scalar>(p.value.shape())).first;
    return it->second;
  }

  OptimizerConfig cfg_;
  std::map<std::string, Tensor<Scalar>> velocity_;
};

// ---------------------------------------------------------------------------
// Synthetic data

/// Two-class image set: class 0 holds oriented sinusoidal bars, class 1
/// checkerboards, each with random period, phase and contrast, plus i.i.d.
/// Gaussian pixel noise. Balanced and fully determined by the seed.
struct SyntheticConfig {
  Index samples = 256;
  Index size = 32;
  Index channels = 3;
  double noise = 0.5;
  std::uint64_t seed = 0;
};

struct SyntheticDataset {
  Tensor<double> images;  // [N, C, size, size]
  std::vector<Index> labels;
  Index size() const { return static_cast<Index>(labels.size()); }
};

SyntheticDataset make_synthetic(const SyntheticConfig& cfg);

// ---------------------------------------------------------------------------
// Desk-scale trainer

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  NetworkConfig network = micro_network();
  SyntheticConfig data;
  Index epochs = 20;
  Index batch = 32;
  double base_lr = 0.8;
  Index warmup_epochs = 1;
  MixupConfig mixup{0.2, false};
  double smoothing = 0.0;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  /// Small ResNeSt for 32x32 inputs: one block per stage, 16 base planes.
  static NetworkConfig micro_network();

  ScheduleConfig schedule() const;
  /// `data` with channels and seed taken from the network and run seed.
  SyntheticConfig dataset() const;
  void validate() const;
  std::string describe() const;
};

/// Network keys plus: epochs, batch, base_lr, warmup_epochs, mixup,
/// mixup_alpha, smoothing, weight_decay, momentum, seed, samples, noise.
/// Returns false for an unknown key.
bool apply_train_key(TrainConfig& cfg, const std::string& key, const std::string& value);

struct EpochMetrics {
  Index epoch = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;  // rate of the epoch's last step
};

std::string format_metrics(const EpochMetrics& m);

/// Eval-mode top-1 accuracy, evaluated in chunks of `batch`.
template <typename Scalar>
double evaluate_accuracy(Network<Scalar>& net, const Tensor<Scalar>& images,
                         const std::vector<Index>& labels, Index batch) {
  const Index n = images.dim(0);
  const Index per = images.size() / n;
  Index correct = 0;
  for (Index start = 0; start < n; start += batch) {
    const Index count = std::min(batch, n - start);
    Shape shape = images.shape();
    shape[0] = count;
    Tensor<Scalar> x(shape, images.vec().segment(start * per, count * per));
    const auto logits = net.forward(x, Mode::eval);
    for (Index r = 0; r < count; ++r) {
      Index best = 0;
      for (Index c = 1; c < logits.dim(1); ++c) {
        if (logits(r, c) > logits(r, best)) best = c;
      }
      correct += best == labels[static_cast<std::size_t>(start + r)] ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Deterministic trainer: network, optimizer and data all derive from
/// cfg.seed; epoch e draws its shuffle, mixup and DropBlock randomness from a
/// stream keyed on e, so a resumed run continues bit-identically.
template <typename Scalar>
class Trainer {
 public:
  static constexpr const char* kEpochKey = "trainer.epoch";

  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)), init_rng_(cfg_.seed, 0), net_(validated(cfg_), init_rng_),
        sgd_(cfg_.optimizer) {
    const auto data = make_synthetic(cfg_.dataset());
    images_ = data.images.template cast<Scalar>();
    labels_ = data.labels;
    schedule_ = cfg_.schedule();
  }

  Network<Scalar>& network() { return net_; }
  const TrainConfig& config() const { return cfg_; }
  Index completed_epochs() const { return epoch_; }
  const std::vector<double>& lr_trace() const { return lr_trace_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  const Tensor<Scalar>& images() const { return images_; }
  const std::vector<Index>& labels() const { return labels_; }

  /// Runs epochs until `cfg.epochs` (or `stop_after` when >= 0) have
  /// completed, writing one metric line per epoch to `log` if given.
  void run(std::ostream* log = nullptr, Index stop_after = -1) {
    const Index last = stop_after >= 0 ? std::min(stop_after, cfg_.epochs) : cfg_.epochs;
    while (epoch_ < last) {
      const auto m = train_epoch();
      if (log != nullptr) *log << format_metrics(m) << "\n" << std::flush;
    }
  }

  EpochMetrics train_epoch() {
    require(epoch_ < cfg_.epochs, "training already finished");
    Rng rng(cfg_.seed, static_cast<std::uint64_t>(epoch_) + 1);
    const Index n = static_cast<Index>(labels_.size());
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    for (Index i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)],
                order[rng.below(static_cast<std::uint64_t>(i + 1))]);
    }
    const Index per = images_.size() / n;
    const Index b = cfg_.batch;
    double loss_sum = 0.0;
    double lr = 0.0;
    for (Index s = 0; s < schedule_.steps_per_epoch; ++s) {
      const Index step = epoch_ * schedule_.steps_per_epoch + s;
      Shape shape = images_.shape();
      shape[0] = b;
      Tensor<Scalar> x(shape);
      std::vector<Index> y(static_cast<std::size_t>(b));
      for (Index i = 0; i < b; ++i) {
        const Index src = order[static_cast<std::size_t>(s * b + i)];
        x.vec().segment(i * per, per) = images_.vec().segment(src * per, per);
        y[static_cast<std::size_t>(i)] = labels_[static_cast<std::size_t>(src)];
      }
      Tensor<Scalar> targets = one_hot<Scalar>(y, cfg_.network.num_classes);
      if (cfg_.mixup.enabled) {
        auto mixed = mixup_batch(x, targets, cfg_.mixup.alpha, rng);
        x = std::move(mixed.inputs);
        targets = std::move(mixed.targets);
      }
      net_.zero_grad();
      const auto logits = net_.forward(x, Mode::train, &rng);
      const auto loss = label_smooth_ce(logits, targets, cfg_.smoothing);
      if (!std::isfinite(loss.loss)) {
        throw TrainingError("loss diverged (" + std::to_string(loss.loss) + ") at step " +
                            std::to_string(step) + " (epoch " + std::to_string(epoch_ + 1) +
                            ")");
      }
      net_.backward(loss.grad);
      lr = lr_at(step, schedule_);
      lr_trace_.push_back(lr);
      sgd_.step(net_.parameters(), lr);
      loss_sum += loss.loss;
    }
    ++epoch_;
    EpochMetrics m;
    m.epoch = epoch_;
    m.loss = loss_sum / static_cast<double>(schedule_.steps_per_epoch);
    m.accuracy = evaluate_accuracy(net_, images_, labels_, cfg_.batch);
    m.lr = lr;
    history_.push_back(m);
    return m;
  }

  Checkpoint checkpoint() {
    Checkpoint ckpt;
    store_model(ckpt, net_);
    sgd_.store(ckpt);
    ckpt.put(kEpochKey, Tensor<double>(Shape{1}, {static_cast<double>(epoch_)}));
    return ckpt;
  }

  void save(const std::string& path) { checkpoint().save(path); }

  /// Restores parameters, BN buffers, optimizer state and the epoch counter.
  void resume(const Checkpoint& ckpt) {
    restore_model(ckpt, net_);
    sgd_.restore(ckpt, net_.parameters());
    const double e = ckpt.get<double>(kEpochKey)[0];
    require(e >= 0 && e <= double(cfg_.epochs) && e == std::floor(e),
            "checkpoint epoch " + std::to_string(e) + " is not within this run's " +
                std::to_string(cfg_.epochs) + " epochs");
    epoch_ = static_cast<Index>(e);
    // The lr trace of the skipped epochs is a pure function of the schedule.
    lr_trace_.clear();
    for (Index s = 0; s < epoch_ * schedule_.steps_per_epoch; ++s) {
      lr_trace_.push_back(lr_at(s, schedule_));
    }
    history_.clear();
  }

 private:
  static const NetworkConfig& validated(const TrainConfig& cfg) {
    cfg.validate();
    return cfg.network;
  }

  TrainConfig cfg_;
  Rng init_rng_;
  Network<Scalar> net_;
  Sgd<Scalar> sgd_;
  ScheduleConfig schedule_;
  Tensor<Scalar> images_;
  std::vector<Index> labels_;
  Index epoch_ = 0;
  std::vector<double> lr_trace_;
  std::vector<EpochMetrics> history_;
};

}  // namespace resnest

#endif  // RESNEST_TRAINING_HPP
