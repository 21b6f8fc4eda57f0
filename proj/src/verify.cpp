#include "resnest/verify.hpp"

#include "resnest/gradcheck.hpp"
#include "resnest/training.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace resnest {

namespace {

CheckResult check(const std::string& suite, const std::string& name, double value,
                  double tolerance, std::string detail = {}) {
  return CheckResult{suite, name, value, tolerance, std::isfinite(value) && value <= tolerance,
                     std::move(detail)};
}

std::string grid_name(Index r, Index k, Index c) {
  return "R" + std::to_string(r) + " K" + std::to_string(k) + " C" + std::to_string(c);
}

SplatConfig grid_config(Index r, Index k, Index c) {
  SplatConfig cfg;
  cfg.in_channels = 6;
  cfg.channels = c;
  cfg.radix = r;
  cfg.cardinality = k;
  return cfg;
}

double weight_sum_error(const Tensor<double>& a) {
  const Index n = a.dim(0), k_count = a.dim(1), radix = a.dim(2), width = a.dim(3);
  double worst = 0.0;
  for (Index s = 0; s < n; ++s) {
    for (Index k = 0; k < k_count; ++k) {
      for (Index c = 0; c < width; ++c) {
        double sum = 0.0;
        for (Index r = 0; r < radix; ++r) sum += a(s, k, r, c);
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    }
  }
  return worst;
}

// Squeeze-and-gate written out with plain loops, for R = 1: V = U * sigmoid(z)
// where z comes from the two grouped FCs applied to the spatial mean of U.
Tensor<double> squeeze_and_gate(const Tensor<double>& u, const SplatUnit<double>& unit) {
  const SplatConfig& cfg = unit.config();
  const Index n = u.dim(0), channels = u.dim(1), area = u.dim(2) * u.dim(3);
  const Index k_count = cfg.cardinality;
  const Index width = channels / k_count;
  const Index inner_g = cfg.inner() / k_count;
  const auto& w1 = unit.fc1().weight().value;
  const auto& w2 = unit.fc2().weight().value;
  const auto& b2 = unit.fc2().bias()->value;
  Tensor<double> v(u.shape());
  for (Index s = 0; s < n; ++s) {
    std::vector<double> mean(static_cast<std::size_t>(channels), 0.0);
    for (Index c = 0; c < channels; ++c) {
      for (Index p = 0; p < area; ++p) mean[std::size_t(c)] += u[(s * channels + c) * area + p];
      mean[std::size_t(c)] /= double(area);
    }
    for (Index k = 0; k < k_count; ++k) {
      std::vector<double> h(static_cast<std::size_t>(inner_g));
      for (Index j = 0; j < inner_g; ++j) {
        const Index row = k * inner_g + j;
        double acc = unit.fc1().bias() ? unit.fc1().bias()->value[row] : 0.0;
        for (Index c = 0; c < width; ++c) acc += w1[row * width + c] * mean[std::size_t(k * width + c)];
        if (cfg.attention_bn) {
          const auto& bn = unit.fc_bn();
          acc = (acc - bn.running_mean()[row]) /
                    std::sqrt(bn.running_var()[row] + BatchNorm<double>::kEpsilon) *
                    bn.gamma().value[row] +
                bn.beta().value[row];
        }
        h[std::size_t(j)] = std::max(acc, 0.0);
      }
      for (Index c = 0; c < width; ++c) {
        const Index row = k * width + c;
        double z = b2[row];
        for (Index j = 0; j < inner_g; ++j) z += w2[row * inner_g + j] * h[std::size_t(j)];
        const double gate = 1.0 / (1.0 + std::exp(-z));
        for (Index p = 0; p < area; ++p) {
          const Index i = (s * channels + row) * area + p;
          v[i] = u[i] * gate;
        }
      }
    }
  }
  return v;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"equivalence", "gradcheck", "attention", "schedule",
                                              "loss", "all"};
  return names;
}

std::vector<CheckResult> verify_equivalence(const VerifyOptions& options) {
  std::vector<CheckResult> out;
  CardinalityMajorHooks hooks;
  hooks.negate_first_split_weight = options.inject_sign_flip;
  for (Index r : {1, 2, 4}) {
    for (Index k : {1, 2, 4}) {
      for (Index c : {8, 16, 32}) {
        Rng rng(options.seed, std::uint64_t(100 * r + 10 * k) + std::uint64_t(c));
        SplatUnit<double> unit("grid", grid_config(r, k, c), rng);
        randomize_unit(unit, rng);
        const auto x = random_tensor<double>({2, 6, 8, 8}, rng);
        const auto card = permute_params(unit, LayoutDirection::radix_to_cardinality);
        double diff = 0.0;
        for (Mode mode : {Mode::eval, Mode::train}) {
          const auto reference = splat_forward_cardinality_major(x, card, mode, hooks);
          diff = std::max(diff, max_abs_diff(unit.forward(x, mode), reference));
        }
        out.push_back(check("equivalence", grid_name(r, k, c), diff, 1e-10, "max |card - radix|"));
      }
    }
  }
  return out;
}

std::vector<CheckResult> verify_gradcheck(const VerifyOptions& options) {
  std::vector<CheckResult> out;
  struct Case {
    const char* name;
    Index r, k, c, stride;
    bool fast;
  };
  const Case cases[] = {{"splat 2s2x C8", 2, 2, 8, 1, false},
                        {"splat 1s1x C4", 1, 1, 4, 1, false},
                        {"splat 4s1x C4 stride2", 4, 1, 4, 2, false},
                        {"splat 2s2x C4 stride2 fast", 2, 2, 4, 2, true}};
  for (const auto& tc : cases) {
    Rng rng(options.seed, 0x6c);
    SplatConfig cfg;
    cfg.in_channels = 3;
    cfg.channels = tc.c;
    cfg.radix = tc.r;
    cfg.cardinality = tc.k;
    cfg.stride = tc.stride;
    cfg.fast = tc.fast;
    cfg.attention_inner = 2 * tc.k;
    SplatUnit<double> unit("g", cfg, rng);
    randomize_unit(unit, rng);
    const auto x = random_tensor<double>({4, 3, 5, 5}, rng);
    const auto probe_shape = unit.forward(x, Mode::train).shape();
    const auto w = random_tensor<double>(probe_shape, rng);
    std::vector<Parameter<double>*> params;
    unit.for_each_parameter([&](Parameter<double>& p) { params.push_back(&p); });
    const auto report = grad_check<double>(
        [&] { return project(unit.forward(x, Mode::train), w); },
        [&] {
          unit.forward(x, Mode::train);
          unit.backward(w);
        },
        params, 1e-5, 1e-4);
    out.push_back(check("gradcheck", tc.name, report.max_rel_error(), 1e-4,
                        std::to_string(params.size()) + " parameter tensors"));
  }
  {
    Rng rng(options.seed, 0x105);
    Parameter<double> logits("logits", random_tensor<double>({4, 5}, rng, 2.0), false);
    const std::vector<Index> labels{0, 3, 4, 1};
    const auto report = grad_check<double>(
        [&] { return label_smooth_ce(logits.value, labels, 0.1).loss; },
        [&] { logits.grad = label_smooth_ce(logits.value, labels, 0.1).grad; }, {&logits}, 1e-5,
        1e-6);
    out.push_back(check("gradcheck", "label_smooth_ce eps=0.1", report.max_rel_error(), 1e-6));
  }
  return out;
}

std::vector<CheckResult> verify_attention(const VerifyOptions& options) {
  std::vector<CheckResult> out;
  // Normalization over the equivalence grid.
  double sum_error = 0.0;
  double sigmoid_margin = 1.0;  // min distance of an R=1 weight from {0, 1}
  for (Index r : {1, 2, 4}) {
    for (Index k : {1, 2, 4}) {
      for (Index c : {8, 16, 32}) {
        Rng rng(options.seed, std::uint64_t(100 * r + 10 * k) + std::uint64_t(c));
        SplatUnit<double> unit("grid", grid_config(r, k, c), rng);
        randomize_unit(unit, rng);
        unit.forward(random_tensor<double>({2, 6, 8, 8}, rng), Mode::eval);
        const auto& a = unit.last_weights();
        if (r > 1) {
          sum_error = std::max(sum_error, weight_sum_error(a));
        } else {
          sigmoid_margin = std::min({sigmoid_margin, a.vec().minCoeff(), 1.0 - a.vec().maxCoeff()});
        }
      }
    }
  }
  out.push_back(check("attention", "R>1 split weights sum to 1", sum_error, 1e-12));
  out.push_back(CheckResult{"attention", "R=1 weights inside (0, 1)", sigmoid_margin, 0.0,
                            sigmoid_margin > 0.0, "min distance from {0, 1}, must be > 0"});

  // R = 1 against the explicit squeeze-and-gate path.
  for (Index k : {1, 2}) {
    Rng rng(options.seed, 0x5e + std::uint64_t(k));
    SplatUnit<double> unit("se", grid_config(1, k, 8), rng);
    randomize_unit(unit, rng);
    const auto x = random_tensor<double>({2, 6, 6, 6}, rng);
    const auto v = unit.forward(x, Mode::eval);
    const auto u = unit.split_transform(x, Mode::eval);
    out.push_back(check("attention", "R=1 K=" + std::to_string(k) + " equals squeeze-and-gate",
                        max_abs_diff(v, squeeze_and_gate(u, unit)), 1e-10));
  }

  // R = 2: the two split weights of every channel form a softmax pair.
  for (Index k : {1, 2}) {
    Rng rng(options.seed, 0x5c + std::uint64_t(k));
    SplatUnit<double> unit("sk", grid_config(2, k, 8), rng);
    randomize_unit(unit, rng);
    unit.forward(random_tensor<double>({2, 6, 6, 6}, rng), Mode::eval);
    out.push_back(check("attention", "R=2 K=" + std::to_string(k) + " pair weights sum to 1",
                        weight_sum_error(unit.last_weights()), 1e-12));
  }
  return out;
}

std::vector<CheckResult> verify_schedule(const VerifyOptions&) {
  std::vector<CheckResult> out;
  ScheduleConfig small;
  small.base_lr = 0.1;
  small.batch_size = 256;
  small.warmup_epochs = 5;
  small.total_epochs = 10;
  small.steps_per_epoch = 100;
  out.push_back(check("schedule", "lr_at(0) = peak / warmup_steps",
                      std::abs(lr_at(0, small) - 0.1 / 500.0), 1e-18));

  ScheduleConfig big = small;
  big.batch_size = 8192;
  big.total_epochs = 120;
  const Index w = big.warmup_steps();
  out.push_back(check("schedule", "end of warmup equals (B/256)*0.1 = 3.2",
                      std::abs(lr_at(w - 1, big) - 3.2), 0.0));
  out.push_back(check("schedule", "continuity at the warmup/cosine junction",
                      std::abs(lr_at(w, big) - lr_at(w - 1, big)), 1e-12));
  const Index last = big.total_steps() - 1;
  out.push_back(CheckResult{"schedule", "final rate below peak * 1e-3", lr_at(last, big) / 3.2,
                            1e-3, lr_at(last, big) < 3.2e-3,
                            std::to_string(big.total_steps()) + " steps"});
  double lowest = 1.0;
  for (Index s = 0; s <= last; ++s) lowest = std::min(lowest, lr_at(s, big));
  out.push_back(CheckResult{"schedule", "rate non-negative everywhere", lowest, 0.0, lowest >= 0.0,
                            "minimum rate"});
  return out;
}

std::vector<CheckResult> verify_loss(const VerifyOptions& options) {
  std::vector<CheckResult> out;
  Rng rng(options.seed, 0x10);
  double sum_error = 0.0;
  for (Index k : {2, 3, 5, 10}) {
    for (double eps : {0.0, 0.1, 0.5, 0.9}) {
      Tensor<double> y(Shape{3, k});
      for (Index i = 0; i < y.size(); ++i) y[i] = rng.uniform();
      for (Index r = 0; r < 3; ++r) {
        double total = 0.0;
        for (Index c = 0; c < k; ++c) total += y(r, c);
        for (Index c = 0; c < k; ++c) y(r, c) /= total;
      }
      const auto p = smooth_targets(y, eps);
      for (Index r = 0; r < 3; ++r) {
        double total = 0.0;
        for (Index c = 0; c < k; ++c) total += p(r, c);
        sum_error = std::max(sum_error, std::abs(total - 1.0));
      }
    }
  }
  out.push_back(check("loss", "smoothed targets sum to 1", sum_error, 1e-12));

  // K = 5, eps = 0.1, logits (2, 0, 0, 0, 0), label 0.
  const Tensor<double> z({1, 5}, {2.0, 0.0, 0.0, 0.0, 0.0});
  const double log_norm = std::log(std::exp(2.0) + 4.0);
  const double direct = -(0.9 * (2.0 - log_norm) + 4 * 0.025 * (0.0 - log_norm));
  out.push_back(check("loss", "K=5 eps=0.1 direct evaluation",
                      std::abs(label_smooth_ce(z, std::vector<Index>{0}, 0.1).loss - direct), 1e-12));

  const Tensor<double> uniform({2, 7}, 0.3);
  out.push_back(check("loss", "uniform logits give log K",
                      std::abs(label_smooth_ce(uniform, std::vector<Index>{1, 6}, 0.3).loss -
                               std::log(7.0)),
                      1e-12));

  // Mixup outputs lie between the two mixed examples.
  const auto x = random_tensor<double>({6, 2, 3, 3}, rng);
  const auto y = one_hot<double>({0, 1, 2, 0, 1, 2}, 3);
  const auto mixed = mixup_batch(x, y, 0.2, rng);
  double violation = 0.0;
  const Index per = x.size() / 6;
  for (Index n = 0; n < 6; ++n) {
    for (Index i = 0; i < per; ++i) {
      const double a = x[n * per + i], b = x[(5 - n) * per + i];
      const double v = mixed.inputs[n * per + i];
      violation = std::max({violation, std::min(a, b) - v, v - std::max(a, b)});
    }
  }
  out.push_back(check("loss", "mixup inputs are convex combinations", violation, 1e-15));
  double row_error = 0.0;
  for (Index n = 0; n < 6; ++n) {
    row_error = std::max(row_error, std::abs(mixed.targets.vec().segment(n * 3, 3).sum() - 1.0));
  }
  out.push_back(check("loss", "mixed one-hot rows sum to 1", row_error, 1e-15));
  return out;
}

std::vector<CheckResult> run_suite(const std::string& suite, const VerifyOptions& options) {
  if (suite == "equivalence") return verify_equivalence(options);
  if (suite == "gradcheck") return verify_gradcheck(options);
  if (suite == "attention") return verify_attention(options);
  if (suite == "schedule") return verify_schedule(options);
  if (suite == "loss") return verify_loss(options);
  if (suite == "all") {
    std::vector<CheckResult> out;
    for (const auto& name : suite_names()) {
      if (name == "all") continue;
      auto part = run_suite(name, options);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  throw ConfigError("unknown verify suite '" + suite +
                    "' (expected equivalence, gradcheck, attention, schedule, loss or all)");
}

bool all_passed(const std::vector<CheckResult>& checks) {
  for (const auto& c : checks) {
    if (!c.passed) return false;
  }
  return true;
}

void print_checks(std::ostream& out, const std::vector<CheckResult>& checks) {
  for (const auto& c : checks) {
    char line[96];
    std::snprintf(line, sizeof line, "value=%.3e tol=%.1e", c.value, c.tolerance);
    out << (c.passed ? "PASS" : "FAIL") << "  [" << c.suite << "] " << c.name << "  " << line;
    if (!c.detail.empty()) out << "  (" << c.detail << ")";
    out << "\n";
  }
}

}  // namespace resnest
