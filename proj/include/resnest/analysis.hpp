#ifndef RESNEST_ANALYSIS_HPP
#define RESNEST_ANALYSIS_HPP

#include "resnest/network.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace resnest {

// Cost convention: one FLOP is one multiply-accumulate. Only convolutions and
// fully-connected layers contribute to `macs`; batch norm, activations,
// pooling and the attention fusions are itemized in `aux_ops` and excluded
// from the MAC total.

struct CostRow {
  std::string path;
  std::string kind;  // conv, fc, bn, relu, pool, gap, fuse, softmax, add
  Shape output;      // per image: {C, H, W} or {F}
  Index params = 0;
  Index macs = 0;
  Index aux_ops = 0;
};

struct CostReport {
  std::string config;
  Index input_h = 0;
  Index input_w = 0;
  std::vector<CostRow> rows;

  Index total_params() const;
  Index total_macs() const;
  Index total_aux() const;
  /// MACs of convolution rows only.
  Index conv_macs() const;
};

/// Feature map shape flowing through the structural walk.
struct FeatureShape {
  Index channels = 0;
  Index h = 0;
  Index w = 0;
};

/// Appends the rows of one Split-Attention unit; returns its output shape.
FeatureShape describe_splat(const SplatConfig& cfg, const std::string& path, FeatureShape in,
                            CostReport& report);

/// Appends the rows of one bottleneck block; returns its output shape.
FeatureShape describe_block(const BlockConfig& block, FeatureShape in, CostReport& report);

/// Structural cost walk of a whole network for an h x w input (per image).
CostReport describe_network(const NetworkConfig& cfg, Index h, Index w);

/// Parameter counts from the configuration alone (no allocation).
CostReport count_params(const NetworkConfig& cfg);
CostReport count_flops(const NetworkConfig& cfg, Index h, Index w);

/// One row per Parameter of a built network.
template <typename Scalar>
CostReport count_params(Network<Scalar>& network) {
  CostReport report;
  report.config = network.config().describe();
  network.for_each_parameter([&](Parameter<Scalar>& p) {
    report.rows.push_back(CostRow{p.name, "param", p.value.shape(), p.value.size(), 0, 0});
  });
  return report;
}

template <typename Scalar>
CostReport count_flops(const Network<Scalar>& network, Index h, Index w) {
  return count_flops(network.config(), h, w);
}

struct ParityReport {
  Index splat_params = 0;
  Index residual_params = 0;
  Index splat_macs = 0;
  Index residual_macs = 0;
  Index splat_conv_macs = 0;
  Index residual_conv_macs = 0;
  double param_ratio() const { return double(splat_params) / double(residual_params); }
  double mac_ratio() const { return double(splat_macs) / double(residual_macs); }
  double conv_mac_ratio() const { return double(splat_conv_macs) / double(residual_conv_macs); }
};

/// Cost ratios splat / standard for two blocks fed the same input.
ParityReport block_cost_parity(const BlockConfig& splat, const BlockConfig& residual, Index h,
                               Index w);

/// Published reference figures for a configuration, when one applies.
struct ReferenceFigures {
  std::string name;
  double params_millions = 0;
  double gmacs = 0;
  double params_tolerance = 0;  // relative
  double gmacs_tolerance = 0;   // relative
};

std::optional<ReferenceFigures> reference_for(const NetworkConfig& cfg);

void print_report(std::ostream& out, const CostReport& report);
void print_machine_readable(std::ostream& out, const CostReport& report);

// ---------------------------------------------------------------------------

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);

template <typename Scalar>
std::uint64_t hash_tensor(const Tensor<Scalar>& t) {
  return fnv1a(t.data(), static_cast<std::size_t>(t.size()) * sizeof(Scalar));
}

struct BenchStats {
  Index reps = 0;
  Index batch = 0;
  double min_ms = 0;
  double median_ms = 0;
  double mean_ms = 0;
  double per_image_ms = 0;
  std::uint64_t logits_hash = 0;
  bool deterministic = true;  // every repetition produced identical logits
};

BenchStats summarize_timings(std::vector<double> ms, Index batch);

/// Times eval-mode forwards on a fixed-seed input. Results are machine
/// dependent.
template <typename Scalar>
BenchStats bench_forward(Network<Scalar>& network, const Shape& batch_shape, Index reps,
                         Index warmup, std::uint64_t seed = 0) {
  require(reps >= 1, "bench_forward needs at least one repetition");
  require(warmup >= 0, "bench_forward warmup must be >= 0");
  Rng rng(seed, 0xbe9c);
  Tensor<Scalar> input(batch_shape);
  for (Index i = 0; i < input.size(); ++i) input[i] = static_cast<Scalar>(rng.normal());
  for (Index i = 0; i < warmup; ++i) network.forward(input, Mode::eval);
  std::vector<double> times;
  std::uint64_t first_hash = 0;
  bool identical = true;
  for (Index i = 0; i < reps; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const auto logits = network.forward(input, Mode::eval);
    const auto stop = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    const auto h = hash_tensor(logits);
    if (i == 0) first_hash = h;
    identical = identical && h == first_hash;
  }
  auto stats = summarize_timings(std::move(times), batch_shape[0]);
  stats.logits_hash = first_hash;
  stats.deterministic = identical;
  return stats;
}

struct LayoutBench {
  BenchStats radix_major;
  BenchStats cardinality_major;
  double slowdown() const { return radix_major.median_ms / cardinality_major.median_ms; }
};

/// Times the two Split-Attention forward paths on the same unit.
template <typename Scalar>
LayoutBench bench_splat_layouts(const SplatConfig& cfg, const Shape& input_shape, Index reps,
                                std::uint64_t seed = 0) {
  require(reps >= 1, "bench needs at least one repetition");
  Rng rng(seed, 0x5a1a);
  SplatUnit<Scalar> radix_unit("bench", cfg, rng);
  const auto card_unit = permute_params(radix_unit, LayoutDirection::radix_to_cardinality);
  Tensor<Scalar> x(input_shape);
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<Scalar>(rng.normal());
  auto time = [&](auto&& fn) {
    std::vector<double> ms;
    for (Index i = 0; i < reps; ++i) {
      const auto start = std::chrono::steady_clock::now();
      fn();
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                             start)
                       .count());
    }
    return summarize_timings(std::move(ms), input_shape[0]);
  };
  LayoutBench out;
  out.radix_major = time([&] { radix_unit.forward(x, Mode::eval); });
  out.cardinality_major = time([&] { splat_forward_cardinality_major(x, card_unit, Mode::eval); });
  return out;
}

}  // namespace resnest

#endif  // RESNEST_ANALYSIS_HPP
