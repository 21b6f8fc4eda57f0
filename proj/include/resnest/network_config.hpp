#ifndef RESNEST_NETWORK_CONFIG_HPP
#define RESNEST_NETWORK_CONFIG_HPP

#include "resnest/config.hpp"
#include "resnest/splat.hpp"

#include <array>
#include <string>
#include <vector>

namespace resnest {

/// Whole-network hyperparameters. radix = 0 selects the standard ResNet-D
/// bottleneck interior; radix >= 1 selects Split-Attention.
struct NetworkConfig {
  int depth = 50;  // 0 for a custom stage layout
  std::array<Index, 4> stage_blocks{3, 4, 6, 3};
  Index stem_width = 32;
  bool deep_stem = true;
  Index radix = 2;
  Index cardinality = 1;
  Index base_width = 64;
  Index base_planes = 64;
  bool fast = false;
  bool avg_down = true;
  bool attention_bn = true;
  bool zero_init_residual = true;
  double dropout = 0.0;
  double dropblock_prob = 0.0;
  Index dropblock_size = 7;
  Index num_classes = 1000;
  Index input_channels = 3;

  /// Defaults for a named depth: stage layout, stem width, dropout.
  static NetworkConfig for_depth(int depth);

  /// "RsKxDd", e.g. "2s1x64d".
  std::string notation() const;
  void set_notation(const std::string& notation);

  void validate() const;
  std::string describe() const;
};

/// Minimum input height/width for the five stride-2 reductions.
inline constexpr Index kMinInputSize = 32;

/// Applies one key=value setting; returns false for an unknown key.
/// Keys: depth, stages, radix, cardinality, base_width, variant, fast,
/// avg_down, deep_stem, stem_width, planes, dropout, dropblock_prob,
/// dropblock_size, classes, input_channels, attention_bn.
bool apply_network_key(NetworkConfig& cfg, const std::string& key, const std::string& value);

/// One bottleneck block of the plan.
struct BlockConfig {
  std::string name;  // e.g. "stage2.block0"
  Index stage = 0;
  Index in_channels = 0;
  Index planes = 0;
  Index stride = 1;
  Index radix = 2;
  Index cardinality = 1;
  Index base_width = 64;
  bool fast = false;
  bool avg_down = true;
  bool attention = true;
  bool attention_bn = true;
  bool zero_init_residual = true;
  bool dropblock = false;  // DropBlock on the residual branch (last two stages)
  double dropblock_prob = 0.0;
  Index dropblock_size = 7;

  static constexpr Index kExpansion = 4;
  Index out_channels() const { return planes * kExpansion; }
  /// floor(planes * d / 64) * K
  Index group_width() const { return planes * base_width / 64 * cardinality; }
  bool has_shortcut_conv() const { return stride != 1 || in_channels != out_channels(); }
  SplatConfig splat() const;
};

std::vector<BlockConfig> plan_blocks(const NetworkConfig& cfg);

/// Width of the stem output.
inline Index stem_out_channels(const NetworkConfig& cfg) { return 2 * cfg.stem_width; }

}  // namespace resnest

#endif  // RESNEST_NETWORK_CONFIG_HPP
