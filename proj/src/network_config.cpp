#include "resnest/network_config.hpp"

#include <numeric>
#include <regex>
#include <sstream>

namespace resnest {

NetworkConfig NetworkConfig::for_depth(int depth) {
  NetworkConfig cfg;
  cfg.depth = depth;
  switch (depth) {
    case 50:
      cfg.stage_blocks = {3, 4, 6, 3};
      cfg.stem_width = 32;
      break;
    case 101:
      cfg.stage_blocks = {3, 4, 23, 3};
      cfg.stem_width = 64;
      break;
    case 200:
      cfg.stage_blocks = {3, 24, 36, 3};
      cfg.stem_width = 64;
      break;
    case 269:
      cfg.stage_blocks = {3, 30, 48, 8};
      cfg.stem_width = 64;
      cfg.dropout = 0.2;
      break;
    default:
      throw ConfigError("unknown depth " + std::to_string(depth) +
                        " (expected 50, 101, 200 or 269; use stages= for custom layouts)");
  }
  // Three layers per bottleneck plus stem and classifier.
  const Index blocks = std::accumulate(cfg.stage_blocks.begin(), cfg.stage_blocks.end(), Index{0});
  require(3 * blocks + 2 == depth, "stage layout does not add up to depth " + std::to_string(depth));
  return cfg;
}

std::string NetworkConfig::notation() const {
  return std::to_string(radix) + "s" + std::to_string(cardinality) + "x" +
         std::to_string(base_width) + "d";
}

void NetworkConfig::set_notation(const std::string& text) {
  static const std::regex pattern(R"(^(\d+)s(\d+)x(\d+)d$)");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) {
    throw ConfigError("variant '" + text + "' is not in RsKxDd form (e.g. 2s1x64d)");
  }
  radix = std::stoll(m[1]);
  cardinality = std::stoll(m[2]);
  base_width = std::stoll(m[3]);
}

void NetworkConfig::validate() const {
  require(radix >= 0, "radix must be >= 0");
  require(cardinality >= 1, "cardinality must be >= 1");
  require(base_width >= 1, "base_width must be >= 1");
  require(base_planes >= 1, "planes must be >= 1");
  require(stem_width >= 1, "stem_width must be >= 1");
  require(num_classes >= 1, "classes must be >= 1");
  require(input_channels >= 1, "input_channels must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(dropblock_prob >= 0.0 && dropblock_prob < 1.0, "dropblock_prob must be in [0, 1)");
  require(dropblock_size >= 1 && dropblock_size % 2 == 1, "dropblock_size must be odd and >= 1");
  for (Index b : stage_blocks) require(b >= 1, "every stage needs at least one block");
  for (const auto& block : plan_blocks(*this)) {
    require(block.group_width() >= 1,
            block.name + ": group width floor(planes*d/64)*K is zero");
    if (block.radix >= 1) {
      try {
        block.splat().validate();
      } catch (const ConfigError& e) {
        throw ConfigError(block.name + ".splat: " + e.what());
      }
    } else {
      require(block.group_width() % block.cardinality == 0,
              block.name + ".conv2: group width not divisible by cardinality");
    }
  }
}

std::string NetworkConfig::describe() const {
  std::ostringstream out;
  out << "depth=" << depth << " stages=" << stage_blocks[0] << "," << stage_blocks[1] << ","
      << stage_blocks[2] << "," << stage_blocks[3] << " variant=" << notation()
      << " planes=" << base_planes << " stem_width=" << stem_width
      << " deep_stem=" << deep_stem << " fast=" << fast << " avg_down=" << avg_down
      << " dropout=" << dropout << " classes=" << num_classes;
  return out.str();
}

bool apply_network_key(NetworkConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "depth") {
    const int depth = static_cast<int>(parse_int(key, value));
    NetworkConfig fresh = NetworkConfig::for_depth(depth);
    cfg.depth = fresh.depth;
    cfg.stage_blocks = fresh.stage_blocks;
    cfg.stem_width = fresh.stem_width;
    cfg.dropout = fresh.dropout;
  } else if (key == "stages") {
    const auto list = parse_index_list(key, value);
    require(list.size() == 4, "key 'stages': expected four comma-separated block counts");
    std::copy(list.begin(), list.end(), cfg.stage_blocks.begin());
    cfg.depth = 0;
  } else if (key == "radix") {
    cfg.radix = parse_int(key, value);
  } else if (key == "cardinality") {
    cfg.cardinality = parse_int(key, value);
  } else if (key == "base_width") {
    cfg.base_width = parse_int(key, value);
  } else if (key == "variant") {
    cfg.set_notation(value);
  } else if (key == "fast") {
    cfg.fast = parse_bool(key, value);
  } else if (key == "avg_down") {
    cfg.avg_down = parse_bool(key, value);
  } else if (key == "deep_stem") {
    cfg.deep_stem = parse_bool(key, value);
  } else if (key == "stem_width") {
    cfg.stem_width = parse_int(key, value);
  } else if (key == "planes") {
    cfg.base_planes = parse_int(key, value);
  } else if (key == "dropout") {
    cfg.dropout = parse_double(key, value);
  } else if (key == "dropblock_prob") {
    cfg.dropblock_prob = parse_double(key, value);
  } else if (key == "dropblock_size") {
    cfg.dropblock_size = parse_int(key, value);
  } else if (key == "classes") {
    cfg.num_classes = parse_int(key, value);
  } else if (key == "input_channels") {
    cfg.input_channels = parse_int(key, value);
  } else if (key == "attention_bn") {
    cfg.attention_bn = parse_bool(key, value);
  } else {
    return false;
  }
  return true;
}

SplatConfig BlockConfig::splat() const {
  SplatConfig s;
  s.in_channels = in_channels;
  s.channels = group_width();
  s.radix = radix;
  s.cardinality = cardinality;
  s.mid_channels = group_width();
  s.stride = stride;
  s.fast = fast;
  s.attention = attention;
  s.attention_bn = attention_bn;
  return s;
}

std::vector<BlockConfig> plan_blocks(const NetworkConfig& cfg) {
  std::vector<BlockConfig> blocks;
  Index in = stem_out_channels(cfg);
  for (Index stage = 0; stage < 4; ++stage) {
    const Index planes = cfg.base_planes << stage;
    for (Index b = 0; b < cfg.stage_blocks[static_cast<std::size_t>(stage)]; ++b) {
      BlockConfig block;
      block.name = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(b);
      block.stage = stage;
      block.in_channels = in;
      block.planes = planes;
      block.stride = (stage > 0 && b == 0) ? 2 : 1;
      block.radix = cfg.radix;
      block.cardinality = cfg.cardinality;
      block.base_width = cfg.base_width;
      block.fast = cfg.fast;
      block.avg_down = cfg.avg_down;
      block.attention_bn = cfg.attention_bn;
      block.zero_init_residual = cfg.zero_init_residual;
      block.dropblock = stage >= 2 && cfg.dropblock_prob > 0.0;
      block.dropblock_prob = cfg.dropblock_prob;
      block.dropblock_size = cfg.dropblock_size;
      blocks.push_back(block);
      in = block.out_channels();
    }
  }
  return blocks;
}

}  // namespace resnest
