#include "resnest/analysis.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

namespace resnest {

Index CostReport::total_params() const {
  Index sum = 0;
  for (const auto& r : rows) sum += r.params;
  return sum;
}

Index CostReport::total_macs() const {
  Index sum = 0;
  for (const auto& r : rows) sum += r.macs;
  return sum;
}

Index CostReport::total_aux() const {
  Index sum = 0;
  for (const auto& r : rows) sum += r.aux_ops;
  return sum;
}

Index CostReport::conv_macs() const {
  Index sum = 0;
  for (const auto& r : rows) {
    if (r.kind == "conv") sum += r.macs;
  }
  return sum;
}

namespace {

class Walker {
 public:
  explicit Walker(CostReport& report) : report_(report) {}

  FeatureShape conv(const std::string& path, FeatureShape in, Index out_channels, Index kernel,
                    Index stride, Index pad, Index groups, bool bias = false) {
    require(in.channels % groups == 0 && out_channels % groups == 0,
            path + ": channels not divisible by groups " + std::to_string(groups));
    FeatureShape out{out_channels, conv_out_extent(in.h, kernel, pad, stride, "height"),
                     conv_out_extent(in.w, kernel, pad, stride, "width")};
    const Index per_output = in.channels / groups * kernel * kernel;
    const Index params = out_channels * per_output + (bias ? out_channels : 0);
    const Index macs = out.channels * out.h * out.w * per_output;
    add(path, "conv", out, params, macs, 0);
    return out;
  }

  FeatureShape bn(const std::string& path, FeatureShape in) {
    add(path, "bn", in, 2 * in.channels, 0, 2 * elements(in));
    return in;
  }

  FeatureShape relu(const std::string& path, FeatureShape in) {
    add(path, "relu", in, 0, 0, elements(in));
    return in;
  }

  FeatureShape pool(const std::string& path, FeatureShape in, Index kernel, Index stride, Index pad) {
    FeatureShape out{in.channels, conv_out_extent(in.h, kernel, pad, stride, "height"),
                     conv_out_extent(in.w, kernel, pad, stride, "width")};
    add(path, "pool", out, 0, 0, elements(out) * kernel * kernel);
    return out;
  }

  Index fc(const std::string& path, Index in, Index out, Index groups, bool bias) {
    const Index macs = out * (in / groups);
    add(path, "fc", Shape{out}, macs + (bias ? out : 0), macs, 0);
    return out;
  }

  void vector_bn(const std::string& path, Index features) {
    add(path, "bn", Shape{features}, 2 * features, 0, 2 * features);
  }

  void aux(const std::string& path, const std::string& kind, Shape output, Index ops) {
    add(path, kind, std::move(output), 0, 0, ops);
  }

  static Index elements(FeatureShape s) { return s.channels * s.h * s.w; }

 private:
  void add(const std::string& path, const std::string& kind, FeatureShape s, Index params,
           Index macs, Index aux) {
    add(path, kind, Shape{s.channels, s.h, s.w}, params, macs, aux);
  }
  void add(const std::string& path, const std::string& kind, Shape s, Index params, Index macs,
           Index aux) {
    report_.rows.push_back(CostRow{path, kind, std::move(s), params, macs, aux});
  }

  CostReport& report_;
};

}  // namespace

FeatureShape describe_splat(const SplatConfig& cfg, const std::string& path, FeatureShape in,
                            CostReport& report) {
  cfg.validate();
  require(in.channels == cfg.in_channels,
          path + ": expected " + std::to_string(cfg.in_channels) + " input channels");
  Walker w(report);
  const Index c = cfg.channels;
  const Index r = cfg.radix;
  const Index k = cfg.cardinality;
  auto t = w.conv(path + ".conv1", in, cfg.mid(), 1, 1, 0, 1);
  t = w.bn(path + ".bn1", t);
  t = w.relu(path + ".relu1", t);
  const bool pool_before = cfg.stride > 1 && cfg.fast;
  const bool pool_after = cfg.stride > 1 && !cfg.fast;
  if (pool_before) t = w.pool(path + ".pool", t, 3, cfg.stride, 1);
  t = w.conv(path + ".conv2", t, cfg.split_channels(), 3, 1, 1, cfg.groups());
  t = w.bn(path + ".bn2", t);
  t = w.relu(path + ".relu2", t);
  if (pool_after) t = w.pool(path + ".pool", t, 3, cfg.stride, 1);
  const FeatureShape out{c, t.h, t.w};
  if (!cfg.attention) {
    w.aux(path + ".fuse", "fuse", Shape{c, t.h, t.w}, Walker::elements(out) * (r - 1));
    return out;
  }
  w.aux(path + ".fuse", "fuse", Shape{c, t.h, t.w}, Walker::elements(out) * (r - 1));
  w.aux(path + ".gap", "gap", Shape{c}, Walker::elements(out));
  w.fc(path + ".fc1", c, cfg.inner(), k, !cfg.attention_bn);
  if (cfg.attention_bn) w.vector_bn(path + ".fc_bn", cfg.inner());
  w.aux(path + ".fc_relu", "relu", Shape{cfg.inner()}, cfg.inner());
  w.fc(path + ".fc2", cfg.inner(), c * r, k, true);
  w.aux(path + ".rsoftmax", "softmax", Shape{c * r}, 3 * c * r);
  w.aux(path + ".attend", "fuse", Shape{c, t.h, t.w}, Walker::elements(out) * r);
  return out;
}

FeatureShape describe_block(const BlockConfig& block, FeatureShape in, CostReport& report) {
  require(in.channels == block.in_channels,
          block.name + ": expected " + std::to_string(block.in_channels) + " input channels");
  Walker w(report);
  const std::string& n = block.name;
  const Index width = block.group_width();
  FeatureShape t;
  if (block.radix >= 1) {
    t = describe_splat(block.splat(), n + ".splat", in, report);
  } else {
    t = w.conv(n + ".conv1", in, width, 1, 1, 0, 1);
    t = w.bn(n + ".bn1", t);
    t = w.relu(n + ".relu1", t);
    t = w.conv(n + ".conv2", t, width, 3, block.stride, 1, block.cardinality);
    t = w.bn(n + ".bn2", t);
    t = w.relu(n + ".relu2", t);
  }
  t = w.conv(n + ".conv3", t, block.out_channels(), 1, 1, 0, 1);
  t = w.bn(n + ".bn3", t);
  if (block.has_shortcut_conv()) {
    FeatureShape s = in;
    Index conv_stride = block.stride;
    if (block.avg_down) {
      conv_stride = 1;
      if (block.stride > 1) s = w.pool(n + ".down.pool", s, 2, 2, 0);
    }
    s = w.conv(n + ".down.conv", s, block.out_channels(), 1, conv_stride, 0, 1);
    s = w.bn(n + ".down.bn", s);
    require(s.h == t.h && s.w == t.w, n + ": shortcut and branch spatial sizes differ");
  }
  w.aux(n + ".add", "add", Shape{t.channels, t.h, t.w}, Walker::elements(t));
  w.relu(n + ".relu", t);
  return t;
}

CostReport describe_network(const NetworkConfig& cfg, Index h, Index w) {
  cfg.validate();
  require(h >= kMinInputSize && w >= kMinInputSize,
          "input " + std::to_string(h) + "x" + std::to_string(w) + " is below the minimum size " +
              std::to_string(kMinInputSize) + "x" + std::to_string(kMinInputSize));
  CostReport report;
  report.config = cfg.describe();
  report.input_h = h;
  report.input_w = w;
  Walker walk(report);
  FeatureShape t{cfg.input_channels, h, w};
  const Index sw = cfg.stem_width;
  if (cfg.deep_stem) {
    t = walk.conv("stem.conv1", t, sw, 3, 2, 1, 1);
    t = walk.relu("stem.relu1", walk.bn("stem.bn1", t));
    t = walk.conv("stem.conv2", t, sw, 3, 1, 1, 1);
    t = walk.relu("stem.relu2", walk.bn("stem.bn2", t));
    t = walk.conv("stem.conv3", t, 2 * sw, 3, 1, 1, 1);
    t = walk.relu("stem.relu3", walk.bn("stem.bn3", t));
  } else {
    t = walk.conv("stem.conv1", t, 2 * sw, 7, 2, 3, 1);
    t = walk.relu("stem.relu1", walk.bn("stem.bn1", t));
  }
  t = walk.pool("stem.maxpool", t, 3, 2, 1);
  for (const auto& block : plan_blocks(cfg)) t = describe_block(block, t, report);
  walk.aux("head.gap", "gap", Shape{t.channels}, Walker::elements(t));
  walk.fc("fc", t.channels, cfg.num_classes, 1, true);
  return report;
}

CostReport count_params(const NetworkConfig& cfg) {
  return describe_network(cfg, 224, 224);
}

CostReport count_flops(const NetworkConfig& cfg, Index h, Index w) {
  return describe_network(cfg, h, w);
}

ParityReport block_cost_parity(const BlockConfig& splat, const BlockConfig& residual, Index h,
                               Index w) {
  require(splat.in_channels == residual.in_channels,
          "parity blocks must share their input width");
  CostReport a, b;
  describe_block(splat, FeatureShape{splat.in_channels, h, w}, a);
  describe_block(residual, FeatureShape{residual.in_channels, h, w}, b);
  ParityReport p;
  p.splat_params = a.total_params();
  p.residual_params = b.total_params();
  p.splat_macs = a.total_macs();
  p.residual_macs = b.total_macs();
  p.splat_conv_macs = a.conv_macs();
  p.residual_conv_macs = b.conv_macs();
  return p;
}

std::optional<ReferenceFigures> reference_for(const NetworkConfig& cfg) {
  const bool layout50 = cfg.stage_blocks == std::array<Index, 4>{3, 4, 6, 3};
  if (!layout50 || cfg.base_planes != 64 || cfg.num_classes != 1000 || cfg.input_channels != 3) {
    return std::nullopt;
  }
  if (cfg.radix == 0 && cfg.cardinality == 1 && cfg.base_width == 64) {
    if (!cfg.deep_stem && !cfg.avg_down && cfg.stem_width == 32) {
      return ReferenceFigures{"ResNet-50", 25.5, 4.14, 0.01, 0.03};
    }
    if (cfg.deep_stem && cfg.avg_down && cfg.stem_width == 32) {
      return ReferenceFigures{"ResNetD-50", 25.6, 4.34, 0.01, 0.03};
    }
  }
  if (cfg.radix == 0 && cfg.cardinality == 32 && cfg.base_width == 4 && !cfg.deep_stem &&
      !cfg.avg_down) {
    return ReferenceFigures{"ResNeXt-50 32x4d", 25.0, 4.24, 0.01, 0.03};
  }
  if (cfg.radix == 2 && cfg.cardinality == 8 && cfg.base_width == 14 && cfg.fast &&
      cfg.deep_stem && cfg.avg_down && cfg.stem_width == 32) {
    return ReferenceFigures{"ResNeSt-50-fast 2s8x14d", 27.5, 4.34, 0.02, 0.03};
  }
  return std::nullopt;
}

void print_report(std::ostream& out, const CostReport& report) {
  std::size_t path_width = 4;
  for (const auto& r : report.rows) path_width = std::max(path_width, r.path.size());
  out << "# " << report.config << "\n";
  out << "# input " << report.input_h << "x" << report.input_w << ", FLOPs counted as MACs\n";
  out << std::left << std::setw(static_cast<int>(path_width)) << "path" << "  " << std::setw(7)
      << "kind" << "  " << std::setw(16) << "output" << std::right << "  " << std::setw(10)
      << "params" << "  " << std::setw(13) << "macs" << "  " << std::setw(11) << "aux" << "\n";
  for (const auto& r : report.rows) {
    out << std::left << std::setw(static_cast<int>(path_width)) << r.path << "  " << std::setw(7)
        << r.kind << "  " << std::setw(16) << to_string(r.output) << std::right << "  "
        << std::setw(10) << r.params << "  " << std::setw(13) << r.macs << "  " << std::setw(11)
        << r.aux_ops << "\n";
  }
  const auto params = report.total_params();
  const auto macs = report.total_macs();
  out << std::fixed << std::setprecision(3);
  out << "total params " << params << " (" << double(params) / 1e6 << "M)\n";
  out << "total macs " << macs << " (" << double(macs) / 1e9 << "G)\n";
  out << "aux ops (not in total) " << report.total_aux() << "\n";
  out.unsetf(std::ios::floatfield);
}

void print_machine_readable(std::ostream& out, const CostReport& report) {
  for (const auto& r : report.rows) out << r.path << "\t" << r.params << "\t" << r.macs << "\n";
  out << "total\t" << report.total_params() << "\t" << report.total_macs() << "\n";
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t hash) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

BenchStats summarize_timings(std::vector<double> ms, Index batch) {
  require(!ms.empty(), "no timings to summarize");
  BenchStats s;
  s.reps = static_cast<Index>(ms.size());
  s.batch = batch;
  std::sort(ms.begin(), ms.end());
  s.min_ms = ms.front();
  const std::size_t mid = ms.size() / 2;
  s.median_ms = ms.size() % 2 ? ms[mid] : 0.5 * (ms[mid - 1] + ms[mid]);
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / double(ms.size());
  s.per_image_ms = s.median_ms / double(batch);
  return s;
}

}  // namespace resnest
