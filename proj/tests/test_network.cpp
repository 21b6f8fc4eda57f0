#include "resnest/analysis.hpp"
#include "resnest/network.hpp"
#include "resnest/training.hpp"
#include "resnest/verify.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <map>
#include <numeric>

using namespace resnest;
using namespace testing_util;

namespace {

NetworkConfig micro(Index radix = 2) {
  auto cfg = TrainConfig::micro_network();
  cfg.radix = radix;
  cfg.dropblock_prob = 0.0;
  return cfg;
}

// Perturb BN shifts/scales and biases so no branch is silent.
template <typename Net>
void wake(Net& net, Rng& rng) {
  net.for_each_parameter([&](Parameter<double>& p) {
    if (p.value.rank() != 1) return;
    for (Index i = 0; i < p.value.size(); ++i) p.value[i] += 0.3 * rng.normal();
  });
}

struct Layer {
  std::string path;
  std::string kind;
  Shape output;
  friend bool operator==(const Layer&, const Layer&) = default;
};

std::ostream& operator<<(std::ostream& out, const Layer& l) {
  return out << l.path << " " << l.kind << " " << to_string(l.output);
}

// Hand-written ResNet-D bottleneck network: deep stem, 2x2 average-pooled
// projection shortcuts, stride on the 3x3 convolution.
std::vector<Layer> resnet_d_layers(const std::array<Index, 4>& stages, Index stem_width,
                                   Index planes0, Index size) {
  std::vector<Layer> out;
  Index h = size / 2;
  auto conv_bn = [&](const std::string& p, const std::string& conv, const std::string& bn,
                     Index c, Index hh) {
    out.push_back({p + conv, "conv", {c, hh, hh}});
    out.push_back({p + bn, "bn", {c, hh, hh}});
  };
  conv_bn("stem.", "conv1", "bn1", stem_width, h);
  conv_bn("stem.", "conv2", "bn2", stem_width, h);
  conv_bn("stem.", "conv3", "bn3", 2 * stem_width, h);
  h /= 2;
  out.push_back({"stem.maxpool", "pool", {2 * stem_width, h, h}});
  Index in = 2 * stem_width;
  for (Index s = 0; s < 4; ++s) {
    const Index planes = planes0 << s;
    for (Index b = 0; b < stages[static_cast<std::size_t>(s)]; ++b) {
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b) + ".";
      const Index stride = (s > 0 && b == 0) ? 2 : 1;
      conv_bn(p, "conv1", "bn1", planes, h);
      const Index ho = h / stride;
      conv_bn(p, "conv2", "bn2", planes, ho);
      conv_bn(p, "conv3", "bn3", 4 * planes, ho);
      if (stride != 1 || in != 4 * planes) {
        if (stride != 1) out.push_back({p + "down.pool", "pool", {in, ho, ho}});
        conv_bn(p, "down.conv", "down.bn", 4 * planes, ho);
      }
      in = 4 * planes;
      h = ho;
    }
  }
  out.push_back({"fc", "fc", {1000}});
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

TEST(NetworkConfig, DepthLayoutsSatisfyLayerCount) {
  for (const int depth : {50, 101, 200, 269}) {
    const auto cfg = NetworkConfig::for_depth(depth);
    const Index blocks = std::accumulate(cfg.stage_blocks.begin(), cfg.stage_blocks.end(), Index{0});
    EXPECT_EQ(3 * blocks + 2, depth);
    EXPECT_EQ(cfg.dropout > 0.0, depth > 200);
  }
  EXPECT_EQ(NetworkConfig::for_depth(50).stem_width, 32);
  EXPECT_EQ(NetworkConfig::for_depth(101).stem_width, 64);
  EXPECT_THROW(NetworkConfig::for_depth(34), ConfigError);
}

TEST(NetworkConfig, NotationRoundTrip) {
  NetworkConfig cfg;
  cfg.set_notation("2s8x14d");
  EXPECT_EQ(cfg.radix, 2);
  EXPECT_EQ(cfg.cardinality, 8);
  EXPECT_EQ(cfg.base_width, 14);
  EXPECT_EQ(cfg.notation(), "2s8x14d");
  EXPECT_THROW(cfg.set_notation("2x8s"), ConfigError);
}

TEST(NetworkConfig, KeysAndErrors) {
  NetworkConfig cfg;
  EXPECT_TRUE(apply_network_key(cfg, "variant", "4s2x40d"));
  EXPECT_TRUE(apply_network_key(cfg, "stages", "1,2,3,4"));
  EXPECT_EQ(cfg.depth, 0);
  EXPECT_EQ(cfg.stage_blocks[3], 4);
  EXPECT_FALSE(apply_network_key(cfg, "depht", "50"));
  EXPECT_THROW(apply_network_key(cfg, "radix", "two"), ConfigError);
  EXPECT_THROW(apply_network_key(cfg, "stages", "1,2"), ConfigError);
  NetworkConfig bad;
  bad.cardinality = 3;  // 64 planes * 64/64 * 3 = 192 channels, inner rule fine; radix 2 ok
  EXPECT_NO_THROW(bad.validate());
  bad.base_width = 1;
  bad.base_planes = 16;  // floor(16/64) = 0 group width
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(NetworkConfig, GroupWidthFollowsResNeXtConvention) {
  BlockConfig b;
  b.planes = 64;
  b.base_width = 14;
  b.cardinality = 8;
  EXPECT_EQ(b.group_width(), 14 * 8);
  b.planes = 128;
  EXPECT_EQ(b.group_width(), 28 * 8);
  b.base_width = 40;
  b.cardinality = 2;
  b.planes = 64;
  EXPECT_EQ(b.group_width(), 80);
}

TEST(NetworkConfig, DropBlockOnlyInLastTwoStages) {
  auto cfg = micro();
  cfg.dropblock_prob = 0.1;
  for (const auto& b : plan_blocks(cfg)) EXPECT_EQ(b.dropblock, b.stage >= 2) << b.name;
}

// ---------------------------------------------------------------------------
// stem and blocks

TEST(Stem, ShapesAndParameterCount) {
  auto cfg = NetworkConfig::for_depth(101);  // stem_width 64
  Rng rng(1);
  Stem<double> stem(cfg, rng);
  Index params = 0;
  stem.for_each_parameter([&](Parameter<double>& p) { params += p.value.size(); });
  const Index w = 64;
  const Index hand = 3 * 3 * 3 * w + 3 * 3 * w * w + 3 * 3 * w * 2 * w + 2 * (w + w + 2 * w);
  EXPECT_EQ(params, hand);
  const auto walk = count_params(cfg);
  Index walked = 0;
  for (const auto& r : walk.rows) {
    if (r.path.rfind("stem.", 0) == 0) walked += r.params;
  }
  EXPECT_EQ(walked, hand);

  auto c32 = NetworkConfig::for_depth(50);
  Stem<double> small(c32, rng);
  EXPECT_EQ(small.forward(randn({1, 3, 224, 224}, rng), Mode::eval).shape(), (Shape{1, 64, 56, 56}));
}

TEST(Bottleneck, ZeroScaleBranchGivesReluOfInput) {
  Rng rng(2);
  for (const Index radix : {0, 1, 2}) {
    BlockConfig b;
    b.name = "b";
    b.in_channels = 16;
    b.planes = 4;
    b.radix = radix;
    b.zero_init_residual = true;
    Bottleneck<double> block(b, rng);
    auto x = randn({2, 16, 6, 6}, rng);
    const auto y = block.forward(x, Mode::train, nullptr);
    for (Index i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::max(x[i], 0.0));
  }
}

TEST(Bottleneck, StrideTwoHalvesAndExpands) {
  Rng rng(3);
  BlockConfig b;
  b.name = "b";
  b.in_channels = 16;
  b.planes = 8;
  b.stride = 2;
  Bottleneck<double> block(b, rng);
  EXPECT_EQ(block.forward(randn({2, 16, 8, 8}, rng), Mode::train, nullptr).shape(),
            (Shape{2, 32, 4, 4}));
}

TEST(Bottleneck, GradientsMatchOneSidedAgreement) {
  // ReLU kinks make central differences unreliable at a handful of entries:
  // where the forward and backward one-sided quotients disagree the step
  // crossed a kink and the entry is skipped.
  Rng rng(4);
  for (const Index radix : {0, 2}) {
    for (const Index stride : {1, 2}) {
      BlockConfig b;
      b.name = "b";
      b.in_channels = 16;
      b.planes = 8;
      b.radix = radix;
      b.stride = stride;
      b.zero_init_residual = false;
      Bottleneck<double> block(b, rng);
      wake(block, rng);
      auto x = randn({4, 16, 6, 6}, rng);
      auto proj = randn(block.forward(x, Mode::train, nullptr).shape(), rng);
      auto loss = [&] { return project(block.forward(x, Mode::train, nullptr), proj); };
      block.for_each_parameter([](Parameter<double>& p) { p.zero_grad(); });
      block.forward(x, Mode::train, nullptr);
      block.backward(proj);
      const double base = loss();
      Index total = 0, kinked = 0;
      double worst = 0;
      block.for_each_parameter([&](Parameter<double>& p) {
        const Index step = std::max<Index>(1, p.value.size() / 40);
        for (Index i = 0; i < p.value.size(); i += step) {
          const double saved = p.value[i], h = 1e-6;
          p.value[i] = saved + h;
          const double up = loss();
          p.value[i] = saved - h;
          const double down = loss();
          p.value[i] = saved;
          const double fwd = (up - base) / h, bwd = (base - down) / h;
          ++total;
          if (relative_error(fwd, bwd) > 1e-4) {
            ++kinked;
            continue;
          }
          worst = std::max(worst, relative_error(p.grad[i], 0.5 * (fwd + bwd)));
        }
      });
      EXPECT_LT(worst, 1e-4) << "radix " << radix << " stride " << stride;
      EXPECT_LT(kinked, total / 20) << "radix " << radix << " stride " << stride;
    }
  }
}

// ---------------------------------------------------------------------------
// whole network

TEST(Network, ResNeStLogitsShape) {
  auto cfg = NetworkConfig::for_depth(50);
  Rng rng(5);
  Network<float> net(cfg, rng);
  Tensor<float> x({2, 3, 64, 64});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
  const auto y = net.forward(x, Mode::eval);
  EXPECT_EQ(y.shape(), (Shape{2, 1000}));
  EXPECT_TRUE(y.all_finite());
  EXPECT_THROW(net.forward(Tensor<float>({1, 3, 16, 16}), Mode::eval), ConfigError);
  EXPECT_THROW(net.forward(Tensor<float>({1, 1, 64, 64}), Mode::eval), ConfigError);
}

TEST(Network, ZeroInitEqualsShortcutChain) {
  for (const Index radix : {0, 2}) {
    Rng rng(6);
    Network<double> net(micro(radix), rng);
    // Non-zero running statistics and shifts elsewhere; final BN beta stays 0.
    auto x = randn({3, 3, 32, 32}, rng);
    net.forward(x, Mode::train);
    EXPECT_LT(max_abs_diff(net.forward(x, Mode::eval), net.forward_shortcut_only(x, Mode::eval)),
              1e-10);
  }
}

TEST(Network, EvalLogitsIndependentOfBatchComposition) {
  Rng rng(7);
  Network<double> net(micro(), rng);
  wake(net, rng);
  auto batch = randn({4, 3, 32, 32}, rng);
  net.forward(batch, Mode::train);  // move the running statistics
  // Equal up to GEMM summation order, which depends on the row count.
  const auto all = net.forward(batch, Mode::eval);
  const Index per = 3 * 32 * 32;
  for (Index n = 0; n < 4; ++n) {
    Tensor<double> one({1, 3, 32, 32}, batch.vec().segment(n * per, per).eval());
    const auto y = net.forward(one, Mode::eval);
    for (Index c = 0; c < 2; ++c) EXPECT_NEAR(y(0, c), all(n, c), 1e-12);
  }
  Tensor<double> dup({2, 3, 32, 32});
  dup.vec().head(per) = batch.vec().head(per);
  dup.vec().tail(per) = batch.vec().head(per);
  const auto d = net.forward(dup, Mode::eval);
  EXPECT_EQ(d(0, 0), d(1, 0));
  EXPECT_EQ(d(0, 1), d(1, 1));
}

TEST(Network, ZeroInputGivesIdenticalRows) {
  Rng rng(8);
  Network<double> net(micro(), rng);
  const auto y = net.forward(Tensor<double>({3, 3, 32, 32}), Mode::eval);
  for (Index n = 1; n < 3; ++n) {
    EXPECT_EQ(y(n, 0), y(0, 0));
    EXPECT_EQ(y(n, 1), y(0, 1));
  }
}

TEST(Network, MicroGradientsAgreeAwayFromKinks) {
  Rng rng(9);
  auto cfg = micro();
  cfg.zero_init_residual = false;
  Network<double> net(cfg, rng);
  wake(net, rng);
  auto x = randn({2, 3, 32, 32}, rng);
  const std::vector<Index> labels{0, 1};
  auto loss = [&] { return label_smooth_ce(net.forward(x, Mode::train), labels, 0.1).loss; };
  net.zero_grad();
  net.backward(label_smooth_ce(net.forward(x, Mode::train), labels, 0.1).grad);
  const double base = loss();
  Index total = 0, kinked = 0;
  double worst = 0;
  for (auto* p : net.parameters()) {
    const Index step = std::max<Index>(1, p->value.size() / 6);
    for (Index i = 0; i < p->value.size(); i += step) {
      const double saved = p->value[i], h = 1e-6;
      p->value[i] = saved + h;
      const double up = loss();
      p->value[i] = saved - h;
      const double down = loss();
      p->value[i] = saved;
      const double fwd = (up - base) / h, bwd = (base - down) / h;
      ++total;
      if (relative_error(fwd, bwd) > 1e-3) {
        ++kinked;
        continue;
      }
      // absolute floor: many entries have gradients near rounding level
      const double num = 0.5 * (fwd + bwd);
      if (std::abs(num) + std::abs(p->grad[i]) < 1e-7) continue;
      worst = std::max(worst, relative_error(p->grad[i], num));
    }
  }
  EXPECT_LT(worst, 1e-3);
  EXPECT_LT(kinked, total / 10);
}

TEST(Network, RadixZeroIsResNetD) {
  auto cfg = NetworkConfig::for_depth(50);
  cfg.radix = 0;
  const auto report = describe_network(cfg, 224, 224);
  std::vector<Layer> walked;
  for (const auto& r : report.rows) {
    if (r.kind == "conv" || r.kind == "bn" || r.kind == "pool" || r.kind == "fc") {
      walked.push_back({r.path, r.kind, r.output});
    }
  }
  const auto expected = resnet_d_layers(cfg.stage_blocks, 32, 64, 224);
  ASSERT_EQ(walked.size(), expected.size());
  for (std::size_t i = 0; i < walked.size(); ++i) EXPECT_EQ(walked[i], expected[i]);

  // The built network holds exactly the parameters the walk describes.
  Rng rng(10);
  auto small = cfg;
  small.stage_blocks = {1, 2, 1, 1};
  small.depth = 0;
  Network<float> net(small, rng);
  std::map<std::string, Index> built;
  net.for_each_parameter([&](Parameter<float>& p) {
    const auto dot = p.name.rfind('.');
    built[p.name.substr(0, dot)] += p.value.size();
  });
  std::map<std::string, Index> described;
  for (const auto& r : describe_network(small, 64, 64).rows) {
    if (r.params > 0) described[r.path] += r.params;
  }
  EXPECT_EQ(built, described);
}

TEST(Network, StageResolutionsAt224) {
  const auto report = describe_network(NetworkConfig::for_depth(50), 224, 224);
  std::map<Index, Index> last_h;
  for (const auto& r : report.rows) {
    if (r.path.rfind("stage", 0) == 0 && r.output.size() == 3) {
      last_h[r.path[5] - '0'] = r.output[1];
    }
  }
  for (Index s = 1; s <= 4; ++s) EXPECT_EQ(last_h[s], 224 >> (s + 1)) << "stage " << s;
}

TEST(Network, ParameterNamesAreUnique) {
  Rng rng(11);
  Network<float> net(NetworkConfig::for_depth(50), rng);
  std::map<std::string, int> seen;
  net.for_each_parameter([&](Parameter<float>& p) { ++seen[p.name]; });
  net.for_each_buffer([&](const std::string& n, Tensor<float>&) { ++seen[n]; });
  for (const auto& [name, count] : seen) EXPECT_EQ(count, 1) << name;
}

TEST(Network, DropoutOnlyForDeepNetworksAndInTraining) {
  Rng rng(12);
  auto cfg = micro();
  cfg.dropout = 0.5;
  Network<double> net(cfg, rng);
  wake(net, rng);
  auto x = randn({2, 3, 32, 32}, rng);
  EXPECT_THROW(net.forward(x, Mode::train, nullptr), ConfigError);
  Rng a(1, 1), b(1, 1);
  EXPECT_EQ(net.forward(x, Mode::train, &a).vec(), net.forward(x, Mode::train, &b).vec());
  const auto e1 = net.forward(x, Mode::eval);
  const auto e2 = net.forward(x, Mode::eval);
  EXPECT_EQ(e1.vec(), e2.vec());
}
