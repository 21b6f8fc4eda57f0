#include "resnest/training.hpp"

#include <numbers>

namespace resnest {

SyntheticDataset make_synthetic(const SyntheticConfig& cfg) {
  require(cfg.samples >= 2, "synthetic set needs at least two samples");
  require(cfg.size >= 4, "synthetic images must be at least 4x4");
  require(cfg.channels >= 1, "synthetic images need at least one channel");
  require(cfg.noise >= 0.0, "noise must be >= 0");
  constexpr double pi = std::numbers::pi;
  Rng rng(cfg.seed, 0xda7a);
  SyntheticDataset out;
  out.images = Tensor<double>(Shape{cfg.samples, cfg.channels, cfg.size, cfg.size});
  out.labels.resize(static_cast<std::size_t>(cfg.samples));
  const Index plane = cfg.size * cfg.size;
  std::vector<double> pattern(static_cast<std::size_t>(plane));
  for (Index n = 0; n < cfg.samples; ++n) {
    const Index label = n % 2;
    out.labels[static_cast<std::size_t>(n)] = label;
    const double contrast = 0.5 + rng.uniform();
    if (label == 0) {
      // Oriented bars.
      const double theta = pi * rng.uniform();
      const double period = 4.0 + 6.0 * rng.uniform();
      const double phase = 2.0 * pi * rng.uniform();
      const double cx = std::cos(theta);
      const double sy = std::sin(theta);
      for (Index i = 0; i < cfg.size; ++i) {
        for (Index j = 0; j < cfg.size; ++j) {
          pattern[static_cast<std::size_t>(i * cfg.size + j)] =
              std::sin(2.0 * pi * (double(j) * cx + double(i) * sy) / period + phase);
        }
      }
    } else {
      // Checkerboard with square cells.
      const double cell = 2.0 + 4.0 * rng.uniform();
      const double ox = 2.0 * cell * rng.uniform();
      const double oy = 2.0 * cell * rng.uniform();
      for (Index i = 0; i < cfg.size; ++i) {
        for (Index j = 0; j < cfg.size; ++j) {
          const auto a = static_cast<long long>(std::floor((double(j) + ox) / cell));
          const auto b = static_cast<long long>(std::floor((double(i) + oy) / cell));
          pattern[static_cast<std::size_t>(i * cfg.size + j)] = ((a + b) % 2 == 0) ? 1.0 : -1.0;
        }
      }
    }
    for (Index c = 0; c < cfg.channels; ++c) {
      double* dst = out.images.data() + (n * cfg.channels + c) * plane;
      for (Index p = 0; p < plane; ++p) {
        dst[p] = contrast * pattern[static_cast<std::size_t>(p)] + cfg.noise * rng.normal();
      }
    }
  }
  return out;
}

}  // namespace resnest
