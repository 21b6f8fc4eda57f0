#ifndef RESNEST_REGULARIZATION_HPP
#define RESNEST_REGULARIZATION_HPP

#include "resnest/ops.hpp"

#include <algorithm>
#include <vector>

namespace resnest {

/// Seed rate that makes the expected dropped fraction roughly drop_prob.
inline double dropblock_gamma(Index h, Index w, Index block_size, double drop_prob) {
  return drop_prob * static_cast<double>(h * w) /
         static_cast<double>(block_size * block_size * (h - block_size + 1) * (w - block_size + 1));
}

/// Multiplicative DropBlock mask for an [N, C, H, W] activation.
///
/// Seeds are Bernoulli(gamma) at every position; each seed zeroes the
/// block_size x block_size square centred on it, clipped at the borders.
/// Survivors are rescaled by count_total / count_kept. Eval mode returns ones.
template <typename Scalar>
Tensor<Scalar> dropblock_mask(const Shape& shape, Index block_size, double drop_prob, Rng& rng,
                              Mode mode = Mode::train) {
  require(shape.size() == 4, "dropblock_mask expects an [N, C, H, W] shape");
  require(drop_prob >= 0.0 && drop_prob < 1.0, "dropblock drop_prob must be in [0, 1)");
  require(block_size >= 1 && block_size % 2 == 1,
          "dropblock block_size must be odd, got " + std::to_string(block_size));
  const Index h = shape[2];
  const Index w = shape[3];
  require(block_size <= std::min(h, w), "dropblock block_size " + std::to_string(block_size) +
                                            " exceeds min(H, W) = " +
                                            std::to_string(std::min(h, w)));
  Tensor<Scalar> mask(shape, Scalar(1));
  if (mode == Mode::eval || drop_prob == 0.0) return mask;

  const double gamma = dropblock_gamma(h, w, block_size, drop_prob);
  const Index half = block_size / 2;
  const Index planes = shape[0] * shape[1];
  for (Index p = 0; p < planes; ++p) {
    Scalar* plane = mask.data() + p * h * w;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        if (!rng.bernoulli(gamma)) continue;
        for (Index a = std::max<Index>(0, i - half); a <= std::min(h - 1, i + half); ++a) {
          for (Index b = std::max<Index>(0, j - half); b <= std::min(w - 1, j + half); ++b) {
            plane[a * w + b] = Scalar(0);
          }
        }
      }
    }
  }
  const Scalar kept = mask.vec().sum();
  if (kept > Scalar(0)) mask.vec() *= static_cast<Scalar>(mask.size()) / kept;
  return mask;
}

/// Largest odd block size not above `requested` that fits an H x W map.
inline Index fitted_block_size(Index requested, Index h, Index w) {
  Index size = std::min({requested, h, w});
  if (size % 2 == 0) --size;
  return std::max<Index>(size, 1);
}

}  // namespace resnest

#endif  // RESNEST_REGULARIZATION_HPP
