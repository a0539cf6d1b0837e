#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "ttacil/tensor.hpp"

namespace ttacil {

/// Label-preserving random view generator: resized crop, horizontal flip,
/// rotation about the centre, then brightness/contrast jitter.
struct AugmentationPolicy {
  std::size_t views = 8;
  bool identity = false;
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double max_rotation_deg = 15.0;
  double brightness = 0.2;
  double contrast = 0.2;

  void validate() const {
    if (views == 0) throw std::invalid_argument("augmentation: views (M) must be >= 1");
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
      throw std::invalid_argument("augmentation: crop scales must satisfy 0 < min <= max <= 1");
    }
    if (flip_prob < 0.0 || flip_prob > 1.0) throw std::invalid_argument("augmentation: flip_prob in [0,1]");
    if (max_rotation_deg < 0.0 || brightness < 0.0 || contrast < 0.0 || contrast >= 1.0) {
      throw std::invalid_argument("augmentation: jitter magnitudes out of range");
    }
  }
};

namespace detail {

inline double bilinear(const Tensor& img, double x, double y, std::size_t c) {
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.dim(2);
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  auto at = [&](std::size_t yy, std::size_t xx) { return img[(yy * W + xx) * C + c]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace detail

/// `policy.views` augmented copies of an [H×W×C] image, drawn from `rng`.
inline std::vector<Tensor> augment(const Tensor& image, const AugmentationPolicy& policy,
                                   std::mt19937_64& rng) {
  policy.validate();
  if (image.rank() != 3) throw ShapeError("augment expects an [HxWxC] image, got " + shape_str(image.shape()));
  std::vector<Tensor> out;
  out.reserve(policy.views);
  if (policy.identity) {
    for (std::size_t m = 0; m < policy.views; ++m) out.push_back(image);
    return out;
  }
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t m = 0; m < policy.views; ++m) {
    const double area = policy.crop_scale_min + (policy.crop_scale_max - policy.crop_scale_min) * unit(rng);
    const double side = std::sqrt(area);
    const double ox = (1.0 - side) * unit(rng);
    const double oy = (1.0 - side) * unit(rng);
    const bool flip = unit(rng) < policy.flip_prob;
    const double angle = (2.0 * unit(rng) - 1.0) * policy.max_rotation_deg * std::numbers::pi / 180.0;
    const double bright = (2.0 * unit(rng) - 1.0) * policy.brightness;
    const double contr = 1.0 + (2.0 * unit(rng) - 1.0) * policy.contrast;
    const double ca = std::cos(angle), sa = std::sin(angle);

    Tensor view(image.shape());
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double tx = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
        const double ty = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        if (flip) tx = 1.0 - tx;
        // crop window in normalised coordinates, then rotate about the image centre
        const double cx = ox + side * tx - 0.5;
        const double cy = oy + side * ty - 0.5;
        const double rx = ca * cx - sa * cy + 0.5;
        const double ry = sa * cx + ca * cy + 0.5;
        const double sx = rx * static_cast<double>(W) - 0.5;
        const double sy = ry * static_cast<double>(H) - 0.5;
        for (std::size_t c = 0; c < C; ++c) view[(y * W + x) * C + c] = detail::bilinear(image, sx, sy, c);
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < H * W; ++i) mean += view[i * C + c];
      mean /= static_cast<double>(H * W);
      for (std::size_t i = 0; i < H * W; ++i) {
        double& v = view[i * C + c];
        v = std::clamp((v - mean) * contr + mean + bright, 0.0, 1.0);
      }
    }
    out.push_back(std::move(view));
  }
  return out;
}

}  // namespace ttacil
