#pragma once

// Procedural outdoor-like scenes in [0, 1]: a vertical sky/ground gradient,
// shaded discs and boxes, sinusoidal texture and dark shadow regions, so the
// clean images contain both saturated colours and near-black pixels.

#include <algorithm>
#include <cmath>
#include <vector>

#include "uidkat/rng.hpp"
#include "uidkat/tensor.hpp"

namespace uidkat::testing {

inline Tensor<float> make_scene(Rng& rng, std::size_t size) {
  const std::size_t n = size * size;
  Tensor<float> img({3, size, size});
  const double horizon = rng.uniform(0.3, 0.6);
  double sky[3], ground[3];
  for (int c = 0; c < 3; ++c) {
    sky[c] = rng.uniform(0.3, 0.9);
    ground[c] = rng.uniform(0.05, 0.5);
  }
  const double fx = rng.uniform(2, 9), fy = rng.uniform(2, 9), phase = rng.uniform(0, 6.3);
  const double tex = rng.uniform(0.02, 0.15);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size, v = (y + 0.5) / size;
      const bool is_sky = v < horizon;
      const double t = is_sky ? v / horizon : (v - horizon) / (1 - horizon);
      const double wave = tex * std::sin(6.2832 * (fx * u + fy * v) + phase);
      for (int c = 0; c < 3; ++c) {
        const double base = is_sky ? sky[c] * (0.8 + 0.2 * t) : ground[c] * (1.2 - 0.5 * t);
        img[c * n + y * size + x] = static_cast<float>(base + (is_sky ? 0.0 : wave));
      }
    }
  }
  const std::size_t shapes = 3 + static_cast<std::size_t>(rng.below(4));
  for (std::size_t s = 0; s < shapes; ++s) {
    const double cx = rng.uniform(0, 1), cy = rng.uniform(0.2, 1), r = rng.uniform(0.06, 0.25);
    const bool disc = rng.below(2) == 0;
    double col[3];
    const std::size_t dominant = rng.below(3);
    for (int c = 0; c < 3; ++c) col[c] = c == static_cast<int>(dominant) ? rng.uniform(0.5, 1.0) : rng.uniform(0.0, 0.35);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x + 0.5) / size - cx, dy = (y + 0.5) / size - cy;
        const bool inside = disc ? dx * dx + dy * dy < r * r
                                 : std::abs(dx) < r && std::abs(dy) < 0.7 * r;
        if (!inside) continue;
        const double shade = 1.0 - 0.6 * std::clamp((dx + dy) / (2 * r) + 0.5, 0.0, 1.0);
        for (int c = 0; c < 3; ++c) img[c * n + y * size + x] = static_cast<float>(col[c] * shade);
      }
    }
  }
  // A shadow band keeps near-black pixels in every scene.
  const double sy = rng.uniform(0.7, 0.95), sh = rng.uniform(0.03, 0.08);
  for (std::size_t y = 0; y < size; ++y) {
    const double v = (y + 0.5) / size;
    if (std::abs(v - sy) > sh) continue;
    for (std::size_t x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) img[c * n + y * size + x] *= 0.15f;
    }
  }
  for (auto& v : img.vec()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

inline std::vector<Tensor<float>> make_scenes(const Rng& rng, std::size_t count,
                                              std::size_t size) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = rng.stream("scene", i);
    out.push_back(make_scene(r, size));
  }
  return out;
}

}  // namespace uidkat::testing
