#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "hitl/gradcam.hpp"
#include "hitl/image_io.hpp"

namespace hitl {

using Rgb = std::array<std::uint8_t, 3>;

/// 256-entry heatmap palette (black-blue-cyan-yellow-red ramp), indexed by
/// round(value * 255).
inline const std::array<Rgb, 256>& heatmap_palette() {
  static const std::array<Rgb, 256> table = [] {
    struct Stop {
      double at, r, g, b;
    };
    const Stop stops[] = {{0.0, 0, 0, 0}, {0.25, 0, 0, 255}, {0.5, 0, 255, 255}, {0.75, 255, 255, 0}, {1.0, 255, 0, 0}};
    std::array<Rgb, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double v = i / 255.0;
      std::size_t k = 0;
      while (k + 2 < std::size(stops) && v > stops[k + 1].at) ++k;
      const Stop& a = stops[k];
      const Stop& b = stops[k + 1];
      const double f = (v - a.at) / (b.at - a.at);
      auto mix = [f](double x, double y) { return static_cast<std::uint8_t>(std::lround(x + f * (y - x))); };
      t[static_cast<std::size_t>(i)] = {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
    }
    return t;
  }();
  return table;
}

/// Colorizes an attention map at `width` x `height` (upsampled with
/// upsample_attention). With a base image, blends the heatmap over it.
inline RawImage render_heatmap(const AttentionMap& map, std::size_t width, std::size_t height,
                               const Tensor* base = nullptr, float opacity = 0.5f) {
  const AttentionMap up = upsample_attention(map, width, height);
  RawImage out{width, height, 3, std::vector<std::uint8_t>(width * height * 3)};
  std::optional<RawImage> under;
  if (base) {
    if (base->dim(1) != height || base->dim(2) != width) throw ContractError("render_heatmap: base image size mismatch");
    under = to_raw(*base);
  }
  const auto& palette = heatmap_palette();
  for (std::size_t i = 0; i < width * height; ++i) {
    const Rgb& c = palette[to_byte(up.values[i])];
    for (std::size_t ch = 0; ch < 3; ++ch) {
      float v = c[ch];
      if (under) {
        const float u = under->pixels[i * under->channels + std::min(ch, under->channels - 1)];
        v = opacity * v + (1.0f - opacity) * u;
      }
      out.pixels[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 255.0f)));
    }
  }
  return out;
}

}  // namespace hitl
