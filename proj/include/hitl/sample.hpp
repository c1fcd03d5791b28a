#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "hitl/tensor.hpp"

namespace hitl {

/// One labeled image. Masks are row-major at image resolution and empty when
/// the sample carries no ground truth (e.g. ingested folders).
struct Sample {
  std::string id;
  Tensor image;  // [C, H, W], values in [0, 1]
  int label = 0;
  // 0 = background, k >= 1 = pixel belongs to target instance k.
  std::vector<std::uint8_t> target_mask;
  // 1 = distractor pixel.
  std::vector<std::uint8_t> distractor_mask;

  std::size_t channels() const { return image.dim(0); }
  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
  bool has_masks() const { return !target_mask.empty() && !distractor_mask.empty(); }
  bool has_distractor() const {
    for (auto v : distractor_mask)
      if (v) return true;
    return false;
  }
  int target_instances() const {
    int n = 0;
    for (auto v : target_mask) n = std::max<int>(n, v);
    return n;
  }

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  const Sample* find(const std::string& id) const {
    for (const auto& s : samples)
      if (s.id == id) return &s;
    return nullptr;
  }

  bool operator==(const Dataset&) const = default;
};

/// Stacks the selected samples into an [N, C, H, W] batch.
inline Tensor stack_images(const std::vector<const Sample*>& items) {
  if (items.empty()) throw ContractError("stack_images: empty batch");
  const Shape& s = items.front()->image.shape();
  Shape shape{items.size(), s[0], s[1], s[2]};
  std::vector<float> data;
  data.reserve(shape_numel(shape));
  for (const Sample* it : items) {
    if (it->image.shape() != s) {
      throw DimensionError("stack_images: image " + it->id + " has shape " + shape_str(it->image.shape()) +
                           ", expected " + shape_str(s));
    }
    data.insert(data.end(), it->image.data().begin(), it->image.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace hitl
