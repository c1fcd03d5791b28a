#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hitl/model.hpp"

namespace hitl {

/// Normalized Grad-CAM grid. values[y * width + x]; x indexes columns.
struct AttentionMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> values;
  std::string source_image_id;
  int class_index = 0;

  float at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }
  bool all_zero() const {
    return std::all_of(values.begin(), values.end(), [](float v) { return v <= 0.0f; });
  }
  float total() const {
    double s = 0.0;
    for (float v : values) s += v;
    return static_cast<float>(s);
  }
  Tensor as_tensor() const { return Tensor({height, width}, values); }

  bool operator==(const AttentionMap&) const = default;
};

/// Grad-CAM channel weights: per-channel spatial mean of d(class logit)/d(features).
/// `feature_grad` is [N, C, h, w]; returns one [C] tensor per batch item.
template <class T>
std::vector<BasicTensor<T>> channel_weights(const BasicTensor<T>& feature_grad) {
  const std::size_t N = feature_grad.dim(0), C = feature_grad.dim(1);
  const std::size_t HW = feature_grad.dim(2) * feature_grad.dim(3);
  std::vector<BasicTensor<T>> out;
  for (std::size_t n = 0; n < N; ++n) {
    BasicTensor<T> w({C});
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      const T* p = feature_grad.raw() + (n * C + c) * HW;
      for (std::size_t k = 0; k < HW; ++k) acc += p[k];
      w[c] = static_cast<T>(acc / static_cast<double>(HW));
    }
    out.push_back(std::move(w));
  }
  return out;
}

/// relu(sum_c w_c * A_c) / max, as a differentiable [h, w] map of the
/// activations of batch item `index`; the weights are constants.
template <class T>
Var<T> attention_graph(const Var<T>& features, std::size_t index, const BasicTensor<T>& weights) {
  return normalize_max(relu(channel_weighted_sum(slice_batch(features, index), weights)));
}

/// Seeds the backward pass with a one-hot vector on `class_index` for every row.
template <class T>
BasicTensor<T> class_seed(std::size_t batch, std::size_t classes, int class_index) {
  BasicTensor<T> seed({batch, classes});
  for (std::size_t n = 0; n < batch; ++n) seed[n * classes + static_cast<std::size_t>(class_index)] = T(1);
  return seed;
}

inline void require_class(const ClassifierConfig& cfg, int class_index) {
  if (class_index < 0 || static_cast<std::size_t>(class_index) >= cfg.num_classes) {
    throw ContractError("class index " + std::to_string(class_index) + " outside [0," +
                        std::to_string(cfg.num_classes) + ")");
  }
}

inline AttentionMap to_attention_map(const Tensor& normalized, std::string id, int class_index) {
  AttentionMap m;
  m.height = normalized.dim(0);
  m.width = normalized.dim(1);
  m.values = normalized.vec();
  m.source_image_id = std::move(id);
  m.class_index = class_index;
  return m;
}

/// Grad-CAM for a batch of images [N,C,H,W] at the model's target layer.
template <class T>
std::vector<AttentionMap> grad_cam_batch(const BasicClassifier<T>& model, const BasicTensor<T>& images,
                                         int class_index, const std::vector<std::string>& ids = {}) {
  require_class(model.config(), class_index);
  auto fwd = model.forward(images);
  const std::size_t N = images.dim(0);
  const BasicTensor<T> g =
      grad(fwd.logits, fwd.target_features, class_seed<T>(N, model.config().num_classes, class_index));
  const auto weights = channel_weights(g);
  std::vector<AttentionMap> maps;
  NoGradGuard no_grad;
  for (std::size_t n = 0; n < N; ++n) {
    const auto cam = attention_graph(fwd.target_features, n, weights[n]).value().template cast<float>();
    maps.push_back(to_attention_map(cam, n < ids.size() ? ids[n] : std::string(), class_index));
  }
  return maps;
}

inline AttentionMap grad_cam(const Classifier& model, const Tensor& image, int class_index,
                             const std::string& id = {}) {
  return grad_cam_batch(model, as_batch(image), class_index, {id}).front();
}

/// Grad-CAM for every sample of a dataset, evaluated in chunks.
inline std::vector<AttentionMap> grad_cam_all(const Classifier& model, const std::vector<const Sample*>& items,
                                              int class_index, std::size_t chunk = 32) {
  std::vector<AttentionMap> maps;
  maps.reserve(items.size());
  for (std::size_t start = 0; start < items.size(); start += chunk) {
    std::vector<const Sample*> part(items.begin() + static_cast<long>(start),
                                    items.begin() + static_cast<long>(std::min(items.size(), start + chunk)));
    std::vector<std::string> ids;
    for (const auto* s : part) ids.push_back(s->id);
    auto got = grad_cam_batch(model, stack_images(part), class_index, ids);
    for (auto& m : got) maps.push_back(std::move(m));
  }
  return maps;
}

/// Bilinear upsampling with cell-center alignment: grid cell i covers target
/// pixels [i*s, (i+1)*s). Edges are clamped and the result is rescaled so that
/// its maximum equals the source maximum.
inline AttentionMap upsample_attention(const AttentionMap& map, std::size_t target_w, std::size_t target_h) {
  if (map.values.empty()) throw ContractError("upsample_attention of an empty map");
  if (target_w < map.width || target_h < map.height) {
    throw ContractError("upsample_attention target " + std::to_string(target_w) + "x" + std::to_string(target_h) +
                        " is smaller than the source grid");
  }
  if (target_w == map.width && target_h == map.height) return map;
  AttentionMap out = map;
  out.width = target_w;
  out.height = target_h;
  out.values.assign(target_w * target_h, 0.0f);
  auto coord = [](std::size_t dst, std::size_t dst_n, std::size_t src_n) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_n) / static_cast<double>(dst_n) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(src_n - 1));
  };
  double src_max = 0.0, dst_max = 0.0;
  for (float v : map.values) src_max = std::max(src_max, static_cast<double>(v));
  for (std::size_t y = 0; y < target_h; ++y) {
    const double sy = coord(y, target_h, map.height);
    const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, map.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_w; ++x) {
      const double sx = coord(x, target_w, map.width);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, map.width - 1);
      const double fx = sx - static_cast<double>(x0);
      const double v = (1 - fy) * ((1 - fx) * map.at(x0, y0) + fx * map.at(x1, y0)) +
                       fy * ((1 - fx) * map.at(x0, y1) + fx * map.at(x1, y1));
      out.values[y * target_w + x] = static_cast<float>(v);
      dst_max = std::max(dst_max, v);
    }
  }
  if (dst_max > 0.0 && src_max > 0.0 && std::abs(dst_max - src_max) > 1e-7 * src_max) {
    const double k = src_max / dst_max;
    for (auto& v : out.values) v = static_cast<float>(v * k);
  }
  return out;
}

}  // namespace hitl
