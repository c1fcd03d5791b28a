#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/gradcam.hpp"
#include "hitl/superpixel.hpp"

namespace hitl {

struct GridPoint {
  double x = 0.0;  // column
  double y = 0.0;  // row
  bool operator==(const GridPoint&) const = default;
};

/// A user's directive for one image. Points are attention-grid coordinates.
struct Annotation {
  std::string image_id;
  std::vector<GridPoint> positive_points;
  std::set<int> negative_regions;
  bool cleared = false;
  std::pair<std::size_t, std::size_t> display_size{0, 0};  // (w, h) of the view the clicks came from
  std::int64_t timestamp = 0;

  bool has_guidance() const { return !cleared && (!positive_points.empty() || !negative_regions.empty()); }
  bool operator==(const Annotation&) const = default;
};

inline void to_json(nlohmann::json& j, const Annotation& a) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : a.positive_points) pts.push_back({p.x, p.y});
  j = {{"image_id", a.image_id},
       {"positive_points", pts},
       {"negative_regions", a.negative_regions},
       {"cleared", a.cleared},
       {"display_size", {a.display_size.first, a.display_size.second}},
       {"timestamp", a.timestamp}};
}

inline void from_json(const nlohmann::json& j, Annotation& a) {
  a.image_id = j.at("image_id").get<std::string>();
  a.positive_points.clear();
  for (const auto& p : j.value("positive_points", nlohmann::json::array())) {
    if (!p.is_array() || p.size() != 2) throw ContractError("positive point must be [x, y]");
    a.positive_points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  }
  a.negative_regions = j.value("negative_regions", std::set<int>{});
  a.cleared = j.value("cleared", false);
  if (j.contains("display_size")) {
    a.display_size = {j.at("display_size").at(0).get<std::size_t>(), j.at("display_size").at(1).get<std::size_t>()};
  }
  a.timestamp = j.value("timestamp", std::int64_t{0});
}

/// Display pixel -> attention grid cell by proportional scaling and flooring.
inline GridPoint display_to_grid(double px, double py, std::size_t display_w, std::size_t display_h,
                                 std::size_t grid_w, std::size_t grid_h) {
  if (display_w == 0 || display_h == 0) throw ContractError("display size must be positive");
  auto map = [](double p, std::size_t d, std::size_t g) {
    const double cell = std::floor(p * static_cast<double>(g) / static_cast<double>(d));
    return std::clamp(cell, 0.0, static_cast<double>(g - 1));
  };
  return {map(px, display_w, grid_w), map(py, display_h, grid_h)};
}

/// Checks that every point lies on the grid and every region id exists.
inline void validate_annotation(const Annotation& a, std::size_t grid_w, std::size_t grid_h,
                                const SuperpixelLabeling* labeling) {
  for (const auto& p : a.positive_points) {
    if (!(p.x >= 0 && p.y >= 0 && p.x <= static_cast<double>(grid_w - 1) && p.y <= static_cast<double>(grid_h - 1))) {
      throw ContractError("positive point (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                          ") lies outside the attention grid of " + a.image_id);
    }
  }
  for (int r : a.negative_regions) {
    if (!labeling || r < 0 || r >= labeling->region_count) {
      throw ContractError("unknown superpixel region " + std::to_string(r) + " for " + a.image_id);
    }
  }
}

struct GuidanceConfig {
  double w_g = 0.75;
  double w_c = 0.25;
  double superpixel_k = 0.5;
  std::size_t superpixel_min_size = 3;
  bool operator==(const GuidanceConfig&) const = default;

  void validate() const {
    if (w_g < 0 || w_c < 0 || !(w_g + w_c > 0)) throw ConfigError("guidance weights need w_g, w_c >= 0 and w_g + w_c > 0");
  }
};

/// Value-weighted mean coordinate of the map.
inline GridPoint attention_barycenter(const AttentionMap& map) {
  double s = 0, sx = 0, sy = 0;
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = map.at(x, y);
      s += v;
      sx += v * static_cast<double>(x);
      sy += v * static_cast<double>(y);
    }
  if (!(s > 0)) throw DegenerateMapError("barycenter of an all-zero attention map (" + map.source_image_id + ")");
  return {sx / s, sy / s};
}

inline GridPoint mean_point(const std::vector<GridPoint>& pts) {
  GridPoint m;
  for (const auto& p : pts) {
    m.x += p.x;
    m.y += p.y;
  }
  m.x /= static_cast<double>(pts.size());
  m.y /= static_cast<double>(pts.size());
  return m;
}

template <class T>
struct GuidanceTerm {
  Var<T> value;
  bool active = false;  // false: no guidance of this kind for the image
};

/// Distance between the map's barycenter and the mean of the clicked points.
template <class T>
GuidanceTerm<T> positive_loss(const Var<T>& map, const std::vector<GridPoint>& points) {
  if (points.empty()) return {Var<T>(BasicTensor<T>::scalar(T(0))), false};
  const GridPoint c = mean_point(points);
  return {barycenter_distance(map, c.x, c.y), true};
}

inline double positive_loss(const AttentionMap& map, const std::vector<GridPoint>& points) {
  NoGradGuard no_grad;
  return positive_loss(Var<float>(map.as_tensor()), points).value.item();
}

/// 0/1 grid mask of the cells whose region id is in `regions`.
template <class T>
BasicTensor<T> region_mask(const SuperpixelLabeling& labeling, const std::set<int>& regions) {
  for (int r : regions) {
    if (r < 0 || r >= labeling.region_count) throw ContractError("unknown superpixel region " + std::to_string(r));
  }
  BasicTensor<T> mask({labeling.height, labeling.width});
  for (std::size_t i = 0; i < labeling.labels.size(); ++i)
    if (regions.count(labeling.labels[i])) mask[i] = T(1);
  return mask;
}

/// Sum of map values inside the selected regions.
template <class T>
GuidanceTerm<T> negative_loss(const Var<T>& map, const SuperpixelLabeling& labeling, const std::set<int>& regions) {
  if (map.shape() != Shape{labeling.height, labeling.width}) {
    throw DimensionError("negative_loss: map " + shape_str(map.shape()) + " vs labeling " +
                         shape_str({labeling.height, labeling.width}));
  }
  const auto mask = region_mask<T>(labeling, regions);
  if (regions.empty()) return {Var<T>(BasicTensor<T>::scalar(T(0))), false};
  return {masked_sum(map, mask), true};
}

inline double negative_loss(const AttentionMap& map, const SuperpixelLabeling& labeling, const std::set<int>& regions) {
  NoGradGuard no_grad;
  return negative_loss(Var<float>(map.as_tensor()), labeling, regions).value.item();
}

/// w_g * (positive + negative) + w_c * classification.
inline double combined_loss(double class_loss, double positive, double negative, const GuidanceConfig& cfg) {
  return cfg.w_g * (positive + negative) + cfg.w_c * class_loss;
}

template <class T>
Var<T> combined_loss(const Var<T>& class_loss, const Var<T>& positive, const Var<T>& negative,
                     const GuidanceConfig& cfg) {
  return add(scale(add(positive, negative), static_cast<T>(cfg.w_g)), scale(class_loss, static_cast<T>(cfg.w_c)));
}

/// One image of a fine-tuning batch: the sample, its annotation and the
/// superpixel labeling its negative regions refer to.
struct AnnotatedImage {
  const Sample* sample = nullptr;
  Annotation annotation;
  std::optional<SuperpixelLabeling> labeling;
};

struct LossBreakdown {
  double loss_pos = 0.0;
  double loss_neg = 0.0;
  double loss_c = 0.0;
  double total = 0.0;
  std::size_t positive_images = 0;
  std::size_t negative_images = 0;
  std::vector<std::string> degenerate_ids;  // positive guidance skipped: all-zero map
  double grad_norm = 0.0;  // before clipping
};

struct FineTuneOptions {
  float lr = 0.01f;
  float weight_decay = 0.0f;
  int attention_class = 1;  // class whose Grad-CAM the guidance shapes
  double max_grad_norm = 0.0;  // 0 disables clipping
};

namespace detail {
inline LossBreakdown fine_tune_step_impl(Classifier& model, const std::vector<AnnotatedImage>& batch,
                                         const std::vector<const Sample*>& items, const std::vector<int>& labels,
                                         const GuidanceConfig& cfg, const FineTuneOptions& opt, LossBreakdown out);
}  // namespace detail

/// One SGD step on the batch-averaged combined loss. Guidance terms flow into
/// the target-layer activations; Grad-CAM channel weights are held constant.
/// The model is left untouched if any loss term is non-finite.
inline LossBreakdown fine_tune_step(Classifier& model, const std::vector<AnnotatedImage>& batch,
                                    const GuidanceConfig& cfg, const FineTuneOptions& opt) {
  cfg.validate();
  if (batch.empty()) throw ContractError("fine_tune_step on an empty batch");
  require_class(model.config(), opt.attention_class);
  std::vector<const Sample*> items;
  std::vector<int> labels;
  for (const auto& b : batch) {
    items.push_back(b.sample);
    labels.push_back(b.sample->label);
  }
  LossBreakdown out;
  zero_grads(model.params());

  auto offender = [&]() -> std::string {
    NoGradGuard no_grad;
    for (const auto* s : items) {
      try {
        model.forward(stack_images({s}));
      } catch (const NumericError&) {
        return s->id;
      }
    }
    return {};
  };
  try {
    return detail::fine_tune_step_impl(model, batch, items, labels, cfg, opt, out);
  } catch (const NumericError& e) {
    zero_grads(model.params());
    const std::string who = offender();
    throw TrainingError(std::string("fine-tune step aborted on a non-finite value") +
                        (who.empty() ? std::string() : " at image " + who) + ": " + e.what());
  }
}

namespace detail {

inline LossBreakdown fine_tune_step_impl(Classifier& model, const std::vector<AnnotatedImage>& batch,
                                         const std::vector<const Sample*>& items, const std::vector<int>& labels,
                                         const GuidanceConfig& cfg, const FineTuneOptions& opt, LossBreakdown out) {
  const std::size_t N = batch.size();
  auto fwd = model.forward(stack_images(items));
  Var<float> loss_c = classification_loss(fwd.logits, labels);
  std::vector<Var<float>> pos_terms, neg_terms;
  std::vector<std::string> term_ids;
  bool any_guidance = false;
  for (const auto& b : batch) any_guidance = any_guidance || b.annotation.has_guidance();

  if (any_guidance && cfg.w_g > 0) {
    const Tensor g = grad(fwd.logits, fwd.target_features,
                          class_seed<float>(N, model.config().num_classes, opt.attention_class));
    const auto weights = channel_weights(g);
    for (std::size_t n = 0; n < N; ++n) {
      const Annotation& a = batch[n].annotation;
      if (!a.has_guidance()) continue;
      Var<float> cam = attention_graph(fwd.target_features, n, weights[n]);
      const bool degenerate = !cam.requires_grad() && cam.value().max() <= 0.0f;
      if (!a.positive_points.empty()) {
        if (degenerate) {
          out.degenerate_ids.push_back(a.image_id);
        } else {
          pos_terms.push_back(positive_loss(cam, a.positive_points).value);
          term_ids.push_back(a.image_id);
          ++out.positive_images;
        }
      }
      if (!a.negative_regions.empty()) {
        if (!batch[n].labeling) throw ContractError("annotation for " + a.image_id + " has regions but no labeling");
        neg_terms.push_back(negative_loss(cam, *batch[n].labeling, a.negative_regions).value);
        term_ids.push_back(a.image_id);
        ++out.negative_images;
      }
    }
  }

  auto batch_mean = [N](const std::vector<Var<float>>& terms) {
    if (terms.empty()) return Var<float>(Tensor::scalar(0.0f));
    return scale(sum(stack(terms)), 1.0f / static_cast<float>(N));
  };
  const Var<float> loss_pos = batch_mean(pos_terms), loss_neg = batch_mean(neg_terms);
  const Var<float> total = combined_loss(loss_c, loss_pos, loss_neg, cfg);

  out.loss_pos = loss_pos.item();
  out.loss_neg = loss_neg.item();
  out.loss_c = loss_c.item();
  out.total = total.item();
  if (!std::isfinite(out.total)) {
    std::string who;
    for (std::size_t t = 0; t < pos_terms.size() + neg_terms.size(); ++t) {
      const float v = t < pos_terms.size() ? pos_terms[t].item() : neg_terms[t - pos_terms.size()].item();
      if (!std::isfinite(v)) who = term_ids[t];
    }
    throw TrainingError("fine-tune step produced a non-finite loss" + (who.empty() ? std::string() : " at image " + who));
  }
  backward(total);
  auto& params = model.params();
  out.grad_norm = clip_grad_norm(params, opt.max_grad_norm);
  sgd_step(params, opt.lr, opt.weight_decay);
  zero_grads(model.params());
  return out;
}

}  // namespace detail

}  // namespace hitl
