#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "hitl/gmm.hpp"
#include "hitl/gradcam.hpp"
#include "hitl/image_io.hpp"

namespace hitl {

enum class Strategy { Attention, Random, Entropy, Diversity };

inline const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names{"attention", "random", "entropy", "diversity"};
  return names;
}

inline std::string strategy_name(Strategy s) { return strategy_names()[static_cast<std::size_t>(s)]; }

inline Strategy parse_strategy(const std::string& name) {
  const auto& names = strategy_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Strategy>(i);
  throw ConfigError("unknown strategy '" + name + "' (valid: attention, random, entropy, diversity)");
}

/// Area-average the map to d_side x d_side and flatten row-major.
inline FeatureVector flatten_attention(const AttentionMap& map, std::size_t d_side) {
  if (map.values.empty()) throw ContractError("flatten_attention of an empty map");
  if (d_side == 0) throw ContractError("flatten_attention needs d_side > 0");
  const Tensor small = resize_area(Tensor({1, map.height, map.width}, map.values), d_side, d_side);
  FeatureVector out(small.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(static_cast<double>(small[i]), 0.0, 1.0);
  return out;
}

inline double entropy(const std::vector<float>& p) {
  double h = 0.0;
  for (float v : p)
    if (v > 0) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
  return h;
}

/// Greedy max-min selection. The first center is `first` if given, otherwise
/// the point nearest the mean. Ties go to the lower index.
inline std::vector<std::size_t> k_center_greedy(const std::vector<FeatureVector>& points, std::size_t count,
                                                std::optional<std::size_t> first = std::nullopt) {
  const std::size_t N = points.size();
  if (count > N) throw ContractError("k_center_greedy: count exceeds number of points");
  std::vector<std::size_t> chosen;
  if (count == 0) return chosen;
  std::size_t start = 0;
  if (first) {
    if (*first >= N) throw ContractError("k_center_greedy: first center out of range");
    start = *first;
  } else {
    FeatureVector mean(points[0].size(), 0.0);
    for (const auto& p : points)
      for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += p[d] / static_cast<double>(N);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < N; ++i) {
      const double d = detail::squared_distance(points[i], mean);
      if (d < best) {
        best = d;
        start = i;
      }
    }
  }
  std::vector<double> dist(N, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(N, false);
  std::size_t next = start;
  while (true) {
    chosen.push_back(next);
    taken[next] = true;
    if (chosen.size() == count) break;
    for (std::size_t i = 0; i < N; ++i) dist[i] = std::min(dist[i], detail::squared_distance(points[i], points[next]));
    double best = -1.0;
    for (std::size_t i = 0; i < N; ++i)
      if (!taken[i] && dist[i] > best) {
        best = dist[i];
        next = i;
      }
  }
  return chosen;
}

struct SelectionOptions {
  int attention_class = 1;
  std::size_t gmm_components = 2;
  std::size_t d_side = 8;
  GmmOptions gmm;
  std::size_t chunk = 32;
};

struct Selection {
  std::vector<std::string> ids;  // selected, in rank order
  std::vector<std::string> pool_ids;  // pool sorted by id
  std::vector<double> pool_scores;  // per pool id; empty for random and diversity
  std::vector<AttentionMap> pool_maps;  // filled by the attention strategy
  std::optional<GmmModel> gmm;
};

/// Penultimate-layer embeddings (globally pooled features).
inline std::vector<FeatureVector> embed_all(const Classifier& model, const std::vector<const Sample*>& items,
                                            std::size_t chunk = 64) {
  std::vector<FeatureVector> out;
  out.reserve(items.size());
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < items.size(); start += chunk) {
    std::vector<const Sample*> part(items.begin() + static_cast<long>(start),
                                    items.begin() + static_cast<long>(std::min(items.size(), start + chunk)));
    const Tensor e = model.forward(stack_images(part)).embedding.value();
    const std::size_t F = e.dim(1);
    for (std::size_t n = 0; n < part.size(); ++n) out.emplace_back(e.raw() + n * F, e.raw() + (n + 1) * F);
  }
  return out;
}

namespace detail {

// Indices sorted by score descending, ties by position (pool is id-sorted).
inline std::vector<std::size_t> rank_descending(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace detail

inline Selection select_candidates(std::vector<const Sample*> pool, Strategy strategy, std::size_t batch_size,
                                   const Classifier& model, std::uint64_t seed, const SelectionOptions& opt = {}) {
  if (pool.empty()) throw ContractError("select_candidates on an empty pool");
  if (batch_size > pool.size()) {
    throw ContractError("batch size " + std::to_string(batch_size) + " exceeds pool of " + std::to_string(pool.size()));
  }
  std::sort(pool.begin(), pool.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
  Selection sel;
  for (const auto* s : pool) sel.pool_ids.push_back(s->id);
  std::vector<std::size_t> chosen;

  switch (strategy) {
    case Strategy::Attention: {
      // All-zero maps give the annotator nothing to correct; they rank last, by id.
      sel.pool_maps = grad_cam_all(model, pool, opt.attention_class, opt.chunk);
      std::vector<FeatureVector> features;
      std::vector<std::size_t> live;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (sel.pool_maps[i].all_zero()) continue;
        live.push_back(i);
        features.push_back(flatten_attention(sel.pool_maps[i], opt.d_side));
      }
      sel.pool_scores.assign(pool.size(), -std::numeric_limits<double>::infinity());
      if (!features.empty()) {
        const std::size_t K =
            std::min(opt.gmm_components, std::set<FeatureVector>(features.begin(), features.end()).size());
        sel.gmm = fit_gmm(features, K, seed, opt.gmm);
        const auto scores = score_samples(*sel.gmm, features);
        for (std::size_t j = 0; j < live.size(); ++j) sel.pool_scores[live[j]] = scores[j];
      }
      chosen = detail::rank_descending(sel.pool_scores);
      break;
    }
    case Strategy::Random: {
      chosen.resize(pool.size());
      std::iota(chosen.begin(), chosen.end(), std::size_t{0});
      std::mt19937_64 rng(seed);
      for (std::size_t i = chosen.size(); i > 1; --i) {
        std::swap(chosen[i - 1], chosen[rng() % i]);
      }
      break;
    }
    case Strategy::Entropy: {
      for (const auto& p : predict_items(model, pool)) sel.pool_scores.push_back(entropy(p));
      chosen = detail::rank_descending(sel.pool_scores);
      break;
    }
    case Strategy::Diversity: {
      chosen = k_center_greedy(embed_all(model, pool), batch_size);
      break;
    }
  }
  chosen.resize(batch_size);
  for (std::size_t i : chosen) sel.ids.push_back(pool[i]->id);
  return sel;
}

inline Selection select_candidates(std::vector<const Sample*> pool, const std::string& strategy,
                                   std::size_t batch_size, const Classifier& model, std::uint64_t seed,
                                   const SelectionOptions& opt = {}) {
  return select_candidates(std::move(pool), parse_strategy(strategy), batch_size, model, seed, opt);
}

}  // namespace hitl
