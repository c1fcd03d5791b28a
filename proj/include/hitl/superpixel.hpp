#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "hitl/gradcam.hpp"

namespace hitl {

struct SuperpixelLabeling {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<int> labels;  // row-major, ids 0..region_count-1
  int region_count = 0;

  int at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }
  bool operator==(const SuperpixelLabeling&) const = default;
};

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), size_(n, 1), internal_(n, 0.0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }
  std::size_t find(std::size_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  // Smaller root index wins ties in rank so labeling order stays stable.
  std::size_t join(std::size_t a, std::size_t b, double weight) {
    if (size_[a] < size_[b] || (size_[a] == size_[b] && b < a)) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    internal_[a] = std::max({internal_[a], internal_[b], weight});
    return a;
  }
  std::size_t size(std::size_t root) const { return size_[root]; }
  double internal(std::size_t root) const { return internal_[root]; }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
  std::vector<double> internal_;
};

}  // namespace detail

/// Graph-based segmentation (Felzenszwalb-Huttenlocher) of an attention grid.
/// Edges join 4-neighbors with weight |value difference| and are processed in
/// ascending weight, ties by edge creation order (cell index, right before
/// down). Components merge when the edge weight is within both components'
/// internal difference plus k/|C|; a second pass absorbs components smaller
/// than `min_size`. Region ids are assigned in row-major order of first cell.
inline SuperpixelLabeling segment_superpixels(const AttentionMap& map, double k, std::size_t min_size) {
  if (map.values.empty()) throw ContractError("segment_superpixels of an empty map");
  const std::size_t W = map.width, H = map.height, N = W * H;
  struct Edge {
    std::size_t a, b;
    double w;
  };
  std::vector<Edge> edges;
  edges.reserve(2 * N);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t i = y * W + x;
      if (x + 1 < W) edges.push_back({i, i + 1, std::abs(static_cast<double>(map.values[i]) - map.values[i + 1])});
      if (y + 1 < H) edges.push_back({i, i + W, std::abs(static_cast<double>(map.values[i]) - map.values[i + W])});
    }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) { return l.w < r.w; });

  detail::DisjointSets sets(N);
  for (const auto& e : edges) {
    const std::size_t a = sets.find(e.a), b = sets.find(e.b);
    if (a == b) continue;
    const double ta = sets.internal(a) + k / static_cast<double>(sets.size(a));
    const double tb = sets.internal(b) + k / static_cast<double>(sets.size(b));
    if (e.w <= std::min(ta, tb)) sets.join(a, b, e.w);
  }
  for (const auto& e : edges) {
    const std::size_t a = sets.find(e.a), b = sets.find(e.b);
    if (a != b && (sets.size(a) < min_size || sets.size(b) < min_size)) sets.join(a, b, e.w);
  }

  SuperpixelLabeling out;
  out.width = W;
  out.height = H;
  out.labels.assign(N, -1);
  std::vector<int> id_of_root(N, -1);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t r = sets.find(i);
    if (id_of_root[r] < 0) id_of_root[r] = out.region_count++;
    out.labels[i] = id_of_root[r];
  }
  return out;
}

/// Cells per region, indexed by id.
inline std::vector<std::size_t> region_sizes(const SuperpixelLabeling& l) {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(l.region_count), 0);
  for (int id : l.labels) ++sizes[static_cast<std::size_t>(id)];
  return sizes;
}

/// True when every region is a single 4-connected component.
inline bool regions_connected(const SuperpixelLabeling& l) {
  std::vector<bool> seen_region(static_cast<std::size_t>(l.region_count), false);
  std::vector<bool> visited(l.labels.size(), false);
  for (std::size_t start = 0; start < l.labels.size(); ++start) {
    if (visited[start]) continue;
    const int id = l.labels[start];
    if (seen_region[static_cast<std::size_t>(id)]) return false;
    seen_region[static_cast<std::size_t>(id)] = true;
    std::vector<std::size_t> stack{start};
    visited[start] = true;
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      const std::size_t x = c % l.width, y = c / l.width;
      const std::size_t nb[4] = {x > 0 ? c - 1 : c, x + 1 < l.width ? c + 1 : c, y > 0 ? c - l.width : c,
                                 y + 1 < l.height ? c + l.width : c};
      for (std::size_t n : nb)
        if (!visited[n] && l.labels[n] == id) {
          visited[n] = true;
          stack.push_back(n);
        }
    }
  }
  return true;
}

}  // namespace hitl
