#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/image_io.hpp"
#include "hitl/sample.hpp"

namespace hitl {

enum class Glyph { Triangle, StripedSquare, Circle, Cross };

inline const char* glyph_name(Glyph g) {
  switch (g) {
    case Glyph::Triangle: return "triangle";
    case Glyph::StripedSquare: return "striped_square";
    case Glyph::Circle: return "circle";
    case Glyph::Cross: return "cross";
  }
  return "?";
}

inline Glyph glyph_from_name(const std::string& s) {
  for (Glyph g : {Glyph::Triangle, Glyph::StripedSquare, Glyph::Circle, Glyph::Cross})
    if (s == glyph_name(g)) return g;
  throw ConfigError("unknown glyph '" + s + "' (expected triangle, striped_square, circle or cross)");
}

/// Two-class synthetic benchmark with a controllable co-occurrence between the
/// label and a distractor glyph. Class 1 = target present.
struct BiasedDatasetSpec {
  std::size_t image_size = 64;
  Glyph target_shape = Glyph::Triangle;
  Glyph distractor_shape = Glyph::StripedSquare;
  double train_bias = 1.0;               // P(distractor | positive) in train/val/test_biased
  double test_bias = 0.5;                // P(distractor | positive) in test_decorrelated
  double negative_distractor_prob = 0.5; // P(distractor | negative) everywhere
  std::size_t train_count = 800;
  std::size_t val_count = 100;
  std::size_t test_count = 400;
  std::size_t min_glyph = 12;
  std::size_t max_glyph = 20;
  double noise_level = 0.05;
  double target_contrast = 0.35;      // |target intensity - background|
  double distractor_contrast = 0.45;  // stripe amplitude around the background
  std::size_t targets_per_image = 1;
  std::uint64_t seed = 1;

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0,1]");
    };
    prob(train_bias, "train_bias");
    prob(test_bias, "test_bias");
    prob(negative_distractor_prob, "negative_distractor_prob");
    if (image_size < 16) throw ConfigError("image_size must be at least 16");
    if (min_glyph < 3 || max_glyph < min_glyph || max_glyph * 2 > image_size) {
      throw ConfigError("glyph size range must satisfy 3 <= min <= max <= image_size / 2");
    }
    if (targets_per_image < 1 || targets_per_image > 4) throw ConfigError("targets_per_image must be in 1..4");
  }

  bool operator==(const BiasedDatasetSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const BiasedDatasetSpec& s) {
  j = {{"image_size", s.image_size},
       {"target_shape", glyph_name(s.target_shape)},
       {"distractor_shape", glyph_name(s.distractor_shape)},
       {"train_bias", s.train_bias},
       {"test_bias", s.test_bias},
       {"negative_distractor_prob", s.negative_distractor_prob},
       {"counts", {{"train", s.train_count}, {"val", s.val_count}, {"test", s.test_count}}},
       {"glyph_size", {s.min_glyph, s.max_glyph}},
       {"noise_level", s.noise_level},
       {"target_contrast", s.target_contrast},
       {"distractor_contrast", s.distractor_contrast},
       {"targets_per_image", s.targets_per_image},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, BiasedDatasetSpec& s) {
  BiasedDatasetSpec d;
  s.image_size = j.value("image_size", d.image_size);
  s.target_shape = glyph_from_name(j.value("target_shape", std::string(glyph_name(d.target_shape))));
  s.distractor_shape = glyph_from_name(j.value("distractor_shape", std::string(glyph_name(d.distractor_shape))));
  s.train_bias = j.value("train_bias", d.train_bias);
  s.test_bias = j.value("test_bias", d.test_bias);
  s.negative_distractor_prob = j.value("negative_distractor_prob", d.negative_distractor_prob);
  const auto counts = j.value("counts", nlohmann::json::object());
  s.train_count = counts.value("train", d.train_count);
  s.val_count = counts.value("val", d.val_count);
  s.test_count = counts.value("test", d.test_count);
  if (j.contains("glyph_size")) {
    s.min_glyph = j.at("glyph_size").at(0).get<std::size_t>();
    s.max_glyph = j.at("glyph_size").at(1).get<std::size_t>();
  } else {
    s.min_glyph = d.min_glyph;
    s.max_glyph = d.max_glyph;
  }
  s.noise_level = j.value("noise_level", d.noise_level);
  s.target_contrast = j.value("target_contrast", d.target_contrast);
  s.distractor_contrast = j.value("distractor_contrast", d.distractor_contrast);
  s.targets_per_image = j.value("targets_per_image", d.targets_per_image);
  s.seed = j.value("seed", d.seed);
}

struct BiasedDatasets {
  Dataset train;
  Dataset val;
  Dataset test_biased;
  Dataset test_decorrelated;
  bool operator==(const BiasedDatasets&) const = default;
};

/// Placed glyph: center, size (bounding diameter) and rotation.
struct GlyphPose {
  double cx = 0, cy = 0, size = 0, angle = 0;
};

namespace detail {

inline bool inside_polygon(double x, double y, const std::vector<std::array<double, 2>>& poly) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
  }
  return in;
}

}  // namespace detail

/// Coverage test shared by rendering and masking: is the pixel center (x+.5, y+.5)
/// inside the glyph? `stripe` receives the stripe parity for striped glyphs.
inline bool glyph_covers(Glyph g, const GlyphPose& p, std::size_t px, std::size_t py, int* stripe = nullptr) {
  const double x = static_cast<double>(px) + 0.5 - p.cx, y = static_cast<double>(py) + 0.5 - p.cy;
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  const double u = c * x + s * y, v = -s * x + c * y;  // glyph-local frame
  const double r = p.size / 2.0;
  switch (g) {
    case Glyph::Triangle: {
      std::vector<std::array<double, 2>> tri;
      for (int k = 0; k < 3; ++k) {
        const double a = -std::numbers::pi / 2 + 2.0 * std::numbers::pi * k / 3.0;
        tri.push_back({r * std::cos(a), r * std::sin(a)});
      }
      return detail::inside_polygon(u, v, tri);
    }
    case Glyph::StripedSquare: {
      const double h = r * 0.75;
      if (std::abs(u) > h || std::abs(v) > h) return false;
      if (stripe) *stripe = static_cast<int>(std::floor((u + h) / 2.0)) % 2;
      return true;
    }
    case Glyph::Circle:
      return u * u + v * v <= r * r * 0.7;
    case Glyph::Cross: {
      const double arm = r * 0.3;
      return (std::abs(u) <= arm && std::abs(v) <= r) || (std::abs(v) <= arm && std::abs(u) <= r);
    }
  }
  return false;
}

namespace detail {

struct SampleRecipe {
  int label = 0;
  bool distractor = false;
};

inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t split) {
  // splitmix64 step
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + split + 0x632BE59BD9B4E5Bull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline float quantize(double v) {
  return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
}

}  // namespace detail

/// Renders one sample. Glyph placements never overlap so masks stay disjoint.
inline Sample render_sample(const BiasedDatasetSpec& spec, const detail::SampleRecipe& recipe, std::string id,
                            std::mt19937_64& rng) {
  const std::size_t S = spec.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  std::vector<std::pair<Glyph, GlyphPose>> placed;
  auto place = [&](Glyph g) {
    const double size = uniform(static_cast<double>(spec.min_glyph), static_cast<double>(spec.max_glyph));
    const double r = size / 2.0;
    for (int attempt = 0; attempt < 2000; ++attempt) {
      GlyphPose p{uniform(r + 1, S - r - 1), uniform(r + 1, S - r - 1), size, uniform(0.0, 2.0 * std::numbers::pi)};
      bool clear = true;
      for (const auto& [og, op] : placed) {
        const double d = std::hypot(p.cx - op.cx, p.cy - op.cy);
        if (d < r + op.size / 2.0 + 2.0) clear = false;
      }
      if (clear) {
        placed.emplace_back(g, p);
        return;
      }
    }
    throw ConfigError("cannot place non-overlapping glyphs; reduce glyph size or count");
  };
  if (recipe.label == 1)
    for (std::size_t t = 0; t < spec.targets_per_image; ++t) place(spec.target_shape);
  if (recipe.distractor) place(spec.distractor_shape);

  Sample s;
  s.id = std::move(id);
  s.label = recipe.label;
  s.image = Tensor({3, S, S});
  s.target_mask.assign(S * S, 0);
  s.distractor_mask.assign(S * S, 0);

  const double bg = uniform(0.35, 0.65);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = uniform(-0.05, 0.05);
  const double target_sign = unit(rng) < 0.5 ? -1.0 : 1.0;
  std::normal_distribution<double> noise(0.0, spec.noise_level);
  std::vector<double> base(S * S * 3);
  for (std::size_t i = 0; i < S * S; ++i)
    for (std::size_t c = 0; c < 3; ++c) base[c * S * S + i] = bg + tint[c] + noise(rng);

  int target_index = 0;
  for (const auto& [g, p] : placed) {
    const bool is_target = recipe.label == 1 && g == spec.target_shape && target_index < static_cast<int>(spec.targets_per_image);
    if (is_target) ++target_index;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        int stripe = 0;
        if (!glyph_covers(g, p, x, y, &stripe)) continue;
        const std::size_t i = y * S + x;
        for (std::size_t c = 0; c < 3; ++c) {
          double& v = base[c * S * S + i];
          if (is_target) {
            v = bg + tint[c] + target_sign * spec.target_contrast + (v - bg - tint[c]);
          } else {
            v = bg + (stripe ? 1.0 : -1.0) * spec.distractor_contrast + (v - bg - tint[c]);
          }
        }
        if (is_target) {
          s.target_mask[i] = static_cast<std::uint8_t>(target_index);
        } else {
          s.distractor_mask[i] = 1;
        }
      }
  }
  for (std::size_t i = 0; i < base.size(); ++i) s.image[i] = detail::quantize(base[i]);
  return s;
}

/// Balanced split; positives carry the distractor with probability
/// `positive_bias`, negatives with `negative_prob`.
inline Dataset generate_split(const BiasedDatasetSpec& spec, const std::string& prefix, std::size_t count,
                              double positive_bias, double negative_prob, std::uint64_t split) {
  std::mt19937_64 rng(detail::split_seed(spec.seed, split));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Dataset d;
  d.class_names = {std::string("no_") + glyph_name(spec.target_shape), glyph_name(spec.target_shape)};
  for (std::size_t i = 0; i < count; ++i) {
    detail::SampleRecipe recipe;
    recipe.label = static_cast<int>(i % 2);
    recipe.distractor = unit(rng) < (recipe.label == 1 ? positive_bias : negative_prob);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%05zu", prefix.c_str(), i);
    d.samples.push_back(render_sample(spec, recipe, buf, rng));
  }
  return d;
}

/// Pure function of the spec (including its seed).
inline BiasedDatasets generate_biased_dataset(const BiasedDatasetSpec& spec) {
  spec.validate();
  BiasedDatasets out;
  out.train = generate_split(spec, "train", spec.train_count, spec.train_bias, spec.negative_distractor_prob, 0);
  out.val = generate_split(spec, "val", spec.val_count, spec.train_bias, spec.negative_distractor_prob, 1);
  out.test_biased =
      generate_split(spec, "testb", spec.test_count, spec.train_bias, spec.negative_distractor_prob, 2);
  out.test_decorrelated = generate_split(spec, "testd", spec.test_count, spec.test_bias, 0.5, 3);
  return out;
}

/// Pearson correlation between label and distractor presence.
inline double distractor_label_correlation(const Dataset& d) {
  const double n = static_cast<double>(d.size());
  if (n == 0) return 0.0;
  double sl = 0, sd = 0, sll = 0, sdd = 0, sld = 0;
  for (const auto& s : d.samples) {
    const double l = s.label, x = s.has_distractor() ? 1.0 : 0.0;
    sl += l;
    sd += x;
    sll += l * l;
    sdd += x * x;
    sld += l * x;
  }
  const double cov = sld / n - (sl / n) * (sd / n);
  const double vl = sll / n - (sl / n) * (sl / n), vd = sdd / n - (sd / n) * (sd / n);
  if (vl <= 0 || vd <= 0) return 0.0;
  return cov / std::sqrt(vl * vd);
}

}  // namespace hitl
