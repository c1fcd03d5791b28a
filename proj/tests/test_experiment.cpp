#include <gtest/gtest.h>

#include "hitl/experiment.hpp"
#include "hitl/render.hpp"
#include "support/small_bench.hpp"
#include "support/temp_dir.hpp"

using namespace hitl;
using hitl::testing::TempDir;

namespace {

std::vector<std::vector<float>> weights(const Classifier& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.params()) out.emplace_back(p.value().data().begin(), p.value().data().end());
  return out;
}

ExperimentSpec small_experiment(const fs::path& cache) {
  ExperimentSpec e;
  e.data = hitl::testing::small_bench_spec();
  e.model = hitl::testing::small_model_config();
  e.pretrain.epochs = 2;
  e.session = hitl::testing::small_session("attention");
  e.loop.rounds = 1;
  e.seed = 6;
  e.cache_dir = cache;
  return e;
}

TEST(Experiment, SeedDrivesEveryStage) {
  ExperimentSpec e = small_experiment({});
  e.data.seed = 99;
  e.session.seed = 98;
  e.pretrain.seed = 97;
  EXPECT_EQ(e.seeded_data().seed, 6u);
  EXPECT_EQ(e.seeded_session().seed, 6u);
  EXPECT_EQ(e.seeded_pretrain().seed, 6u);
}

TEST(Experiment, CacheKeyTracksPretrainingInputs) {
  const auto spec = hitl::testing::small_bench_spec();
  const auto model = hitl::testing::small_model_config();
  TrainHyper h;
  const auto key = pretrain_cache_key(spec, model, h);
  EXPECT_EQ(key, pretrain_cache_key(spec, model, h));
  TrainHyper h2 = h;
  h2.seed = 1;
  EXPECT_NE(key, pretrain_cache_key(spec, model, h2));
  auto spec2 = spec;
  spec2.target_contrast += 0.01;
  EXPECT_NE(key, pretrain_cache_key(spec2, model, h));
}

TEST(Experiment, CachedPretrainingIsReused) {
  TempDir dir;
  const ExperimentSpec e = small_experiment(dir.path());
  const auto data = generate_biased_dataset(e.seeded_data());
  const Classifier fresh = pretrained_model(e, data);
  const fs::path cached = dir.path() / pretrain_cache_key(e.seeded_data(), e.model, e.seeded_pretrain());
  ASSERT_TRUE(fs::exists(cached));
  const auto stamp = fs::last_write_time(cached);
  const Classifier again = pretrained_model(e, data);
  EXPECT_EQ(fs::last_write_time(cached), stamp);
  EXPECT_EQ(weights(again), weights(fresh));
}

TEST(Experiment, RunIsReproducible) {
  TempDir dir;
  const ExperimentSpec e = small_experiment(dir.path());
  const auto a = run_experiment(e);
  const auto b = run_experiment(e);
  ASSERT_EQ(a.rows.size(), 2u);
  EXPECT_EQ(report_csv(a.rows), report_csv(b.rows));
  EXPECT_EQ(weights(a.final_model), weights(b.final_model));
}

TEST(Experiment, PerInstanceAttentionSplitsByTarget) {
  auto spec = hitl::testing::small_bench_spec();
  spec.targets_per_image = 2;
  spec.min_glyph = 5;
  spec.max_glyph = 7;
  const auto data = generate_biased_dataset(spec);
  const Classifier model = build_classifier(hitl::testing::small_model_config(), 2);
  const auto per = per_instance_attention(model, data.test_biased);
  ASSERT_EQ(per.size(), 2u);
  const auto total = compute_attention_metrics(model, data.test_biased);
  for (double f : per) {
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
  // Instance fractions partition the target fraction when every image has both instances.
  bool both = true;
  for (const auto* s : target_bearing(data.test_biased)) both = both && s->target_instances() == 2;
  if (both) {
    EXPECT_NEAR(per[0] + per[1], total.attention_in_target, 1e-9);
  }
}

TEST(Render, PaletteEndpoints) {
  const auto& p = heatmap_palette();
  EXPECT_EQ(p[0], (Rgb{0, 0, 0}));
  EXPECT_EQ(p[255], (Rgb{255, 0, 0}));
}

TEST(Render, HeatmapBlendsOverBase) {
  AttentionMap m;
  m.width = m.height = 2;
  m.values = {0, 0, 0, 1};
  const RawImage pure = render_heatmap(m, 4, 4);
  ASSERT_EQ(pure.pixels.size(), 48u);
  EXPECT_EQ(pure.pixels[0], 0);
  EXPECT_EQ(pure.pixels[(15) * 3 + 0], 255);
  Tensor white({3, 4, 4}, 1.0f);
  const RawImage over = render_heatmap(m, 4, 4, &white, 0.5f);
  EXPECT_EQ(over.pixels[0], 128);
  EXPECT_THROW(render_heatmap(m, 8, 8, &white), ContractError);
}

}  // namespace
