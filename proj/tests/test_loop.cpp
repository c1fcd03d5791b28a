#include <gtest/gtest.h>

#include <random>

#include "hitl/loop.hpp"
#include "support/temp_dir.hpp"

using namespace hitl;
using hitl::testing::TempDir;

namespace {

BiasedDatasetSpec bench_spec() {
  BiasedDatasetSpec s;
  s.image_size = 32;
  s.min_glyph = 8;
  s.max_glyph = 12;
  s.train_count = 40;
  s.val_count = 4;
  s.test_count = 12;
  s.seed = 3;
  return s;
}

ClassifierConfig bench_model_config() {
  ClassifierConfig c;
  c.input_size = 32;
  c.blocks = {{4, 1}, {6, 1}, {8, 1}};
  c.target_layer = 2;
  return c;
}

struct Bench {
  BiasedDatasets data = generate_biased_dataset(bench_spec());
  Classifier model = build_classifier(bench_model_config(), 2);

  SessionData session_data() const { return {&data.train, &data.test_biased, &data.test_decorrelated}; }
};

SessionConfig small_session(const std::string& strategy = "random") {
  SessionConfig c;
  c.strategy = strategy;
  c.batch_size = 8;
  c.candidates_shown = 4;
  c.epochs = 2;
  c.fine_tune_batch = 4;
  c.seed = 11;
  return c;
}

void expect_partition(const SessionState& s, const Dataset& pool) {
  std::multiset<std::string> seen(s.labeled_ids.begin(), s.labeled_ids.end());
  seen.insert(s.unlabeled_ids.begin(), s.unlabeled_ids.end());
  for (const auto& c : s.candidates) seen.insert(c.image_id);
  std::multiset<std::string> all;
  for (const auto& x : pool.samples) all.insert(x.id);
  EXPECT_EQ(seen, all);
}

Sample square_sample(std::size_t side, const std::string& id) {
  Sample s;
  s.id = id;
  s.label = 1;
  s.image = Tensor({1, side, side});
  s.target_mask.assign(side * side, 0);
  s.distractor_mask.assign(side * side, 0);
  return s;
}

void fill_rect(std::vector<std::uint8_t>& mask, std::size_t side, std::size_t x0, std::size_t y0, std::size_t x1,
               std::size_t y1, std::uint8_t value = 1) {
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) mask[y * side + x] = value;
}

AttentionMap grid_map(std::size_t side, std::vector<float> values) {
  AttentionMap m;
  m.width = m.height = side;
  m.values = std::move(values);
  return m;
}

Candidate whole_candidate(const std::string& id, std::size_t grid = 8) {
  Candidate c;
  c.image_id = id;
  c.attention = grid_map(grid, std::vector<float>(grid * grid, 0.5f));
  c.labeling = segment_superpixels(c.attention, 0.5, 3);
  return c;
}

}  // namespace

TEST(SessionConfigTest, JsonRoundTripAndOverrides) {
  SessionConfig c = small_session("entropy");
  c.guidance.w_g = 0.5;
  EXPECT_EQ(nlohmann::json(c).get<SessionConfig>(), c);
  const auto o = apply_config_overrides(c, {{"batch_size", 3}, {"strategy", "diversity"}});
  EXPECT_EQ(o.batch_size, 3u);
  EXPECT_EQ(o.strategy, "diversity");
  EXPECT_EQ(o.epochs, c.epochs);
  EXPECT_THROW(apply_config_overrides(c, {{"bogus", 1}}), ConfigError);
  EXPECT_THROW(apply_config_overrides(c, {{"batch_size", "many"}}), ConfigError);
  EXPECT_THROW(apply_config_overrides(c, {{"batch_size", 0}}), ConfigError);
}

TEST(SessionConfigTest, UnknownStrategyListsValidNames) {
  Bench b;
  SessionConfig c = small_session("uncertainty");
  try {
    Session::start(c, b.model.clone(), b.session_data());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("attention, random, entropy, diversity"), std::string::npos);
  }
}

TEST(SessionStart, FreshSessionHasWholePoolUnlabeled) {
  Bench b;
  auto s = Session::start(small_session(), b.model.clone(), b.session_data());
  EXPECT_TRUE(s.state().labeled_ids.empty());
  EXPECT_EQ(s.state().unlabeled_ids.size(), b.data.train.size());
  EXPECT_EQ(s.state().round, 0);
  EXPECT_TRUE(s.state().pending_annotations.empty());
  ASSERT_EQ(s.state().metric_history.size(), 1u);
  EXPECT_EQ(s.state().metric_history[0].round, 0);
  EXPECT_EQ(s.state().metric_history[0].accuracy_biased, accuracy(b.model, b.data.test_biased));
}

TEST(SessionStart, EmptyPoolAndMissingCheckpoint) {
  Bench b;
  Dataset empty;
  EXPECT_THROW(Session::start(small_session(), b.model.clone(), {&empty, nullptr, nullptr}), StartupError);
  TempDir dir;
  {
    auto s = Session::start(small_session(), b.model.clone(), b.session_data(), {dir.path()});
    EXPECT_TRUE(fs::exists(dir.path() / "checkpoints" / "round_000.ckpt"));
  }
  fs::remove(dir.path() / "checkpoints" / "round_000.ckpt");
  EXPECT_THROW(Session::resume(dir.path(), b.session_data()), StartupError);
}

TEST(ProposeCandidates, DistinctUnlabeledAndDeterministic) {
  Bench b;
  for (const auto& name : strategy_names()) {
    auto s = Session::start(small_session(name), b.model.clone(), b.session_data());
    const auto before = s.state().unlabeled_ids;
    const auto cands = s.propose_candidates();
    ASSERT_EQ(cands.size(), 8u) << name;
    std::set<std::string> ids;
    for (const auto& c : cands) {
      EXPECT_TRUE(before.count(c.image_id)) << name;
      EXPECT_FALSE(s.state().unlabeled_ids.count(c.image_id)) << name;
      EXPECT_EQ(c.labeling.width, c.attention.width);
      ids.insert(c.image_id);
    }
    EXPECT_EQ(ids.size(), 8u) << name;
    expect_partition(s.state(), b.data.train);
    EXPECT_EQ(s.state().revealed, 4u);
    EXPECT_EQ(s.reveal_next(), 8u);
    EXPECT_EQ(s.reveal_next(), 8u);

    auto again = Session::start(small_session(name), b.model.clone(), b.session_data());
    EXPECT_EQ(again.propose_candidates(), cands) << name;
  }
}

TEST(ProposeCandidates, AttentionCandidatesOutscoreTheRestOfThePool) {
  Bench b;
  auto s = Session::start(small_session("attention"), b.model.clone(), b.session_data());
  const auto cands = s.propose_candidates();
  std::vector<const Sample*> pool;
  for (const auto& x : b.data.train.samples) pool.push_back(&x);
  // Recompute every pool score independently with the round's selection seed.
  const auto sel = select_candidates(pool, Strategy::Attention, 8, b.model, detail::mix_seed(small_session().seed, 1000));
  std::set<std::string> chosen;
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& c : cands) {
    chosen.insert(c.image_id);
    ASSERT_TRUE(c.score.has_value());
    lowest = std::min(lowest, *c.score);
  }
  for (std::size_t i = 0; i < sel.pool_ids.size(); ++i) {
    if (chosen.count(sel.pool_ids[i])) {
      EXPECT_GE(sel.pool_scores[i], lowest);
    } else {
      EXPECT_LE(sel.pool_scores[i], lowest);
    }
  }
}

TEST(ProposeCandidates, ExhaustedPoolSignalsCompletion) {
  Bench b;
  SessionConfig c = small_session();
  c.batch_size = 64;
  auto s = Session::start(c, b.model.clone(), b.session_data());
  EXPECT_EQ(s.propose_candidates().size(), b.data.train.size());
  std::vector<Annotation> all;
  for (const auto& cand : s.state().candidates) all.push_back({cand.image_id, {}, {}, true, {32, 32}, 0});
  s.submit_annotations(all);
  s.run_fine_tune(0);
  EXPECT_THROW(s.propose_candidates(), SessionCompleteError);
}

TEST(SubmitAnnotations, ReadBackRejectAndOverwrite) {
  Bench b;
  TempDir dir;
  auto s = Session::start(small_session(), b.model.clone(), b.session_data(), {dir.path()});
  const auto cands = s.propose_candidates();
  Annotation a{cands[0].image_id, {{1.5, 2.0}}, {0}, false, {256, 256}, 100};
  Annotation outsider{"not-a-candidate", {}, {}, false, {256, 256}, 101};
  Annotation bad_region{cands[1].image_id, {}, {cands[1].labeling.region_count}, false, {256, 256}, 102};
  const SessionState before = s.state();
  const auto r = s.submit_annotations({a, outsider, bad_region});
  EXPECT_EQ(r.accepted, (std::vector<std::string>{cands[0].image_id}));
  ASSERT_EQ(r.rejected.size(), 2u);
  EXPECT_NE(r.rejected[0].second.find("not-a-candidate"), std::string::npos);
  EXPECT_EQ(s.state().pending_annotations.at(a.image_id), a);
  EXPECT_EQ(s.state().pending_annotations.size(), 1u);
  EXPECT_EQ(s.state().candidates, before.candidates);

  Annotation later = a;
  later.positive_points = {{3.0, 3.0}};
  later.timestamp = 200;
  s.submit_annotations({later});
  EXPECT_EQ(s.state().pending_annotations.at(a.image_id), later);
  const auto log = read_annotation_log(dir.path() / "annotations.jsonl");
  EXPECT_EQ(log, (std::vector<Annotation>{a, later}));
}

TEST(RunFineTune, RequiresEveryCandidateAnnotated) {
  Bench b;
  auto s = Session::start(small_session(), b.model.clone(), b.session_data());
  const auto cands = s.propose_candidates();
  s.submit_annotations({{cands[0].image_id, {}, {}, true, {32, 32}, 0}});
  EXPECT_THROW(s.run_fine_tune(), ContractError);
  EXPECT_EQ(s.state().round, 0);
}

TEST(RunFineTune, ZeroEpochsLeavesParametersAndCountsTheRound) {
  Bench b;
  auto s = Session::start(small_session(), b.model.clone(), b.session_data());
  const auto cands = s.propose_candidates();
  std::vector<Annotation> anns;
  for (const auto& c : cands) anns.push_back({c.image_id, {}, {}, true, {32, 32}, 0});
  s.submit_annotations(anns);
  const auto& m = s.run_fine_tune(0);
  EXPECT_EQ(m.round, 1);
  EXPECT_EQ(s.state().round, 1);
  for (const auto& name : b.model.param_names()) EXPECT_EQ(s.model().param(name).value(), b.model.param(name).value());
  EXPECT_EQ(m.accuracy_biased, s.state().metric_history[0].accuracy_biased);
  EXPECT_EQ(s.state().labeled_ids.size(), 8u);
  EXPECT_TRUE(s.state().candidates.empty());
  EXPECT_TRUE(s.state().pending_annotations.empty());
  expect_partition(s.state(), b.data.train);
  // Cleared images still move to the labeled set.
  for (const auto& c : cands) EXPECT_TRUE(s.state().labeled.at(c.image_id).annotation.cleared);
}

TEST(RunFineTune, RoundIncrementsOncePerCall) {
  Bench b;
  TempDir dir;
  auto s = Session::start(small_session(), b.model.clone(), b.session_data(), {dir.path()});
  for (int r = 1; r <= 2; ++r) {
    const auto cands = s.propose_candidates();
    s.submit_annotations(simulate_annotations(cands, b.data.train, {}, 5));
    s.run_fine_tune();
    EXPECT_EQ(s.state().round, r);
    EXPECT_EQ(s.state().metric_history.size(), static_cast<std::size_t>(r) + 1);
    EXPECT_TRUE(fs::exists(round_checkpoint_path(dir.path() / "checkpoints", r)));
    expect_partition(s.state(), b.data.train);
  }
}

TEST(RunFineTune, DivergenceRestoresThePreRoundState) {
  Bench b;
  auto s = Session::start(small_session(), b.model.clone(), b.session_data());
  const auto cands = s.propose_candidates();
  s.submit_annotations(simulate_annotations(cands, b.data.train, {}, 5));
  // Poison one candidate's pixels so the round's loss turns non-finite.
  auto& poisoned = const_cast<Sample&>(*b.data.train.find(cands[3].image_id));
  poisoned.image[0] = std::numeric_limits<float>::quiet_NaN();
  const SessionState before = s.state();
  try {
    s.run_fine_tune();
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  EXPECT_EQ(s.state(), before);
  for (const auto& name : b.model.param_names()) EXPECT_EQ(s.model().param(name).value(), b.model.param(name).value());
}

TEST(SessionSnapshot, ResumeIsStructurallyEqual) {
  Bench b;
  TempDir dir;
  auto s = Session::start(small_session("attention"), b.model.clone(), b.session_data(), {dir.path()});
  s.submit_annotations(simulate_annotations(s.propose_candidates(), b.data.train, {}, 1));
  s.run_fine_tune();
  const auto back = Session::resume(dir.path(), b.session_data());
  EXPECT_EQ(back.state(), s.state());
  for (const auto& name : b.model.param_names()) EXPECT_EQ(back.model().param(name).value(), s.model().param(name).value());
  EXPECT_EQ(nlohmann::json(s.state()).get<SessionState>(), s.state());
}

TEST(SimulatedAnnotator, CentroidClickScaledToGrid) {
  Sample s = square_sample(64, "blob");
  fill_rect(s.target_mask, 64, 28, 28, 36, 36);
  std::mt19937_64 rng(0);
  const auto a = simulate_annotation(whole_candidate("blob"), s, {}, rng);
  ASSERT_EQ(a.positive_points.size(), 1u);
  EXPECT_EQ(a.positive_points[0], (GridPoint{4.0, 4.0}));
  EXPECT_TRUE(a.negative_regions.empty());
  EXPECT_FALSE(a.cleared);
}

TEST(SimulatedAnnotator, OneClickPerTargetInstance) {
  Sample s = square_sample(64, "two");
  fill_rect(s.target_mask, 64, 0, 0, 8, 8, 1);
  fill_rect(s.target_mask, 64, 56, 48, 64, 56, 2);
  std::mt19937_64 rng(0);
  const auto a = simulate_annotation(whole_candidate("two"), s, {}, rng);
  EXPECT_EQ(a.positive_points, (std::vector<GridPoint>{{0.0, 0.0}, {7.0, 6.0}}));
}

TEST(SimulatedAnnotator, NegativeRegionsUseStrictOverlap) {
  Sample s = square_sample(64, "d");
  // Left half of the grid is one region, right half another.
  Candidate c;
  c.image_id = "d";
  std::vector<float> v(64);
  for (std::size_t i = 0; i < 64; ++i) v[i] = (i % 8) < 4 ? 0.0f : 1.0f;
  c.attention = grid_map(8, v);
  c.labeling = segment_superpixels(c.attention, 0.05, 1);
  ASSERT_EQ(c.labeling.region_count, 2);
  fill_rect(s.distractor_mask, 64, 32, 0, 64, 32);  // half of the right region
  std::mt19937_64 rng(0);
  AnnotatorPolicy p;
  p.overlap_threshold = 0.4;
  EXPECT_EQ(simulate_annotation(c, s, p, rng).negative_regions, (std::set<int>{c.labeling.at(7, 0)}));
  p.overlap_threshold = 0.5;
  EXPECT_TRUE(simulate_annotation(c, s, p, rng).negative_regions.empty());
  p.overlap_threshold = 1.0;
  EXPECT_TRUE(simulate_annotation(c, s, p, rng).negative_regions.empty());
  fill_rect(s.distractor_mask, 64, 32, 0, 64, 64);
  p.overlap_threshold = 0.99;
  EXPECT_EQ(simulate_annotation(c, s, p, rng).negative_regions.size(), 1u);
}

TEST(SimulatedAnnotator, JitterStaysInGridAndSkipClears) {
  Sample s = square_sample(64, "j");
  fill_rect(s.target_mask, 64, 0, 0, 4, 4);
  AnnotatorPolicy p;
  p.jitter = 20;
  std::mt19937_64 rng(3);
  std::set<std::pair<double, double>> seen;
  for (int i = 0; i < 50; ++i) {
    const auto a = simulate_annotation(whole_candidate("j"), s, p, rng);
    ASSERT_EQ(a.positive_points.size(), 1u);
    EXPECT_GE(a.positive_points[0].x, 0.0);
    EXPECT_LT(a.positive_points[0].x, 8.0);
    EXPECT_GE(a.positive_points[0].y, 0.0);
    EXPECT_LT(a.positive_points[0].y, 8.0);
    seen.insert({a.positive_points[0].x, a.positive_points[0].y});
  }
  EXPECT_GT(seen.size(), 1u);
  p.skip_prob = 1.0;
  const auto skipped = simulate_annotation(whole_candidate("j"), s, p, rng);
  EXPECT_TRUE(skipped.cleared);
  EXPECT_FALSE(skipped.has_guidance());
}

TEST(SimulatedAnnotator, SeededAndRequiresMasks) {
  Bench b;
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < 6; ++i) cands.push_back(whole_candidate(b.data.train.samples[i].id));
  AnnotatorPolicy p;
  p.jitter = 3;
  p.skip_prob = 0.3;
  EXPECT_EQ(simulate_annotations(cands, b.data.train, p, 9), simulate_annotations(cands, b.data.train, p, 9));
  Dataset bare;
  bare.samples.push_back(square_sample(32, "bare"));
  bare.samples[0].target_mask.clear();
  EXPECT_THROW(simulate_annotations({whole_candidate("bare")}, bare, {}, 0), ContractError);
  p.overlap_threshold = 0.0;
  EXPECT_THROW(simulate_annotations(cands, b.data.train, p, 0), ConfigError);
}

TEST(AttentionMetrics, FullyInsideTargetIsOne) {
  Sample s = square_sample(64, "in");
  fill_rect(s.target_mask, 64, 8, 8, 32, 32);
  std::vector<float> v(64, 0.0f);
  v[2 * 8 + 2] = 1.0f;
  const auto m = attention_metrics_from_maps({grid_map(8, v)}, {&s});
  EXPECT_NEAR(m.attention_in_target, 1.0, 1e-12);
  EXPECT_EQ(m.attention_in_distractor, 0.0);
}

TEST(AttentionMetrics, UniformAttentionIsProportionalToArea) {
  Sample s = square_sample(64, "u");
  fill_rect(s.target_mask, 64, 0, 0, 32, 32);
  fill_rect(s.distractor_mask, 64, 32, 32, 64, 48);
  const auto m = attention_metrics_from_maps({grid_map(8, std::vector<float>(64, 0.7f))}, {&s});
  EXPECT_NEAR(m.attention_in_target, 0.25, 1e-9);
  EXPECT_NEAR(m.attention_in_distractor, 0.125, 1e-9);
}

TEST(AttentionMetrics, HandBuiltTwoImageFixture) {
  // Grid and image share a 4x4 resolution, so no interpolation is involved.
  Sample a = square_sample(4, "a");
  Sample b = square_sample(4, "b");
  fill_rect(a.target_mask, 4, 0, 0, 2, 1);      // cells 0, 1
  fill_rect(a.distractor_mask, 4, 3, 3, 4, 4);  // cell 15
  fill_rect(b.target_mask, 4, 0, 3, 4, 4);      // cells 12..15
  std::vector<float> ma(16, 0.0f), mb(16, 0.0f);
  ma[0] = 1.0f;
  ma[5] = 0.5f;
  ma[15] = 0.5f;  // target 1 / 2, distractor 0.5 / 2
  mb[12] = 0.25f;
  mb[0] = 0.75f;
  mb[3] = 1.0f;  // target 0.25 / 2, distractor 0
  const auto m = attention_metrics_from_maps({grid_map(4, ma), grid_map(4, mb), grid_map(4, std::vector<float>(16))},
                                             {&a, &b, &b});
  EXPECT_NEAR(m.attention_in_target, (0.5 + 0.125) / 2, 1e-9);
  EXPECT_NEAR(m.attention_in_distractor, 0.25 / 2, 1e-9);
  EXPECT_EQ(m.evaluated, 2u);
  EXPECT_EQ(m.skipped, 1u);
}

TEST(AttentionMetrics, TargetPlusDistractorNeverExceedsOne) {
  Bench b;
  const auto items = target_bearing(b.data.test_biased);
  ASSERT_FALSE(items.empty());
  const auto maps = grad_cam_all(b.model, items, 1);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto m = attention_metrics_from_maps({maps[i]}, {items[i]});
    EXPECT_GE(m.attention_in_target, 0.0);
    EXPECT_GE(m.attention_in_distractor, 0.0);
    EXPECT_LE(m.attention_in_target + m.attention_in_distractor, 1.0 + 1e-9);
  }
}

TEST(Report, HeaderAndRows) {
  RoundMetrics m;
  m.round = 2;
  m.strategy = "attention";
  m.accuracy_biased = 0.5;
  m.accuracy_decorrelated = 0.25;
  m.attention_in_target = 1.0 / 3.0;
  const auto csv = report_csv({m});
  EXPECT_EQ(csv,
            "round,strategy,accuracy_biased,accuracy_decorrelated,attention_in_target,attention_in_distractor,"
            "loss_pos,loss_neg,loss_c\n2,attention,0.5,0.25,0.333333333,0,0,0,0\n");
  EXPECT_EQ(nlohmann::json(m).get<RoundMetrics>(), m);
}

TEST(Autoloop, ZeroRoundsReportsOnlyThePretrainedRow) {
  Bench b;
  auto s = Session::start(small_session(), b.model.clone(), b.session_data());
  const auto rows = run_autoloop(s, {0, {}});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].round, 0);
  EXPECT_EQ(rows[0].loss_pos, 0.0);
  EXPECT_EQ(rows[0].loss_c, 0.0);
}

TEST(Autoloop, IdenticalSeedsGiveIdenticalReportsAndCheckpoints) {
  Bench b;
  TempDir d1, d2;
  auto s1 = Session::start(small_session("attention"), b.model.clone(), b.session_data(), {d1.path()});
  auto s2 = Session::start(small_session("attention"), b.model.clone(), b.session_data(), {d2.path()});
  const AutoloopOptions opt{2, {0.3, 1.0, 0.1}};
  EXPECT_EQ(report_csv(run_autoloop(s1, opt)), report_csv(run_autoloop(s2, opt)));
  for (int r = 0; r <= 2; ++r) {
    EXPECT_EQ(read_file_bytes(round_checkpoint_path(d1.path() / "checkpoints", r)),
              read_file_bytes(round_checkpoint_path(d2.path() / "checkpoints", r)));
  }
}

TEST(Autoloop, ReplayFromTheLogReproducesCheckpoints) {
  Bench b;
  TempDir live, replay;
  auto s = Session::start(small_session("entropy"), b.model.clone(), b.session_data(), {live.path()});
  run_autoloop(s, {2, {0.3, 2.0, 0.2}});
  const auto log = read_annotation_log(live.path() / "annotations.jsonl");
  auto r = Session::start(small_session("entropy"), b.model.clone(), b.session_data(), {replay.path()});
  EXPECT_EQ(replay_annotations(r, log), 2u);
  for (int k = 0; k <= 2; ++k) {
    EXPECT_EQ(read_file_bytes(round_checkpoint_path(live.path() / "checkpoints", k)),
              read_file_bytes(round_checkpoint_path(replay.path() / "checkpoints", k)))
        << k;
  }
}
