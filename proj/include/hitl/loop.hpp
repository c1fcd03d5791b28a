#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/active.hpp"
#include "hitl/guidance.hpp"
#include "hitl/persistence.hpp"

namespace hitl {

// ---------------------------------------------------------------- configuration

struct AnnotatorPolicy {
  double overlap_threshold = 0.1;  // a region is negative when its distractor fraction exceeds this
  double jitter = 0.0;             // uniform click noise, in image pixels per axis
  double skip_prob = 0.0;

  void validate() const {
    if (!(overlap_threshold > 0.0 && overlap_threshold <= 1.0)) throw ConfigError("overlap_threshold must lie in (0,1]");
    if (!(jitter >= 0.0)) throw ConfigError("jitter must be nonnegative");
    if (!(skip_prob >= 0.0 && skip_prob <= 1.0)) throw ConfigError("skip_prob must lie in [0,1]");
  }
};

struct SessionConfig {
  std::string strategy = "attention";
  std::size_t batch_size = 32;
  std::size_t candidates_shown = 16;
  std::size_t epochs = 10;
  std::size_t fine_tune_batch = 16;
  float lr = 0.01f;
  float weight_decay = 0.0f;
  double max_grad_norm = 2.0;  // 0 disables clipping
  GuidanceConfig guidance;
  std::uint64_t seed = 0;

  void validate() const {
    parse_strategy(strategy);
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (candidates_shown == 0) throw ConfigError("candidates_shown must be positive");
    if (fine_tune_batch == 0) throw ConfigError("fine_tune_batch must be positive");
    if (!(lr >= 0.0f) || !(weight_decay >= 0.0f)) throw ConfigError("lr and weight_decay must be nonnegative");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be nonnegative");
    guidance.validate();
  }
  bool operator==(const SessionConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const SessionConfig& c) {
  j = {{"strategy", c.strategy},
       {"batch_size", c.batch_size},
       {"candidates_shown", c.candidates_shown},
       {"epochs", c.epochs},
       {"fine_tune_batch", c.fine_tune_batch},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"max_grad_norm", c.max_grad_norm},
       {"w_g", c.guidance.w_g},
       {"w_c", c.guidance.w_c},
       {"superpixel_k", c.guidance.superpixel_k},
       {"superpixel_min_size", c.guidance.superpixel_min_size},
       {"seed", c.seed}};
}

/// Applies the keys present in `j` on top of `c`; unknown keys are rejected.
inline SessionConfig apply_config_overrides(SessionConfig c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("configuration overrides must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "strategy") c.strategy = value.get<std::string>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "candidates_shown") c.candidates_shown = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "fine_tune_batch") c.fine_tune_batch = value.get<std::size_t>();
      else if (key == "lr") c.lr = value.get<float>();
      else if (key == "weight_decay") c.weight_decay = value.get<float>();
      else if (key == "max_grad_norm") c.max_grad_norm = value.get<double>();
      else if (key == "w_g") c.guidance.w_g = value.get<double>();
      else if (key == "w_c") c.guidance.w_c = value.get<double>();
      else if (key == "superpixel_k") c.guidance.superpixel_k = value.get<double>();
      else if (key == "superpixel_min_size") c.guidance.superpixel_min_size = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown configuration key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("configuration key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

inline void from_json(const nlohmann::json& j, SessionConfig& c) { c = apply_config_overrides(SessionConfig{}, j); }

// ---------------------------------------------------------------- metrics

struct AttentionMetrics {
  double attention_in_target = 0.0;
  double attention_in_distractor = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // all-zero maps
};

/// Fraction of upsampled attention mass inside a pixel mask.
inline double mass_fraction(const AttentionMap& upsampled, const std::vector<std::uint8_t>& mask, int value = -1) {
  double in = 0.0, total = 0.0;
  for (std::size_t i = 0; i < upsampled.values.size(); ++i) {
    total += upsampled.values[i];
    if (value < 0 ? mask[i] != 0 : mask[i] == value) in += upsampled.values[i];
  }
  return total > 0 ? in / total : 0.0;
}

/// Mean attention mass inside target and distractor masks over the images that
/// contain the target.
inline AttentionMetrics attention_metrics_from_maps(const std::vector<AttentionMap>& maps,
                                                    const std::vector<const Sample*>& items) {
  AttentionMetrics m;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].all_zero()) {
      ++m.skipped;
      continue;
    }
    const auto up = upsample_attention(maps[i], items[i]->width(), items[i]->height());
    m.attention_in_target += mass_fraction(up, items[i]->target_mask);
    m.attention_in_distractor += mass_fraction(up, items[i]->distractor_mask);
    ++m.evaluated;
  }
  if (m.evaluated) {
    m.attention_in_target /= static_cast<double>(m.evaluated);
    m.attention_in_distractor /= static_cast<double>(m.evaluated);
  }
  return m;
}

inline std::vector<const Sample*> target_bearing(const Dataset& d) {
  std::vector<const Sample*> out;
  for (const auto& s : d.samples) {
    if (!s.has_masks()) throw ContractError("attention metrics need masks; " + s.id + " has none");
    if (s.target_instances() > 0) out.push_back(&s);
  }
  return out;
}

inline AttentionMetrics compute_attention_metrics(const Classifier& model, const Dataset& data, int class_index = 1) {
  const auto items = target_bearing(data);
  if (items.empty()) return {};
  return attention_metrics_from_maps(grad_cam_all(model, items, class_index), items);
}

struct RoundMetrics {
  int round = 0;
  std::string strategy;
  double accuracy_biased = 0.0;
  double accuracy_decorrelated = 0.0;
  double attention_in_target = 0.0;
  double attention_in_distractor = 0.0;
  double loss_pos = 0.0;
  double loss_neg = 0.0;
  double loss_c = 0.0;
  std::size_t labeled = 0;
  std::size_t attention_skipped = 0;
  bool operator==(const RoundMetrics&) const = default;
};

inline void to_json(nlohmann::json& j, const RoundMetrics& m) {
  j = {{"round", m.round},
       {"strategy", m.strategy},
       {"accuracy_biased", m.accuracy_biased},
       {"accuracy_decorrelated", m.accuracy_decorrelated},
       {"attention_in_target", m.attention_in_target},
       {"attention_in_distractor", m.attention_in_distractor},
       {"loss_pos", m.loss_pos},
       {"loss_neg", m.loss_neg},
       {"loss_c", m.loss_c},
       {"labeled", m.labeled},
       {"attention_skipped", m.attention_skipped}};
}

inline void from_json(const nlohmann::json& j, RoundMetrics& m) {
  m.round = j.at("round").get<int>();
  m.strategy = j.at("strategy").get<std::string>();
  m.accuracy_biased = j.at("accuracy_biased").get<double>();
  m.accuracy_decorrelated = j.at("accuracy_decorrelated").get<double>();
  m.attention_in_target = j.at("attention_in_target").get<double>();
  m.attention_in_distractor = j.at("attention_in_distractor").get<double>();
  m.loss_pos = j.at("loss_pos").get<double>();
  m.loss_neg = j.at("loss_neg").get<double>();
  m.loss_c = j.at("loss_c").get<double>();
  m.labeled = j.value("labeled", std::size_t{0});
  m.attention_skipped = j.value("attention_skipped", std::size_t{0});
}

inline const char* kReportHeader =
    "round,strategy,accuracy_biased,accuracy_decorrelated,attention_in_target,attention_in_distractor,loss_pos,"
    "loss_neg,loss_c";

inline std::string report_row(const RoundMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", m.round, m.strategy.c_str(),
                m.accuracy_biased, m.accuracy_decorrelated, m.attention_in_target, m.attention_in_distractor,
                m.loss_pos, m.loss_neg, m.loss_c);
  return buf;
}

inline std::string report_csv(const std::vector<RoundMetrics>& rows, bool header = true) {
  std::string out = header ? std::string(kReportHeader) + "\n" : std::string();
  for (const auto& r : rows) out += report_row(r) + "\n";
  return out;
}

// ---------------------------------------------------------------- session state

struct Candidate {
  std::string image_id;
  AttentionMap attention;
  SuperpixelLabeling labeling;
  std::optional<double> score;
  bool operator==(const Candidate&) const = default;
};

/// An image that has moved to the labeled set, with the annotation it was
/// given and the labeling its region ids refer to.
struct LabeledRecord {
  Annotation annotation;
  SuperpixelLabeling labeling;
  bool operator==(const LabeledRecord&) const = default;
};

struct SessionState {
  std::string session_id;
  int round = 0;
  SessionConfig config;
  std::set<std::string> labeled_ids;
  std::set<std::string> unlabeled_ids;
  std::vector<Candidate> candidates;
  std::map<std::string, Annotation> pending_annotations;
  std::map<std::string, LabeledRecord> labeled;
  std::size_t revealed = 0;  // candidates visible to the annotator
  std::string checkpoint_ref;
  std::vector<RoundMetrics> metric_history;

  bool operator==(const SessionState&) const = default;

  const Candidate* candidate(const std::string& id) const {
    for (const auto& c : candidates)
      if (c.image_id == id) return &c;
    return nullptr;
  }
};

inline void to_json(nlohmann::json& j, const SuperpixelLabeling& l) {
  j = {{"width", l.width}, {"height", l.height}, {"labels", l.labels}, {"region_count", l.region_count}};
}
inline void from_json(const nlohmann::json& j, SuperpixelLabeling& l) {
  l.width = j.at("width").get<std::size_t>();
  l.height = j.at("height").get<std::size_t>();
  l.labels = j.at("labels").get<std::vector<int>>();
  l.region_count = j.at("region_count").get<int>();
}
inline void to_json(nlohmann::json& j, const AttentionMap& m) {
  j = {{"width", m.width}, {"height", m.height}, {"values", m.values}, {"image_id", m.source_image_id},
       {"class_index", m.class_index}};
}
inline void from_json(const nlohmann::json& j, AttentionMap& m) {
  m.width = j.at("width").get<std::size_t>();
  m.height = j.at("height").get<std::size_t>();
  m.values = j.at("values").get<std::vector<float>>();
  m.source_image_id = j.value("image_id", std::string());
  m.class_index = j.value("class_index", 1);
}
inline void to_json(nlohmann::json& j, const Candidate& c) {
  j = {{"image_id", c.image_id}, {"attention", c.attention}, {"labeling", c.labeling}};
  if (c.score) j["score"] = *c.score;
}
inline void from_json(const nlohmann::json& j, Candidate& c) {
  c.image_id = j.at("image_id").get<std::string>();
  c.attention = j.at("attention").get<AttentionMap>();
  c.labeling = j.at("labeling").get<SuperpixelLabeling>();
  if (j.contains("score")) c.score = j.at("score").get<double>();
}
inline void to_json(nlohmann::json& j, const SessionState& s) {
  nlohmann::json labeled = nlohmann::json::object();
  for (const auto& [id, r] : s.labeled) labeled[id] = {{"annotation", r.annotation}, {"labeling", r.labeling}};
  nlohmann::json pending = nlohmann::json::object();
  for (const auto& [id, a] : s.pending_annotations) pending[id] = a;
  j = {{"session_id", s.session_id},         {"round", s.round},
       {"config", s.config},                 {"labeled_ids", s.labeled_ids},
       {"unlabeled_ids", s.unlabeled_ids},   {"candidates", s.candidates},
       {"pending_annotations", pending},     {"labeled", labeled},
       {"revealed", s.revealed},             {"checkpoint_ref", s.checkpoint_ref},
       {"metric_history", s.metric_history}};
}
inline void from_json(const nlohmann::json& j, SessionState& s) {
  s.session_id = j.at("session_id").get<std::string>();
  s.round = j.at("round").get<int>();
  s.config = j.at("config").get<SessionConfig>();
  s.labeled_ids = j.at("labeled_ids").get<std::set<std::string>>();
  s.unlabeled_ids = j.at("unlabeled_ids").get<std::set<std::string>>();
  s.candidates = j.at("candidates").get<std::vector<Candidate>>();
  s.pending_annotations.clear();
  for (const auto& [id, a] : j.at("pending_annotations").items()) s.pending_annotations[id] = a.get<Annotation>();
  s.labeled.clear();
  for (const auto& [id, r] : j.at("labeled").items()) {
    s.labeled[id] = {r.at("annotation").get<Annotation>(), r.at("labeling").get<SuperpixelLabeling>()};
  }
  s.revealed = j.at("revealed").get<std::size_t>();
  s.checkpoint_ref = j.at("checkpoint_ref").get<std::string>();
  s.metric_history = j.at("metric_history").get<std::vector<RoundMetrics>>();
}

// ---------------------------------------------------------------- simulated annotator

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return split_seed(a, b); }

}  // namespace detail

/// Oracle annotation for one candidate: a click at each target instance's
/// centroid, the superpixels mostly covered by the distractor as negatives.
inline Annotation simulate_annotation(const Candidate& c, const Sample& s, const AnnotatorPolicy& policy,
                                      std::mt19937_64& rng) {
  if (!s.has_masks()) throw ContractError("simulated annotation needs masks; " + s.id + " has none");
  const std::size_t W = s.width(), H = s.height();
  const std::size_t gw = c.labeling.width, gh = c.labeling.height;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Annotation a;
  a.image_id = s.id;
  a.display_size = {W, H};
  const bool skip = unit(rng) < policy.skip_prob;
  for (int inst = 1; inst <= s.target_instances(); ++inst) {
    double sx = 0, sy = 0, n = 0;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (s.target_mask[y * W + x] == inst) {
          sx += static_cast<double>(x) + 0.5;
          sy += static_cast<double>(y) + 0.5;
          ++n;
        }
    if (n == 0) continue;
    double px = sx / n, py = sy / n;
    if (policy.jitter > 0) {
      px += (2 * unit(rng) - 1) * policy.jitter;
      py += (2 * unit(rng) - 1) * policy.jitter;
    }
    px = std::clamp(px, 0.0, static_cast<double>(W) - 1e-9);
    py = std::clamp(py, 0.0, static_cast<double>(H) - 1e-9);
    a.positive_points.push_back(display_to_grid(px, py, W, H, gw, gh));
  }
  std::vector<double> region_pixels(static_cast<std::size_t>(c.labeling.region_count), 0.0);
  std::vector<double> region_hits(region_pixels.size(), 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const int r = c.labeling.at(x * gw / W, y * gh / H);
      region_pixels[static_cast<std::size_t>(r)] += 1;
      if (s.distractor_mask[y * W + x]) region_hits[static_cast<std::size_t>(r)] += 1;
    }
  for (std::size_t r = 0; r < region_pixels.size(); ++r) {
    if (region_pixels[r] > 0 && region_hits[r] / region_pixels[r] > policy.overlap_threshold) {
      a.negative_regions.insert(static_cast<int>(r));
    }
  }
  if (skip) {
    a.positive_points.clear();
    a.negative_regions.clear();
    a.cleared = true;
  }
  return a;
}

inline std::vector<Annotation> simulate_annotations(const std::vector<Candidate>& candidates, const Dataset& data,
                                                    const AnnotatorPolicy& policy, std::uint64_t seed) {
  policy.validate();
  std::mt19937_64 rng(seed);
  std::vector<Annotation> out;
  for (const auto& c : candidates) {
    const Sample* s = data.find(c.image_id);
    if (!s) throw ContractError("candidate " + c.image_id + " is not in the dataset");
    out.push_back(simulate_annotation(c, *s, policy, rng));
  }
  return out;
}

// ---------------------------------------------------------------- session

class SessionCompleteError : public Error {
 public:
  using Error::Error;
};

struct SubmitResult {
  std::vector<std::string> accepted;
  std::vector<std::pair<std::string, std::string>> rejected;  // (id, reason)
};

/// Data a session works on. The datasets are owned by the caller and must
/// outlive the session.
struct SessionData {
  const Dataset* pool = nullptr;
  const Dataset* test_biased = nullptr;
  const Dataset* test_decorrelated = nullptr;
};

struct SessionPaths {
  fs::path workdir;  // checkpoints, annotation log and snapshot; empty = in memory only
};

/// The human-in-the-loop round engine. Not thread-safe; callers serialize access.
class Session {
 public:
  static constexpr int kAttentionClass = 1;

  static Session start(const SessionConfig& config, Classifier model, SessionData data, SessionPaths paths = {}) {
    config.validate();
    if (!data.pool || data.pool->empty()) throw StartupError("session needs a nonempty training pool");
    Session s(std::move(model), data, std::move(paths));
    s.state_.config = config;
    s.state_.session_id = "session-" + std::to_string(config.seed);
    for (const auto& x : data.pool->samples) s.state_.unlabeled_ids.insert(x.id);
    s.state_.metric_history.push_back(s.evaluate({}));
    s.persist_round();
    return s;
  }

  /// Restores a session from its snapshot and the checkpoint it references.
  static Session resume(const fs::path& workdir, SessionData data) {
    const auto body = load_snapshot(workdir / "session.json", "session");
    SessionState state = body.get<SessionState>();
    Classifier model;
    try {
      model = load_model(state.checkpoint_ref);
    } catch (const IncompatibleFormatError& e) {
      throw StartupError(std::string("cannot load session checkpoint: ") + e.what());
    }
    Session s(std::move(model), data, {workdir});
    s.state_ = std::move(state);
    return s;
  }

  const SessionState& state() const { return state_; }
  const Classifier& model() const { return model_; }
  const SessionData& data() const { return data_; }

  /// Selects the next batch from the unlabeled pool and moves it to the
  /// candidate set. Returns the existing candidates if some are outstanding.
  const std::vector<Candidate>& propose_candidates() {
    if (!state_.candidates.empty()) return state_.candidates;
    if (state_.unlabeled_ids.empty()) throw SessionCompleteError("the unlabeled pool is exhausted");
    std::vector<const Sample*> pool;
    for (const auto& id : state_.unlabeled_ids) pool.push_back(lookup(id));
    const std::size_t n = std::min(state_.config.batch_size, pool.size());
    const std::uint64_t seed = detail::mix_seed(state_.config.seed, 1000 + static_cast<std::uint64_t>(state_.round));
    const Selection sel = select_candidates(pool, state_.config.strategy, n, model_, seed);
    std::map<std::string, std::size_t> pool_index;
    for (std::size_t i = 0; i < sel.pool_ids.size(); ++i) pool_index[sel.pool_ids[i]] = i;

    std::vector<const Sample*> missing;
    if (sel.pool_maps.empty())
      for (const auto& id : sel.ids) missing.push_back(lookup(id));
    const auto fresh = grad_cam_all(model_, missing, kAttentionClass);
    for (std::size_t k = 0; k < sel.ids.size(); ++k) {
      const auto& id = sel.ids[k];
      Candidate c;
      c.image_id = id;
      c.attention = sel.pool_maps.empty() ? fresh[k] : sel.pool_maps[pool_index[id]];
      c.labeling = segment_superpixels(c.attention, state_.config.guidance.superpixel_k,
                                       state_.config.guidance.superpixel_min_size);
      if (!sel.pool_scores.empty() && std::isfinite(sel.pool_scores[pool_index[id]])) c.score = sel.pool_scores[pool_index[id]];
      state_.candidates.push_back(std::move(c));
      state_.unlabeled_ids.erase(id);
    }
    state_.revealed = std::min(state_.config.candidates_shown, state_.candidates.size());
    return state_.candidates;
  }

  /// Shows the next page of candidates; returns how many are visible.
  std::size_t reveal_next() {
    state_.revealed = std::min(state_.candidates.size(), state_.revealed + state_.config.candidates_shown);
    return state_.revealed;
  }

  SubmitResult submit_annotations(const std::vector<Annotation>& annotations) {
    SubmitResult r;
    for (const auto& a : annotations) {
      const Candidate* c = state_.candidate(a.image_id);
      if (!c) {
        r.rejected.emplace_back(a.image_id, "image " + a.image_id + " is not a current candidate");
        continue;
      }
      try {
        validate_annotation(a, c->labeling.width, c->labeling.height, &c->labeling);
      } catch (const ContractError& e) {
        r.rejected.emplace_back(a.image_id, e.what());
        continue;
      }
      state_.pending_annotations[a.image_id] = a;
      if (log_) log_->append(a);
      r.accepted.push_back(a.image_id);
    }
    return r;
  }

  /// Candidates still lacking an annotation.
  std::vector<std::string> unannotated() const {
    std::vector<std::string> out;
    for (const auto& c : state_.candidates)
      if (!state_.pending_annotations.count(c.image_id)) out.push_back(c.image_id);
    return out;
  }

  /// Moves annotated candidates into the labeled set, fine-tunes on the whole
  /// labeled set and re-evaluates. A failure restores the pre-round state.
  const RoundMetrics& run_fine_tune(std::optional<std::size_t> epochs_override = std::nullopt) {
    const auto missing = unannotated();
    if (!missing.empty()) {
      throw ContractError(std::to_string(missing.size()) + " candidates are not annotated (first: " + missing[0] + ")");
    }
    const SessionState before = state_;
    const Classifier model_before = model_.clone();
    try {
      for (const auto& c : state_.candidates) {
        state_.labeled[c.image_id] = {state_.pending_annotations.at(c.image_id), c.labeling};
        state_.labeled_ids.insert(c.image_id);
      }
      state_.candidates.clear();
      state_.pending_annotations.clear();
      state_.revealed = 0;
      const LossBreakdown losses = train(epochs_override.value_or(state_.config.epochs));
      ++state_.round;
      state_.metric_history.push_back(evaluate(losses));
      persist_round();
    } catch (...) {
      state_ = before;
      model_ = model_before.clone();
      throw;
    }
    return state_.metric_history.back();
  }

  void set_config(const SessionConfig& c) {
    c.validate();
    state_.config = c;
  }

  /// Called after every fine-tune epoch with (completed epochs, total epochs).
  void on_epoch(std::function<void(std::size_t, std::size_t)> f) { on_epoch_ = std::move(f); }

  /// Drops candidates and unconfirmed annotations, returning the candidates to
  /// the unlabeled pool. The annotation log is kept.
  void discard_round() {
    for (const auto& c : state_.candidates) state_.unlabeled_ids.insert(c.image_id);
    state_.candidates.clear();
    state_.pending_annotations.clear();
    state_.revealed = 0;
  }

 private:
  Session(Classifier model, SessionData data, SessionPaths paths)
      : model_(std::move(model)), data_(data), paths_(std::move(paths)) {
    if (!paths_.workdir.empty()) {
      fs::create_directories(paths_.workdir);
      log_.emplace(paths_.workdir / "annotations.jsonl");
    }
  }

  const Sample* lookup(const std::string& id) const {
    const Sample* s = data_.pool->find(id);
    if (!s) throw ContractError("unknown image id " + id);
    return s;
  }

  LossBreakdown train(std::size_t epochs) {
    std::vector<AnnotatedImage> images;
    for (const auto& [id, rec] : state_.labeled) images.push_back({lookup(id), rec.annotation, rec.labeling});
    FineTuneOptions opt;
    opt.lr = state_.config.lr;
    opt.weight_decay = state_.config.weight_decay;
    opt.max_grad_norm = state_.config.max_grad_norm;
    opt.attention_class = kAttentionClass;
    LossBreakdown last;
    for (std::size_t e = 0; e < epochs; ++e) {
      std::mt19937_64 rng(detail::mix_seed(state_.config.seed, (static_cast<std::uint64_t>(state_.round) << 16) + e));
      std::vector<std::size_t> order(images.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
      LossBreakdown sum;
      std::size_t steps = 0;
      for (std::size_t start = 0; start < order.size(); start += state_.config.fine_tune_batch) {
        std::vector<AnnotatedImage> batch;
        for (std::size_t i = start; i < std::min(order.size(), start + state_.config.fine_tune_batch); ++i) {
          batch.push_back(images[order[i]]);
        }
        const auto l = fine_tune_step(model_, batch, state_.config.guidance, opt);
        sum.loss_pos += l.loss_pos;
        sum.loss_neg += l.loss_neg;
        sum.loss_c += l.loss_c;
        sum.total += l.total;
        ++steps;
      }
      if (on_epoch_) on_epoch_(e + 1, epochs);
      if (steps) {
        last = sum;
        last.loss_pos /= static_cast<double>(steps);
        last.loss_neg /= static_cast<double>(steps);
        last.loss_c /= static_cast<double>(steps);
        last.total /= static_cast<double>(steps);
      }
    }
    return last;
  }

  RoundMetrics evaluate(const LossBreakdown& losses) const {
    RoundMetrics m;
    m.round = state_.round;
    m.strategy = state_.config.strategy;
    if (data_.test_biased) m.accuracy_biased = accuracy(model_, *data_.test_biased);
    if (data_.test_decorrelated) m.accuracy_decorrelated = accuracy(model_, *data_.test_decorrelated);
    if (data_.test_biased) {
      const auto a = compute_attention_metrics(model_, *data_.test_biased, kAttentionClass);
      m.attention_in_target = a.attention_in_target;
      m.attention_in_distractor = a.attention_in_distractor;
      m.attention_skipped = a.skipped;
    }
    m.loss_pos = losses.loss_pos;
    m.loss_neg = losses.loss_neg;
    m.loss_c = losses.loss_c;
    m.labeled = state_.labeled_ids.size();
    return m;
  }

  void persist_round() {
    if (paths_.workdir.empty()) return;
    const fs::path ckpt = round_checkpoint_path(paths_.workdir / "checkpoints", state_.round);
    save_model(ckpt, model_, {{"round", state_.round}, {"session_id", state_.session_id}});
    state_.checkpoint_ref = ckpt.string();
    save_snapshot(paths_.workdir / "session.json", "session", state_);
  }

  Classifier model_;
  SessionData data_;
  SessionPaths paths_;
  std::optional<AnnotationLog> log_;
  std::function<void(std::size_t, std::size_t)> on_epoch_;
  SessionState state_;
};

// ---------------------------------------------------------------- headless loop

struct AutoloopOptions {
  std::size_t rounds = 5;
  AnnotatorPolicy policy;
};

/// Runs `rounds` select/annotate/fine-tune cycles with the simulated
/// annotator. Returns one metrics row per round, starting with round 0.
inline std::vector<RoundMetrics> run_autoloop(Session& session, const AutoloopOptions& opt) {
  for (std::size_t r = 0; r < opt.rounds; ++r) {
    std::vector<Candidate> candidates;
    try {
      candidates = session.propose_candidates();
    } catch (const SessionCompleteError&) {
      break;
    }
    const auto annotations =
        simulate_annotations(candidates, *session.data().pool, opt.policy,
                             detail::mix_seed(session.state().config.seed, 5000 + r));
    const auto result = session.submit_annotations(annotations);
    if (!result.rejected.empty()) {
      throw ContractError("simulated annotation rejected for " + result.rejected[0].first + ": " +
                          result.rejected[0].second);
    }
    session.run_fine_tune();
  }
  return session.state().metric_history;
}

/// Re-runs a session from its annotation log: each round proposes candidates,
/// consumes log records for those candidates in order, then fine-tunes.
/// Returns the number of completed rounds.
inline std::size_t replay_annotations(Session& session, const std::vector<Annotation>& log) {
  std::size_t next = 0, rounds = 0;
  while (next < log.size()) {
    const auto& candidates = session.propose_candidates();
    std::set<std::string> ids;
    for (const auto& c : candidates) ids.insert(c.image_id);
    const std::size_t begin = next;
    while (next < log.size() && ids.count(log[next].image_id)) ++next;
    if (next == begin) throw ContractError("annotation log record for " + log[next].image_id + " does not match the replayed candidates");
    const auto result = session.submit_annotations({log.begin() + static_cast<long>(begin), log.begin() + static_cast<long>(next)});
    if (!result.rejected.empty()) throw ContractError("replayed annotation rejected: " + result.rejected[0].second);
    session.run_fine_tune();
    ++rounds;
  }
  return rounds;
}

}  // namespace hitl
