#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/loop.hpp"

namespace hitl {

/// Everything a headless run depends on. `seed` drives the dataset, the model
/// initialization, pretraining order and the loop.
struct ExperimentSpec {
  BiasedDatasetSpec data;
  ClassifierConfig model;
  TrainHyper pretrain;
  SessionConfig session;
  AutoloopOptions loop;
  std::uint64_t seed = 1;
  fs::path cache_dir;  // pretrained checkpoints are reused from here when set
  fs::path workdir;    // session files; empty = in memory

  BiasedDatasetSpec seeded_data() const {
    BiasedDatasetSpec d = data;
    d.seed = seed;
    return d;
  }
  TrainHyper seeded_pretrain() const {
    TrainHyper h = pretrain;
    h.seed = seed;
    return h;
  }
  SessionConfig seeded_session() const {
    SessionConfig c = session;
    c.seed = seed;
    return c;
  }
};

struct ExperimentResult {
  std::vector<RoundMetrics> rows;
  Classifier final_model;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

/// Cache file name for a pretrained model; changes with any input that
/// affects pretraining.
inline std::string pretrain_cache_key(const BiasedDatasetSpec& data, const ClassifierConfig& model,
                                      const TrainHyper& h) {
  const nlohmann::json key = {{"data", data},
                              {"model", model},
                              {"epochs", h.epochs},
                              {"batch_size", h.batch_size},
                              {"lr", h.lr},
                              {"weight_decay", h.weight_decay},
                              {"patience", h.patience},
                              {"seed", h.seed}};
  char buf[48];
  std::snprintf(buf, sizeof buf, "pretrained_%016llx.ckpt", static_cast<unsigned long long>(detail::fnv1a(key.dump())));
  return buf;
}

/// Pretrains from scratch or loads a cached result for the same inputs.
inline Classifier pretrained_model(const BiasedDatasets& data, const BiasedDatasetSpec& data_spec,
                                   const ClassifierConfig& model_config, const TrainHyper& hyper,
                                   const fs::path& cache_dir = {}) {
  fs::path cached;
  if (!cache_dir.empty()) {
    cached = cache_dir / pretrain_cache_key(data_spec, model_config, hyper);
    if (fs::exists(cached)) return load_model(cached);
  }
  auto result = pretrain(build_classifier(model_config, hyper.seed), data.train, data.val, hyper);
  if (!cached.empty()) {
    fs::create_directories(cache_dir);
    save_model(cached, result.model,
               {{"best_epoch", result.best_epoch}, {"val_accuracy", result.best_val_accuracy}});
  }
  return std::move(result.model);
}

inline Classifier pretrained_model(const ExperimentSpec& spec, const BiasedDatasets& data) {
  return pretrained_model(data, spec.seeded_data(), spec.model, spec.seeded_pretrain(), spec.cache_dir);
}

/// Generate, pretrain (or load), then run the simulated-annotator loop.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const BiasedDatasets& data) {
  Classifier model = pretrained_model(spec, data);
  Session session = Session::start(spec.seeded_session(), std::move(model),
                                   {&data.train, &data.test_biased, &data.test_decorrelated}, {spec.workdir});
  ExperimentResult out;
  out.rows = run_autoloop(session, spec.loop);
  out.final_model = session.model().clone();
  return out;
}

inline ExperimentResult run_experiment(const ExperimentSpec& spec) {
  const auto data = generate_biased_dataset(spec.seeded_data());
  return run_experiment(spec, data);
}

/// Mean attention mass inside each target instance (1..max instances) over
/// the images that contain that instance.
inline std::vector<double> per_instance_attention(const Classifier& model, const Dataset& data, int class_index = 1) {
  const auto items = target_bearing(data);
  const auto maps = grad_cam_all(model, items, class_index);
  int instances = 0;
  for (const auto* s : items) instances = std::max(instances, s->target_instances());
  std::vector<double> sum(static_cast<std::size_t>(instances), 0.0);
  std::vector<std::size_t> count(sum.size(), 0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (maps[i].all_zero()) continue;
    const auto up = upsample_attention(maps[i], items[i]->width(), items[i]->height());
    for (int k = 1; k <= items[i]->target_instances(); ++k) {
      sum[static_cast<std::size_t>(k - 1)] += mass_fraction(up, items[i]->target_mask, k);
      ++count[static_cast<std::size_t>(k - 1)];
    }
  }
  for (std::size_t k = 0; k < sum.size(); ++k)
    if (count[k]) sum[k] /= static_cast<double>(count[k]);
  return sum;
}

}  // namespace hitl
