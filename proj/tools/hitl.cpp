#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hitl/experiment.hpp"
#include "hitl/service.hpp"

namespace {

using namespace hitl;

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : Error {
  using Error::Error;
};

nlohmann::json read_json_arg(const std::string& path, const char* what) {
  if (path.empty()) return nlohmann::json::object();
  try {
    return read_json_file(path);
  } catch (const Error& e) {
    throw UsageError(std::string("cannot read ") + what + ": " + e.what());
  }
}

BiasedDatasetSpec dataset_spec(const std::string& path) {
  try {
    auto spec = read_json_arg(path, "dataset spec").get<BiasedDatasetSpec>();
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad dataset spec: ") + e.what());
  }
}

ClassifierConfig model_config(const std::string& path) {
  try {
    auto c = read_json_arg(path, "model config").get<ClassifierConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad model config: ") + e.what());
  }
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string part;
  try {
    while (std::getline(ss, part, ',')) {
      const auto dots = part.find("..");
      if (dots == std::string::npos) {
        out.push_back(std::stoull(part));
        continue;
      }
      const auto lo = std::stoull(part.substr(0, dots)), hi = std::stoull(part.substr(dots + 2));
      if (hi < lo) throw UsageError("seed range " + part + " is empty");
      for (auto s = lo; s <= hi; ++s) out.push_back(s);
    }
  } catch (const std::logic_error&) {
    throw UsageError("cannot parse seeds '" + text + "'");
  }
  if (out.empty()) throw UsageError("no seeds given");
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

struct LoopArgs {
  std::string spec_path;
  std::string model_path;
  std::string session_path;
  std::string checkpoint;
  std::string cache_dir;
  std::size_t rounds = 5;
  double threshold = AnnotatorPolicy{}.overlap_threshold;
  double jitter = 0.0;
  double skip_prob = 0.0;
  TrainHyper pretrain;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--spec", spec_path, "dataset spec JSON (defaults when omitted)");
    cmd->add_option("--model", model_path, "classifier config JSON (defaults when omitted)");
    cmd->add_option("--session", session_path, "session config overrides JSON");
    cmd->add_option("--checkpoint", checkpoint, "start from this pretrained checkpoint instead of pretraining");
    cmd->add_option("--cache", cache_dir, "reuse pretrained checkpoints from this directory");
    cmd->add_option("--rounds", rounds, "annotation rounds")->check(CLI::NonNegativeNumber);
    cmd->add_option("--threshold", threshold, "simulated annotator overlap threshold");
    cmd->add_option("--jitter", jitter, "simulated click jitter in pixels");
    cmd->add_option("--skip-prob", skip_prob, "probability of a cleared annotation");
    cmd->add_option("--pretrain-epochs", pretrain.epochs, "maximum pretraining epochs");
  }

  ExperimentSpec spec(const std::string& strategy, std::uint64_t seed, const std::string& work) const {
    ExperimentSpec e;
    e.data = dataset_spec(spec_path);
    e.model = model_config(model_path);
    e.pretrain = pretrain;
    e.session = apply_config_overrides(SessionConfig{}, read_json_arg(session_path, "session config"));
    e.session.strategy = strategy;
    e.session.validate();
    e.loop.rounds = rounds;
    e.loop.policy = {threshold, jitter, skip_prob};
    e.loop.policy.validate();
    e.seed = seed;
    e.cache_dir = cache_dir;
    e.workdir = work;
    return e;
  }

  std::vector<RoundMetrics> run(const std::string& strategy, std::uint64_t seed, const std::string& work) const {
    const ExperimentSpec e = spec(strategy, seed, work);
    if (checkpoint.empty()) return run_experiment(e).rows;
    const auto data = generate_biased_dataset(e.seeded_data());
    Session session = Session::start(e.seeded_session(), load_model(checkpoint),
                                     {&data.train, &data.test_biased, &data.test_decorrelated}, {e.workdir});
    return run_autoloop(session, e.loop);
  }
};

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  write_file_atomic(path, text);
}

std::string pair_workdir(const std::string& root, const std::string& strategy, std::uint64_t seed) {
  if (root.empty()) return {};
  return (fs::path(root) / (strategy + "-seed" + std::to_string(seed))).string();
}

Service* g_service = nullptr;
extern "C" void handle_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human-in-the-loop attention guidance toolkit"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write the synthetic biased benchmark");
  std::string gen_spec, gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--spec", gen_spec, "dataset spec JSON (defaults when omitted)");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "override the spec seed");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pretrain the classifier with early stopping");
  std::string pre_spec, pre_dataset, pre_out, pre_model;
  std::optional<std::uint64_t> pre_seed;
  TrainHyper hyper;
  pre->add_option("--spec", pre_spec, "dataset spec JSON; the benchmark is generated in memory");
  pre->add_option("--dataset", pre_dataset, "benchmark directory written by generate");
  pre->add_option("--out", pre_out, "checkpoint path")->required();
  pre->add_option("--model", pre_model, "classifier config JSON (defaults when omitted)");
  pre->add_option("--seed", pre_seed, "seed for the dataset, initialization and batch order");
  pre->add_option("--epochs", hyper.epochs, "maximum epochs");
  pre->add_option("--lr", hyper.lr, "learning rate");
  pre->add_option("--weight-decay", hyper.weight_decay, "weight decay");
  pre->add_option("--patience", hyper.patience, "early stopping patience");
  pre->get_option("--dataset")->excludes("--spec");

  // serve
  auto* srv = app.add_subcommand("serve", "run the HTTP service");
  std::string srv_config;
  std::optional<int> srv_port;
  srv->add_option("--config", srv_config, "service config JSON")->required();
  srv->add_option("--port", srv_port, "override the configured port");

  // autoloop
  auto* loop = app.add_subcommand("autoloop", "run rounds headlessly with the simulated annotator");
  LoopArgs loop_args;
  std::string loop_strategy = "attention", loop_report, loop_workdir;
  std::uint64_t loop_seed = 1;
  loop_args.add_to(loop);
  loop->add_option("--strategy", loop_strategy, "selection strategy");
  loop->add_option("--seed", loop_seed, "experiment seed");
  loop->add_option("--report", loop_report, "CSV report path ('-' for stdout)");
  loop->add_option("--workdir", loop_workdir, "session directory for checkpoints and the annotation log");

  // compare
  auto* cmp = app.add_subcommand("compare", "run every strategy for every seed");
  LoopArgs cmp_args;
  std::string cmp_strategies = "attention,random,entropy,diversity", cmp_seeds = "1..3", cmp_report, cmp_summary,
              cmp_workdir;
  cmp_args.add_to(cmp);
  cmp->add_option("--strategies", cmp_strategies, "comma-separated strategies");
  cmp->add_option("--seeds", cmp_seeds, "comma-separated seeds or ranges like 1..5");
  cmp->add_option("--report", cmp_report, "CSV report path ('-' for stdout)");
  cmp->add_option("--summary", cmp_summary, "final-round summary CSV with per-seed rows and means");
  cmp->add_option("--workdir", cmp_workdir, "root directory for per-run session files");

  // eval
  auto* ev = app.add_subcommand("eval", "accuracy and attention metrics of a checkpoint");
  std::string ev_checkpoint, ev_dataset;
  ev->add_option("--checkpoint", ev_checkpoint, "model checkpoint")->required();
  ev->add_option("--dataset", ev_dataset, "benchmark directory written by generate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*gen) {
      auto spec = dataset_spec(gen_spec);
      if (gen_seed) spec.seed = *gen_seed;
      export_biased_datasets(generate_biased_dataset(spec), spec, gen_out);
      std::cerr << "wrote benchmark to " << gen_out << "\n";
    } else if (*pre) {
      BiasedDatasets data;
      BiasedDatasetSpec spec;
      if (!pre_dataset.empty()) {
        auto loaded = load_biased_datasets(pre_dataset);
        spec = loaded.spec;
        data = std::move(loaded.data);
        if (pre_seed) spec.seed = *pre_seed;
      } else {
        spec = dataset_spec(pre_spec);
        if (pre_seed) spec.seed = *pre_seed;
        data = generate_biased_dataset(spec);
      }
      hyper.seed = spec.seed;
      auto result = pretrain(build_classifier(model_config(pre_model), hyper.seed), data.train, data.val, hyper);
      save_model(pre_out, result.model,
                 {{"best_epoch", result.best_epoch}, {"val_accuracy", result.best_val_accuracy}});
      std::cerr << "best epoch " << result.best_epoch << ", validation accuracy " << result.best_val_accuracy
                << ", test_biased " << accuracy(result.model, data.test_biased) << ", test_decorrelated "
                << accuracy(result.model, data.test_decorrelated) << "\n";
    } else if (*srv) {
      ApiConfig config = apply_env_overrides(read_json_arg(srv_config, "service config").get<ApiConfig>());
      if (srv_port) config.port = *srv_port;
      config.validate();
      auto service = Service::from_config(config);
      g_service = service.get();
      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      std::cerr << "serving on " << config.host << ":" << config.port << "\n";
      service->serve(config.host, config.port);
      g_service = nullptr;
    } else if (*loop) {
      parse_strategy(loop_strategy);
      const auto rows = loop_args.run(loop_strategy, loop_seed, loop_workdir);
      write_text(loop_report, report_csv(rows));
    } else if (*cmp) {
      const auto strategies = split_list(cmp_strategies);
      if (strategies.empty()) throw UsageError("no strategies given");
      for (const auto& s : strategies) parse_strategy(s);
      const auto seeds = parse_seeds(cmp_seeds);
      std::string report = std::string(kReportHeader) + "\n";
      std::string summary = "strategy,seed,accuracy_biased,accuracy_decorrelated,attention_in_target,attention_in_distractor\n";
      char line[256];
      for (const auto& strategy : strategies) {
        double mb = 0, md = 0, mt = 0, mx = 0;
        for (auto seed : seeds) {
          std::cerr << "running " << strategy << " seed " << seed << "\n";
          const auto rows = cmp_args.run(strategy, seed, pair_workdir(cmp_workdir, strategy, seed));
          report += report_csv(rows, false);
          const auto& f = rows.back();
          std::snprintf(line, sizeof line, "%s,%llu,%.9g,%.9g,%.9g,%.9g\n", strategy.c_str(),
                        static_cast<unsigned long long>(seed), f.accuracy_biased, f.accuracy_decorrelated,
                        f.attention_in_target, f.attention_in_distractor);
          summary += line;
          mb += f.accuracy_biased;
          md += f.accuracy_decorrelated;
          mt += f.attention_in_target;
          mx += f.attention_in_distractor;
        }
        const double n = static_cast<double>(seeds.size());
        std::snprintf(line, sizeof line, "%s,mean,%.9g,%.9g,%.9g,%.9g\n", strategy.c_str(), mb / n, md / n, mt / n,
                      mx / n);
        summary += line;
      }
      write_text(cmp_report, report);
      if (!cmp_summary.empty()) write_text(cmp_summary, summary);
    } else if (*ev) {
      const auto bench = load_biased_datasets(ev_dataset);
      const Classifier model = load_model(ev_checkpoint);
      nlohmann::json out = nlohmann::json::object();
      const std::pair<const char*, const Dataset*> splits[] = {{"val", &bench.data.val},
                                                               {"test_biased", &bench.data.test_biased},
                                                               {"test_decorrelated", &bench.data.test_decorrelated}};
      for (const auto& [name, d] : splits) {
        nlohmann::json entry = {{"accuracy", accuracy(model, *d)}, {"count", d->size()}};
        if (!d->empty() && d->samples.front().has_masks()) {
          const auto a = compute_attention_metrics(model, *d);
          entry["attention_in_target"] = a.attention_in_target;
          entry["attention_in_distractor"] = a.attention_in_distractor;
          entry["attention_skipped"] = a.skipped;
        }
        out[name] = entry;
      }
      std::cout << out.dump(2) << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
