#pragma once

#include <atomic>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/loop.hpp"
#include "hitl/render.hpp"

// After the Eigen-backed headers: httplib pulls in <resolv.h>, whose `_res`
// macro collides with Eigen identifiers.
#include <httplib.h>

namespace hitl {

// ---------------------------------------------------------------- configuration

struct ApiConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds an ephemeral port
  fs::path dataset;     // benchmark directory written by `hitl generate`
  fs::path checkpoint;  // pretrained model
  fs::path workdir = "hitl-session";
  fs::path static_dir;  // UI bundle; optional
  SessionConfig session;

  void validate() const {
    if (port < 0 || port > 65535) throw ConfigError("port must lie in 0..65535");
    if (host.empty()) throw ConfigError("host must not be empty");
    session.validate();
  }

  /// Startup checks on the referenced paths.
  void check_paths() const {
    if (dataset.empty() || !fs::exists(dataset / "manifest.json"))
      throw StartupError("dataset directory '" + dataset.string() + "' has no manifest.json");
    if (checkpoint.empty() || !fs::exists(checkpoint))
      throw StartupError("checkpoint '" + checkpoint.string() + "' does not exist");
    if (!static_dir.empty() && !fs::is_directory(static_dir))
      throw StartupError("static directory '" + static_dir.string() + "' does not exist");
  }
};

inline void to_json(nlohmann::json& j, const ApiConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"dataset", c.dataset.string()},
       {"checkpoint", c.checkpoint.string()},
       {"workdir", c.workdir.string()},
       {"static_dir", c.static_dir.string()},
       {"session", c.session}};
}

inline void from_json(const nlohmann::json& j, ApiConfig& c) {
  if (!j.is_object()) throw ConfigError("service config must be a JSON object");
  c = ApiConfig{};
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "host") c.host = value.get<std::string>();
      else if (key == "port") c.port = value.get<int>();
      else if (key == "dataset") c.dataset = value.get<std::string>();
      else if (key == "checkpoint") c.checkpoint = value.get<std::string>();
      else if (key == "workdir") c.workdir = value.get<std::string>();
      else if (key == "static_dir") c.static_dir = value.get<std::string>();
      else if (key == "session") c.session = apply_config_overrides(SessionConfig{}, value);
      else throw ConfigError("unknown service config key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("service config key '" + key + "' has the wrong type");
    }
  }
  c.validate();
}

/// HITL_HOST, HITL_PORT, HITL_DATASET, HITL_CHECKPOINT, HITL_WORKDIR and
/// HITL_STATIC_DIR override the corresponding fields when set.
inline ApiConfig apply_env_overrides(ApiConfig c) {
  auto env = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    if (!v || !*v) return std::nullopt;
    return std::string(v);
  };
  if (auto v = env("HITL_HOST")) c.host = *v;
  if (auto v = env("HITL_PORT")) {
    try {
      std::size_t used = 0;
      c.port = std::stoi(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("HITL_PORT '" + *v + "' is not a number");
    }
  }
  if (auto v = env("HITL_DATASET")) c.dataset = *v;
  if (auto v = env("HITL_CHECKPOINT")) c.checkpoint = *v;
  if (auto v = env("HITL_WORKDIR")) c.workdir = *v;
  if (auto v = env("HITL_STATIC_DIR")) c.static_dir = *v;
  c.validate();
  return c;
}

// ---------------------------------------------------------------- service

/// Error carried to an HTTP response as {"error": {"code", "message"}}.
struct ApiError : Error {
  ApiError(int status, std::string code, const std::string& message)
      : Error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
};

inline nlohmann::json error_body(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

/// Immutable picture of the session published after every mutation. GET
/// handlers only read views.
struct ServiceView {
  std::string phase = "idle";  // idle | selecting | awaiting_annotations | training
  bool active = false;
  bool complete = false;  // the unlabeled pool is exhausted
  std::string session_id;
  int round = 0;
  SessionConfig config;
  std::vector<Candidate> candidates;
  std::set<std::string> completed;
  std::size_t revealed = 0;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  std::size_t pool = 0;
  std::size_t epoch = 0;
  std::size_t epochs = 0;
  std::vector<RoundMetrics> history;
  std::optional<nlohmann::json> last_error;
  std::shared_ptr<const Classifier> model;

  const Candidate* candidate(const std::string& id) const {
    for (const auto& c : candidates)
      if (c.image_id == id) return &c;
    return nullptr;
  }
};

class Service {
 public:
  /// `data` and `pretrained` are owned by the service. An empty workdir keeps
  /// sessions in memory.
  Service(BiasedDatasets data, Classifier pretrained, SessionConfig defaults, fs::path workdir = {})
      : data_(std::move(data)), pretrained_(std::move(pretrained)), defaults_(std::move(defaults)),
        workdir_(std::move(workdir)) {
    defaults_.validate();
    for (const Dataset* d : {&data_.train, &data_.val, &data_.test_biased, &data_.test_decorrelated})
      for (const auto& s : d->samples) images_.emplace(s.id, &s);
    auto v = std::make_shared<ServiceView>();
    v->config = defaults_;
    v->pool = data_.train.size();
    v->model = std::make_shared<const Classifier>(pretrained_.clone());
    store(v);
    routes();
  }

  static std::unique_ptr<Service> from_config(const ApiConfig& c) {
    c.check_paths();
    auto bench = load_biased_datasets(c.dataset);
    Classifier model;
    try {
      model = load_model(c.checkpoint);
    } catch (const Error& e) {
      throw StartupError(std::string("cannot load checkpoint: ") + e.what());
    }
    auto s = std::make_unique<Service>(std::move(bench.data), std::move(model), c.session, c.workdir);
    if (!c.static_dir.empty()) s->server_.set_mount_point("/", c.static_dir.string());
    return s;
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ~Service() {
    stop();
    join_worker();
  }

  /// Binds and serves on a background thread; returns the bound port.
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw StartupError("cannot bind " + host + ":" + std::to_string(port));
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  /// Binds and serves on the calling thread until stop().
  void serve(const std::string& host, int port) {
    if (!server_.bind_to_port(host, port)) throw StartupError("cannot bind " + host + ":" + std::to_string(port));
    server_.listen_after_bind();
  }

  void stop() {
    server_.stop();
    if (listener_.joinable()) listener_.join();
  }

  /// Blocks until a running fine-tune finishes.
  void wait_idle() { join_worker(); }

  std::shared_ptr<const ServiceView> view() const {
    std::lock_guard lock(view_mu_);
    return view_;
  }

  nlohmann::json status() const { return status_json(*view()); }

 private:
  void store(std::shared_ptr<const ServiceView> v) {
    std::lock_guard lock(view_mu_);
    view_ = std::move(v);
  }

  // Requires mu_.
  void publish(std::string phase) {
    auto v = std::make_shared<ServiceView>();
    const auto prev = view();
    v->phase = std::move(phase);
    v->last_error = prev->last_error;
    v->pool = data_.train.size();
    if (!session_) {
      v->config = defaults_;
      v->model = std::make_shared<const Classifier>(pretrained_.clone());
      store(v);
      return;
    }
    const auto& st = session_->state();
    v->active = true;
    v->complete = complete_;
    v->session_id = st.session_id;
    v->round = st.round;
    v->config = st.config;
    v->candidates = st.candidates;
    for (const auto& [id, a] : st.pending_annotations) v->completed.insert(id);
    v->revealed = st.revealed;
    v->labeled = st.labeled_ids.size();
    v->unlabeled = st.unlabeled_ids.size();
    v->history = st.metric_history;
    v->model = prev->model && prev->round == st.round && prev->active && prev->session_id == st.session_id
                   ? prev->model
                   : std::make_shared<const Classifier>(session_->model().clone());
    store(v);
  }

  void progress(std::size_t epoch, std::size_t epochs) {
    auto v = std::make_shared<ServiceView>(*view());
    v->epoch = epoch;
    v->epochs = epochs;
    store(v);
  }

  // Requires mu_. Proposes candidates unless the pool is exhausted.
  void propose() {
    publish("selecting");
    try {
      session_->propose_candidates();
      complete_ = false;
    } catch (const SessionCompleteError&) {
      complete_ = true;
    }
    publish(complete_ ? "idle" : "awaiting_annotations");
  }

  void require_session() const {
    if (!session_) throw ApiError(409, "no_session", "no session is running; POST /api/session first");
  }
  void require_not_training() const {
    if (training_) throw ApiError(409, "training_in_progress", "a fine-tune is running; poll /api/status");
  }

  void join_worker() {
    if (worker_.joinable()) worker_.join();
  }

  static nlohmann::json parse_body(const httplib::Request& req, bool allow_empty) {
    if (req.body.empty()) {
      if (allow_empty) return nlohmann::json::object();
      throw ApiError(400, "malformed_payload", "request body is empty");
    }
    try {
      return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ApiError(400, "malformed_payload", std::string("body is not valid JSON: ") + e.what());
    }
  }

  static nlohmann::json status_json(const ServiceView& v) {
    std::size_t visible = std::min(v.revealed, v.candidates.size());
    return {{"phase", v.phase},
            {"active", v.active},
            {"complete", v.complete},
            {"session_id", v.session_id},
            {"round", v.round},
            {"strategy", v.config.strategy},
            {"progress",
             {{"candidates", v.candidates.size()},
              {"revealed", visible},
              {"annotated", v.completed.size()},
              {"labeled", v.labeled},
              {"unlabeled", v.unlabeled},
              {"pool", v.pool},
              {"epoch", v.epoch},
              {"epochs", v.epochs}}},
            {"last_error", v.last_error ? *v.last_error : nlohmann::json(nullptr)}};
  }

  static void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <class F>
  httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ApiError& e) {
        send_json(res, error_body(e.code, e.what()), e.status);
      } catch (const ConfigError& e) {
        send_json(res, error_body("invalid_config", e.what()), 400);
      } catch (const ContractError& e) {
        send_json(res, error_body("invalid_request", e.what()), 400);
      } catch (const nlohmann::json::exception& e) {
        send_json(res, error_body("malformed_payload", e.what()), 400);
      } catch (const std::exception& e) {
        send_json(res, error_body("internal", e.what()), 500);
      }
    };
  }

  void routes() {
    server_.Get("/api/status", guarded([this](const httplib::Request&, httplib::Response& res) { send_json(res, status()); }));

    server_.Post("/api/session", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req, true);
      if (!body.is_object()) throw ApiError(400, "malformed_payload", "session overrides must be a JSON object");
      std::lock_guard lock(mu_);
      require_not_training();
      if (session_) throw ApiError(409, "session_active", "a session is already running; DELETE /api/session first");
      const SessionConfig config = apply_config_overrides(defaults_, body);
      join_worker();
      fs::path dir;
      if (!workdir_.empty()) dir = workdir_ / ("session-" + std::to_string(++sessions_started_));
      session_.emplace(Session::start(config, pretrained_.clone(),
                                      {&data_.train, &data_.test_biased, &data_.test_decorrelated}, {dir}));
      session_->on_epoch([this](std::size_t e, std::size_t n) { progress(e, n); });
      auto v = std::make_shared<ServiceView>(*view());
      v->last_error.reset();
      store(v);
      propose();
      send_json(res, status(), 201);
    }));

    server_.Delete("/api/session", guarded([this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lock(mu_);
      require_not_training();
      require_session();
      session_->discard_round();
      session_.reset();
      complete_ = false;
      publish("idle");
      send_json(res, status());
    }));

    server_.Get("/api/candidates", guarded([this](const httplib::Request&, httplib::Response& res) {
      const auto v = view();
      nlohmann::json list = nlohmann::json::array();
      for (std::size_t i = 0; i < v->candidates.size(); ++i) {
        const auto& c = v->candidates[i];
        list.push_back({{"image_id", c.image_id},
                        {"index", i},
                        {"visible", i < v->revealed},
                        {"completed", v->completed.count(c.image_id) > 0},
                        {"score", c.score ? nlohmann::json(*c.score) : nlohmann::json(nullptr)},
                        {"image_url", "/api/image/" + c.image_id},
                        {"attention_url", "/api/attention/" + c.image_id},
                        {"attention_grid_url", "/api/attention/" + c.image_id + "?format=json"},
                        {"labeling", c.labeling}});
      }
      send_json(res, {{"round", v->round},
                      {"phase", v->phase},
                      {"revealed", std::min(v->revealed, v->candidates.size())},
                      {"all_completed", !v->candidates.empty() && v->completed.size() == v->candidates.size()},
                      {"candidates", list}});
    }));

    server_.Get(R"(/api/image/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto it = images_.find(req.matches[1].str());
      if (it == images_.end()) throw ApiError(404, "not_found", "unknown image " + req.matches[1].str());
      res.set_content(encode_png(to_raw(it->second->image)), "image/png");
    }));

    server_.Get(R"(/api/attention/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto v = view();
      const std::string id = req.matches[1].str();
      const Candidate* c = v->candidate(id);
      if (!c) throw ApiError(404, "not_found", "image " + id + " is not a current candidate");
      if (req.get_param_value("format") == "json") {
        send_json(res, {{"image_id", id}, {"attention", c->attention}, {"labeling", c->labeling}});
        return;
      }
      const Sample* s = images_.at(id);
      const bool overlay = req.get_param_value("overlay") != "0";
      res.set_content(encode_png(render_heatmap(c->attention, s->width(), s->height(), overlay ? &s->image : nullptr)),
                      "image/png");
    }));

    server_.Get("/api/palette", guarded([](const httplib::Request&, httplib::Response& res) {
      nlohmann::json table = nlohmann::json::array();
      for (const auto& c : heatmap_palette()) table.push_back({c[0], c[1], c[2]});
      send_json(res, {{"palette", table}});
    }));

    server_.Post("/api/annotations", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req, false);
      const nlohmann::json& list = body.is_object() && body.contains("annotations") ? body.at("annotations") : body;
      if (!list.is_array()) throw ApiError(400, "malformed_payload", "expected a list of annotations");
      std::lock_guard lock(mu_);
      require_not_training();
      require_session();
      std::vector<Annotation> parsed;
      nlohmann::json rejected = nlohmann::json::array();
      for (const auto& item : list) {
        try {
          parsed.push_back(item.get<Annotation>());
        } catch (const std::exception& e) {
          const std::string id = item.is_object() && item.contains("image_id") && item["image_id"].is_string()
                                     ? item["image_id"].get<std::string>()
                                     : "";
          rejected.push_back({{"image_id", id}, {"reason", std::string("malformed annotation: ") + e.what()}});
        }
      }
      const auto result = session_->submit_annotations(parsed);
      for (const auto& [id, reason] : result.rejected) rejected.push_back({{"image_id", id}, {"reason", reason}});
      publish("awaiting_annotations");
      send_json(res, {{"accepted", result.accepted}, {"rejected", rejected}});
    }));

    server_.Post("/api/next", guarded([this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lock(mu_);
      require_not_training();
      require_session();
      const std::size_t revealed = session_->reveal_next();
      publish(view()->phase);
      send_json(res, {{"revealed", revealed}, {"candidates", session_->state().candidates.size()}});
    }));

    server_.Post("/api/finetune", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req, true);
      std::optional<std::size_t> epochs;
      if (body.is_object() && body.contains("epochs")) {
        if (!body["epochs"].is_number_unsigned()) throw ApiError(400, "malformed_payload", "epochs must be a nonnegative integer");
        epochs = body["epochs"].get<std::size_t>();
      }
      std::lock_guard lock(mu_);
      require_not_training();
      require_session();
      if (session_->state().candidates.empty())
        throw ApiError(409, complete_ ? "session_complete" : "no_candidates", "there are no candidates to fine-tune on");
      const auto missing = session_->unannotated();
      if (!missing.empty()) {
        throw ApiError(409, "annotations_missing",
                       std::to_string(missing.size()) + " candidates are not annotated (first: " + missing[0] + ")");
      }
      join_worker();
      training_ = true;
      publish("training");
      worker_ = std::thread([this, epochs] { fine_tune_worker(epochs); });
      send_json(res, status(), 202);
    }));

    server_.Get("/api/metrics", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto v = view();
      const std::string mode = req.has_param("mode") ? req.get_param_value("mode") : "test";
      if (mode == "test") {
        send_json(res, {{"mode", "test"}, {"history", v->history}});
        return;
      }
      if (mode != "train") throw ApiError(400, "invalid_request", "mode must be 'test' or 'train'");
      std::lock_guard lock(eval_mu_);
      const auto a = compute_attention_metrics(*v->model, data_.train);
      send_json(res, {{"mode", "train"},
                      {"round", v->round},
                      {"accuracy", accuracy(*v->model, data_.train)},
                      {"attention_in_target", a.attention_in_target},
                      {"attention_in_distractor", a.attention_in_distractor},
                      {"attention_skipped", a.skipped},
                      {"history", v->history}});
    }));

    server_.Get("/api/config", guarded([this](const httplib::Request&, httplib::Response& res) { send_json(res, view()->config); }));

    server_.Patch("/api/config", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req, false);
      if (!body.is_object()) throw ApiError(400, "malformed_payload", "config overrides must be a JSON object");
      std::lock_guard lock(mu_);
      require_not_training();
      if (session_) {
        SessionConfig next = apply_config_overrides(session_->state().config, body);
        if (next.seed != session_->state().config.seed)
          throw ApiError(400, "invalid_config", "seed cannot change during a session");
        session_->set_config(next);
        publish(view()->phase);
      } else {
        defaults_ = apply_config_overrides(defaults_, body);
        publish("idle");
      }
      send_json(res, view()->config);
    }));
  }

  void fine_tune_worker(std::optional<std::size_t> epochs) {
    std::optional<nlohmann::json> error;
    const int round = session_->state().round;
    try {
      session_->run_fine_tune(epochs);
    } catch (const std::exception& e) {
      error = nlohmann::json{{"round", round + 1}, {"code", "round_aborted"}, {"message", e.what()}};
    }
    std::lock_guard lock(mu_);
    auto v = std::make_shared<ServiceView>(*view());
    v->last_error = error;
    v->epoch = v->epochs = 0;
    store(v);
    training_ = false;
    if (error) {
      publish("awaiting_annotations");
    } else {
      try {
        propose();
      } catch (const std::exception& e) {
        auto w = std::make_shared<ServiceView>(*view());
        w->last_error = nlohmann::json{{"round", round + 1}, {"code", "selection_failed"}, {"message", e.what()}};
        store(w);
        publish("idle");
      }
    }
  }

  BiasedDatasets data_;
  Classifier pretrained_;
  SessionConfig defaults_;
  fs::path workdir_;
  std::unordered_map<std::string, const Sample*> images_;

  std::mutex mu_;  // serializes every session mutation
  std::mutex eval_mu_;
  mutable std::mutex view_mu_;
  std::shared_ptr<const ServiceView> view_;
  std::optional<Session> session_;
  std::atomic<bool> training_{false};
  bool complete_ = false;
  int sessions_started_ = 0;
  std::thread worker_;
  std::thread listener_;
  httplib::Server server_;
};

}  // namespace hitl
