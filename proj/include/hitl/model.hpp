#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/checkpoint.hpp"
#include "hitl/ops.hpp"
#include "hitl/optim.hpp"
#include "hitl/sample.hpp"

namespace hitl {

struct ConvBlockSpec {
  std::size_t filters = 16;
  std::size_t stride = 1;
  bool operator==(const ConvBlockSpec&) const = default;
};

/// Each block is conv3x3(pad 1) -> bias -> relu -> maxpool 2x2; the last block
/// feeds global average pooling and a dense head.
struct ClassifierConfig {
  std::size_t input_size = 64;
  std::size_t channels = 3;
  std::vector<ConvBlockSpec> blocks = {{16, 1}, {32, 1}, {64, 1}, {64, 1}};
  std::size_t num_classes = 2;
  std::size_t target_layer = 3;

  bool operator==(const ClassifierConfig&) const = default;

  /// Spatial side of the target block's activations (the attention grid).
  std::size_t feature_side(std::size_t block) const {
    std::size_t side = input_size;
    for (std::size_t b = 0; b <= block; ++b) {
      side = (side - 1) / blocks[b].stride + 1;
      if (b < block) side /= 2;
    }
    return side;
  }

  std::size_t final_side() const {
    std::size_t side = input_size;
    for (const auto& b : blocks) side = ((side - 1) / b.stride + 1) / 2;
    return side;
  }

  void validate() const {
    if (blocks.empty()) throw ConfigError("classifier needs at least one conv block");
    if (input_size == 0 || channels == 0) throw ConfigError("input size and channel count must be positive");
    if (num_classes < 2) throw ConfigError("classifier needs at least two classes");
    if (target_layer >= blocks.size()) {
      throw ConfigError("target_layer " + std::to_string(target_layer) + " does not index one of the " +
                        std::to_string(blocks.size()) + " conv blocks");
    }
    std::size_t side = input_size;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].filters == 0 || blocks[b].stride == 0) throw ConfigError("conv block filters/stride must be positive");
      side = (side - 1) / blocks[b].stride + 1;
      if (side < 2) throw ConfigError("conv block " + std::to_string(b) + " leaves no room for pooling");
      side /= 2;
    }
    if (side < 4) {
      throw ConfigError("final spatial resolution " + std::to_string(side) + "x" + std::to_string(side) +
                        " is below 4x4");
    }
  }

  std::size_t parameter_count() const {
    std::size_t total = 0, in = channels;
    for (const auto& b : blocks) {
      total += b.filters * in * 9 + b.filters;
      in = b.filters;
    }
    return total + num_classes * in + num_classes;
  }
};

inline void to_json(nlohmann::json& j, const ConvBlockSpec& b) { j = {{"filters", b.filters}, {"stride", b.stride}}; }
inline void from_json(const nlohmann::json& j, ConvBlockSpec& b) {
  b.filters = j.at("filters").get<std::size_t>();
  b.stride = j.value("stride", std::size_t{1});
}
inline void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"input_size", c.input_size},   {"channels", c.channels},         {"blocks", c.blocks},
       {"num_classes", c.num_classes}, {"target_layer", c.target_layer}};
}
inline void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  ClassifierConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.channels = j.value("channels", d.channels);
  c.blocks = j.contains("blocks") ? j.at("blocks").get<std::vector<ConvBlockSpec>>() : d.blocks;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.target_layer = j.value("target_layer", c.blocks.empty() ? 0 : c.blocks.size() - 1);
}

template <class T>
class BasicClassifier {
 public:
  struct ForwardResult {
    Var<T> logits;           // [N, K]
    Var<T> target_features;  // [N, F, h, w], post-relu activations of the target block
    Var<T> embedding;        // [N, F_last], globally pooled penultimate features
  };

  BasicClassifier() = default;

  /// He-normal weights, zero biases; identical seeds give identical parameters.
  static BasicClassifier build(const ClassifierConfig& config, std::uint64_t seed) {
    config.validate();
    BasicClassifier m;
    m.config_ = config;
    std::mt19937_64 rng(seed);
    std::size_t in = config.channels;
    for (std::size_t b = 0; b < config.blocks.size(); ++b) {
      const std::size_t f = config.blocks[b].filters;
      const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
      m.add_param("conv" + std::to_string(b) + ".weight", BasicTensor<T>::randn({f, in, 3, 3}, rng, std));
      m.add_param("conv" + std::to_string(b) + ".bias", BasicTensor<T>::zeros({f}));
      in = f;
    }
    const std::size_t k = config.num_classes;
    m.add_param("head.weight", BasicTensor<T>::randn({k, in}, rng, std::sqrt(2.0 / static_cast<double>(in))));
    m.add_param("head.bias", BasicTensor<T>::zeros({k}));
    return m;
  }

  const ClassifierConfig& config() const { return config_; }
  std::vector<Var<T>>& params() { return params_; }
  const std::vector<Var<T>>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  Var<T>& param(const std::string& name) {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return params_[i];
    throw ContractError("no parameter named " + name);
  }
  const Var<T>& param(const std::string& name) const { return const_cast<BasicClassifier*>(this)->param(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value().numel();
    return n;
  }

  ForwardResult forward(const BasicTensor<T>& images) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != config_.channels || s[2] != config_.input_size || s[3] != config_.input_size) {
      throw DimensionError("classifier expects [N," + std::to_string(config_.channels) + "," +
                           std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) +
                           "] input, got " + shape_str(s));
    }
    ForwardResult r;
    Var<T> h(images);
    for (std::size_t b = 0; b < config_.blocks.size(); ++b) {
      h = conv2d(h, params_[2 * b], config_.blocks[b].stride, 1);
      h = relu(add_bias(h, params_[2 * b + 1]));
      if (b == config_.target_layer) r.target_features = h;
      h = max_pool2d(h, 2, 2);
    }
    r.embedding = global_avg_pool(h);
    const std::size_t head = 2 * config_.blocks.size();
    r.logits = dense(r.embedding, params_[head], params_[head + 1]);
    return r;
  }

  Checkpoint to_checkpoint(const nlohmann::json& extra = nlohmann::json::object()) const {
    Checkpoint c;
    nlohmann::json meta = extra;
    meta["config"] = config_;
    c.metadata = meta.dump();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      c.params.push_back({names_[i], params_[i].value().template cast<float>()});
    }
    return c;
  }

  static BasicClassifier from_checkpoint(const Checkpoint& c) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(c.metadata);
    } catch (const nlohmann::json::exception& e) {
      throw IncompatibleFormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    if (!meta.contains("config")) throw IncompatibleFormatError("checkpoint metadata lacks a classifier config");
    ClassifierConfig cfg = meta.at("config").get<ClassifierConfig>();
    BasicClassifier m = build(cfg, 0);
    if (c.params.size() != m.params_.size()) {
      throw IncompatibleFormatError("checkpoint has " + std::to_string(c.params.size()) + " tensors, model expects " +
                                    std::to_string(m.params_.size()));
    }
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      if (c.params[i].name != m.names_[i] || c.params[i].value.shape() != m.params_[i].shape()) {
        throw IncompatibleFormatError("checkpoint tensor " + c.params[i].name + " " +
                                      shape_str(c.params[i].value.shape()) + " does not match model parameter " +
                                      m.names_[i] + " " + shape_str(m.params_[i].shape()));
      }
      m.params_[i] = Var<T>(c.params[i].value.template cast<T>(), true);
    }
    return m;
  }

  /// Deep copy with independent parameter storage.
  BasicClassifier clone() const { return cast<T>(); }

  template <class U>
  BasicClassifier<U> cast() const {
    BasicClassifier<U> out;
    out.config_ = config_;
    out.names_ = names_;
    for (const auto& p : params_) out.params_.emplace_back(p.value().template cast<U>(), true);
    return out;
  }

 private:
  template <class>
  friend class BasicClassifier;

  void add_param(std::string name, BasicTensor<T> value) {
    names_.push_back(std::move(name));
    params_.emplace_back(std::move(value), true);
  }

  ClassifierConfig config_;
  std::vector<std::string> names_;
  std::vector<Var<T>> params_;
};

using Classifier = BasicClassifier<float>;

inline Classifier build_classifier(const ClassifierConfig& config, std::uint64_t seed) {
  return Classifier::build(config, seed);
}

/// Mean binary cross-entropy between softmax scores and one-hot labels.
template <class T>
Var<T> classification_loss(const Var<T>& logits, const std::vector<int>& labels) {
  const std::size_t N = logits.shape()[0], K = logits.shape()[1];
  if (labels.size() != N) throw DimensionError("classification_loss: label count does not match batch");
  BasicTensor<T> onehot({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw ContractError("label " + std::to_string(labels[n]) + " outside [0," + std::to_string(K) + ")");
    }
    onehot[n * K + static_cast<std::size_t>(labels[n])] = T(1);
  }
  return binary_cross_entropy(softmax(logits), onehot);
}

inline Tensor as_batch(const Tensor& image) {
  if (image.rank() == 3) return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  return image;
}

/// Softmax class scores for one image ([C,H,W] or [1,C,H,W]).
inline std::vector<float> predict(const Classifier& model, const Tensor& image) {
  const Tensor batch = as_batch(image);
  if (batch.rank() != 4 || batch.dim(0) != 1) {
    throw DimensionError("predict expects a single image, got " + shape_str(image.shape()));
  }
  NoGradGuard no_grad;
  auto probs = softmax(model.forward(batch).logits);
  return probs.value().vec();
}

/// Softmax scores for each sample, evaluated in chunks.
inline std::vector<std::vector<float>> predict_items(const Classifier& model, const std::vector<const Sample*>& items,
                                                     std::size_t chunk = 64) {
  std::vector<std::vector<float>> out;
  out.reserve(items.size());
  NoGradGuard no_grad;
  const std::size_t K = model.config().num_classes;
  for (std::size_t start = 0; start < items.size(); start += chunk) {
    std::vector<const Sample*> part(items.begin() + static_cast<long>(start),
                                    items.begin() + static_cast<long>(std::min(items.size(), start + chunk)));
    auto probs = softmax(model.forward(stack_images(part)).logits).value();
    for (std::size_t n = 0; n < part.size(); ++n) out.emplace_back(probs.raw() + n * K, probs.raw() + (n + 1) * K);
  }
  return out;
}

inline std::vector<std::vector<float>> predict_all(const Classifier& model, const Dataset& data,
                                                   std::size_t chunk = 64) {
  std::vector<const Sample*> items;
  for (const auto& s : data.samples) items.push_back(&s);
  return predict_items(model, items, chunk);
}

inline int argmax(const std::vector<float>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline double accuracy(const Classifier& model, const Dataset& data) {
  if (data.empty()) return 0.0;
  const auto scores = predict_all(model, data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hit += argmax(scores[i]) == data.samples[i].label;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

struct TrainHyper {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  float lr = 0.1f;
  float weight_decay = 5e-4f;
  std::size_t patience = 12;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  bool operator==(const EpochRecord&) const = default;
};

struct PretrainResult {
  Classifier model;  // best-validation checkpoint
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<EpochRecord> history;
};

/// One pass of minibatch SGD over `train` in a seeded order; returns mean loss.
inline double train_epoch(Classifier& model, const Dataset& train, const TrainHyper& hyper, std::mt19937_64& rng) {
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
    std::vector<const Sample*> items;
    std::vector<int> labels;
    for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch_size); ++i) {
      items.push_back(&train.samples[order[i]]);
      labels.push_back(train.samples[order[i]].label);
    }
    zero_grads(model.params());
    auto loss = classification_loss(model.forward(stack_images(items)).logits, labels);
    backward(loss);
    sgd_step(model.params(), hyper.lr, hyper.weight_decay);
    total += loss.item();
    ++batches;
  }
  zero_grads(model.params());
  return batches ? total / static_cast<double>(batches) : 0.0;
}

/// SGD pretraining with early stopping on validation accuracy. Training stops
/// once `patience` consecutive epochs fail to improve on the best epoch; the
/// best epoch's parameters are returned.
inline PretrainResult pretrain(const Classifier& initial, const Dataset& train, const Dataset& val,
                               const TrainHyper& hyper) {
  if (train.empty() || val.empty()) throw ContractError("pretrain needs nonempty train and validation sets");
  const auto K = static_cast<int>(initial.config().num_classes);
  for (const Dataset* d : {&train, &val})
    for (const auto& s : d->samples)
      if (s.label < 0 || s.label >= K) throw ContractError("sample " + s.id + " label outside the model's classes");

  PretrainResult result;
  Classifier model = initial.clone();
  std::mt19937_64 rng(hyper.seed);
  std::optional<Classifier> best;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    double loss = 0.0, acc = 0.0;
    try {
      loss = train_epoch(model, train, hyper, rng);
      acc = accuracy(model, val);
    } catch (const NumericError& e) {
      throw TrainingError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw TrainingError("training diverged in epoch " + std::to_string(epoch));
    result.history.push_back({epoch, loss, acc});
    if (!best || acc > result.best_val_accuracy) {
      best = model.clone();
      result.best_epoch = epoch;
      result.best_val_accuracy = acc;
      stale = 0;
    } else if (++stale > hyper.patience) {
      break;
    }
  }
  result.model = best ? std::move(*best) : model;
  return result;
}

}  // namespace hitl
