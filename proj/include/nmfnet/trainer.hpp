#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nmfnet/dataset.hpp"
#include "nmfnet/model.hpp"

namespace nmfnet {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  Modalities modalities;
  bool dr_training = true;  // false drops every dr-flagged record
  // Global gradient-norm clip; 0 disables. At lr 0.01 with momentum 0.9 the
  // unclipped head gradients (norm ~10 at init) blow the loss up within a few steps.
  double clip_norm = 1.0;
  std::size_t cloud_points = 512;
  std::optional<ModelConfig> model;  // default: desk-scale network over `modalities`
  std::filesystem::path checkpoint;  // rewritten after every epoch when set
  std::filesystem::path loss_log;    // TSV of (epoch, step, loss) when set

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (modalities.empty()) throw ConfigError("no modalities selected");
    if (clip_norm < 0.0) throw ConfigError("clip norm must be non-negative");
    if (model && !(model->modalities == modalities)) {
      throw ConfigError("model config modalities differ from the training modalities");
    }
  }

  ModelConfig model_config() const {
    if (model) return *model;
    ModelConfig c;
    c.modalities = modalities;
    return c;
  }
};

struct LossPoint {
  std::size_t epoch = 0, step = 0;
  double loss = 0;
  bool operator==(const LossPoint&) const = default;
};

template <class T>
struct TrainState {
  NMFNet<T> model;
  TensorList<T> params;                // trainable tensors, aliasing the model
  std::vector<std::vector<T>> velocity;  // one buffer per entry of params
  std::size_t epoch = 0, step = 0;
  std::vector<LossPoint> history;

  static TrainState init(NMFNet<T> model) {
    TrainState s;
    s.model = std::move(model);
    for (auto& nt : s.model.tensors()) {
      if (nt.trainable) s.params.push_back(nt);
    }
    for (const auto& nt : s.params) s.velocity.emplace_back(nt.tensor.numel(), T(0));
    return s;
  }

  void zero_grad() {
    for (auto& nt : params) nt.tensor.zero_grad();
  }
};

/// Classic momentum: v = momentum * v + g; p = p - lr * v. Every trainable
/// tensor must hold a gradient. Gradients are cleared afterwards.
template <class T>
void sgd_step(TrainState<T>& st, const TrainConfig& cfg) {
  for (const auto& nt : st.params) {
    if (!nt.tensor.has_grad()) {
      throw IncompleteBackwardError("sgd_step: no gradient reached " + nt.name);
    }
  }
  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& nt : st.params) {
      for (auto g : nt.tensor.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }
  const T lr = static_cast<T>(cfg.lr), mu = static_cast<T>(cfg.momentum), s = static_cast<T>(scale);
  for (std::size_t k = 0; k < st.params.size(); ++k) {
    auto p = st.params[k].tensor.mutable_data();
    auto g = st.params[k].tensor.grad();
    auto& v = st.velocity[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + s * g[i];
      p[i] -= lr * v[i];
    }
  }
  st.zero_grad();
  ++st.step;
}

/// One forward/backward on a batch; returns the loss. Throws DivergenceError
/// on a non-finite loss.
template <class T>
double train_batch(TrainState<T>& st, const ModelInputs<T>& in, const Tensor<T>& target, const TrainConfig& cfg) {
  Graph<T> g;
  auto pred = model_forward(g, in, st.model, Mode::train);
  auto loss = mse_loss(g, pred, target);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(st.step), st.step);
  }
  g.backward(loss);
  sgd_step(st, cfg);
  return value;
}

inline std::string encode_loss_tsv(const std::vector<LossPoint>& h) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch\tstep\tloss\n";
  for (const auto& p : h) os << p.epoch << '\t' << p.step << '\t' << p.loss << '\n';
  return os.str();
}

/// Batches of one epoch. A trailing single-record batch is folded into the
/// previous one, since batchnorm over the fully connected T-net layers needs
/// at least two rows.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                          std::size_t epoch) {
  auto b = batch_indices(n, batch_size, mix_seed({seed, epoch, 0xe90c}));
  if (b.size() >= 2 && b.back().size() == 1) {
    b[b.size() - 2].push_back(b.back().front());
    b.pop_back();
  }
  return b;
}

struct TrainResult {
  TrainState<float> state;
  std::vector<std::uint64_t> record_ids;  // records actually trained on
  std::size_t excluded_dr = 0;
};

struct EpochSummary {
  std::size_t epoch, steps;
  double mean_loss;
};

/// End-to-end training over `records`.
inline TrainResult train(const Manifest& m, const std::vector<FrameRecord>& records, const TrainConfig& cfg,
                         const std::function<void(const EpochSummary&)>& on_epoch = {}) {
  cfg.validate();
  std::vector<FrameRecord> used;
  TrainResult res;
  for (const auto& r : records) {
    if (!cfg.dr_training && r.dr_flag) {
      ++res.excluded_dr;
      continue;
    }
    used.push_back(r);
    res.record_ids.push_back(r.frame_id);
  }
  if (used.empty()) throw EmptySetError("train: no records left to train on");
  res.state = TrainState<float>::init(NMFNet<float>::make(cfg.model_config(), mix_seed({cfg.seed, 0x30de1})));
  LoaderConfig lc;
  lc.modalities = cfg.modalities;
  lc.cloud_points = cfg.cloud_points;
  lc.cloud_seed = mix_seed({cfg.seed, 0xc10d});
  auto& st = res.state;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double sum = 0;
    auto batches = epoch_batches(used.size(), cfg.batch_size, cfg.seed, e);
    for (const auto& idx : batches) {
      auto b = load_batch(m, used, idx, lc);
      double loss = train_batch(st, b.inputs, b.target, cfg);
      st.history.push_back({e, st.step, loss});
      sum += loss;
    }
    st.epoch = e + 1;
    if (!cfg.checkpoint.empty()) save_checkpoint(cfg.checkpoint, st.model);
    if (!cfg.loss_log.empty()) write_file_atomic(cfg.loss_log, encode_loss_tsv(st.history));
    if (on_epoch) on_epoch({e, batches.size(), sum / static_cast<double>(batches.size())});
  }
  return res;
}

}  // namespace nmfnet
