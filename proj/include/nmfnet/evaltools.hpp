#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nmfnet/dataset.hpp"
#include "nmfnet/model.hpp"
#include "nmfnet/trainer.hpp"

namespace nmfnet {

struct EnvScore {
  bool present = false;
  double rmse = 0;
  std::size_t count = 0;
};

struct EvalReport {
  std::string model_id;
  Modalities modalities;
  std::array<EnvScore, 3> env{};  // indexed by Archetype
  double average = 0;             // mean of the present per-env RMSEs
  std::size_t count = 0;
  std::vector<std::string> warnings;

  const EnvScore& at(Archetype a) const { return env[static_cast<std::size_t>(a)]; }
};

/// RMSE per environment from predictions and labels, accumulated in double.
inline EvalReport score_predictions(const std::vector<double>& pred, const std::vector<double>& target,
                                    const std::vector<Archetype>& envs) {
  if (pred.size() != target.size() || pred.size() != envs.size()) {
    throw DimensionError("score_predictions: " + std::to_string(pred.size()) + " predictions, " +
                         std::to_string(target.size()) + " labels, " + std::to_string(envs.size()) + " env tags");
  }
  EvalReport r;
  std::array<double, 3> sq{};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto k = static_cast<std::size_t>(envs[i]);
    const double d = target[i] - pred[i];
    sq[k] += d * d;
    r.env[k].count++;
  }
  std::size_t present = 0;
  double sum = 0;
  for (auto a : kArchetypes) {
    auto& e = r.env[static_cast<std::size_t>(a)];
    if (e.count == 0) {
      r.warnings.push_back(archetype_name(a) + ": no test records, left out of the average");
      continue;
    }
    e.present = true;
    e.rmse = std::sqrt(sq[static_cast<std::size_t>(a)] / static_cast<double>(e.count));
    sum += e.rmse;
    ++present;
  }
  if (present == 0) throw EmptySetError("evaluation set is empty");
  r.average = sum / static_cast<double>(present);
  r.count = pred.size();
  return r;
}

/// Eval-mode predictions, in record order.
inline std::vector<double> predict(const NMFNet<float>& model, const Manifest& m, const std::vector<FrameRecord>& records,
                                   LoaderConfig lc, std::size_t batch_size = 16) {
  lc.modalities = model.config.modalities;
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& idx : batch_indices(records.size(), batch_size, 0, false)) {
    auto b = load_batch(m, records, idx, lc);
    Graph<float> g(false);
    auto y = model_forward(g, b.inputs, model, Mode::eval);
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(y[i]);
  }
  return out;
}

/// RMSE of a model on `records`, per environment and averaged.
inline EvalReport rmse(const NMFNet<float>& model, const Manifest& m, const std::vector<FrameRecord>& records,
                       const LoaderConfig& lc, const std::string& model_id = "") {
  auto pred = predict(model, m, records, lc);
  std::vector<double> target;
  std::vector<Archetype> envs;
  for (const auto& r : records) {
    target.push_back(r.steering);
    envs.push_back(r.env);
  }
  auto rep = score_predictions(pred, target, envs);
  rep.model_id = model_id;
  rep.modalities = model.config.modalities;
  return rep;
}

inline std::string eval_tsv_header() { return "model\tmodalities\trecords\thouse\tcity\tcave\taverage\n"; }

inline std::string eval_tsv_row(const EvalReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << r.model_id << '\t' << r.modalities.str() << '\t' << r.count;
  for (const auto& e : r.env) {
    os << '\t';
    if (e.present) {
      os << e.rmse;
    } else {
      os << "absent";
    }
  }
  os << '\t' << r.average << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Modality ablation

struct AblationVariant {
  std::string name;
  Modalities modalities;
};

/// Singles, pairs, then the full network.
inline std::vector<AblationVariant> ablation_variants() {
  return {{"RGB", {true, false, false}},
          {"Distance Map", {false, true, false}},
          {"Point Cloud", {false, false, true}},
          {"RGB + Point Cloud", {true, false, true}},
          {"RGB + Distance Map", {true, true, false}},
          {"Distance Map + Point Cloud", {false, true, true}},
          {"Fusion", {true, true, true}}};
}

struct AblationRow {
  AblationVariant variant;
  std::size_t parameters = 0;
  bool converged = true;
  std::string note;
  EvalReport report;
  std::optional<NMFNet<float>> model;  // kept so callers can reuse the trained weights
  std::vector<LossPoint> history;
};

struct AblationConfig {
  TrainConfig train;  // modalities are overridden per row
  double train_fraction = 0.7;
  std::uint64_t split_seed = 0;
  bool keep_models = false;
  std::vector<std::string> only;  // restrict to these row names when non-empty
  std::function<void(const std::string&)> log;
};

/// Trains and evaluates every modality subset with identical seeds and epochs.
/// A variant whose loss goes non-finite is reported as "no-converge".
inline std::vector<AblationRow> ablation_suite(const Manifest& m, const AblationConfig& cfg) {
  auto s = split(m, cfg.train_fraction, cfg.split_seed);
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants()) {
    if (!cfg.only.empty() && std::find(cfg.only.begin(), cfg.only.end(), v.name) == cfg.only.end()) continue;
    AblationRow row;
    row.variant = v;
    TrainConfig tc = cfg.train;
    tc.modalities = v.modalities;
    tc.model.reset();
    if (cfg.train.model) {
      tc.model = *cfg.train.model;
      tc.model->modalities = v.modalities;
    }
    row.parameters = NMFNet<float>::make(tc.model_config(), 0).parameter_count();
    if (cfg.log) cfg.log("ablation: training " + v.name + " (" + std::to_string(row.parameters) + " parameters)");
    try {
      auto res = train(m, s.train, tc, [&](const EpochSummary& e) {
        if (cfg.log) cfg.log("  " + v.name + " epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.mean_loss));
      });
      LoaderConfig lc;
      lc.cloud_points = tc.cloud_points;
      lc.cloud_seed = mix_seed({tc.seed, 0xc10d});
      row.report = rmse(res.state.model, m, s.test, lc, v.name);
      row.history = res.state.history;
      if (cfg.keep_models) row.model = std::move(res.state.model);
    } catch (const DivergenceError& e) {
      row.converged = false;
      row.note = e.what();
      row.report.modalities = v.modalities;
      row.report.model_id = v.name;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string encode_ablation_tsv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant\tmodalities\tparameters\thouse\tcity\tcave\taverage\tstatus\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& r : rows) {
    os << r.variant.name << '\t' << r.variant.modalities.str() << '\t' << r.parameters;
    if (!r.converged) {
      os << "\t-\t-\t-\t-\tno-converge\n";
      continue;
    }
    for (const auto& e : r.report.env) {
      os << '\t';
      if (e.present) {
        os << e.rmse;
      } else {
        os << "absent";
      }
    }
    os << '\t' << r.report.average << "\tok\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Grad-CAM

enum class CamBranch { rgb, laser };

inline CamBranch parse_cam_branch(const std::string& s) {
  if (s == "rgb") return CamBranch::rgb;
  if (s == "laser") return CamBranch::laser;
  throw ConfigError("unknown Grad-CAM branch '" + s + "' (expected rgb or laser)");
}

struct CamMap {
  std::size_t height = 0, width = 0;
  std::vector<float> values;  // row-major, in [0, 1]
};

namespace detail {

/// Half-pixel-centered bilinear resize of a single-channel map.
inline std::vector<float> bilinear_resize(const std::vector<double>& src, std::size_t sh, std::size_t sw,
                                          std::size_t dh, std::size_t dw) {
  std::vector<float> out(dh * dw);
  const double ry = static_cast<double>(sh) / static_cast<double>(dh);
  const double rx = static_cast<double>(sw) / static_cast<double>(dw);
  for (std::size_t y = 0; y < dh; ++y) {
    double fy = std::clamp((static_cast<double>(y) + 0.5) * ry - 0.5, 0.0, static_cast<double>(sh - 1));
    auto y0 = static_cast<std::size_t>(fy);
    auto y1 = std::min(y0 + 1, sh - 1);
    double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dw; ++x) {
      double fx = std::clamp((static_cast<double>(x) + 0.5) * rx - 0.5, 0.0, static_cast<double>(sw - 1));
      auto x0 = static_cast<std::size_t>(fx);
      auto x1 = std::min(x0 + 1, sw - 1);
      double ax = fx - static_cast<double>(x0);
      double top = (1 - ax) * src[y0 * sw + x0] + ax * src[y0 * sw + x1];
      double bot = (1 - ax) * src[y1 * sw + x0] + ax * src[y1 * sw + x1];
      out[y * dw + x] = static_cast<float>((1 - ay) * top + ay * bot);
    }
  }
  return out;
}

}  // namespace detail

/// Activation map of one frame (batch of 1) for the steering output. Channel
/// weights are the spatial mean of d(steering)/dA over the branch's last
/// rectified feature map; the weighted sum is rectified, min-max normalized
/// and bilinearly upsampled to the branch input size. A flat map is all zero.
inline CamMap grad_cam(const NMFNet<float>& model, const ModelInputs<float>& in, CamBranch branch) {
  const auto& mods = model.config.modalities;
  if ((branch == CamBranch::rgb && !mods.rgb) || (branch == CamBranch::laser && !mods.laser)) {
    throw ConfigError(std::string("grad_cam: model has no ") + (branch == CamBranch::rgb ? "rgb" : "laser") +
                      " branch");
  }
  if (in.batch() != 1) throw DimensionError("grad_cam: expects a single frame");
  Graph<float> g;
  ForwardTrace<float> trace;
  auto y = model_forward(g, in, model, Mode::eval, &trace);
  const auto& A = branch == CamBranch::rgb ? trace.rgb_map : trace.laser_map;
  const auto& input = branch == CamBranch::rgb ? in.rgb : in.laser;
  g.backward(y);
  const std::size_t C = A.dim(1), h = A.dim(2), w = A.dim(3), hw = h * w;
  std::vector<double> cam(hw, 0.0);
  if (A.has_grad()) {
    auto a = A.data();
    auto gr = A.grad();
    for (std::size_t c = 0; c < C; ++c) {
      double wc = 0;
      for (std::size_t p = 0; p < hw; ++p) wc += gr[c * hw + p];
      wc /= static_cast<double>(hw);
      for (std::size_t p = 0; p < hw; ++p) cam[p] += wc * a[c * hw + p];
    }
  }
  for (auto& v : cam) v = std::max(0.0, v);
  const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
  const double span = *hi - *lo;
  for (auto& v : cam) v = span > 0 ? (v - *lo) / span : 0.0;
  CamMap out;
  out.height = input.dim(2);
  out.width = input.dim(3);
  out.values = detail::bilinear_resize(cam, h, w, out.height, out.width);
  for (auto& v : out.values) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

inline GrayImage cam_to_image(const CamMap& cam) {
  GrayImage img(cam.height, cam.width);
  for (std::size_t i = 0; i < cam.values.size(); ++i) {
    img.data[i] = static_cast<std::uint8_t>(std::lround(255.0 * cam.values[i]));
  }
  return img;
}

/// Jet-colored heat blended over a base image of the same size.
inline RgbImage cam_overlay(const CamMap& cam, const RgbImage& base, double alpha = 0.5) {
  if (base.height != cam.height || base.width != cam.width) {
    throw DimensionError("cam_overlay: base image size differs from the map");
  }
  RgbImage out(cam.height, cam.width);
  for (std::size_t i = 0; i < cam.values.size(); ++i) {
    const double v = cam.values[i];
    const double r = std::clamp(1.5 - std::abs(4 * v - 3), 0.0, 1.0);
    const double g = std::clamp(1.5 - std::abs(4 * v - 2), 0.0, 1.0);
    const double b = std::clamp(1.5 - std::abs(4 * v - 1), 0.0, 1.0);
    const double heat[3] = {r, g, b};
    for (std::size_t c = 0; c < 3; ++c) {
      double mixed = (1 - alpha) * base.data[i * 3 + c] + alpha * 255.0 * heat[c];
      out.data[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(mixed, 0.0, 255.0)));
    }
  }
  return out;
}

/// The image a map is drawn over: the camera frame, or the distance map in gray.
inline RgbImage cam_base_image(const ModelInputs<float>& in, CamBranch branch) {
  const auto& t = branch == CamBranch::rgb ? in.rgb : in.laser;
  const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3), hw = H * W;
  RgbImage img(H, W);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      float v = t[(C == 3 ? c : 0) * hw + p];
      img.data[p * 3 + c] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0f, 1.0f)));
    }
  }
  return img;
}

}  // namespace nmfnet
