#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "nmfnet/io.hpp"
#include "nmfnet/layers.hpp"

namespace nmfnet {

struct PointCloud {
  std::vector<std::array<float, 3>> points;
  std::vector<std::uint8_t> valid;  // empty means every point is valid

  std::size_t size() const { return points.size(); }
  bool is_valid(std::size_t i) const {
    const auto& p = points[i];
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) return false;
    return valid.empty() || valid[i] != 0;
  }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < size(); ++i) n += is_valid(i);
    return n;
  }
};

/// Drops invalid points, then draws n_sample of the rest uniformly: without
/// replacement when there are enough, with replacement otherwise.
inline PointCloud sample_cloud(const PointCloud& raw, std::size_t n_sample, std::uint64_t seed) {
  std::vector<std::size_t> idx;
  idx.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw.is_valid(i)) idx.push_back(i);
  }
  if (idx.empty()) throw EmptyCloudError("sample_cloud: cloud has no valid points");
  std::mt19937_64 rng(seed);
  PointCloud out;
  out.points.reserve(n_sample);
  if (idx.size() >= n_sample) {
    // partial Fisher-Yates; the draw order is the output order
    for (std::size_t k = 0; k < n_sample; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
      std::swap(idx[k], idx[pick(rng)]);
      out.points.push_back(raw.points[idx[k]]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    for (std::size_t k = 0; k < n_sample; ++k) out.points.push_back(raw.points[idx[pick(rng)]]);
  }
  return out;
}

/// Stacks equally sized clouds into a B x N x 3 tensor.
template <class T>
Tensor<T> clouds_to_tensor(const std::vector<const PointCloud*>& clouds) {
  if (clouds.empty()) throw DimensionError("clouds_to_tensor: empty batch");
  const std::size_t n = clouds.front()->size();
  std::vector<T> v;
  v.reserve(clouds.size() * n * 3);
  for (const auto* c : clouds) {
    if (c->size() != n) {
      throw DimensionError("clouds_to_tensor: clouds of " + std::to_string(n) + " and " +
                           std::to_string(c->size()) + " points in one batch");
    }
    for (const auto& p : c->points) {
      for (float x : p) v.push_back(static_cast<T>(x));
    }
  }
  return Tensor<T>({clouds.size(), n, 3}, std::move(v));
}

inline std::string encode_cloud(const PointCloud& cloud) {
  std::string out;
  out.reserve(8 + cloud.size() * 12);
  std::size_t n = cloud.valid.empty() ? cloud.size() : cloud.valid_count();
  detail::append_le_u64(out, n);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.valid.empty() && !cloud.is_valid(i)) continue;
    for (float x : cloud.points[i]) detail::append_le_f32(out, x);
  }
  return out;
}

inline void write_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  write_file_atomic(path, encode_cloud(cloud));
}

inline PointCloud decode_cloud(const std::string& bytes, const std::string& name = "cloud") {
  if (bytes.size() < 8) throw IoError(name + ": missing point count");
  const auto n = detail::read_le_u64(bytes.data());
  if (n > (bytes.size() - 8) / 12 || bytes.size() != 8 + n * 12) {
    throw IoError(name + ": expected " + std::to_string(n) + " points, file has " +
                  std::to_string(bytes.size()) + " bytes");
  }
  PointCloud cloud;
  cloud.points.resize(n);
  const char* p = bytes.data() + 8;
  for (auto& pt : cloud.points) {
    for (auto& x : pt) {
      x = detail::read_le_f32(p);
      p += 4;
    }
  }
  return cloud;
}

inline PointCloud read_cloud(const std::filesystem::path& path) {
  return decode_cloud(read_file(path), path.string());
}

struct CloudBranchConfig {
  std::vector<std::size_t> tnet_mlp{64, 128, 1024};
  std::vector<std::size_t> tnet_fc{512, 256};
  std::vector<std::size_t> lift_mlp{64, 64};
  std::vector<std::size_t> global_mlp{128, 1024};

  std::size_t feature_dim() const { return global_mlp.back(); }

  void validate() const {
    if (tnet_mlp.empty() || lift_mlp.empty() || global_mlp.empty()) {
      throw ConfigError("cloud branch: per-point MLPs need at least one layer");
    }
    for (const auto* v : {&tnet_mlp, &tnet_fc, &lift_mlp, &global_mlp}) {
      for (auto w : *v) {
        if (w == 0) throw ConfigError("cloud branch: zero-width layer");
      }
    }
  }
};

/// Regresses a K x K transform from a B x N x K set. The output layer starts at
/// zero weights with the identity as its bias.
template <class T>
struct TNet {
  std::size_t K = 0;
  std::vector<DenseBnRelu<T>> point_layers;
  std::vector<DenseBnRelu<T>> fc_layers;
  Linear<T> out;

  static TNet make(std::size_t k, const CloudBranchConfig& cfg, std::mt19937_64& rng) {
    TNet t;
    t.K = k;
    std::size_t in = k;
    for (auto w : cfg.tnet_mlp) {
      t.point_layers.push_back(DenseBnRelu<T>::make(in, w, rng));
      in = w;
    }
    for (auto w : cfg.tnet_fc) {
      t.fc_layers.push_back(DenseBnRelu<T>::make(in, w, rng));
      in = w;
    }
    t.out.w = Tensor<T>::zeros({in, k * k}, true);
    std::vector<T> eye(k * k, T(0));
    for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = T(1);
    t.out.b = Tensor<T>({k * k}, std::move(eye), true);
    return t;
  }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x, Mode mode) const {
    const std::size_t B = x.dim(0), N = x.dim(1);
    auto h = reshape(g, x, {B * N, K});
    for (const auto& l : point_layers) h = l(g, h, mode);
    auto pooled = reduce_max_axis(g, reshape(g, h, {B, N, h.dim(1)}));
    for (const auto& l : fc_layers) pooled = l(g, pooled, mode);
    return reshape(g, out(g, pooled), {B, K, K});
  }

  void collect(const std::string& prefix, TensorList<T>& list) const {
    for (std::size_t i = 0; i < point_layers.size(); ++i)
      point_layers[i].collect(prefix + ".mlp" + std::to_string(i), list);
    for (std::size_t i = 0; i < fc_layers.size(); ++i)
      fc_layers[i].collect(prefix + ".fc" + std::to_string(i), list);
    out.collect(prefix + ".out", list);
  }
};

template <class T>
struct CloudBranchParams {
  TNet<T> tnet3;
  std::vector<DenseBnRelu<T>> lift_mlp;
  TNet<T> tnet64;
  std::vector<DenseBnRelu<T>> global_mlp;

  static CloudBranchParams make(const CloudBranchConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    CloudBranchParams p;
    p.tnet3 = TNet<T>::make(3, cfg, rng);
    std::size_t in = 3;
    for (auto w : cfg.lift_mlp) {
      p.lift_mlp.push_back(DenseBnRelu<T>::make(in, w, rng));
      in = w;
    }
    p.tnet64 = TNet<T>::make(in, cfg, rng);
    for (auto w : cfg.global_mlp) {
      p.global_mlp.push_back(DenseBnRelu<T>::make(in, w, rng));
      in = w;
    }
    return p;
  }

  void collect(const std::string& prefix, TensorList<T>& list) const {
    tnet3.collect(prefix + ".tnet3", list);
    for (std::size_t i = 0; i < lift_mlp.size(); ++i)
      lift_mlp[i].collect(prefix + ".lift" + std::to_string(i), list);
    tnet64.collect(prefix + ".tnet64", list);
    for (std::size_t i = 0; i < global_mlp.size(); ++i)
      global_mlp[i].collect(prefix + ".global" + std::to_string(i), list);
  }
};

/// Intermediate tensors of one cloud-branch pass, for inspection in tests.
template <class T>
struct CloudTrace {
  Tensor<T> input_transform, feature_transform, feature;
};

/// B x N x 3 points -> B x feature_dim global feature (max over the point axis).
template <class T>
Tensor<T> cloud_forward(Graph<T>& g, const Tensor<T>& points, const CloudBranchParams<T>& p,
                        Mode mode, CloudTrace<T>* trace = nullptr) {
  detail::require_rank(points.shape(), 3, "cloud_forward", "points");
  if (points.dim(2) != 3) {
    throw DimensionError("cloud_forward: expected B x N x 3 points, got " + shape_str(points.shape()));
  }
  if (points.dim(1) == 0) throw EmptySetError("cloud_forward: cloud has no points");
  const std::size_t B = points.dim(0), N = points.dim(1);

  auto t3 = p.tnet3(g, points, mode);
  auto x = apply_transform(g, points, t3);
  auto h = reshape(g, x, {B * N, 3});
  for (const auto& l : p.lift_mlp) h = l(g, h, mode);
  const std::size_t K = h.dim(1);
  auto feat = reshape(g, h, {B, N, K});
  auto t64 = p.tnet64(g, feat, mode);
  feat = apply_transform(g, feat, t64);
  h = reshape(g, feat, {B * N, K});
  for (const auto& l : p.global_mlp) h = l(g, h, mode);
  auto global = reduce_max_axis(g, reshape(g, h, {B, N, h.dim(1)}));
  if (trace) *trace = {t3, t64, global};
  return global;
}

}  // namespace nmfnet
