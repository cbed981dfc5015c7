#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nmfnet/cloudnet.hpp"
#include "nmfnet/io.hpp"
#include "nmfnet/resnet8.hpp"

namespace nmfnet {

struct Modalities {
  bool rgb = true, laser = true, cloud = true;

  static Modalities all() { return {}; }
  bool empty() const { return !rgb && !laser && !cloud; }
  bool full() const { return rgb && laser && cloud; }
  bool operator==(const Modalities&) const = default;

  /// Comma-separated subset of rgb, laser, cloud, e.g. "rgb,cloud".
  static Modalities parse(const std::string& text) {
    Modalities m{false, false, false};
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok == "rgb") {
        m.rgb = true;
      } else if (tok == "laser") {
        m.laser = true;
      } else if (tok == "cloud") {
        m.cloud = true;
      } else {
        throw ConfigError("unknown modality '" + tok + "' (expected rgb, laser or cloud)");
      }
    }
    if (m.empty()) throw ConfigError("modality set is empty");
    return m;
  }

  std::string str() const {
    std::string s;
    for (auto [on, name] : {std::pair{rgb, "rgb"}, {laser, "laser"}, {cloud, "cloud"}}) {
      if (!on) continue;
      if (!s.empty()) s += ',';
      s += name;
    }
    return s;
  }
};

struct ModelConfig {
  Modalities modalities;
  ResNet8Config rgb{};
  ResNet8Config laser{1, 32, 5, 2, true, {32, 64, 128}};
  CloudBranchConfig cloud{};
  std::vector<std::size_t> fusion{512, 256};

  /// 2D-3D fusion convolutions exist only when both the image and the cloud
  /// branch are present; otherwise features are concatenated straight into the head.
  bool has_fusion() const { return modalities.rgb && modalities.cloud && !fusion.empty(); }

  std::size_t head_inputs() const {
    std::size_t n = 0;
    if (has_fusion()) {
      n += fusion.back();
    } else {
      if (modalities.rgb) n += rgb.feature_dim();
      if (modalities.cloud) n += cloud.feature_dim();
    }
    if (modalities.laser) n += laser.feature_dim();
    return n;
  }

  /// Small configuration for 8x8 images and 8-point clouds used in gradient checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.rgb = {3, 4, 3, 1, false, {4, 5, 6}};
    c.laser = {1, 3, 3, 1, false, {3, 4, 5}};
    c.cloud.tnet_mlp = {6, 8};
    c.cloud.tnet_fc = {5};
    c.cloud.lift_mlp = {4, 4};
    c.cloud.global_mlp = {6, 7};
    c.fusion = {6, 5};
    return c;
  }

  void validate() const {
    if (modalities.empty()) throw ConfigError("model needs at least one modality");
    if (modalities.rgb) rgb.validate();
    if (modalities.laser) laser.validate();
    if (modalities.cloud) cloud.validate();
    for (auto w : fusion) {
      if (w == 0) throw ConfigError("zero-width fusion layer");
    }
  }
};

/// One batch of synchronized network inputs. Unused modalities may stay undefined.
template <class T>
struct ModelInputs {
  Tensor<T> rgb;    // B x 3 x H x W
  Tensor<T> laser;  // B x 1 x H x W distance maps
  Tensor<T> cloud;  // B x N x 3

  std::size_t batch() const {
    for (const auto* t : {&rgb, &laser, &cloud}) {
      if (t->defined()) return t->dim(0);
    }
    return 0;
  }
};

/// Feature maps captured during a forward pass.
template <class T>
struct ForwardTrace {
  Tensor<T> rgb_map, laser_map;
};

template <class T>
struct NMFNet {
  ModelConfig config;
  std::optional<ResNet8Params<T>> rgb_branch, laser_branch;
  std::optional<CloudBranchParams<T>> cloud_branch;
  std::vector<Conv<T>> fusion;
  Linear<T> head;

  /// He-uniform weights, zero biases, unit batchnorm scales, identity T-nets.
  static NMFNet make(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    NMFNet m;
    m.config = cfg;
    if (cfg.modalities.rgb) m.rgb_branch = ResNet8Params<T>::make(cfg.rgb, rng);
    if (cfg.modalities.laser) m.laser_branch = ResNet8Params<T>::make(cfg.laser, rng);
    if (cfg.modalities.cloud) m.cloud_branch = CloudBranchParams<T>::make(cfg.cloud, rng);
    if (cfg.has_fusion()) {
      std::size_t in = cfg.rgb.feature_dim() + cfg.cloud.feature_dim();
      for (auto w : cfg.fusion) {
        m.fusion.push_back(Conv<T>::make(in, w, 1, 1, rng));
        in = w;
      }
    }
    m.head = Linear<T>::make(cfg.head_inputs(), 1, true, rng);
    return m;
  }

  TensorList<T> tensors() const {
    TensorList<T> list;
    if (rgb_branch) rgb_branch->collect("rgb", list);
    if (laser_branch) laser_branch->collect("laser", list);
    if (cloud_branch) cloud_branch->collect("cloud", list);
    for (std::size_t i = 0; i < fusion.size(); ++i) fusion[i].collect("fusion" + std::to_string(i), list);
    head.collect("head", list);
    return list;
  }

  std::size_t parameter_count() const { return count_parameters(tensors()); }
};

/// concat(rgb, cloud) viewed as B x C x 1 x 1, then ReLU'd 1x1 convolutions.
template <class T>
Tensor<T> fuse_2d3d(Graph<T>& g, const Tensor<T>& rgb_feat, const Tensor<T>& cloud_feat,
                    const std::vector<Conv<T>>& convs) {
  if (rgb_feat.dim(0) != cloud_feat.dim(0)) {
    throw DimensionError("fuse_2d3d: batch sizes differ, " + shape_str(rgb_feat.shape()) + " vs " +
                         shape_str(cloud_feat.shape()));
  }
  const std::size_t B = rgb_feat.dim(0);
  auto h = concat(g, {rgb_feat, cloud_feat}, 1);
  h = reshape(g, h, {B, h.dim(1), 1, 1});
  for (const auto& c : convs) h = relu(g, c(g, h));
  return reshape(g, h, {B, h.dim(1)});
}

/// Runs the branches the model was built with; each needs its input present.
template <class T>
Tensor<T> model_forward(Graph<T>& g, const ModelInputs<T>& in, const NMFNet<T>& m, Mode mode,
                        ForwardTrace<T>* trace = nullptr) {
  const auto& mods = m.config.modalities;
  const auto need = [](const Tensor<T>& t, const char* name) {
    if (!t.defined()) throw MissingModalityError(std::string("missing ") + name + " input");
  };
  std::vector<Tensor<T>> feats;
  Tensor<T> rgb_feat, cloud_feat;
  if (mods.rgb) {
    need(in.rgb, "rgb");
    rgb_feat = resnet8_forward(g, in.rgb, *m.rgb_branch, mode, trace ? &trace->rgb_map : nullptr);
  }
  if (mods.cloud) {
    need(in.cloud, "cloud");
    cloud_feat = cloud_forward(g, in.cloud, *m.cloud_branch, mode);
  }
  if (m.config.has_fusion()) {
    feats.push_back(fuse_2d3d(g, rgb_feat, cloud_feat, m.fusion));
  } else {
    if (rgb_feat.defined()) feats.push_back(rgb_feat);
    if (cloud_feat.defined()) feats.push_back(cloud_feat);
  }
  if (mods.laser) {
    need(in.laser, "laser");
    feats.push_back(
        resnet8_forward(g, in.laser, *m.laser_branch, mode, trace ? &trace->laser_map : nullptr));
  }
  const std::size_t B = feats.front().dim(0);
  for (const auto& f : feats) {
    if (f.dim(0) != B) throw DimensionError("modalities disagree on batch size");
  }
  auto joined = feats.size() == 1 ? feats.front() : concat(g, feats, 1);
  return m.head(g, joined);
}

/// Full three-branch network; every modality must be present.
template <class T>
Tensor<T> nmfnet_forward(Graph<T>& g, const ModelInputs<T>& in, const NMFNet<T>& m, Mode mode,
                         ForwardTrace<T>* trace = nullptr) {
  if (!m.config.modalities.full()) {
    throw MissingModalityError("nmfnet_forward needs a model with all three branches, this one has " +
                               m.config.modalities.str());
  }
  return model_forward(g, in, m, mode, trace);
}

/// Forward for a model built over a modality subset.
template <class T>
Tensor<T> ablated_forward(Graph<T>& g, const ModelInputs<T>& in, const NMFNet<T>& m,
                          const Modalities& mods, Mode mode) {
  if (mods.empty()) throw ConfigError("ablated_forward: empty modality set");
  if (!(mods == m.config.modalities)) {
    throw ConfigError("ablated_forward: model was built for " + m.config.modalities.str() +
                      ", asked for " + mods.str());
  }
  return model_forward(g, in, m, mode);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {

inline void push_resnet(std::vector<float>& v, const ResNet8Config& c) {
  for (auto x : {c.in_channels, c.stem_channels, c.stem_kernel, c.stem_stride,
                 std::size_t{c.stem_pool}, c.block_channels.size()})
    v.push_back(static_cast<float>(x));
  for (auto x : c.block_channels) v.push_back(static_cast<float>(x));
}

inline void push_list(std::vector<float>& v, const std::vector<std::size_t>& xs) {
  v.push_back(static_cast<float>(xs.size()));
  for (auto x : xs) v.push_back(static_cast<float>(x));
}

inline std::vector<float> encode_arch(const ModelConfig& c) {
  std::vector<float> v{1.0f, float(c.modalities.rgb), float(c.modalities.laser),
                       float(c.modalities.cloud)};
  push_resnet(v, c.rgb);
  push_resnet(v, c.laser);
  for (const auto* l : {&c.cloud.tnet_mlp, &c.cloud.tnet_fc, &c.cloud.lift_mlp, &c.cloud.global_mlp})
    push_list(v, *l);
  push_list(v, c.fusion);
  return v;
}

inline ModelConfig decode_arch(const std::vector<float>& v) {
  std::size_t pos = 0;
  const auto next = [&]() -> std::size_t {
    if (pos >= v.size()) throw IoError("checkpoint: truncated architecture record");
    return static_cast<std::size_t>(v[pos++]);
  };
  const auto list = [&]() {
    std::vector<std::size_t> xs(next());
    for (auto& x : xs) x = next();
    return xs;
  };
  const auto resnet = [&]() {
    ResNet8Config r;
    r.in_channels = next();
    r.stem_channels = next();
    r.stem_kernel = next();
    r.stem_stride = next();
    r.stem_pool = next() != 0;
    r.block_channels.resize(next());
    for (auto& x : r.block_channels) x = next();
    return r;
  };
  if (next() != 1) throw IoError("checkpoint: unsupported architecture version");
  ModelConfig c;
  c.modalities.rgb = next() != 0;
  c.modalities.laser = next() != 0;
  c.modalities.cloud = next() != 0;
  c.rgb = resnet();
  c.laser = resnet();
  c.cloud.tnet_mlp = list();
  c.cloud.tnet_fc = list();
  c.cloud.lift_mlp = list();
  c.cloud.global_mlp = list();
  c.fusion = list();
  return c;
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "NMFNET1\n";

/// Magic line, "name shape dtype" header lines, a blank line, then the
/// float32 payloads in header order. Includes batchnorm running statistics
/// and an architecture record so the file is self-describing.
template <class T>
std::string encode_checkpoint(const NMFNet<T>& m) {
  auto list = m.tensors();
  const auto arch = detail::encode_arch(m.config);
  std::string out = kCheckpointMagic;
  out += "meta.arch " + std::to_string(arch.size()) + " f32\n";
  for (const auto& nt : list) out += nt.name + " " + detail::shape_token(nt.tensor.shape()) + " f32\n";
  out += "\n";
  for (float x : arch) detail::append_le_f32(out, x);
  for (const auto& nt : list) {
    for (auto x : nt.tensor.data()) detail::append_le_f32(out, static_cast<float>(x));
  }
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const NMFNet<T>& m) {
  write_file_atomic(path, encode_checkpoint(m));
}

template <class T>
NMFNet<T> decode_checkpoint(const std::string& bytes, const std::string& name = "checkpoint") {
  const std::string magic = kCheckpointMagic;
  if (bytes.compare(0, magic.size(), magic) != 0) throw IoError(name + ": bad magic");
  std::size_t pos = magic.size();
  struct Entry {
    std::string name;
    std::size_t numel;
    std::string shape;
  };
  std::vector<Entry> entries;
  while (true) {
    const auto eol = bytes.find('\n', pos);
    if (eol == std::string::npos) throw IoError(name + ": unterminated header");
    const std::string line = bytes.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) break;
    std::istringstream ls(line);
    Entry e;
    std::string dtype;
    if (!(ls >> e.name >> e.shape >> dtype) || dtype != "f32") {
      throw IoError(name + ": bad header line '" + line + "'");
    }
    e.numel = 1;
    std::stringstream dims(e.shape);
    std::string d;
    while (std::getline(dims, d, 'x')) e.numel *= std::stoul(d);
    entries.push_back(e);
  }
  std::size_t total = 0;
  for (const auto& e : entries) total += e.numel;
  if (bytes.size() - pos != total * 4) {
    throw IoError(name + ": payload holds " + std::to_string(bytes.size() - pos) + " bytes, header needs " +
                  std::to_string(total * 4));
  }
  if (entries.empty() || entries.front().name != "meta.arch") {
    throw IoError(name + ": missing architecture record");
  }
  const auto read_floats = [&](std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) {
      x = detail::read_le_f32(bytes.data() + pos);
      pos += 4;
    }
    return v;
  };
  auto model = NMFNet<T>::make(detail::decode_arch(read_floats(entries.front().numel)), 0);
  std::map<std::string, Tensor<T>> by_name;
  for (const auto& nt : model.tensors()) by_name[nt.name] = nt.tensor;
  if (by_name.size() != entries.size() - 1) {
    throw IoError(name + ": tensor count does not match its architecture");
  }
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const auto& e = entries[i];
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw IoError(name + ": unexpected tensor " + e.name);
    if (detail::shape_token(it->second.shape()) != e.shape) {
      throw IoError(name + ": tensor " + e.name + " has shape " + e.shape + ", model expects " +
                    detail::shape_token(it->second.shape()));
    }
    auto dst = it->second.mutable_data();
    const auto v = read_floats(e.numel);
    for (std::size_t k = 0; k < v.size(); ++k) dst[k] = static_cast<T>(v[k]);
  }
  return model;
}

template <class T>
NMFNet<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file(path), path.string());
}

}  // namespace nmfnet
