#pragma once

#include <string>
#include <vector>

#include "nmfnet/layers.hpp"

namespace nmfnet {

struct ResNet8Config {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 32;
  std::size_t stem_kernel = 5;
  std::size_t stem_stride = 2;
  bool stem_pool = true;  // 3x3 max-pool, stride 2
  std::vector<std::size_t> block_channels{32, 64, 128};

  std::size_t feature_dim() const { return block_channels.back(); }

  /// Smallest input side the stride chain accepts.
  std::size_t min_input() const {
    std::size_t s = stem_stride * (stem_pool ? 2 : 1);
    for (std::size_t i = 0; i < block_channels.size(); ++i) s *= 2;
    return s;
  }

  void validate() const {
    if (block_channels.size() != 3) throw ConfigError("resnet8 needs exactly 3 residual blocks");
    if (in_channels == 0 || stem_channels == 0 || stem_kernel == 0 || stem_stride == 0) {
      throw ConfigError("resnet8: zero-sized stem");
    }
    for (auto c : block_channels) {
      if (c == 0) throw ConfigError("resnet8: zero-width block");
    }
  }
};

/// Pre-activation residual block: BN-ReLU-conv(stride 2)-BN-ReLU-conv, plus
/// a strided 1x1 projection on the skip path.
template <class T>
struct ResBlock {
  BatchNorm<T> bn1, bn2;
  Conv<T> conv1, conv2, skip;

  static ResBlock make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    ResBlock b;
    b.bn1 = BatchNorm<T>::make(in);
    b.conv1 = Conv<T>::make(in, out, 3, 2, rng);
    b.bn2 = BatchNorm<T>::make(out);
    b.conv2 = Conv<T>::make(out, out, 3, 1, rng);
    b.skip = Conv<T>::make(in, out, 1, 2, rng);
    return b;
  }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x, Mode mode) const {
    auto h = conv1(g, bn1.with_relu(g, x, mode));
    h = conv2(g, bn2.with_relu(g, h, mode));
    return add(g, h, skip(g, x));
  }

  void collect(const std::string& prefix, TensorList<T>& list) const {
    bn1.collect(prefix + ".bn1", list);
    conv1.collect(prefix + ".conv1", list);
    bn2.collect(prefix + ".bn2", list);
    conv2.collect(prefix + ".conv2", list);
    skip.collect(prefix + ".skip", list);
  }
};

template <class T>
struct ResNet8Params {
  ResNet8Config config;
  Conv<T> stem;
  std::vector<ResBlock<T>> blocks;

  static ResNet8Params make(const ResNet8Config& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ResNet8Params p;
    p.config = cfg;
    p.stem = Conv<T>::make(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, rng);
    std::size_t in = cfg.stem_channels;
    for (auto c : cfg.block_channels) {
      p.blocks.push_back(ResBlock<T>::make(in, c, rng));
      in = c;
    }
    return p;
  }

  void collect(const std::string& prefix, TensorList<T>& list) const {
    stem.collect(prefix + ".stem", list);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), list);
  }
};

/// B x C x H x W -> B x F. When `last_map` is given it receives the final
/// rectified feature map (before pooling), which Grad-CAM differentiates against.
template <class T>
Tensor<T> resnet8_forward(Graph<T>& g, const Tensor<T>& img, const ResNet8Params<T>& p, Mode mode,
                          Tensor<T>* last_map = nullptr) {
  detail::require_rank(img.shape(), 4, "resnet8", "image");
  const auto& cfg = p.config;
  if (img.dim(1) != cfg.in_channels) {
    throw DimensionError("resnet8: expected " + std::to_string(cfg.in_channels) +
                         " input channels, got " + shape_str(img.shape()));
  }
  if (img.dim(2) < cfg.min_input() || img.dim(3) < cfg.min_input()) {
    throw DimensionError("resnet8: input " + shape_str(img.shape()) + " is smaller than " +
                         std::to_string(cfg.min_input()) + " pixels, too small for the stride chain");
  }
  auto h = p.stem(g, img);
  if (cfg.stem_pool) h = maxpool2d_same(g, h, 3, 2);
  for (const auto& b : p.blocks) h = b(g, h, mode);
  h = relu(g, h);
  if (last_map) *last_map = h;
  return global_avg_pool(g, h);
}

}  // namespace nmfnet
