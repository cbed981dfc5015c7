#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "nmfnet/ops.hpp"

namespace nmfnet {

/// A named tensor owned by a model. Buffers (batchnorm running statistics) are
/// checkpointed but never touched by the optimizer.
template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <class T>
using TensorList = std::vector<NamedTensor<T>>;

/// He-uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
template <class T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
struct Linear {
  Tensor<T> w;  // in x out
  Tensor<T> b;  // out, or undefined when a batchnorm follows

  static Linear make(std::size_t in, std::size_t out, bool bias, std::mt19937_64& rng) {
    Linear l;
    l.w = he_uniform<T>({in, out}, in, rng);
    if (bias) l.b = Tensor<T>::zeros({out}, true);
    return l;
  }
  std::size_t in() const { return w.dim(0); }
  std::size_t out() const { return w.dim(1); }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x) const { return dense(g, x, w, b); }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    out.push_back({prefix + ".w", w, true});
    if (b.defined()) out.push_back({prefix + ".b", b, true});
  }
};

template <class T>
struct Conv {
  Tensor<T> k;  // out x in x kh x kw
  Tensor<T> b;
  std::size_t stride = 1;

  static Conv make(std::size_t in, std::size_t out, std::size_t ksize, std::size_t stride,
                   std::mt19937_64& rng) {
    Conv c;
    c.k = he_uniform<T>({out, in, ksize, ksize}, in * ksize * ksize, rng);
    c.b = Tensor<T>::zeros({out}, true);
    c.stride = stride;
    return c;
  }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x) const {
    return conv2d_same(g, x, k, b, stride);
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    out.push_back({prefix + ".k", k, true});
    out.push_back({prefix + ".b", b, true});
  }
};

template <class T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  // Mutable so that a const forward can fold batch statistics in train mode.
  mutable RunningStats<T> stats;

  static BatchNorm make(std::size_t channels) {
    return {Tensor<T>::filled({channels}, T(1), true), Tensor<T>::zeros({channels}, true),
            RunningStats<T>::init(channels)};
  }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x, Mode mode) const {
    return batchnorm(g, x, gamma, beta, mode, stats);
  }
  Tensor<T> with_relu(Graph<T>& g, const Tensor<T>& x, Mode mode) const {
    return batchnorm_relu(g, x, gamma, beta, mode, stats);
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", stats.mean, false});
    out.push_back({prefix + ".running_var", stats.var, false});
  }
};

/// Shared per-row layer: linear, then batchnorm and ReLU.
template <class T>
struct DenseBnRelu {
  Linear<T> lin;
  BatchNorm<T> bn;

  static DenseBnRelu make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return {Linear<T>::make(in, out, false, rng), BatchNorm<T>::make(out)};
  }

  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& x, Mode mode) const {
    return bn.with_relu(g, lin(g, x), mode);
  }

  void collect(const std::string& prefix, TensorList<T>& out) const {
    lin.collect(prefix + ".fc", out);
    bn.collect(prefix + ".bn", out);
  }
};

template <class T>
std::size_t count_parameters(const TensorList<T>& list) {
  std::size_t n = 0;
  for (const auto& t : list) {
    if (t.trainable) n += t.tensor.numel();
  }
  return n;
}

}  // namespace nmfnet
