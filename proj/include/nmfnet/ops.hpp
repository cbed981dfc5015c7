#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nmfnet/tensor.hpp"

namespace nmfnet {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

template <class T>
ConstMap<T> as_matrix(std::span<const T> s, std::size_t rows, std::size_t cols) {
  return ConstMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
MutMap<T> as_matrix(std::span<T> s, std::size_t rows, std::size_t cols) {
  return MutMap<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(s));
  }
}

}  // namespace detail

enum class Mode { train, eval };

/// Per-channel running statistics owned by a batch-normalization layer.
template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  static RunningStats init(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::filled({channels}, T(1))};
  }
};

/// Spatial padding, possibly asymmetric.
struct Padding2d {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;

  static Padding2d uniform(std::size_t p) { return {p, p, p, p}; }
};

// ---------------------------------------------------------------------------
// Elementwise and structural

template <class T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
  std::vector<T> y(a.numel());
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = ap[i] + bp[i];
  Tensor<T> out(a.shape(), std::move(y));
  if (g.needs_grad({&a, &b})) {
    g.record("add", {a, b}, out, [a, b, out]() mutable {
      for (auto* t : {&a, &b}) {
        if (t->requires_grad()) t->accumulate_grad(out.grad());
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  const T* xp = x.data().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xp[i] > T(0) ? xp[i] : T(0);
  Tensor<T> out(x.shape(), std::move(y));
  if (g.needs_grad({&x})) {
    g.record("relu", {x}, out, [x, out]() mutable {
      const T* gy = out.grad().data();
      const T* yp = out.data().data();
      const std::size_t n = out.numel();
      if (!x.has_grad()) {
        std::vector<T> gx(n);
        for (std::size_t i = 0; i < n; ++i) gx[i] = yp[i] > T(0) ? gy[i] : T(0);
        x.accumulate_grad(std::move(gx));
        return;
      }
      T* gx = x.grad_mut().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += yp[i] > T(0) ? gy[i] : T(0);
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  if (g.needs_grad({&x})) {
    g.record("reshape", {x}, out, [x, out]() mutable { x.accumulate_grad(out.grad()); });
  }
  return out;
}

template <class T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (g.needs_grad({&x})) {
    g.record("sum", {x}, out, [x, out]() mutable {
      const T gy = out.grad()[0];
      for (auto& v : x.grad_mut()) v += gy;
    });
  }
  return out;
}

/// Concatenate along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = xs.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) {
      throw DimensionError("concat: shapes " + shape_str(ref) + " and " + shape_str(s) +
                           " disagree off axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::vector<T> y(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t block = x.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data().begin() + o * block, block, y.begin() + o * total * inner + offset);
    }
    offset += block;
  }
  Tensor<T> out(out_shape, std::move(y));
  bool any = false;
  for (const auto& x : xs) any = any || g.needs_grad({&x});
  if (any) {
    g.record("concat", xs, out, [xs, out, outer, inner, total]() mutable {
      auto gy = out.grad();
      std::size_t offset = 0;
      for (auto& x : xs) {
        const std::size_t block = x.numel() / outer;
        if (x.requires_grad()) {
          auto gx = x.grad_mut();
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t k = 0; k < block; ++k) {
              gx[o * block + k] += gy[o * total * inner + offset + k];
            }
          }
        }
        offset += block;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// out[b,o] = sum_i x[b,i] w[i,o] + bias[o]; an undefined bias is skipped.
template <class T>
Tensor<T> dense(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x.shape(), 2, "dense", "x");
  detail::require_rank(w.shape(), 2, "dense", "w");
  if (x.dim(1) != w.dim(0)) {
    throw DimensionError("dense: inner dimensions disagree, x " + shape_str(x.shape()) + " vs w " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.dim(0), in = x.dim(1), outd = w.dim(1);
  if (b.defined() && b.numel() != outd) {
    throw DimensionError("dense: bias " + shape_str(b.shape()) + " does not match w " +
                         shape_str(w.shape()));
  }
  std::vector<T> y(rows * outd);
  auto Y = detail::as_matrix(std::span<T>(y), rows, outd);
  Y.noalias() = detail::as_matrix(x.data(), rows, in) * detail::as_matrix(w.data(), in, outd);
  if (b.defined()) Y.rowwise() += detail::as_matrix(b.data(), 1, outd).row(0);
  Tensor<T> out({rows, outd}, std::move(y));
  if (g.needs_grad({&x, &w, &b})) {
    g.record("dense", {x, w, b}, out, [x, w, b, out, rows, in, outd]() mutable {
      auto gY = detail::as_matrix(out.grad(), rows, outd);
      if (x.requires_grad()) {
        detail::as_matrix(x.grad_mut(), rows, in).noalias() +=
            gY * detail::as_matrix(w.data(), in, outd).transpose();
      }
      if (w.requires_grad()) {
        detail::as_matrix(w.grad_mut(), in, outd).noalias() +=
            detail::as_matrix(x.data(), rows, in).transpose() * gY;
      }
      if (b.defined() && b.requires_grad()) {
        auto gb = b.grad_mut();
        auto gy = out.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t o = 0; o < outd; ++o) gb[o] += gy[r * outd + o];
        }
      }
    });
  }
  return out;
}

/// Batched right-multiplication: out[b,n,:] = points[b,n,:] * transform[b].
template <class T>
Tensor<T> apply_transform(Graph<T>& g, const Tensor<T>& points, const Tensor<T>& transform) {
  detail::require_rank(points.shape(), 3, "apply_transform", "points");
  detail::require_rank(transform.shape(), 3, "apply_transform", "transform");
  const std::size_t B = points.dim(0), N = points.dim(1), K = points.dim(2);
  if (transform.dim(0) != B || transform.dim(1) != K || transform.dim(2) != K) {
    throw DimensionError("apply_transform: points " + shape_str(points.shape()) +
                         " incompatible with transform " + shape_str(transform.shape()));
  }
  std::vector<T> y(B * N * K);
  for (std::size_t b = 0; b < B; ++b) {
    detail::as_matrix(std::span<T>(y).subspan(b * N * K, N * K), N, K).noalias() =
        detail::as_matrix(points.data().subspan(b * N * K, N * K), N, K) *
        detail::as_matrix(transform.data().subspan(b * K * K, K * K), K, K);
  }
  Tensor<T> out(points.shape(), std::move(y));
  if (g.needs_grad({&points, &transform})) {
    g.record("apply_transform", {points, transform}, out,
             [points, transform, out, B, N, K]() mutable {
               for (std::size_t b = 0; b < B; ++b) {
                 auto gY = detail::as_matrix(out.grad().subspan(b * N * K, N * K), N, K);
                 if (points.requires_grad()) {
                   detail::as_matrix(points.grad_mut().subspan(b * N * K, N * K), N, K).noalias() +=
                       gY *
                       detail::as_matrix(transform.data().subspan(b * K * K, K * K), K, K)
                           .transpose();
                 }
                 if (transform.requires_grad()) {
                   detail::as_matrix(transform.grad_mut().subspan(b * K * K, K * K), K, K)
                       .noalias() +=
                       detail::as_matrix(points.data().subspan(b * N * K, N * K), N, K)
                           .transpose() *
                       gY;
                 }
               }
             });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace detail {

struct ConvGeometry {
  std::size_t C, H, W, Kh, Kw, stride, Ho, Wo;
  Padding2d pad;
};

template <class T>
void im2col(std::span<const T> x, const ConvGeometry& c, std::vector<T>& cols) {
  const std::size_t P = c.Ho * c.Wo;
  cols.assign(c.C * c.Kh * c.Kw * P, T(0));
  for (std::size_t ch = 0; ch < c.C; ++ch) {
    for (std::size_t ky = 0; ky < c.Kh; ++ky) {
      for (std::size_t kx = 0; kx < c.Kw; ++kx) {
        T* row = cols.data() + ((ch * c.Kh + ky) * c.Kw + kx) * P;
        for (std::size_t oy = 0; oy < c.Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) -
                                    static_cast<std::ptrdiff_t>(c.pad.top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.H)) continue;
          const T* src = x.data() + (ch * c.H + static_cast<std::size_t>(iy)) * c.W;
          for (std::size_t ox = 0; ox < c.Wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + kx) -
                                      static_cast<std::ptrdiff_t>(c.pad.left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(c.W)) continue;
            row[oy * c.Wo + ox] = src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const std::vector<T>& cols, const ConvGeometry& c, std::span<T> gx) {
  const std::size_t P = c.Ho * c.Wo;
  for (std::size_t ch = 0; ch < c.C; ++ch) {
    for (std::size_t ky = 0; ky < c.Kh; ++ky) {
      for (std::size_t kx = 0; kx < c.Kw; ++kx) {
        const T* row = cols.data() + ((ch * c.Kh + ky) * c.Kw + kx) * P;
        for (std::size_t oy = 0; oy < c.Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) -
                                    static_cast<std::ptrdiff_t>(c.pad.top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.H)) continue;
          T* dst = gx.data() + (ch * c.H + static_cast<std::size_t>(iy)) * c.W;
          for (std::size_t ox = 0; ox < c.Wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + kx) -
                                      static_cast<std::ptrdiff_t>(c.pad.left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(c.W)) continue;
            dst[ix] += row[oy * c.Wo + ox];
          }
        }
      }
    }
  }
}

inline std::size_t floor_out(std::size_t in, std::size_t pad_total, std::size_t k, std::size_t stride,
                             const char* op) {
  if (stride == 0) throw DimensionError(std::string(op) + ": stride must be positive");
  if (k == 0 || in + pad_total < k) {
    throw DimensionError(std::string(op) + ": window " + std::to_string(k) +
                         " does not fit padded input extent " + std::to_string(in + pad_total));
  }
  return (in + pad_total - k) / stride + 1;
}

/// TensorFlow-style "same" geometry: out = ceil(in / stride); padding split
/// with the extra element at the end.
inline std::pair<std::size_t, std::pair<std::size_t, std::size_t>> same_out(std::size_t in,
                                                                           std::size_t k,
                                                                           std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const std::ptrdiff_t total = std::max<std::ptrdiff_t>(
      static_cast<std::ptrdiff_t>((out - 1) * stride + k) - static_cast<std::ptrdiff_t>(in), 0);
  const auto before = static_cast<std::size_t>(total / 2);
  return {out, {before, static_cast<std::size_t>(total) - before}};
}

template <class T>
Tensor<T> conv2d_geometry(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b,
                          const ConvGeometry& c) {
  const std::size_t B = x.dim(0), F = k.dim(0);
  const std::size_t P = c.Ho * c.Wo, CK = c.C * c.Kh * c.Kw;
  std::vector<T> y(B * F * P);
  std::vector<T> cols;
  const auto Km = as_matrix(k.data(), F, CK);
  for (std::size_t n = 0; n < B; ++n) {
    im2col(x.data().subspan(n * c.C * c.H * c.W, c.C * c.H * c.W), c, cols);
    auto Y = as_matrix(std::span<T>(y).subspan(n * F * P, F * P), F, P);
    Y.noalias() = Km * as_matrix(std::span<const T>(cols), CK, P);
    Y.colwise() += as_matrix(b.data(), F, 1).col(0);
  }
  Tensor<T> out({B, F, c.Ho, c.Wo}, std::move(y));
  if (g.needs_grad({&x, &k, &b})) {
    g.record("conv2d", {x, k, b}, out, [x, k, b, out, c, B, F, P, CK]() mutable {
      std::vector<T> cols;
      std::vector<T> gcols(CK * P);
      const auto Km = as_matrix(k.data(), F, CK);
      for (std::size_t n = 0; n < B; ++n) {
        auto gY = as_matrix(out.grad().subspan(n * F * P, F * P), F, P);
        if (k.requires_grad()) {
          im2col(x.data().subspan(n * c.C * c.H * c.W, c.C * c.H * c.W), c, cols);
          as_matrix(k.grad_mut(), F, CK).noalias() +=
              gY * as_matrix(std::span<const T>(cols), CK, P).transpose();
        }
        if (b.requires_grad()) {
          // plain loop: Eigen's vectorized row sum peels by address, which
          // makes the rounding depend on where the buffer landed
          auto gb = b.grad_mut();
          auto gy = out.grad().subspan(n * F * P, F * P);
          for (std::size_t f = 0; f < F; ++f) {
            T acc = 0;
            for (std::size_t p = 0; p < P; ++p) acc += gy[f * P + p];
            gb[f] += acc;
          }
        }
        if (x.requires_grad()) {
          as_matrix(std::span<T>(gcols), CK, P).noalias() = Km.transpose() * gY;
          col2im_add(gcols, c, x.grad_mut().subspan(n * c.C * c.H * c.W, c.C * c.H * c.W));
        }
      }
    });
  }
  return out;
}

inline void check_conv_args(const Shape& xs, const Shape& ks, std::size_t bn) {
  require_rank(xs, 4, "conv2d", "x");
  require_rank(ks, 4, "conv2d", "kernel");
  if (xs[1] != ks[1]) {
    throw DimensionError("conv2d: input channels of x " + shape_str(xs) + " and kernel " +
                         shape_str(ks) + " disagree");
  }
  if (bn != ks[0]) throw DimensionError("conv2d: bias size does not match kernel " + shape_str(ks));
}

template <class T>
Tensor<T> maxpool_geometry(Graph<T>& g, const Tensor<T>& x, std::size_t window,
                           const ConvGeometry& c) {
  const std::size_t B = x.dim(0);
  std::vector<T> y(B * c.C * c.Ho * c.Wo);
  std::vector<std::size_t> arg(y.size());
  const auto xs = x.data();
  for (std::size_t plane = 0; plane < B * c.C; ++plane) {
    for (std::size_t oy = 0; oy < c.Ho; ++oy) {
      for (std::size_t ox = 0; ox < c.Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        bool found = false;
        for (std::size_t ky = 0; ky < window; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) -
                                    static_cast<std::ptrdiff_t>(c.pad.top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.H)) continue;
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + kx) -
                                      static_cast<std::ptrdiff_t>(c.pad.left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(c.W)) continue;
            const std::size_t i =
                plane * c.H * c.W + static_cast<std::size_t>(iy) * c.W + static_cast<std::size_t>(ix);
            // strict comparison keeps the lowest flat index on ties
            if (!found || xs[i] > best) {
              best = xs[i];
              best_i = i;
              found = true;
            }
          }
        }
        const std::size_t o = (plane * c.Ho + oy) * c.Wo + ox;
        y[o] = best;
        arg[o] = best_i;
      }
    }
  }
  Tensor<T> out({B, c.C, c.Ho, c.Wo}, std::move(y));
  if (g.needs_grad({&x})) {
    g.record("maxpool2d", {x}, out, [x, out, arg = std::move(arg)]() mutable {
      auto gy = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < gy.size(); ++o) gx[arg[o]] += gy[o];
    });
  }
  return out;
}

}  // namespace detail

/// Cross-correlation with symmetric zero padding. Output extent is
/// floor((H + 2 pad - Kh) / stride) + 1 and must be at least one.
template <class T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b,
                 std::size_t stride, std::size_t pad) {
  detail::check_conv_args(x.shape(), k.shape(), b.numel());
  detail::ConvGeometry c{x.dim(1), x.dim(2), x.dim(3), k.dim(2), k.dim(3), stride, 0, 0,
                         Padding2d::uniform(pad)};
  c.Ho = detail::floor_out(c.H, 2 * pad, c.Kh, stride, "conv2d");
  c.Wo = detail::floor_out(c.W, 2 * pad, c.Kw, stride, "conv2d");
  return detail::conv2d_geometry(g, x, k, b, c);
}

/// Cross-correlation with "same" padding: output extent ceil(H / stride).
template <class T>
Tensor<T> conv2d_same(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b,
                      std::size_t stride) {
  detail::check_conv_args(x.shape(), k.shape(), b.numel());
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const auto [ho, ph] = detail::same_out(x.dim(2), k.dim(2), stride);
  const auto [wo, pw] = detail::same_out(x.dim(3), k.dim(3), stride);
  detail::ConvGeometry c{x.dim(1), x.dim(2), x.dim(3), k.dim(2), k.dim(3), stride, ho, wo,
                         Padding2d{ph.first, ph.second, pw.first, pw.second}};
  return detail::conv2d_geometry(g, x, k, b, c);
}

template <class T>
Tensor<T> maxpool2d(Graph<T>& g, const Tensor<T>& x, std::size_t window, std::size_t stride) {
  detail::require_rank(x.shape(), 4, "maxpool2d", "x");
  detail::ConvGeometry c{x.dim(1), x.dim(2), x.dim(3), window, window, stride, 0, 0, {}};
  c.Ho = detail::floor_out(c.H, 0, window, stride, "maxpool2d");
  c.Wo = detail::floor_out(c.W, 0, window, stride, "maxpool2d");
  return detail::maxpool_geometry(g, x, window, c);
}

template <class T>
Tensor<T> maxpool2d_same(Graph<T>& g, const Tensor<T>& x, std::size_t window, std::size_t stride) {
  detail::require_rank(x.shape(), 4, "maxpool2d", "x");
  if (stride == 0) throw DimensionError("maxpool2d: stride must be positive");
  const auto [ho, ph] = detail::same_out(x.dim(2), window, stride);
  const auto [wo, pw] = detail::same_out(x.dim(3), window, stride);
  detail::ConvGeometry c{x.dim(1), x.dim(2), x.dim(3), window, window, stride, ho, wo,
                         Padding2d{ph.first, ph.second, pw.first, pw.second}};
  return detail::maxpool_geometry(g, x, window, c);
}

/// B x C x H x W -> B x C mean over the spatial plane.
template <class T>
Tensor<T> global_avg_pool(Graph<T>& g, const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool", "x");
  const std::size_t BC = x.dim(0) * x.dim(1), S = x.dim(2) * x.dim(3);
  std::vector<T> y(BC);
  for (std::size_t i = 0; i < BC; ++i) {
    T s = 0;
    for (std::size_t k = 0; k < S; ++k) s += x[i * S + k];
    y[i] = s / static_cast<T>(S);
  }
  Tensor<T> out({x.dim(0), x.dim(1)}, std::move(y));
  if (g.needs_grad({&x})) {
    g.record("global_avg_pool", {x}, out, [x, out, BC, S]() mutable {
      auto gy = out.grad();
      auto gx = x.grad_mut();
      const T inv = T(1) / static_cast<T>(S);
      for (std::size_t i = 0; i < BC; ++i) {
        for (std::size_t k = 0; k < S; ++k) gx[i * S + k] += gy[i] * inv;
      }
    });
  }
  return out;
}

/// Element-wise maximum over the set axis: B x N x D -> B x D. Backward routes
/// each gradient to the lowest-index maximizer.
template <class T>
Tensor<T> reduce_max_axis(Graph<T>& g, const Tensor<T>& x) {
  detail::require_rank(x.shape(), 3, "reduce_max_axis", "x");
  const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (N == 0) throw EmptySetError("reduce_max_axis: set axis is empty in " + shape_str(x.shape()));
  std::vector<T> y(B * D);
  std::vector<std::size_t> arg(B * D);
  const T* xp = x.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t base = b * N * D;
    T* yb = y.data() + b * D;
    std::size_t* ab = arg.data() + b * D;
    for (std::size_t d = 0; d < D; ++d) {
      yb[d] = xp[base + d];
      ab[d] = base + d;
    }
    for (std::size_t n = 1; n < N; ++n) {
      const T* row = xp + base + n * D;
      for (std::size_t d = 0; d < D; ++d) {
        if (row[d] > yb[d]) {
          yb[d] = row[d];
          ab[d] = base + n * D + d;
        }
      }
    }
  }
  Tensor<T> out({B, D}, std::move(y));
  if (g.needs_grad({&x})) {
    g.record("reduce_max_axis", {x}, out, [x, out, arg = std::move(arg)]() mutable {
      auto gy = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < gy.size(); ++o) gx[arg[o]] += gy[o];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

// Visits x as (outer, C, inner) and calls f(channel, pointer, length) over
// contiguous runs of one channel. For channel-last input the runs have length 1,
// so that case is walked row by row instead.
template <class T, class F>
void for_channel_runs(T* base, std::size_t outer, std::size_t C, std::size_t inner, F&& f) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < C; ++c) f(c, base + (o * C + c) * inner, inner);
  }
}

}  // namespace detail

namespace detail {

template <bool Relu, class T>
Tensor<T> batchnorm_impl(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta, Mode mode, RunningStats<T>& stats, T eps,
                         T momentum) {
  std::size_t outer, C, inner;
  if (x.rank() == 2) {
    outer = x.dim(0);
    C = x.dim(1);
    inner = 1;
  } else if (x.rank() == 4) {
    outer = x.dim(0);
    C = x.dim(1);
    inner = x.dim(2) * x.dim(3);
  } else {
    throw DimensionError("batchnorm: expected rank 2 or 4 input, got " + shape_str(x.shape()));
  }
  if (gamma.numel() != C || beta.numel() != C || stats.mean.numel() != C) {
    throw DimensionError("batchnorm: parameters do not match " + std::to_string(C) + " channels");
  }
  const std::size_t count = outer * inner;
  const T* xp = x.data().data();

  std::vector<T> mean(C), inv_std(C);
  if (mode == Mode::train) {
    if (count < 2) {
      throw DegenerateBatchError("batchnorm: " + std::to_string(count) +
                                 " values per channel in train mode, need at least 2");
    }
    std::vector<double> s1(C, 0.0), s2(C, 0.0);
    if (inner == 1) {
      for (std::size_t o = 0; o < outer; ++o) {
        const T* row = xp + o * C;
        for (std::size_t c = 0; c < C; ++c) s1[c] += row[c];
      }
      for (std::size_t c = 0; c < C; ++c) s1[c] /= static_cast<double>(count);
      for (std::size_t o = 0; o < outer; ++o) {
        const T* row = xp + o * C;
        for (std::size_t c = 0; c < C; ++c) {
          const double d = row[c] - s1[c];
          s2[c] += d * d;
        }
      }
    } else {
      detail::for_channel_runs(xp, outer, C, inner, [&](std::size_t c, const T* p, std::size_t n) {
        double acc = 0;
        for (std::size_t s = 0; s < n; ++s) acc += p[s];
        s1[c] += acc;
      });
      for (std::size_t c = 0; c < C; ++c) s1[c] /= static_cast<double>(count);
      detail::for_channel_runs(xp, outer, C, inner, [&](std::size_t c, const T* p, std::size_t n) {
        double acc = 0;
        for (std::size_t s = 0; s < n; ++s) {
          const double d = p[s] - s1[c];
          acc += d * d;
        }
        s2[c] += acc;
      });
    }
    auto rm = stats.mean.mutable_data();
    auto rv = stats.var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      const double var = s2[c] / static_cast<double>(count);
      mean[c] = static_cast<T>(s1[c]);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = s2[c] / static_cast<double>(count - 1);
      rm[c] = static_cast<T>(momentum * rm[c] + (1 - momentum) * s1[c]);
      rv[c] = static_cast<T>(momentum * rv[c] + (1 - momentum) * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
    }
  }

  std::vector<T> y(x.numel());
  const T* gp = gamma.data().data();
  const T* bp = beta.data().data();
  if (inner == 1) {
    std::vector<T> scale(C);
    for (std::size_t c = 0; c < C; ++c) scale[c] = gp[c] * inv_std[c];
    for (std::size_t o = 0; o < outer; ++o) {
      const T* row = xp + o * C;
      T* yr = y.data() + o * C;
      for (std::size_t c = 0; c < C; ++c) {
        const T v = (row[c] - mean[c]) * scale[c] + bp[c];
        yr[c] = Relu ? (v > T(0) ? v : T(0)) : v;
      }
    }
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (o * C + c) * inner;
        const T m = mean[c], k = gp[c] * inv_std[c], b0 = bp[c];
        for (std::size_t s = 0; s < inner; ++s) {
          const T v = (xp[off + s] - m) * k + b0;
          y[off + s] = Relu ? (v > T(0) ? v : T(0)) : v;
        }
      }
    }
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (g.needs_grad({&x, &gamma, &beta})) {
    g.record(Relu ? "batchnorm_relu" : "batchnorm", {x, gamma, beta}, out,
             [x, gamma, beta, out, mode, outer, C, inner, count, mean = std::move(mean),
              inv_std = std::move(inv_std)]() mutable {
               const T* gy = out.grad().data();
               const T* xp = x.data().data();
               // the fused ReLU masks the incoming gradient by y > 0
               std::vector<T> masked;
               if constexpr (Relu) {
                 const T* yp = out.data().data();
                 masked.resize(out.numel());
                 for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = yp[i] > T(0) ? gy[i] : T(0);
                 gy = masked.data();
               }
               // xhat is recomputed from x rather than stored
               std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
               if (inner == 1) {
                 // accumulate in T across rows so the channel loop vectorizes
                 std::vector<T> sdy(C, T(0)), sdx(C, T(0));
                 for (std::size_t o = 0; o < outer; ++o) {
                   const T* xr = xp + o * C;
                   const T* gr = gy + o * C;
                   for (std::size_t c = 0; c < C; ++c) {
                     sdy[c] += gr[c];
                     sdx[c] += gr[c] * (xr[c] - mean[c]);
                   }
                 }
                 for (std::size_t c = 0; c < C; ++c) {
                   sum_dy[c] = sdy[c];
                   sum_dy_xhat[c] = static_cast<double>(sdx[c]) * inv_std[c];
                 }
               } else {
                 for (std::size_t o = 0; o < outer; ++o) {
                   for (std::size_t c = 0; c < C; ++c) {
                     const std::size_t off = (o * C + c) * inner;
                     double a = 0, b = 0;
                     for (std::size_t s = 0; s < inner; ++s) {
                       const T gv = gy[off + s];
                       a += gv;
                       b += static_cast<double>(gv) * (xp[off + s] - mean[c]);
                     }
                     sum_dy[c] += a;
                     sum_dy_xhat[c] += b * inv_std[c];
                   }
                 }
               }
               if (gamma.requires_grad()) {
                 auto gg = gamma.grad_mut();
                 for (std::size_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
               }
               if (beta.requires_grad()) {
                 auto gb = beta.grad_mut();
                 for (std::size_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[c]);
               }
               if (!x.requires_grad()) return;
               // gx = k * (gy - a - (x - mean) * b) with per-channel a, b
               const double n = static_cast<double>(count);
               std::vector<T> k(C), a(C), b(C);
               for (std::size_t c = 0; c < C; ++c) {
                 k[c] = gamma[c] * inv_std[c];
                 if (mode == Mode::train) {
                   a[c] = static_cast<T>(sum_dy[c] / n);
                   b[c] = static_cast<T>(sum_dy_xhat[c] / n * inv_std[c]);
                 }
               }
               T* gx = x.grad_mut().data();
               if (inner == 1) {
                 for (std::size_t o = 0; o < outer; ++o) {
                   const T* xr = xp + o * C;
                   T* dr = gx + o * C;
                   for (std::size_t c = 0; c < C; ++c) {
                     dr[c] += k[c] * (gy[o * C + c] - a[c] - (xr[c] - mean[c]) * b[c]);
                   }
                 }
               } else {
                 for (std::size_t o = 0; o < outer; ++o) {
                   for (std::size_t c = 0; c < C; ++c) {
                     const std::size_t off = (o * C + c) * inner;
                     const T kc = k[c], ac = a[c], bc = b[c], m = mean[c];
                     for (std::size_t s = 0; s < inner; ++s) {
                       gx[off + s] += kc * (gy[off + s] - ac - (xp[off + s] - m) * bc);
                     }
                   }
                 }
               }
             });
  }
  return out;
}

}  // namespace detail

/// Batch normalization over every axis except the channel axis. Accepts
/// M x C (channel last) or B x C x H x W. Train mode uses batch statistics and
/// folds them into `stats`; eval mode uses `stats` as-is.
template <class T>
Tensor<T> batchnorm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Mode mode, RunningStats<T>& stats, T eps = T(1e-5), T momentum = T(0.9)) {
  return detail::batchnorm_impl<false>(g, x, gamma, beta, mode, stats, eps, momentum);
}

/// relu(batchnorm(x)) as one node.
template <class T>
Tensor<T> batchnorm_relu(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta, Mode mode, RunningStats<T>& stats,
                         T eps = T(1e-5), T momentum = T(0.9)) {
  return detail::batchnorm_impl<true>(g, x, gamma, beta, mode, stats, eps, momentum);
}

// ---------------------------------------------------------------------------
// Loss

/// L = (1/m) sum_i (target_i - pred_i)^2
template <class T>
Tensor<T> mse_loss(Graph<T>& g, const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss: prediction " + shape_str(pred.shape()) + " and target " +
                         shape_str(target.shape()) + " differ");
  }
  const std::size_t m = pred.numel();
  if (m == 0) throw DimensionError("mse_loss: empty prediction");
  double acc = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = static_cast<double>(target[i]) - pred[i];
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(m)));
  if (g.needs_grad({&pred, &target})) {
    g.record("mse_loss", {pred, target}, out, [pred, target, out, m]() mutable {
      const T scale = out.grad()[0] * T(2) / static_cast<T>(m);
      if (pred.requires_grad()) {
        auto gp = pred.grad_mut();
        for (std::size_t i = 0; i < m; ++i) gp[i] += scale * (pred[i] - target[i]);
      }
      if (target.requires_grad()) {
        auto gt = target.grad_mut();
        for (std::size_t i = 0; i < m; ++i) gt[i] += scale * (target[i] - pred[i]);
      }
    });
  }
  return out;
}

}  // namespace nmfnet
