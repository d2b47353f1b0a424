#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "vpnpp/tensor.hpp"

namespace vpnpp {

/// A trainable array and its accumulated gradient.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  explicit Param(Shape s) : value(s), grad(s) {}
  void zero_grad() { grad.zero(); }
};

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Param<T>&)>;

// ---------------------------------------------------------------------------
// Elementwise helpers.

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.vec()) v = v > T(0) ? v : T(0);
}

/// dy masked by the post-activation output.
template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
  for (std::size_t i = 0; i < y.size(); ++i)
    if (!(y[i] > T(0))) dy[i] = T(0);
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
void softmax_inplace(std::span<T> x) {
  const T mx = *std::max_element(x.begin(), x.end());
  T sum = T(0);
  for (auto& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : x) v /= sum;
}

/// Given y = softmax(x) and dL/dy, writes dL/dx into dy.
template <typename T>
void softmax_backward_inplace(std::span<const T> y, std::span<T> dy) {
  T dot = T(0);
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
  for (std::size_t i = 0; i < y.size(); ++i) dy[i] = y[i] * (dy[i] - dot);
}

template <typename T>
T l2_norm(std::span<const T> x) {
  T s = T(0);
  for (T v : x) s += v * v;
  return std::sqrt(s);
}

/// Unit-normalizes x. Throws DegenerateNorm on a zero vector.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T* norm_out = nullptr) {
  const T n = l2_norm<T>(x.span());
  if (!(n > std::numeric_limits<T>::min()) || !std::isfinite(n))
    throw DegenerateNorm("cannot L2-normalize a zero-norm vector");
  Tensor<T> y = x;
  y *= T(1) / n;
  if (norm_out) *norm_out = n;
  return y;
}

/// Backward of y = x / |x| given y, |x| and dL/dy.
template <typename T>
Tensor<T> l2_normalize_backward(const Tensor<T>& y, T norm, const Tensor<T>& dy) {
  T dot = T(0);
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = (dy[i] - y[i] * dot) / norm;
  return dx;
}

// ---------------------------------------------------------------------------

/// Fully connected map, weight [out x in].
template <typename T>
struct Linear {
  Param<T> weight;
  Param<T> bias;
  bool has_bias = true;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias = true)
      : weight({out, in}), bias({with_bias ? out : 0}), has_bias(with_bias) {}

  std::size_t in_dim() const { return weight.value.dim(1); }
  std::size_t out_dim() const { return weight.value.dim(0); }

  void init(Rng& rng, double stddev) {
    fill_normal(weight.value, rng, stddev);
    bias.value.zero();
  }
  /// He-style init for a ReLU-followed map.
  void init_he(Rng& rng) { init(rng, std::sqrt(2.0 / static_cast<double>(in_dim()))); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    if (has_bias) f(prefix + ".bias", bias);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.size() != in_dim())
      throw ShapeError("linear expects " + std::to_string(in_dim()) + " inputs, got " +
                       std::to_string(x.size()));
    Tensor<T> y({out_dim()});
    as_vector(y).noalias() = as_matrix(weight.value, out_dim()) * as_vector(x);
    if (has_bias) as_vector(y) += as_vector(bias.value);
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    as_matrix(weight.grad, out_dim()).noalias() += as_vector(dy) * as_vector(x).transpose();
    if (has_bias) as_vector(bias.grad) += as_vector(dy);
    Tensor<T> dx(x.shape());
    as_vector(dx).noalias() = as_matrix(weight.value, out_dim()).transpose() * as_vector(dy);
    return dx;
  }
};

// ---------------------------------------------------------------------------

/// 3x3x3 convolution, stride 1, zero padding 1, over [ch x D x H x W].
template <typename T>
struct Conv3d {
  static constexpr std::size_t kTaps = 27;
  Param<T> weight;  // [out x in*27]
  Param<T> bias;    // [out]

  struct Cache {
    Tensor<T> col;
    Shape in_shape;
  };

  Conv3d() = default;
  Conv3d(std::size_t in_ch, std::size_t out_ch) : weight({out_ch, in_ch * kTaps}), bias({out_ch}) {}

  std::size_t in_ch() const { return weight.value.dim(1) / kTaps; }
  std::size_t out_ch() const { return weight.value.dim(0); }

  void init_he(Rng& rng) {
    fill_normal(weight.value, rng, std::sqrt(2.0 / static_cast<double>(weight.value.dim(1))));
    bias.value.zero();
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }

  static Tensor<T> im2col(const Tensor<T>& x) {
    const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t P = D * H * W;
    Tensor<T> col({C * kTaps, P});
    T* out = col.data();
    for (std::size_t c = 0; c < C; ++c)
      for (int kd = -1; kd <= 1; ++kd)
        for (int kh = -1; kh <= 1; ++kh)
          for (int kw = -1; kw <= 1; ++kw, out += P)
            for (std::size_t d = 0; d < D; ++d) {
              const long sd = static_cast<long>(d) + kd;
              if (sd < 0 || sd >= static_cast<long>(D)) continue;
              for (std::size_t h = 0; h < H; ++h) {
                const long sh = static_cast<long>(h) + kh;
                if (sh < 0 || sh >= static_cast<long>(H)) continue;
                const T* src = &x(c, static_cast<std::size_t>(sd), static_cast<std::size_t>(sh), 0);
                T* dst = out + (d * H + h) * W;
                const std::size_t w0 = kw < 0 ? 1 : 0;
                const std::size_t w1 = kw > 0 ? W - 1 : W;
                for (std::size_t w = w0; w < w1; ++w) dst[w] = src[static_cast<long>(w) + kw];
              }
            }
    return col;
  }

  static Tensor<T> col2im(const Tensor<T>& col, const Shape& in_shape) {
    const std::size_t C = in_shape[0], D = in_shape[1], H = in_shape[2], W = in_shape[3];
    const std::size_t P = D * H * W;
    Tensor<T> x(in_shape);
    const T* in = col.data();
    for (std::size_t c = 0; c < C; ++c)
      for (int kd = -1; kd <= 1; ++kd)
        for (int kh = -1; kh <= 1; ++kh)
          for (int kw = -1; kw <= 1; ++kw, in += P)
            for (std::size_t d = 0; d < D; ++d) {
              const long sd = static_cast<long>(d) + kd;
              if (sd < 0 || sd >= static_cast<long>(D)) continue;
              for (std::size_t h = 0; h < H; ++h) {
                const long sh = static_cast<long>(h) + kh;
                if (sh < 0 || sh >= static_cast<long>(H)) continue;
                T* dst = &x(c, static_cast<std::size_t>(sd), static_cast<std::size_t>(sh), 0);
                const T* src = in + (d * H + h) * W;
                const std::size_t w0 = kw < 0 ? 1 : 0;
                const std::size_t w1 = kw > 0 ? W - 1 : W;
                for (std::size_t w = w0; w < w1; ++w) dst[static_cast<long>(w) + kw] += src[w];
              }
            }
    return x;
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (x.rank() != 4 || x.dim(0) != in_ch())
      throw ShapeError("conv3d expects " + std::to_string(in_ch()) + " input channels, got " +
                       shape_str(x.shape()));
    Tensor<T> col = im2col(x);
    Tensor<T> y({out_ch(), x.dim(1), x.dim(2), x.dim(3)});
    auto ym = as_matrix(y, out_ch());
    ym.noalias() = as_matrix(weight.value, out_ch()) * as_matrix(col, col.dim(0));
    ym.colwise() += as_vector(bias.value);
    if (cache) {
      cache->col = std::move(col);
      cache->in_shape = x.shape();
    }
    return y;
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy, bool need_dx) {
    auto dym = as_matrix(dy, out_ch());
    const auto colm = as_matrix(cache.col, cache.col.dim(0));
    as_matrix(weight.grad, out_ch()).noalias() += dym * colm.transpose();
    as_vector(bias.grad) += dym.rowwise().sum();
    if (!need_dx) return {};
    Tensor<T> dcol(cache.col.shape());
    as_matrix(dcol, dcol.dim(0)).noalias() = as_matrix(weight.value, out_ch()).transpose() * dym;
    return col2im(dcol, cache.in_shape);
  }
};

// ---------------------------------------------------------------------------

/// Non-overlapping 3D max pooling; window must divide every extent.
template <typename T>
struct MaxPool3d {
  std::array<std::size_t, 3> window{1, 1, 1};

  struct Cache {
    std::vector<std::uint32_t> argmax;
    Shape in_shape;
  };

  bool identity() const { return window[0] == 1 && window[1] == 1 && window[2] == 1; }

  Shape out_shape(const Shape& in) const {
    for (std::size_t a = 0; a < 3; ++a)
      if (in[a + 1] % window[a] != 0)
        throw ShapeError("pool window does not divide input " + shape_str(in));
    return {in[0], in[1] / window[0], in[2] / window[1], in[3] / window[2]};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    const Shape os = out_shape(x.shape());
    Tensor<T> y(os);
    if (cache) {
      cache->argmax.assign(y.size(), 0);
      cache->in_shape = x.shape();
    }
    const std::size_t H = x.dim(2), W = x.dim(3), D = x.dim(1);
    std::size_t o = 0;
    for (std::size_t c = 0; c < os[0]; ++c)
      for (std::size_t d = 0; d < os[1]; ++d)
        for (std::size_t h = 0; h < os[2]; ++h)
          for (std::size_t w = 0; w < os[3]; ++w, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t arg = 0;
            for (std::size_t a = 0; a < window[0]; ++a)
              for (std::size_t b = 0; b < window[1]; ++b)
                for (std::size_t e = 0; e < window[2]; ++e) {
                  const std::size_t idx =
                      ((c * D + d * window[0] + a) * H + h * window[1] + b) * W + w * window[2] + e;
                  if (x[idx] > best) {
                    best = x[idx];
                    arg = idx;
                  }
                }
            y[o] = best;
            if (cache) cache->argmax[o] = static_cast<std::uint32_t>(arg);
          }
    return y;
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy) const {
    Tensor<T> dx(cache.in_shape);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[cache.argmax[o]] += dy[o];
    return dx;
  }
};

// ---------------------------------------------------------------------------

/// Global average over every axis but the first: [c x ...] -> [c].
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const std::size_t c = x.dim(0);
  Tensor<T> y({c});
  as_vector(y) = as_matrix(x, c).rowwise().mean();
  return y;
}

template <typename T>
Tensor<T> channel_mean_backward(const Tensor<T>& dy, const Shape& in_shape) {
  Tensor<T> dx(in_shape);
  const std::size_t c = in_shape[0];
  const std::size_t per = dx.size() / c;
  const T scale = T(1) / static_cast<T>(per);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < per; ++j) dx[i * per + j] = dy[i] * scale;
  return dx;
}

// ---------------------------------------------------------------------------

/// Dropout + linear + softmax classifier.
template <typename T>
struct ClassifierHead {
  double dropout_rate = 0.3;
  Linear<T> fc;

  struct Cache {
    Tensor<T> input;   // post-dropout features fed to fc
    Tensor<T> mask;    // dropout multipliers (empty in eval mode)
    Tensor<T> probs;
  };

  ClassifierHead() = default;
  ClassifierHead(std::size_t in, std::size_t classes, double dropout = 0.3)
      : dropout_rate(dropout), fc(in, classes) {}

  std::size_t classes() const { return fc.out_dim(); }

  void init(Rng& rng) { fc.init(rng, 1.0 / std::sqrt(static_cast<double>(fc.in_dim()))); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f) { fc.visit(prefix + ".fc", f); }

  /// A null dropout_rng means eval mode.
  Tensor<T> forward(const Tensor<T>& x, Rng* dropout_rng, Cache* cache) const {
    Tensor<T> in = x;
    Tensor<T> mask;
    if (dropout_rng && dropout_rate > 0.0) {
      mask = Tensor<T>(x.shape());
      const T keep_scale = static_cast<T>(1.0 / (1.0 - dropout_rate));
      for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = uniform01(*dropout_rng) < dropout_rate ? T(0) : keep_scale;
        in[i] *= mask[i];
      }
    }
    Tensor<T> p = fc.forward(in);
    softmax_inplace(p.span());
    if (cache) {
      cache->input = std::move(in);
      cache->mask = std::move(mask);
      cache->probs = p;
    }
    return p;
  }

  /// Backward of weight * -log p[label]; returns dL/dx.
  Tensor<T> backward_ce(const Cache& cache, std::size_t label, T weight) {
    Tensor<T> dlogits = cache.probs;
    dlogits[label] -= T(1);
    dlogits *= weight;
    Tensor<T> dx = fc.backward(cache.input, dlogits);
    if (!cache.mask.empty())
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= cache.mask[i];
    return dx;
  }
};

template <typename T>
T cross_entropy(const Tensor<T>& probs, std::size_t label) {
  return -std::log(std::max(probs[label], std::numeric_limits<T>::min()));
}

template <typename T>
std::size_t argmax(std::span<const T> x) {
  return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
}

}  // namespace vpnpp
