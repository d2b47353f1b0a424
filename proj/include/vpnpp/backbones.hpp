#pragma once

// Feature extractors: a two-layer adaptive graph-convolution pose network and
// a small 3D-convolutional video network.

#include <array>
#include <string>
#include <vector>

#include "vpnpp/layers.hpp"
#include "vpnpp/syndata.hpp"

namespace vpnpp {

/// Checks symmetry and nonnegativity, then row-normalizes.
template <typename T>
Tensor<T> normalized_adjacency(const Tensor<double>& adj) {
  if (adj.rank() != 2 || adj.dim(0) != adj.dim(1)) throw ShapeError("adjacency must be square");
  const std::size_t J = adj.dim(0);
  Tensor<T> out({J, J});
  for (std::size_t j = 0; j < J; ++j) {
    double s = 0;
    for (std::size_t k = 0; k < J; ++k) {
      if (adj(j, k) < 0) throw ConfigError("adjacency must be nonnegative");
      if (adj(j, k) != adj(k, j)) throw ConfigError("adjacency must be symmetric");
      s += adj(j, k);
    }
    if (s <= 0) throw ConfigError("adjacency row " + std::to_string(j) + " is empty");
    for (std::size_t k = 0; k < J; ++k) out(j, k) = static_cast<T>(adj(j, k) / s);
  }
  return out;
}

/// Adaptive graph convolution over [d x J x t]:
///   agg[:, j] = sum_k (Anorm + B)[j, k] x[:, k]
///   y = relu(temporal_conv3(W agg) + bias)
/// B is a learned J x J offset shared by all channels.
template <typename T>
struct GraphConv {
  Tensor<T> adj_norm;
  Param<T> weight;    // [d_out x d_in]
  Param<T> offset;    // B, [J x J]
  Param<T> temporal;  // [d_out x d_out*3], taps t-1, t, t+1
  Param<T> bias;      // [d_out]
  bool apply_relu = true;

  struct Cache {
    Tensor<T> x, agg, tcol, out;
  };

  GraphConv() = default;
  GraphConv(std::size_t d_in, std::size_t d_out, const Tensor<double>& adjacency)
      : adj_norm(normalized_adjacency<T>(adjacency)),
        weight({d_out, d_in}),
        offset({adjacency.dim(0), adjacency.dim(0)}),
        temporal({d_out, d_out * 3}),
        bias({d_out}) {}

  std::size_t d_in() const { return weight.value.dim(1); }
  std::size_t d_out() const { return weight.value.dim(0); }
  std::size_t joints() const { return adj_norm.dim(0); }

  void init(Rng& rng) {
    fill_normal(weight.value, rng, std::sqrt(1.0 / static_cast<double>(d_in())));
    offset.value.zero();
    fill_normal(temporal.value, rng, std::sqrt(2.0 / (3.0 * static_cast<double>(d_out()))));
    bias.value.zero();
  }

  /// Sets W = I and a pass-through temporal kernel (needs d_in == d_out).
  void set_identity() {
    if (d_in() != d_out()) throw ShapeError("identity graph conv needs d_in == d_out");
    weight.value.zero();
    temporal.value.zero();
    for (std::size_t o = 0; o < d_out(); ++o) {
      weight.value(o, o) = T(1);
      temporal.value(o, o * 3 + 1) = T(1);
    }
    offset.value.zero();
    bias.value.zero();
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".offset", offset);
    f(prefix + ".temporal", temporal);
    f(prefix + ".bias", bias);
  }

  RowMat<T> effective_adjacency() const {
    return as_matrix(adj_norm, joints()) + as_matrix(offset.value, joints());
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    const std::size_t J = joints();
    if (x.rank() != 3 || x.dim(0) != d_in() || x.dim(1) != J)
      throw ShapeError("graph conv expects " + std::to_string(d_in()) + "x" + std::to_string(J) + "xt, got " +
                       shape_str(x.shape()));
    const std::size_t t = x.dim(2);
    const RowMat<T> A = effective_adjacency();
    Tensor<T> agg(x.shape());
    for (std::size_t i = 0; i < d_in(); ++i) {
      CMatMap<T> xi(x.data() + i * J * t, static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(t));
      MatMap<T> ai(agg.data() + i * J * t, static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(t));
      ai.noalias() = A * xi;
    }
    Tensor<T> y1({d_out(), J, t});
    as_matrix(y1, d_out()).noalias() = as_matrix(weight.value, d_out()) * as_matrix(agg, d_in());
    Tensor<T> tcol({d_out() * 3, J * t});
    for (std::size_t o = 0; o < d_out(); ++o)
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t tau = 0; tau < t; ++tau) {
            const long src = static_cast<long>(tau) + static_cast<long>(s) - 1;
            tcol(o * 3 + s, j * t + tau) =
                (src < 0 || src >= static_cast<long>(t)) ? T(0) : y1(o, j, static_cast<std::size_t>(src));
          }
    Tensor<T> out({d_out(), J, t});
    auto om = as_matrix(out, d_out());
    om.noalias() = as_matrix(temporal.value, d_out()) * as_matrix(tcol, d_out() * 3);
    om.colwise() += as_vector(bias.value);
    if (apply_relu) relu_inplace(out);
    if (cache) {
      cache->x = x;
      cache->agg = std::move(agg);
      cache->tcol = std::move(tcol);
      cache->out = out;
    }
    return out;
  }

  Tensor<T> backward(const Cache& c, Tensor<T> dout) {
    const std::size_t J = joints(), t = c.x.dim(2);
    if (apply_relu) relu_backward_inplace(c.out, dout);
    const auto dm = as_matrix(dout, d_out());
    as_matrix(temporal.grad, d_out()).noalias() += dm * as_matrix(c.tcol, d_out() * 3).transpose();
    as_vector(bias.grad) += dm.rowwise().sum();
    Tensor<T> dtcol(c.tcol.shape());
    as_matrix(dtcol, d_out() * 3).noalias() = as_matrix(temporal.value, d_out()).transpose() * dm;
    Tensor<T> dy1({d_out(), J, t});
    for (std::size_t o = 0; o < d_out(); ++o)
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t j = 0; j < J; ++j)
          for (std::size_t tau = 0; tau < t; ++tau) {
            const long src = static_cast<long>(tau) + static_cast<long>(s) - 1;
            if (src >= 0 && src < static_cast<long>(t))
              dy1(o, j, static_cast<std::size_t>(src)) += dtcol(o * 3 + s, j * t + tau);
          }
    as_matrix(weight.grad, d_out()).noalias() += as_matrix(dy1, d_out()) * as_matrix(c.agg, d_in()).transpose();
    Tensor<T> dagg({d_in(), J, t});
    as_matrix(dagg, d_in()).noalias() = as_matrix(weight.value, d_out()).transpose() * as_matrix(dy1, d_out());
    const RowMat<T> A = effective_adjacency();
    auto dB = as_matrix(offset.grad, J);
    Tensor<T> dx(c.x.shape());
    for (std::size_t i = 0; i < d_in(); ++i) {
      CMatMap<T> xi(c.x.data() + i * J * t, static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(t));
      CMatMap<T> gi(dagg.data() + i * J * t, static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(t));
      MatMap<T> dxi(dx.data() + i * J * t, static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(t));
      dB.noalias() += gi * xi.transpose();
      dxi.noalias() = A.transpose() * gi;
    }
    return dx;
  }
};

/// Stride-2 average pooling along the last axis of [d x J x t].
template <typename T>
Tensor<T> temporal_pool2(const Tensor<T>& x) {
  const std::size_t d = x.dim(0), J = x.dim(1), t = x.dim(2);
  if (t % 2 != 0) throw ShapeError("temporal pooling needs an even frame count, got " + std::to_string(t));
  Tensor<T> y({d, J, t / 2});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t s = 0; s < t / 2; ++s) y(i, j, s) = (x(i, j, 2 * s) + x(i, j, 2 * s + 1)) / T(2);
  return y;
}

template <typename T>
Tensor<T> temporal_pool2_backward(const Tensor<T>& dy) {
  const std::size_t d = dy.dim(0), J = dy.dim(1), h = dy.dim(2);
  Tensor<T> dx({d, J, 2 * h});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t s = 0; s < h; ++s) dx(i, j, 2 * s) = dx(i, j, 2 * s + 1) = dy(i, j, s) / T(2);
  return dx;
}

/// Per-time pose latent h* [d_p x t'] and its time average.
template <typename T>
struct PoseFeature {
  Tensor<T> h_star;
  Tensor<T> pooled;
};

/// Two adaptive graph-conv layers (3 -> 32 -> 64) with stride-2 temporal
/// pooling after each and a mean over joints.
template <typename T>
struct PoseBackbone {
  GraphConv<T> gc1, gc2;

  struct Cache {
    typename GraphConv<T>::Cache c1, c2;
    Shape pooled2_shape;
  };

  PoseBackbone() = default;
  PoseBackbone(const SkeletonTopology& topo, std::size_t hidden = 32, std::size_t d_p = 64)
      : gc1(3, hidden, topo.adjacency), gc2(hidden, d_p, topo.adjacency) {}

  std::size_t feature_dim() const { return gc2.d_out(); }

  void init(Rng& rng) {
    gc1.init(rng);
    gc2.init(rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    gc1.visit(prefix + ".gc1", f);
    gc2.visit(prefix + ".gc2", f);
  }

  PoseFeature<T> forward(const PoseSequence& p, Cache* cache) const {
    p.validate();
    const Tensor<T> x = p.coords.template cast<T>();
    Tensor<T> y1 = gc1.forward(x, cache ? &cache->c1 : nullptr);
    Tensor<T> y2 = gc2.forward(temporal_pool2(y1), cache ? &cache->c2 : nullptr);
    Tensor<T> p2 = temporal_pool2(y2);
    const std::size_t d = p2.dim(0), J = p2.dim(1), t = p2.dim(2);
    PoseFeature<T> out{Tensor<T>({d, t}), Tensor<T>({d})};
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t s = 0; s < t; ++s) {
        T acc = T(0);
        for (std::size_t j = 0; j < J; ++j) acc += p2(i, j, s);
        out.h_star(i, s) = acc / static_cast<T>(J);
      }
    out.pooled = channel_mean(out.h_star);
    if (cache) cache->pooled2_shape = p2.shape();
    return out;
  }

  /// Backward from dL/d pooled.
  void backward(const Cache& c, const Tensor<T>& dpooled) {
    const std::size_t d = c.pooled2_shape[0], J = c.pooled2_shape[1], t = c.pooled2_shape[2];
    Tensor<T> dp2(c.pooled2_shape);
    const T scale = T(1) / static_cast<T>(J * t);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t s = 0; s < t; ++s) dp2(i, j, s) = dpooled[i] * scale;
    Tensor<T> dp1 = gc2.backward(c.c2, temporal_pool2_backward(dp2));
    gc1.backward(c.c1, temporal_pool2_backward(dp1));
  }
};

/// Pose-only classifier: the feature-level distillation teacher.
template <typename T>
struct PoseTeacher {
  PoseBackbone<T> backbone;
  ClassifierHead<T> head;

  struct Cache {
    typename PoseBackbone<T>::Cache bb;
    typename ClassifierHead<T>::Cache head;
  };

  PoseTeacher() = default;
  PoseTeacher(const SkeletonTopology& topo, std::size_t classes, std::size_t hidden = 32, std::size_t d_p = 64)
      : backbone(topo, hidden, d_p), head(d_p, classes) {}

  void init(Rng& rng) {
    backbone.init(rng);
    head.init(rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    backbone.visit(prefix + ".backbone", f);
    head.visit(prefix + ".head", f);
  }

  std::pair<PoseFeature<T>, Tensor<T>> forward(const PoseSequence& p, Rng* dropout, Cache* cache) const {
    PoseFeature<T> feat = backbone.forward(p, cache ? &cache->bb : nullptr);
    Tensor<T> probs = head.forward(feat.pooled, dropout, cache ? &cache->head : nullptr);
    return {std::move(feat), std::move(probs)};
  }

  void backward_ce(const Cache& c, std::size_t label, T weight) {
    backbone.backward(c.bb, head.backward_ce(c.head, label, weight));
  }
};

// ---------------------------------------------------------------------------

struct VideoBackboneConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{16, 32, 64, 64};
  std::vector<std::array<std::size_t, 3>> pools{{2, 2, 2}, {2, 2, 2}, {1, 1, 1}, {1, 1, 1}};
  /// Standardize the clip (per-channel mean, global std) before the first conv.
  bool standardize_input = true;

  std::size_t out_channels() const { return channels.back(); }

  /// Feature-map shape [c, t, m, n] for a clip of T x H x W.
  Shape feature_shape(std::size_t T, std::size_t H, std::size_t W) const {
    for (const auto& p : pools) {
      if (T % p[0] || H % p[1] || W % p[2])
        throw ShapeError("clip " + std::to_string(T) + "x" + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by backbone pooling");
      T /= p[0];
      H /= p[1];
      W /= p[2];
    }
    return {out_channels(), T, H, W};
  }

  void validate() const {
    if (channels.empty() || channels.size() != pools.size())
      throw ConfigError("video backbone needs one pool window per conv block");
  }
};

/// Blocks of 3x3x3 conv + ReLU + max pooling.
template <typename T>
struct VideoBackbone {
  VideoBackboneConfig config;
  std::vector<Conv3d<T>> convs;
  std::vector<MaxPool3d<T>> pools;

  struct Cache {
    std::vector<typename Conv3d<T>::Cache> conv;
    std::vector<Tensor<T>> act;  // post-ReLU outputs
    std::vector<typename MaxPool3d<T>::Cache> pool;
    Tensor<T> input;  // standardized clip
    T inv_std = 1;
  };

  VideoBackbone() = default;
  explicit VideoBackbone(VideoBackboneConfig cfg) : config(std::move(cfg)) {
    config.validate();
    std::size_t in = config.in_channels;
    for (std::size_t b = 0; b < config.channels.size(); ++b) {
      convs.emplace_back(in, config.channels[b]);
      pools.push_back(MaxPool3d<T>{config.pools[b]});
      in = config.channels[b];
    }
  }

  void init(Rng& rng) {
    for (auto& c : convs) c.init_he(rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    for (std::size_t b = 0; b < convs.size(); ++b) convs[b].visit(prefix + ".conv" + std::to_string(b + 1), f);
  }

  Tensor<T> forward(const Tensor<T>& clip, Cache* cache) const {
    if (clip.rank() != 4 || clip.dim(0) != config.in_channels)
      throw ShapeError("video backbone expects " + std::to_string(config.in_channels) + " x T x H x W, got " +
                       shape_str(clip.shape()));
    config.feature_shape(clip.dim(1), clip.dim(2), clip.dim(3));
    if (cache) {
      cache->conv.assign(convs.size(), {});
      cache->act.assign(convs.size(), {});
      cache->pool.assign(convs.size(), {});
    }
    Tensor<T> x = clip;
    if (config.standardize_input) {
      auto st = standardize(clip);
      x = std::move(st.y);
      if (cache) {
        cache->input = x;
        cache->inv_std = st.inv_std;
      }
    }
    for (std::size_t b = 0; b < convs.size(); ++b) {
      x = convs[b].forward(x, cache ? &cache->conv[b] : nullptr);
      relu_inplace(x);
      if (pools[b].identity()) {
        if (cache) cache->act[b] = x;
        continue;
      }
      if (cache) cache->act[b] = x;
      x = pools[b].forward(x, cache ? &cache->pool[b] : nullptr);
    }
    return x;
  }

  Tensor<T> forward(const VideoClip& v, Cache* cache) const { return forward(v.frames.template cast<T>(), cache); }

  /// Returns dL/d clip when need_dx.
  Tensor<T> backward(const Cache& c, Tensor<T> df, bool need_dx = false) {
    for (std::size_t b = convs.size(); b-- > 0;) {
      if (!pools[b].identity()) df = pools[b].backward(c.pool[b], df);
      relu_backward_inplace(c.act[b], df);
      df = convs[b].backward(c.conv[b], df, need_dx || b > 0);
    }
    if (need_dx && config.standardize_input) df = standardize_backward(c.input, c.inv_std, df);
    return df;
  }

  /// Zero mean per channel and unit variance over the whole clip.
  struct Standardized {
    Tensor<T> y;
    T inv_std = 1;
  };

  static Standardized standardize(const Tensor<T>& x) {
    Standardized s{x, 1};
    const std::size_t C = x.dim(0), n = x.size() / C;
    T ss = 0;
    for (std::size_t c = 0; c < C; ++c) {
      T* p = s.y.data() + c * n;
      T mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += p[i];
      mean /= static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        p[i] -= mean;
        ss += p[i] * p[i];
      }
    }
    s.inv_std = T(1) / std::sqrt(ss / static_cast<T>(x.size()) + kStandardizeEps);
    s.y *= s.inv_std;
    return s;
  }

  static Tensor<T> standardize_backward(const Tensor<T>& y, T inv_std, const Tensor<T>& dy) {
    const std::size_t C = y.dim(0), n = y.size() / C, N = y.size();
    T proj = 0;
    for (std::size_t i = 0; i < N; ++i) proj += y[i] * dy[i];
    proj /= static_cast<T>(N);
    Tensor<T> dx(y.shape());
    for (std::size_t c = 0; c < C; ++c) {
      T mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += dy[c * n + i];
      mean /= static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = c * n + i;
        dx[k] = inv_std * (dy[k] - mean - y[k] * proj);
      }
    }
    return dx;
  }

  static constexpr T kStandardizeEps = T(1e-6);
};

}  // namespace vpnpp
