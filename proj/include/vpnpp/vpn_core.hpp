#pragma once

// Pose-driven spatio-temporal attention: the coupler that turns a pose
// latent into a t x m x n attention map, residual feature modulation, the
// video/pose spatial embedding loss, the assembled video-pose teacher, and
// the student's non-local self-attention block.

#include <cmath>
#include <optional>
#include <string>

#include "vpnpp/backbones.hpp"

namespace vpnpp {

template <typename T>
struct AttentionFactors {
  Tensor<T> z1;  // spatial, m*n, softmax
  Tensor<T> z2;  // temporal, t, sigmoid
};

/// A[tau, i, j] = z2[tau] * z1[i*n + j].
template <typename T>
struct AttentionMap {
  Tensor<T> A;  // [t x m x n]
};

struct AttentionDims {
  std::size_t t = 4, m = 8, n = 8;
  std::size_t spatial() const { return m * n; }
  std::size_t positions() const { return t * m * n; }
};

/// Outer product of temporal and spatial factors, i.e. the Hadamard product
/// of the two inflated weight tensors.
template <typename T>
AttentionMap<T> couple(const AttentionFactors<T>& f, const AttentionDims& d) {
  if (f.z1.size() != d.spatial() || f.z2.size() != d.t) throw ShapeError("attention factors do not match dims");
  AttentionMap<T> a{Tensor<T>({d.t, d.m, d.n})};
  as_matrix(a.A, d.t).noalias() = as_vector(f.z2) * as_vector(f.z1).transpose();
  return a;
}

/// Spatio-temporal coupler: dense spatial stream (softmax over m*n) and
/// dense temporal stream (sigmoid per frame) on the time-pooled pose latent.
template <typename T>
struct Coupler {
  AttentionDims dims;
  Linear<T> spatial;
  Linear<T> temporal;

  struct Cache {
    Tensor<T> pooled;
    AttentionFactors<T> factors;
  };

  Coupler() = default;
  Coupler(std::size_t d_p, AttentionDims d) : dims(d), spatial(d_p, d.spatial()), temporal(d_p, d.t) {}

  void init(Rng& rng) {
    spatial.init(rng, 0.1 / std::sqrt(static_cast<double>(spatial.in_dim())));
    temporal.init(rng, 0.1 / std::sqrt(static_cast<double>(temporal.in_dim())));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    spatial.visit(prefix + ".spatial", f);
    temporal.visit(prefix + ".temporal", f);
  }

  std::pair<AttentionFactors<T>, AttentionMap<T>> forward(const PoseFeature<T>& h, const AttentionDims& target,
                                                         Cache* cache) const {
    if (target.t != dims.t || target.m != dims.m || target.n != dims.n)
      throw ShapeError("coupler built for " + std::to_string(dims.t) + "x" + std::to_string(dims.m) + "x" +
                       std::to_string(dims.n) + " feature maps");
    AttentionFactors<T> f{spatial.forward(h.pooled), temporal.forward(h.pooled)};
    softmax_inplace(f.z1.span());
    for (auto& v : f.z2.vec()) v = sigmoid(v);
    AttentionMap<T> a = couple(f, dims);
    if (cache) {
      cache->pooled = h.pooled;
      cache->factors = f;
    }
    return {std::move(f), std::move(a)};
  }

  /// Gradients w.r.t. A and (optionally) directly w.r.t. z1 and z2;
  /// returns dL/d pooled.
  Tensor<T> backward(const Cache& c, const Tensor<T>& dA, const Tensor<T>* dz1_extra, const Tensor<T>* dz2_extra) {
    const auto& z1 = c.factors.z1;
    const auto& z2 = c.factors.z2;
    Tensor<T> dz1({dims.spatial()}), dz2({dims.t});
    const auto dAm = as_matrix(dA, dims.t);
    as_vector(dz1).noalias() = dAm.transpose() * as_vector(z2);
    as_vector(dz2).noalias() = dAm * as_vector(z1);
    if (dz1_extra) dz1 += *dz1_extra;
    if (dz2_extra) dz2 += *dz2_extra;
    softmax_backward_inplace<T>(z1.span(), dz1.span());
    for (std::size_t i = 0; i < dz2.size(); ++i) dz2[i] *= z2[i] * (T(1) - z2[i]);
    Tensor<T> dp = spatial.backward(c.pooled, dz1);
    dp += temporal.backward(c.pooled, dz2);
    return dp;
  }
};

/// f'[k, tau, i, j] = f * A + f.
template <typename T>
Tensor<T> modulate(const Tensor<T>& f, const AttentionMap<T>& a) {
  if (f.rank() != 4 || a.A.rank() != 3 || f.dim(1) != a.A.dim(0) || f.dim(2) != a.A.dim(1) ||
      f.dim(3) != a.A.dim(2))
    throw ShapeError("attention map " + shape_str(a.A.shape()) + " does not match feature map " +
                     shape_str(f.shape()));
  Tensor<T> out(f.shape());
  const std::size_t c = f.dim(0), P = a.A.size();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < P; ++p) out[k * P + p] = f[k * P + p] * a.A[p] + f[k * P + p];
  return out;
}

/// Returns (dL/df, dL/dA).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> modulate_backward(const Tensor<T>& f, const AttentionMap<T>& a,
                                                  const Tensor<T>& dout) {
  Tensor<T> df(f.shape()), dA(a.A.shape());
  const std::size_t c = f.dim(0), P = a.A.size();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < P; ++p) {
      df[k * P + p] = dout[k * P + p] * (a.A[p] + T(1));
      dA[p] += dout[k * P + p] * f[k * P + p];
    }
  return {std::move(df), std::move(dA)};
}

/// Squared distance of unit vectors; lies in [0, 4].
template <typename T>
T unit_distance_sq(const Tensor<T>& u, const Tensor<T>& w) {
  if (u.size() != w.size()) throw ShapeError("embedding dimensions differ");
  T s = T(0);
  for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - w[i]) * (u[i] - w[i]);
  return s;
}

/// Projects the time-pooled feature map and the spatial attention vector
/// into a common space and compares them after L2 normalization.
template <typename T>
struct SpatialEmbedding {
  Linear<T> visual;  // c*m*n -> se_dim
  Linear<T> pose;    // m*n -> se_dim

  struct Cache {
    Tensor<T> v_in, u, w;
    T u_norm{}, w_norm{};
    Shape f_shape;
  };

  SpatialEmbedding() = default;
  SpatialEmbedding(std::size_t c, AttentionDims d, std::size_t se_dim = 32)
      : visual(c * d.spatial(), se_dim), pose(d.spatial(), se_dim) {}

  void init(Rng& rng) {
    visual.init(rng, 1.0 / std::sqrt(static_cast<double>(visual.in_dim())));
    pose.init(rng, 1.0 / std::sqrt(static_cast<double>(pose.in_dim())));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    visual.visit(prefix + ".visual", f);
    pose.visit(prefix + ".pose", f);
  }

  T forward(const Tensor<T>& f, const Tensor<T>& z1, Cache* cache) const {
    const std::size_t c = f.dim(0), t = f.dim(1), mn = f.dim(2) * f.dim(3);
    Tensor<T> v_in({c * mn});
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t tau = 0; tau < t; ++tau)
        for (std::size_t q = 0; q < mn; ++q) v_in[k * mn + q] += f[(k * t + tau) * mn + q] / static_cast<T>(t);
    T un{}, wn{};
    Tensor<T> u = l2_normalize(visual.forward(v_in), &un);
    Tensor<T> w = l2_normalize(pose.forward(z1), &wn);
    const T loss = unit_distance_sq(u, w);
    if (cache) *cache = Cache{std::move(v_in), std::move(u), std::move(w), un, wn, f.shape()};
    return loss;
  }

  /// Scales the loss gradient by `weight`; returns (dL/df, dL/dz1).
  std::pair<Tensor<T>, Tensor<T>> backward(const Cache& c, const Tensor<T>& z1, T weight) {
    Tensor<T> du(c.u.shape()), dw(c.w.shape());
    for (std::size_t i = 0; i < du.size(); ++i) {
      du[i] = weight * T(2) * (c.u[i] - c.w[i]);
      dw[i] = -du[i];
    }
    Tensor<T> dv_in = visual.backward(c.v_in, l2_normalize_backward(c.u, c.u_norm, du));
    Tensor<T> dz1 = pose.backward(z1, l2_normalize_backward(c.w, c.w_norm, dw));
    const std::size_t ch = c.f_shape[0], t = c.f_shape[1], mn = c.f_shape[2] * c.f_shape[3];
    Tensor<T> df(c.f_shape);
    for (std::size_t k = 0; k < ch; ++k)
      for (std::size_t tau = 0; tau < t; ++tau)
        for (std::size_t q = 0; q < mn; ++q) df[(k * t + tau) * mn + q] = dv_in[k * mn + q] / static_cast<T>(t);
    return {std::move(df), std::move(dz1)};
  }
};

// ---------------------------------------------------------------------------

struct VpnLossWeights {
  double entropy = 1.0;
  double embedding = 0.1;
  double attention_reg = 0.01;
  bool use_attention_reg = true;
};

template <typename T>
struct VpnOutput {
  AttentionFactors<T> factors;
  AttentionMap<T> attention;
  Tensor<T> modulated;
  Tensor<T> probs;
  std::optional<T> embedding_loss;
};

/// Video-pose network: video backbone features modulated by pose-driven
/// attention, classified from the global average of the modulated map.
/// Without the spatial embedding this is the attention-distillation teacher.
template <typename T>
struct VpnTeacher {
  VideoBackbone<T> video;
  PoseBackbone<T> pose;
  Coupler<T> coupler;
  SpatialEmbedding<T> embedding;
  ClassifierHead<T> head;
  AttentionDims dims;

  struct Cache {
    typename VideoBackbone<T>::Cache video;
    typename PoseBackbone<T>::Cache pose;
    typename Coupler<T>::Cache coupler;
    typename SpatialEmbedding<T>::Cache embedding;
    typename ClassifierHead<T>::Cache head;
    Tensor<T> f;
    AttentionMap<T> attention;
    Shape mod_shape;
    bool with_se = false;
  };

  VpnTeacher() = default;
  VpnTeacher(const VideoBackboneConfig& vcfg, const Shape& clip_shape, const SkeletonTopology& topo,
             std::size_t classes, std::size_t se_dim = 32)
      : video(vcfg), pose(topo) {
    const Shape fs = vcfg.feature_shape(clip_shape[1], clip_shape[2], clip_shape[3]);
    dims = {fs[1], fs[2], fs[3]};
    coupler = Coupler<T>(pose.feature_dim(), dims);
    embedding = SpatialEmbedding<T>(fs[0], dims, se_dim);
    head = ClassifierHead<T>(fs[0], classes);
  }

  void init(Rng& rng) {
    video.init(rng);
    pose.init(rng);
    coupler.init(rng);
    embedding.init(rng);
    head.init(rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    video.visit(prefix + ".video", f);
    pose.visit(prefix + ".pose", f);
    coupler.visit(prefix + ".stc", f);
    embedding.visit(prefix + ".se", f);
    head.visit(prefix + ".head", f);
  }

  VpnOutput<T> forward(const Tensor<T>& clip, const PoseSequence& p, bool with_se, Rng* dropout,
                       Cache* cache) const {
    Tensor<T> f = video.forward(clip, cache ? &cache->video : nullptr);
    PoseFeature<T> h = pose.forward(p, cache ? &cache->pose : nullptr);
    auto [factors, attention] = coupler.forward(h, {f.dim(1), f.dim(2), f.dim(3)}, cache ? &cache->coupler : nullptr);
    Tensor<T> fm = modulate(f, attention);
    VpnOutput<T> out;
    if (with_se) out.embedding_loss = embedding.forward(f, factors.z1, cache ? &cache->embedding : nullptr);
    out.probs = head.forward(channel_mean(fm), dropout, cache ? &cache->head : nullptr);
    out.factors = std::move(factors);
    out.attention = attention;
    out.modulated = std::move(fm);
    if (cache) {
      cache->f = std::move(f);
      cache->attention = std::move(attention);
      cache->mod_shape = out.modulated.shape();
      cache->with_se = with_se;
    }
    return out;
  }

  VpnOutput<T> forward(const VideoClip& v, const PoseSequence& p, bool with_se, Rng* dropout, Cache* cache) const {
    return forward(v.frames.template cast<T>(), p, with_se, dropout, cache);
  }

  /// Teacher objective value: weighted entropy + embedding + attention regularizer.
  static T objective(const VpnOutput<T>& o, std::size_t label, const VpnLossWeights& w) {
    T l = static_cast<T>(w.entropy) * cross_entropy(o.probs, label);
    if (o.embedding_loss) l += static_cast<T>(w.embedding) * *o.embedding_loss;
    if (w.use_attention_reg) {
      T s = T(0);
      for (T v : o.factors.z2.vec()) s += std::abs(v);
      l += static_cast<T>(w.attention_reg) * s;
    }
    return l;
  }

  /// Backward of `scale * objective`. Pass dz1/dz2 for extra gradient
  /// reaching the attention factors from outside (unused by the recipes).
  void backward(const Cache& c, std::size_t label, const VpnLossWeights& w, T scale) {
    Tensor<T> dpooled = head.backward_ce(c.head, label, scale * static_cast<T>(w.entropy));
    Tensor<T> dfm = channel_mean_backward(dpooled, c.mod_shape);
    auto [df, dA] = modulate_backward(c.f, c.attention, dfm);
    Tensor<T> dz1, dz2;
    const Tensor<T>* dz1p = nullptr;
    const Tensor<T>* dz2p = nullptr;
    if (c.with_se) {
      auto [df_se, dz1_se] = embedding.backward(c.embedding, c.coupler.factors.z1, scale * static_cast<T>(w.embedding));
      df += df_se;
      dz1 = std::move(dz1_se);
      dz1p = &dz1;
    }
    if (w.use_attention_reg) {
      dz2 = Tensor<T>(c.coupler.factors.z2.shape(), scale * static_cast<T>(w.attention_reg));  // z2 > 0
      dz2p = &dz2;
    }
    Tensor<T> dpose = coupler.backward(c.coupler, dA, dz1p, dz2p);
    pose.backward(c.pose, dpose);
    video.backward(c.video, std::move(df));
  }
};

// ---------------------------------------------------------------------------

/// Pairwise query->key weights over all t*m*n positions.
template <typename T>
struct StudentAttention {
  Tensor<T> weights;  // [P x P], rows sum to 1
  std::size_t d_qk = 0, d_v = 0;
};

/// Non-local block: 1x1x1 projections to Q, K (c/8) and V (c/2), row-softmax
/// of Q^T K / sqrt(d_qk), attention-weighted values restored to c channels
/// and added back to the input.
template <typename T>
struct SelfAttention {
  Param<T> wq, wk, wv, wo;

  struct Cache {
    Tensor<T> f, q, k, v, a, y;
  };

  SelfAttention() = default;
  explicit SelfAttention(std::size_t c)
      : wq({c / 8, c}), wk({c / 8, c}), wv({c / 2, c}), wo({c, c / 2}) {
    if (c < 8 || c % 8 != 0) throw ConfigError("self-attention needs channels divisible by 8");
  }

  std::size_t channels() const { return wq.value.dim(1); }
  std::size_t d_qk() const { return wq.value.dim(0); }
  std::size_t d_v() const { return wv.value.dim(0); }

  void init(Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(channels()));
    fill_normal(wq.value, rng, s);
    fill_normal(wk.value, rng, s);
    fill_normal(wv.value, rng, s);
    fill_normal(wo.value, rng, 0.1 / std::sqrt(static_cast<double>(d_v())));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".query", wq);
    f(prefix + ".key", wk);
    f(prefix + ".value", wv);
    f(prefix + ".restore", wo);
  }

  std::pair<StudentAttention<T>, Tensor<T>> forward(const Tensor<T>& f, Cache* cache) const {
    if (f.rank() != 4 || f.dim(0) != channels())
      throw ShapeError("self-attention expects " + std::to_string(channels()) + " channels, got " +
                       shape_str(f.shape()));
    const std::size_t c = channels();
    const std::size_t P = f.size() / c;
    const auto fm = as_matrix(f, c);
    Tensor<T> q({d_qk(), P}), k({d_qk(), P}), v({d_v(), P}), a({P, P}), y({d_v(), P});
    as_matrix(q, d_qk()).noalias() = as_matrix(wq.value, d_qk()) * fm;
    as_matrix(k, d_qk()).noalias() = as_matrix(wk.value, d_qk()) * fm;
    as_matrix(v, d_v()).noalias() = as_matrix(wv.value, d_v()) * fm;
    auto am = as_matrix(a, P);
    am.noalias() = as_matrix(q, d_qk()).transpose() * as_matrix(k, d_qk());
    am *= T(1) / std::sqrt(static_cast<T>(d_qk()));
    for (std::size_t p = 0; p < P; ++p) softmax_inplace(std::span<T>(a.data() + p * P, P));
    as_matrix(y, d_v()).noalias() = as_matrix(v, d_v()) * am.transpose();
    Tensor<T> out = f;
    as_matrix(out, c).noalias() += as_matrix(wo.value, c) * as_matrix(y, d_v());
    StudentAttention<T> att{a, d_qk(), d_v()};
    if (cache) *cache = Cache{f, std::move(q), std::move(k), std::move(v), std::move(a), std::move(y)};
    return {std::move(att), std::move(out)};
  }

  /// dout: gradient w.r.t. the block output; dA_extra: optional gradient
  /// reaching the attention weights directly. Returns dL/df.
  Tensor<T> backward(const Cache& c, const Tensor<T>& dout, const Tensor<T>* dA_extra) {
    const std::size_t ch = channels();
    const std::size_t P = c.f.size() / ch;
    const auto dom = as_matrix(dout, ch);
    as_matrix(wo.grad, ch).noalias() += dom * as_matrix(c.y, d_v()).transpose();
    RowMat<T> dy = as_matrix(wo.value, ch).transpose() * dom;  // d_v x P
    const auto am = as_matrix(c.a, P);
    RowMat<T> dv = dy * am;                                       // d_v x P
    RowMat<T> da = dy.transpose() * as_matrix(c.v, d_v());        // P x P
    if (dA_extra) da += as_matrix(*dA_extra, P);
    for (std::size_t p = 0; p < P; ++p)
      softmax_backward_inplace<T>(std::span<const T>(c.a.data() + p * P, P), std::span<T>(da.data() + p * P, P));
    da *= T(1) / std::sqrt(static_cast<T>(d_qk()));
    RowMat<T> dq = as_matrix(c.k, d_qk()) * da.transpose();  // d_qk x P
    RowMat<T> dk = as_matrix(c.q, d_qk()) * da;              // d_qk x P
    const auto fm = as_matrix(c.f, ch);
    as_matrix(wq.grad, d_qk()).noalias() += dq * fm.transpose();
    as_matrix(wk.grad, d_qk()).noalias() += dk * fm.transpose();
    as_matrix(wv.grad, d_v()).noalias() += dv * fm.transpose();
    Tensor<T> df = dout;
    auto dfm = as_matrix(df, ch);
    dfm.noalias() += as_matrix(wq.value, d_qk()).transpose() * dq;
    dfm.noalias() += as_matrix(wk.value, d_qk()).transpose() * dk;
    dfm.noalias() += as_matrix(wv.value, d_v()).transpose() * dv;
    return df;
  }
};

}  // namespace vpnpp
