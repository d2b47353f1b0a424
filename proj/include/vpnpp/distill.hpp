#pragma once

// Cross-modal distillation: video/pose pair batches, the supervised
// contrastive log-likelihood between pose-teacher features and student
// video embeddings, attention-map projections with their squared-distance
// loss, the combined training objective, and the RGB-only student.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vpnpp/vpn_core.hpp"

namespace vpnpp {

struct PairItem {
  std::size_t video_index = 0;  // into the manifest
  std::size_t pose_index = 0;
  std::size_t label = 0;        // label of the video
  std::size_t pose_label = 0;
  bool positive = true;
};

struct PairBatch {
  std::vector<PairItem> items;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  double M = 1.0;
};

/// Contrastive constant: negatives per positive over dataset size.
inline double default_nce_constant(std::size_t negatives_per_positive, std::size_t dataset_size) {
  if (dataset_size == 0) throw ConfigError("empty dataset");
  return static_cast<double>(std::max<std::size_t>(negatives_per_positive, 1)) / static_cast<double>(dataset_size);
}

/// For every positive (V_i, P_i), draws negatives (V_i, P_j) whose pose
/// comes from a class chosen uniformly among the other classes. Items are
/// grouped per positive: the positive first, then its negatives.
inline PairBatch build_pair_batch(const DatasetManifest& m, const std::vector<std::size_t>& positive_ids,
                                  std::size_t negatives_per_positive, std::uint64_t seed,
                                  std::optional<double> M_override = std::nullopt) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < m.samples.size(); ++i) by_class[m.samples[i].label].push_back(i);
  if (by_class.size() < 2) throw ConfigError("pair sampling needs at least two classes");
  PairBatch b;
  b.M = M_override ? *M_override : default_nce_constant(negatives_per_positive, m.samples.size());
  if (!(b.M > 0.0)) throw ConfigError("contrastive constant M must be positive");
  Rng rng = make_rng(seed, 0x70616972ull);
  for (std::size_t id : positive_ids) {
    if (id >= m.samples.size()) throw ConfigError("positive id out of range");
    const std::size_t label = m.samples[id].label;
    std::vector<std::size_t> others;
    for (const auto& [k, v] : by_class)
      if (k != label) others.push_back(k);
    b.items.push_back({id, id, label, label, true});
    ++b.positives;
    for (std::size_t n = 0; n < negatives_per_positive; ++n) {
      const std::size_t cls = others[uniform_index(rng, others.size())];
      const auto& pool = by_class[cls];
      const std::size_t j = pool[uniform_index(rng, pool.size())];
      b.items.push_back({id, j, label, cls, false});
      ++b.negatives;
    }
  }
  return b;
}

/// log(e^d / (e^d + M)), stable for any d.
template <typename T>
T log_pair_score(T d, T M) {
  const T lm = std::log(M);
  const T mx = std::max(d, lm);
  const T lse = mx + std::log(std::exp(d - mx) + std::exp(lm - mx));
  return d - lse;
}

/// log(M / (e^d + M)) = log(1 - score).
template <typename T>
T log_one_minus_pair_score(T d, T M) {
  return log_pair_score(d, M) - d + std::log(M);
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("dot of vectors with different dims");
  T s = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Video-pose embedding score e^d / (e^d + M), d = t_f . e_f, for unit inputs.
template <typename T>
T pair_score(const Tensor<T>& t_f, const Tensor<T>& e_f, T M) {
  if (!(M > T(0))) throw ConfigError("contrastive constant M must be positive");
  return std::exp(log_pair_score(dot(t_f, e_f), M));
}

/// Supervised contrastive log-likelihood:
///   (1/#pos) [ sum_pos log s(i,i) + sum_neg log(1 - s(j,i)) ].
/// teacher_feats keyed by pose index, student_embs keyed by video index;
/// both unit-normalized. When grads is non-null it receives dL/d e_f per
/// video index.
template <typename T>
T scd_loss(const PairBatch& b, const std::map<std::size_t, Tensor<T>>& teacher_feats,
           const std::map<std::size_t, Tensor<T>>& student_embs,
           std::map<std::size_t, Tensor<T>>* grads = nullptr) {
  if (b.items.empty() || b.positives == 0) throw ConfigError("empty pair batch");
  const T M = static_cast<T>(b.M);
  if (!(M > T(0))) throw ConfigError("contrastive constant M must be positive");
  const T lm = std::log(M);
  const T inv = T(1) / static_cast<T>(b.positives);
  T total = T(0);
  if (grads) grads->clear();
  for (const auto& it : b.items) {
    const Tensor<T>& tf = teacher_feats.at(it.pose_index);
    const Tensor<T>& ef = student_embs.at(it.video_index);
    const T d = dot(tf, ef);
    const T mx = std::max(d, lm);
    const T lse = mx + std::log(std::exp(d - mx) + std::exp(lm - mx));
    const T s = std::exp(d - lse);
    T dd;
    if (it.positive) {
      total += d - lse;
      dd = T(1) - s;
    } else {
      total += lm - lse;
      dd = -s;
    }
    if (grads) {
      auto [g, inserted] = grads->try_emplace(it.video_index, Tensor<T>(ef.shape()));
      for (std::size_t i = 0; i < tf.size(); ++i) g->second[i] += inv * dd * tf[i];
    }
  }
  return total * inv;
}

// ---------------------------------------------------------------------------
// Attention projections

/// Adaptive average pooling of a flat vector down to `out` bins.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out) {
  const std::size_t n = x.size();
  if (out == 0 || out > n) throw ShapeError("cannot pool " + std::to_string(n) + " values to " + std::to_string(out));
  Tensor<T> y({out});
  for (std::size_t b = 0; b < out; ++b) {
    const std::size_t lo = b * n / out, hi = ((b + 1) * n + out - 1) / out;
    T s = T(0);
    for (std::size_t i = lo; i < hi; ++i) s += x[i];
    y[b] = s / static_cast<T>(hi - lo);
  }
  return y;
}

/// Parameter-free teacher projection A_T -> unit vector of d_att.
template <typename T>
Tensor<T> project_teacher_attention(const AttentionMap<T>& a, std::size_t d_att) {
  Tensor<T> flat = a.A.reshaped({a.A.size()});
  if (flat.size() != d_att) flat = adaptive_avg_pool(flat, d_att);
  return l2_normalize(flat);
}

/// Attention received by each key position: column mean of row-stochastic A_s.
template <typename T>
Tensor<T> attention_saliency(const StudentAttention<T>& a) {
  const std::size_t P = a.weights.dim(0);
  Tensor<T> s({P});
  as_vector(s) = as_matrix(a.weights, P).colwise().mean().transpose();
  return s;
}

/// Learned student projection E_A: saliency -> d_att, then L2 normalization.
template <typename T>
struct AttentionProjection {
  Linear<T> map;

  struct Cache {
    Tensor<T> saliency, unit;
    T norm{};
  };

  AttentionProjection() = default;
  AttentionProjection(std::size_t positions, std::size_t d_att) : map(positions, d_att) {}

  void init(Rng& rng) { map.init(rng, 1.0 / std::sqrt(static_cast<double>(map.in_dim()))); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f) { map.visit(prefix, f); }

  Tensor<T> forward(const StudentAttention<T>& a, Cache* cache) const {
    Tensor<T> s = attention_saliency(a);
    // unit-mean saliency
    s *= static_cast<T>(s.size());
    T n{};
    Tensor<T> u = l2_normalize(map.forward(s), &n);
    if (cache) *cache = Cache{std::move(s), u, n};
    return u;
  }

  /// Returns dL/dA_s for a gradient on the unit output.
  Tensor<T> backward(const Cache& c, const Tensor<T>& du) {
    Tensor<T> ds = map.backward(c.saliency, l2_normalize_backward(c.unit, c.norm, du));
    const std::size_t P = ds.size();
    Tensor<T> dA({P, P});
    // s[q] = P * mean_p A[p, q] = sum_p A[p, q]
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t q = 0; q < P; ++q) dA(p, q) = ds[q];
    return dA;
  }
};

template <typename T>
Tensor<T> project_student_attention(const StudentAttention<T>& a, const AttentionProjection<T>& proj) {
  return proj.forward(a, nullptr);
}

template <typename T>
struct AttentionEmbeddings {
  Tensor<T> teacher_plus;
  Tensor<T> student;
};

/// ||A_T+ - E_A(A_S)||^2.
template <typename T>
T attention_distill_loss(const AttentionEmbeddings<T>& e) {
  if (e.teacher_plus.size() != e.student.size()) throw ShapeError("attention embeddings differ in dimension");
  return unit_distance_sq(e.teacher_plus, e.student);
}

/// Gradient w.r.t. the student side only; the teacher side is a constant.
template <typename T>
Tensor<T> attention_distill_grad(const AttentionEmbeddings<T>& e) {
  Tensor<T> g(e.student.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = T(2) * (e.student[i] - e.teacher_plus[i]);
  return g;
}

// ---------------------------------------------------------------------------

struct LossBundle {
  double L_C_S = 0, L_C_T = 0, L_SCD = 0, L_D = 0, L_e = 0;
  double alpha = 0, beta = 0;
  double total = 0;
};

/// L = L_C^S + L_C^T - alpha L_SCD + beta L_D. L_e is carried for reporting
/// but is not part of the sum.
inline LossBundle total_loss(double L_C_S, double L_C_T, double L_SCD, double L_D, double alpha, double beta,
                             double L_e = 0.0) {
  for (double v : {L_C_S, L_C_T, L_SCD, L_D, alpha, beta, L_e})
    if (!std::isfinite(v)) throw ConfigError("non-finite loss component");
  LossBundle b{L_C_S, L_C_T, L_SCD, L_D, L_e, alpha, beta, 0.0};
  b.total = L_C_S + L_C_T - alpha * L_SCD + beta * L_D;
  return b;
}

// ---------------------------------------------------------------------------

struct StudentConfig {
  std::size_t feat_dim = 64;
  std::size_t d_att = 256;
};

template <typename T>
struct StudentOutput {
  Tensor<T> features;  // f_S
  StudentAttention<T> attention;
  Tensor<T> probs;
  Tensor<T> feat_embedding;  // unit E_F(V)
  Tensor<T> att_embedding;   // unit E_A(A_S)
};

/// RGB-only student: video backbone, non-local block, classifier, plus the
/// E_F (features) and E_A (attention) projections used for distillation.
template <typename T>
struct Student {
  VideoBackbone<T> video;
  SelfAttention<T> attention;
  ClassifierHead<T> head;
  Linear<T> feat_proj;
  AttentionProjection<T> att_proj;

  struct Cache {
    typename VideoBackbone<T>::Cache video;
    typename SelfAttention<T>::Cache attention;
    typename ClassifierHead<T>::Cache head;
    typename AttentionProjection<T>::Cache att;
    Tensor<T> pooled_f;  // GAP(f_S)
    Tensor<T> feat_unit;
    T feat_norm{};
    Shape f_shape;
  };

  Student() = default;
  Student(const VideoBackboneConfig& vcfg, const Shape& clip_shape, std::size_t classes, StudentConfig scfg = {})
      : video(vcfg), attention(vcfg.out_channels()) {
    const Shape fs = vcfg.feature_shape(clip_shape[1], clip_shape[2], clip_shape[3]);
    const std::size_t P = fs[1] * fs[2] * fs[3];
    head = ClassifierHead<T>(fs[0], classes);
    feat_proj = Linear<T>(fs[0], scfg.feat_dim);
    att_proj = AttentionProjection<T>(P, scfg.d_att);
  }

  void init(Rng& rng) {
    video.init(rng);
    attention.init(rng);
    head.init(rng);
    feat_proj.init(rng, 1.0 / std::sqrt(static_cast<double>(feat_proj.in_dim())));
    att_proj.init(rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    video.visit(prefix + ".video", f);
    attention.visit(prefix + ".nonlocal", f);
    head.visit(prefix + ".head", f);
    feat_proj.visit(prefix + ".feat_proj", f);
    att_proj.visit(prefix + ".att_proj", f);
  }

  /// Classification-only forward (inference path).
  Tensor<T> classify(const Tensor<T>& clip) const {
    Tensor<T> f = video.forward(clip, nullptr);
    auto [att, fm] = attention.forward(f, nullptr);
    return head.forward(channel_mean(fm), nullptr, nullptr);
  }

  StudentOutput<T> forward(const Tensor<T>& clip, Rng* dropout, Cache* cache, bool with_embeddings = true) const {
    StudentOutput<T> out;
    out.features = video.forward(clip, cache ? &cache->video : nullptr);
    auto [att, fm] = attention.forward(out.features, cache ? &cache->attention : nullptr);
    out.probs = head.forward(channel_mean(fm), dropout, cache ? &cache->head : nullptr);
    Tensor<T> pooled = channel_mean(out.features);
    if (with_embeddings) {
      T n{};
      out.feat_embedding = l2_normalize(feat_proj.forward(pooled), &n);
      out.att_embedding = att_proj.forward(att, cache ? &cache->att : nullptr);
      if (cache) {
        cache->feat_unit = out.feat_embedding;
        cache->feat_norm = n;
      }
    }
    out.attention = std::move(att);
    if (cache) {
      cache->pooled_f = std::move(pooled);
      cache->f_shape = out.features.shape();
    }
    return out;
  }

  /// ce_weight scales -log p[label]; d_feat / d_att are gradients on the
  /// unit embeddings (null when that loss is off).
  void backward(const Cache& c, std::size_t label, T ce_weight, const Tensor<T>* d_feat, const Tensor<T>* d_att) {
    Tensor<T> dpooled_mod = head.backward_ce(c.head, label, ce_weight);
    Tensor<T> dfm = channel_mean_backward(dpooled_mod, c.f_shape);
    Tensor<T> dA;
    if (d_att) dA = att_proj.backward(c.att, *d_att);
    Tensor<T> df = attention.backward(c.attention, dfm, d_att ? &dA : nullptr);
    if (d_feat) {
      Tensor<T> dpool = feat_proj.backward(c.pooled_f, l2_normalize_backward(c.feat_unit, c.feat_norm, *d_feat));
      df += channel_mean_backward(dpool, c.f_shape);
    }
    video.backward(c.video, std::move(df));
  }
};

}  // namespace vpnpp
