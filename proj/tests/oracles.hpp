#pragma once

// Reference implementations and finite-difference checking shared by the
// unit tests and the acceptance binary.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "vpnpp/trainer.hpp"

namespace vpnpp::oracle {

/// A value whose analytic gradient lives in `grad` once `analytic` ran.
struct Probe {
  std::string name;
  Tensor<double>* value;
  const Tensor<double>* grad;
};

struct FdResult {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares analytic gradients against central differences on up to
/// `per_probe` random entries of every probe.
inline FdResult finite_difference(const std::vector<Probe>& probes, const std::function<double()>& loss,
                                  const std::function<void()>& analytic, std::uint64_t seed = 7,
                                  std::size_t per_probe = 24, double h = 1e-5) {
  analytic();
  std::vector<Tensor<double>> grads;
  for (const auto& p : probes) grads.push_back(*p.grad);
  Rng rng = make_rng(seed, 99);
  FdResult r;
  for (std::size_t k = 0; k < probes.size(); ++k) {
    Tensor<double>& v = *probes[k].value;
    const std::size_t n = v.size();
    std::vector<std::size_t> idx;
    if (n <= per_probe) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < per_probe; ++i) idx.push_back(uniform_index(rng, n));
    }
    for (std::size_t i : idx) {
      const double keep = v[i];
      v[i] = keep + h;
      const double lp = loss();
      v[i] = keep - h;
      const double lm = loss();
      v[i] = keep;
      const double num = (lp - lm) / (2 * h);
      const double ana = grads[k][i];
      const double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
      ++r.checked;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = probes[k].name + "[" + std::to_string(i) + "] analytic=" + std::to_string(ana) +
                  " numeric=" + std::to_string(num);
      }
    }
  }
  return r;
}

inline void add_params(std::vector<Probe>& out, const std::string& prefix,
                       const std::function<void(const ParamVisitor<double>&)>& visit) {
  visit([&](const std::string& name, Param<double>& p) { out.push_back({prefix + name, &p.value, &p.grad}); });
}

inline void zero_grads(const std::function<void(const ParamVisitor<double>&)>& visit) {
  visit([](const std::string&, Param<double>& p) { p.zero_grad(); });
}

template <typename T>
Tensor<T> random_tensor(const Shape& s, Rng& rng, double stddev = 1.0, double mean = 0.0) {
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = static_cast<T>(mean + stddev * normal(rng));
  return t;
}

template <typename T>
Tensor<T> random_unit(std::size_t n, Rng& rng) {
  return l2_normalize(random_tensor<T>({n}, rng));
}

/// Per-pair loop over the contrastive log-likelihood, in long double.
inline long double scd_loss_naive(const PairBatch& b, const std::map<std::size_t, Tensor<double>>& tf,
                                  const std::map<std::size_t, Tensor<double>>& ef) {
  long double sum = 0;
  for (const auto& it : b.items) {
    long double d = 0;
    const auto& t = tf.at(it.pose_index);
    const auto& e = ef.at(it.video_index);
    for (std::size_t i = 0; i < t.size(); ++i) d += static_cast<long double>(t[i]) * e[i];
    const long double s = std::exp(d) / (std::exp(d) + static_cast<long double>(b.M));
    sum += it.positive ? std::log(s) : std::log(1.0L - s);
  }
  return sum / static_cast<long double>(b.positives);
}

/// A[tau, i, j] = z2[tau] * z1[i*n + j] by explicit loops.
inline Tensor<double> couple_naive(const Tensor<double>& z1, const Tensor<double>& z2, const AttentionDims& d) {
  Tensor<double> A({d.t, d.m, d.n});
  for (std::size_t tau = 0; tau < d.t; ++tau)
    for (std::size_t i = 0; i < d.m; ++i)
      for (std::size_t j = 0; j < d.n; ++j) A(tau, i, j) = z2[tau] * z1[i * d.n + j];
  return A;
}

/// Non-local block by explicit pairwise loops: returns (A_s, output).
inline std::pair<Tensor<double>, Tensor<double>> self_attention_naive(const SelfAttention<double>& sa,
                                                                      const Tensor<double>& f) {
  const std::size_t c = f.dim(0), P = f.size() / c, dq = sa.d_qk(), dv = sa.d_v();
  auto proj = [&](const Tensor<double>& w, std::size_t rows) {
    Tensor<double> out({rows, P});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t p = 0; p < P; ++p) {
        double s = 0;
        for (std::size_t k = 0; k < c; ++k) s += w(r, k) * f[k * P + p];
        out(r, p) = s;
      }
    return out;
  };
  const Tensor<double> q = proj(sa.wq.value, dq), k = proj(sa.wk.value, dq), v = proj(sa.wv.value, dv);
  Tensor<double> A({P, P});
  for (std::size_t p = 0; p < P; ++p) {
    double mx = -1e300;
    for (std::size_t r = 0; r < P; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < dq; ++i) s += q(i, p) * k(i, r);
      A(p, r) = s / std::sqrt(static_cast<double>(dq));
      mx = std::max(mx, A(p, r));
    }
    double z = 0;
    for (std::size_t r = 0; r < P; ++r) z += (A(p, r) = std::exp(A(p, r) - mx));
    for (std::size_t r = 0; r < P; ++r) A(p, r) /= z;
  }
  Tensor<double> out = f;
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t i = 0; i < dv; ++i) {
        double y = 0;
        for (std::size_t r = 0; r < P; ++r) y += A(p, r) * v(i, r);
        s += sa.wo.value(ch, i) * y;
      }
      out[ch * P + p] += s;
    }
  return {A, out};
}

/// Graph convolution from dense loops: aggregation, channel mix, temporal
/// kernel, bias, optional ReLU.
inline Tensor<double> graph_conv_naive(const GraphConv<double>& g, const Tensor<double>& x) {
  const std::size_t di = g.d_in(), dout = g.d_out(), J = g.joints(), t = x.dim(2);
  Tensor<double> agg({di, J, t});
  for (std::size_t i = 0; i < di; ++i)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t tau = 0; tau < t; ++tau) {
        double s = 0;
        for (std::size_t k = 0; k < J; ++k) s += (g.adj_norm(j, k) + g.offset.value(j, k)) * x(i, k, tau);
        agg(i, j, tau) = s;
      }
  Tensor<double> y1({dout, J, t});
  for (std::size_t o = 0; o < dout; ++o)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t tau = 0; tau < t; ++tau) {
        double s = 0;
        for (std::size_t i = 0; i < di; ++i) s += g.weight.value(o, i) * agg(i, j, tau);
        y1(o, j, tau) = s;
      }
  Tensor<double> out({dout, J, t});
  for (std::size_t o = 0; o < dout; ++o)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t tau = 0; tau < t; ++tau) {
        double s = g.bias.value[o];
        for (std::size_t i = 0; i < dout; ++i)
          for (std::size_t k = 0; k < 3; ++k) {
            const long src = static_cast<long>(tau) + static_cast<long>(k) - 1;
            if (src >= 0 && src < static_cast<long>(t)) s += g.temporal.value(o, i * 3 + k) * y1(i, j, src);
          }
        out(o, j, tau) = g.apply_relu ? std::max(s, 0.0) : s;
      }
  return out;
}

/// Direct 3x3x3 zero-padded convolution.
inline Tensor<double> conv3d_naive(const Conv3d<double>& conv, const Tensor<double>& x) {
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3), O = conv.out_ch();
  Tensor<double> y({O, D, H, W});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          double s = conv.bias.value[o];
          for (std::size_t c = 0; c < C; ++c)
            for (int a = 0; a < 3; ++a)
              for (int b = 0; b < 3; ++b)
                for (int e = 0; e < 3; ++e) {
                  const long sd = static_cast<long>(d) + a - 1, sh = static_cast<long>(h) + b - 1,
                             sw = static_cast<long>(w) + e - 1;
                  if (sd < 0 || sh < 0 || sw < 0 || sd >= static_cast<long>(D) || sh >= static_cast<long>(H) ||
                      sw >= static_cast<long>(W))
                    continue;
                  s += conv.weight.value(o, c * 27 + static_cast<std::size_t>(a * 9 + b * 3 + e)) *
                       x(c, static_cast<std::size_t>(sd), static_cast<std::size_t>(sh), static_cast<std::size_t>(sw));
                }
          y(o, d, h, w) = s;
        }
  return y;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  a.require_same(b);
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Second singular value of the t x (m*n) unfolding of A.
inline double second_singular_value(const Tensor<double>& A) {
  const auto m = as_matrix(A, A.dim(0));
  Eigen::JacobiSVD<RowMat<double>> svd(m);
  const auto& s = svd.singularValues();
  return s.size() > 1 ? s[1] : 0.0;
}

// ---------------------------------------------------------------------------
// Toy shapes for gradient checks: c = 8, t = 2, m = n = 3, J = 5.

inline constexpr std::size_t kToyC = 8, kToyT = 2, kToyM = 3, kToyN = 3, kToyJ = 5;

inline AttentionDims toy_dims() { return {kToyT, kToyM, kToyN}; }

/// Clip [3 x 4 x 6 x 6] -> feature map [8 x 2 x 3 x 3].
inline VideoBackboneConfig toy_video_config() {
  VideoBackboneConfig v;
  v.in_channels = 3;
  v.channels = {kToyC};
  v.pools = {{2, 2, 2}};
  return v;
}

inline Shape toy_clip_shape() { return {3, 4, 6, 6}; }

/// Fresh scratch directory under the system temp dir, removed on scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("vpnpp_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline PoseSequence random_pose(std::size_t J, std::size_t t_p, Rng& rng) {
  PoseSequence p{random_tensor<float>({3, J, t_p}, rng, 0.5)};
  return p;
}

}  // namespace vpnpp::oracle
