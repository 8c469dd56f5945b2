#pragma once

#include <string>
#include <vector>

#include "triplex/nn.hpp"

namespace triplex {

// Cross-attention results for one spot plus the four prediction vectors.
template <typename T>
struct FusionOutput {
  Tensor<T> z_gt, z_gn, z_gtn;        // (1, d) each; z_gtn == z_gt + z_gn
  Tensor<T> q_ta, q_ne, q_gl, q_f;    // (1, m) each
};

// The four loss terms and their sum. total == l_ta + l_ne + l_gl + l_f.
struct LossBreakdown {
  double l_ta = 0, l_ne = 0, l_gl = 0, l_f = 0;
  double alpha = 0;
  double total = 0;
};

// Per-head loss: (1-alpha) * mean_k (q_k - y_k)^2 + alpha * mean_k (q_k - s_k)^2
// with s the soft target. The fusion head itself is scored against the labels
// only; the grand total is the sum of the four terms.
template <typename Scalar>
LossBreakdown fusion_loss(const std::vector<Scalar>& q_ta, const std::vector<Scalar>& q_ne,
                          const std::vector<Scalar>& q_gl, const std::vector<Scalar>& q_f,
                          const std::vector<Scalar>& y, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ValueError("fusion_loss: alpha must be in [0,1], got " + std::to_string(alpha));
  const size_t m = y.size();
  if (q_ta.size() != m || q_ne.size() != m || q_gl.size() != m || q_f.size() != m)
    throw ShapeError("fusion_loss: prediction length mismatch with labels (" +
                     std::to_string(m) + ")");
  auto head_loss = [&](const std::vector<Scalar>& q) {
    double hard = 0, soft = 0;
    for (size_t k = 0; k < m; ++k) {
      const double dh = static_cast<double>(q[k]) - static_cast<double>(y[k]);
      const double ds = static_cast<double>(q[k]) - static_cast<double>(q_f[k]);
      hard += dh * dh;
      soft += ds * ds;
    }
    return (1.0 - alpha) * hard / static_cast<double>(m) + alpha * soft / static_cast<double>(m);
  };
  LossBreakdown out;
  out.alpha = alpha;
  out.l_ta = head_loss(q_ta);
  out.l_ne = head_loss(q_ne);
  out.l_gl = head_loss(q_gl);
  double f = 0;
  for (size_t k = 0; k < m; ++k) {
    const double df = static_cast<double>(q_f[k]) - static_cast<double>(y[k]);
    f += df * df;
  }
  out.l_f = f / static_cast<double>(m);
  out.total = out.l_ta + out.l_ne + out.l_gl + out.l_f;
  return out;
}

// Cross-attention fusion: the per-spot global token queries the target tokens
// and, separately, the neighbor tokens; the fusion token is the sum of the two
// results. Target and neighbor tokens never attend to each other.
template <typename T>
struct FusionModule {
  std::vector<CrossAttentionBlock<T>> gt_blocks, gn_blocks;

  static FusionModule create(ParamStore<T>& ps, int64_t d, int depth, int heads, int mlp_ratio,
                             double dropout_rate, Rng& rng) {
    FusionModule f;
    for (int i = 0; i < depth; ++i) {
      f.gt_blocks.push_back(CrossAttentionBlock<T>::create(
          ps, "fusion.gt" + std::to_string(i), d, heads, mlp_ratio, dropout_rate, rng));
      f.gn_blocks.push_back(CrossAttentionBlock<T>::create(
          ps, "fusion.gn" + std::to_string(i), d, heads, mlp_ratio, dropout_rate, rng));
    }
    return f;
  }

  struct Fused {
    Var<T> z_gt, z_gn, z_gtn;  // (1, d) each
  };

  Fused forward(const Var<T>& z_gl_i, const Var<T>& z_ta, const Var<T>& z_ne, Rng& rng,
                bool training) const {
    if (z_gl_i.shape().size() != 2 || z_gl_i.shape()[0] != 1)
      throw ShapeError("fusion: query must be (1,d), got " + shape_str(z_gl_i.shape()));
    Fused out;
    out.z_gt = z_gl_i;
    for (const auto& b : gt_blocks) out.z_gt = b.forward(out.z_gt, z_ta, rng, training);
    out.z_gn = z_gl_i;
    for (const auto& b : gn_blocks) out.z_gn = b.forward(out.z_gn, z_ne, rng, training);
    out.z_gtn = add(out.z_gt, out.z_gn);
    return out;
  }
};

// The four fully-connected prediction heads. Target and neighbor tokens are
// average-pooled before their heads.
template <typename T>
struct PredictHeads {
  Linear<T> ta, ne, gl, fuse;

  static PredictHeads create(ParamStore<T>& ps, int64_t d, int64_t m, Rng& rng) {
    PredictHeads h;
    h.ta = Linear<T>::create(ps, "head.ta", d, m, rng);
    h.ne = Linear<T>::create(ps, "head.ne", d, m, rng);
    h.gl = Linear<T>::create(ps, "head.gl", d, m, rng);
    h.fuse = Linear<T>::create(ps, "head.f", d, m, rng);
    return h;
  }

  struct Predictions {
    Var<T> q_ta, q_ne, q_gl, q_f;  // (1, m) each
  };

  Predictions forward(const Var<T>& z_ta, const Var<T>& z_ne, const Var<T>& z_gl_i,
                      const Var<T>& z_gtn) const {
    Predictions p;
    p.q_ta = ta.forward(mean_rows(z_ta));
    p.q_ne = ne.forward(mean_rows(z_ne));
    p.q_gl = gl.forward(z_gl_i);
    p.q_f = fuse.forward(z_gtn);
    return p;
  }
};

// Graph-building counterpart of fusion_loss. Soft targets are detached so the
// distillation terms push the per-view heads toward the fusion head without a
// reverse gradient path. A caller running finite-difference checks can pin the
// soft target to a fixed snapshot via soft_override, which is the functional
// the optimizer actually descends.
template <typename T>
Var<T> fusion_loss_graph(const typename PredictHeads<T>::Predictions& p, const Var<T>& y,
                         double alpha, const Var<T>* soft_override = nullptr) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ValueError("fusion_loss: alpha must be in [0,1], got " + std::to_string(alpha));
  Var<T> soft = soft_override ? *soft_override : detach(p.q_f);
  auto head_term = [&](const Var<T>& q) {
    Var<T> hard = scale(mse(q, y), static_cast<T>(1.0 - alpha));
    Var<T> distill = scale(mse(q, soft), static_cast<T>(alpha));
    return add(hard, distill);
  };
  Var<T> total = add(head_term(p.q_ta), head_term(p.q_ne));
  total = add(total, head_term(p.q_gl));
  return add(total, mse(p.q_f, y));
}

}  // namespace triplex
