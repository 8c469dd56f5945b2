#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "triplex/autodiff.hpp"

namespace triplex {

// Named trainable leaves in registration order. Ordering is part of the
// checkpoint format and of run determinism, so no unordered containers.
template <typename T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, std::vector<int64_t> shape,
                const std::function<T()>& init) {
    if (index_.count(name)) throw ValueError("param: duplicate name " + name);
    Tensor<T> t(shape);
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = init();
    Var<T> v = Var<T>::leaf(std::move(t), true);
    index_[name] = params_.size();
    params_.emplace_back(name, v);
    return v;
  }

  Var<T> create_zeros(const std::string& name, std::vector<int64_t> shape) {
    return create(name, std::move(shape), [] { return T(0); });
  }

  Var<T> create_const(const std::string& name, std::vector<int64_t> shape, T v) {
    return create(name, std::move(shape), [v] { return v; });
  }

  Var<T> create_normal(const std::string& name, std::vector<int64_t> shape, Rng& rng,
                       double stddev = 0.02) {
    return create(name, std::move(shape),
                  [&rng, stddev] { return static_cast<T>(rng.normal(0.0, stddev)); });
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("param: unknown name " + name);
    return params_[it->second].second;
  }

  size_t size() const { return params_.size(); }
  const std::pair<std::string, Var<T>>& at(size_t i) const { return params_[i]; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, v] : params_) n += v.value().numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, v] : params_) v.zero_grad();
  }

  std::vector<std::pair<std::string, Tensor<T>>> gradients() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.reserve(params_.size());
    for (const auto& [name, v] : params_)
      if (v.has_grad()) out.emplace_back(name, v.grad());
    return out;
  }

  // Copy of all current values, e.g. for best-checkpoint retention.
  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> out;
    out.reserve(params_.size());
    for (const auto& [name, v] : params_) out.push_back(v.value().clone());
    return out;
  }

  void restore(const std::vector<Tensor<T>>& snap) {
    if (snap.size() != params_.size()) throw ValueError("restore: parameter count mismatch");
    for (size_t i = 0; i < snap.size(); ++i) params_[i].second.set_value(snap[i].clone());
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, size_t> index_;
};

template <typename T>
struct Linear {
  Var<T> w, b;  // w (in, out), b (out)

  static Linear create(ParamStore<T>& ps, const std::string& prefix, int64_t in, int64_t out,
                       Rng& rng) {
    Linear l;
    l.w = ps.create_normal(prefix + ".w", {in, out}, rng);
    l.b = ps.create_zeros(prefix + ".b", {out});
    return l;
  }

  Var<T> forward(const Var<T>& x) const { return add_rowvec(matmul(x, w), b); }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma, beta;

  static LayerNorm create(ParamStore<T>& ps, const std::string& prefix, int64_t d) {
    LayerNorm ln;
    ln.gamma = ps.create_const(prefix + ".g", {d}, T(1));
    ln.beta = ps.create_zeros(prefix + ".b", {d});
    return ln;
  }

  Var<T> forward(const Var<T>& x) const { return layer_norm_last(x, gamma, beta); }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp create(ParamStore<T>& ps, const std::string& prefix, int64_t d, int64_t hidden,
                    Rng& rng) {
    Mlp m;
    m.fc1 = Linear<T>::create(ps, prefix + ".fc1", d, hidden, rng);
    m.fc2 = Linear<T>::create(ps, prefix + ".fc2", hidden, d, rng);
    return m;
  }

  Var<T> forward(const Var<T>& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

// Scaled dot-product attention with separate query and key/value sequences.
// An optional additive bias on the attention logits carries relative position
// information; shape (nq, nk) shared across heads or (heads, nq, nk) per head.
template <typename T>
struct MultiHeadAttention {
  Linear<T> q_proj, k_proj, v_proj, out_proj;
  int heads = 1;
  int64_t d = 0;

  static MultiHeadAttention create(ParamStore<T>& ps, const std::string& prefix, int64_t d,
                                   int heads, Rng& rng) {
    if (d % heads != 0)
      throw ValueError("attention: heads " + std::to_string(heads) + " must divide d " +
                       std::to_string(d));
    MultiHeadAttention a;
    a.heads = heads;
    a.d = d;
    a.q_proj = Linear<T>::create(ps, prefix + ".q", d, d, rng);
    a.k_proj = Linear<T>::create(ps, prefix + ".k", d, d, rng);
    a.v_proj = Linear<T>::create(ps, prefix + ".v", d, d, rng);
    a.out_proj = Linear<T>::create(ps, prefix + ".o", d, d, rng);
    return a;
  }

  // q_in (nq, d), kv_in (nk, d) -> (nq, d)
  Var<T> forward(const Var<T>& q_in, const Var<T>& kv_in, const Var<T>* logit_bias = nullptr) const {
    const int64_t nq = q_in.shape()[0];
    const int64_t nk = kv_in.shape()[0];
    const int64_t dh = d / heads;
    auto split = [&](const Var<T>& x, int64_t n) {
      // (n, d) -> (heads, n, dh)
      return permute(reshape(x, {n, heads, dh}), {1, 0, 2});
    };
    Var<T> q = split(q_proj.forward(q_in), nq);
    Var<T> k = split(k_proj.forward(kv_in), nk);
    Var<T> v = split(v_proj.forward(kv_in), nk);
    Var<T> scores = scale(bmm(q, permute(k, {0, 2, 1})),
                          static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    if (logit_bias) {
      if (logit_bias->shape().size() == 2)
        scores = add_bcast0(scores, *logit_bias);
      else
        scores = add(scores, *logit_bias);
    }
    Var<T> attn = softmax_last(scores);
    Var<T> ctx = bmm(attn, v);  // (heads, nq, dh)
    Var<T> merged = reshape(permute(ctx, {1, 0, 2}), {nq, d});
    return out_proj.forward(merged);
  }

  // Attention weights for inspection/tests: (heads, nq, nk), no projection of V.
  Tensor<T> attention_weights(const Var<T>& q_in, const Var<T>& kv_in,
                              const Var<T>* logit_bias = nullptr) const {
    NoGradGuard ng;
    const int64_t nq = q_in.shape()[0];
    const int64_t nk = kv_in.shape()[0];
    const int64_t dh = d / heads;
    Var<T> q = permute(reshape(q_proj.forward(q_in), {nq, heads, dh}), {1, 0, 2});
    Var<T> k = permute(reshape(k_proj.forward(kv_in), {nk, heads, dh}), {1, 0, 2});
    Var<T> scores = scale(bmm(q, permute(k, {0, 2, 1})),
                          static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    if (logit_bias) {
      if (logit_bias->shape().size() == 2)
        scores = add_bcast0(scores, *logit_bias);
      else
        scores = add(scores, *logit_bias);
    }
    return softmax_last(scores).value();
  }
};

// Pre-norm transformer block: x += Attn(LN(x)); x += MLP(LN(x)).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;
  double drop = 0.0;

  static TransformerBlock create(ParamStore<T>& ps, const std::string& prefix, int64_t d,
                                 int heads, int mlp_ratio, double dropout_rate, Rng& rng) {
    TransformerBlock b;
    b.ln1 = LayerNorm<T>::create(ps, prefix + ".ln1", d);
    b.ln2 = LayerNorm<T>::create(ps, prefix + ".ln2", d);
    b.attn = MultiHeadAttention<T>::create(ps, prefix + ".attn", d, heads, rng);
    b.mlp = Mlp<T>::create(ps, prefix + ".mlp", d, d * mlp_ratio, rng);
    b.drop = dropout_rate;
    return b;
  }

  Var<T> forward(const Var<T>& x, Rng& rng, bool training,
                 const Var<T>* logit_bias = nullptr) const {
    Var<T> normed = ln1.forward(x);
    Var<T> h = add(x, dropout(attn.forward(normed, normed, logit_bias), drop, rng, training));
    return add(h, dropout(mlp.forward(ln2.forward(h)), drop, rng, training));
  }
};

// Pre-norm cross-attention block: q += Attn(LN(q), kv); q += MLP(LN(q)).
// Keys/values come from another token set and are used as given.
template <typename T>
struct CrossAttentionBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;
  double drop = 0.0;

  static CrossAttentionBlock create(ParamStore<T>& ps, const std::string& prefix, int64_t d,
                                    int heads, int mlp_ratio, double dropout_rate, Rng& rng) {
    CrossAttentionBlock b;
    b.ln1 = LayerNorm<T>::create(ps, prefix + ".ln1", d);
    b.ln2 = LayerNorm<T>::create(ps, prefix + ".ln2", d);
    b.attn = MultiHeadAttention<T>::create(ps, prefix + ".attn", d, heads, rng);
    b.mlp = Mlp<T>::create(ps, prefix + ".mlp", d, d * mlp_ratio, rng);
    b.drop = dropout_rate;
    return b;
  }

  Var<T> forward(const Var<T>& query, const Var<T>& kv, Rng& rng, bool training) const {
    Var<T> h = add(query, dropout(attn.forward(ln1.forward(query), kv), drop, rng, training));
    return add(h, dropout(mlp.forward(ln2.forward(h)), drop, rng, training));
  }
};

}  // namespace triplex
