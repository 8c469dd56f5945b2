#pragma once

#include <optional>

#include "triplex/encoders.hpp"
#include "triplex/extractor.hpp"
#include "triplex/fusion.hpp"

namespace triplex {

// The full multi-resolution prediction model: three encoders, cross-attention
// fusion, and four prediction heads over a shared parameter store.
template <typename T>
class TriplexModel {
 public:
  TriplexModel(EncoderConfig cfg, int64_t genes, uint64_t seed, bool image_trunk = false)
      : cfg_(cfg), genes_(genes) {
    cfg_.validate();
    if (genes_ < 1) throw ValueError("model: gene count must be >= 1");
    Rng rng(seed);
    if (image_trunk) trunk_ = ConvTrunk<T>::create(params_, "trunk", rng);
    target_ = TargetEncoder<T>::create(params_, cfg_, rng);
    neighbor_ = NeighborEncoder<T>::create(params_, cfg_, rng);
    global_ = GlobalEncoder<T>::create(params_, cfg_, rng);
    fusion_ = FusionModule<T>::create(params_, cfg_.d, cfg_.depth1, cfg_.heads1,
                                      cfg_.mlp_ratio1, cfg_.dropout1, rng);
    heads_ = PredictHeads<T>::create(params_, cfg_.d, genes_, rng);
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const EncoderConfig& config() const { return cfg_; }
  int64_t genes() const { return genes_; }
  bool has_image_trunk() const { return trunk_.has_value(); }
  const ConvTrunk<T>& trunk() const { return *trunk_; }
  const TargetEncoder<T>& target_encoder() const { return target_; }
  const NeighborEncoder<T>& neighbor_encoder() const { return neighbor_; }
  const GlobalEncoder<T>& global_encoder() const { return global_; }
  const FusionModule<T>& fusion() const { return fusion_; }
  const PredictHeads<T>& heads() const { return heads_; }

  // Global tokens for one slide: (n, in_dim) features -> (n, d).
  Var<T> encode_globals(const Tensor<T>& features, const GridCoordinates& coords, Rng& rng,
                        bool training) const {
    return global_.forward(Var<T>::constant(features), coords, rng, training);
  }

  struct SpotForward {
    Var<T> z_ta, z_ne, z_gl, z_gt, z_gn, z_gtn;
    typename PredictHeads<T>::Predictions pred;
  };

  // One spot given its slide's global tokens and per-spot feature blocks.
  // target_feats (49, in_dim), neighbor_feats (25, in_dim).
  SpotForward forward_spot(const Var<T>& global_tokens, int64_t row,
                           const Tensor<T>& target_feats, const Tensor<T>& neighbor_feats,
                           Rng& rng, bool training) const {
    SpotForward out;
    out.z_ta = target_.forward(Var<T>::constant(target_feats));
    out.z_ne = neighbor_.forward(Var<T>::constant(neighbor_feats), rng, training);
    out.z_gl = gather_rows(global_tokens, {row});
    auto fused = fusion_.forward(out.z_gl, out.z_ta, out.z_ne, rng, training);
    out.z_gt = fused.z_gt;
    out.z_gn = fused.z_gn;
    out.z_gtn = fused.z_gtn;
    out.pred = heads_.forward(out.z_ta, out.z_ne, out.z_gl, out.z_gtn);
    return out;
  }

  // Image-based variant: the target tokens come from the trainable trunk
  // instead of pre-extracted features. image (3, 224, 224) in [0,1].
  SpotForward forward_spot_image(const Var<T>& global_tokens, int64_t row,
                                 const Tensor<T>& image, const Tensor<T>& neighbor_feats,
                                 Rng& rng, bool training) const {
    if (!trunk_) throw ValueError("model: built without image trunk");
    SpotForward out;
    Var<T> raw = trunk_->forward_tokens(Var<T>::constant(image));
    out.z_ta = target_.forward(raw);
    out.z_ne = neighbor_.forward(Var<T>::constant(neighbor_feats), rng, training);
    out.z_gl = gather_rows(global_tokens, {row});
    auto fused = fusion_.forward(out.z_gl, out.z_ta, out.z_ne, rng, training);
    out.z_gt = fused.z_gt;
    out.z_gn = fused.z_gn;
    out.z_gtn = fused.z_gtn;
    out.pred = heads_.forward(out.z_ta, out.z_ne, out.z_gl, out.z_gtn);
    return out;
  }

  // Loss graph for one spot. labels (m). frozen_soft pins the distillation
  // target to a snapshot (finite-difference checks).
  Var<T> spot_loss(const SpotForward& fwd, const Tensor<T>& labels, double alpha,
                   const Tensor<T>* frozen_soft = nullptr) const {
    Var<T> y = Var<T>::constant(labels.reshaped({1, genes_}));
    if (frozen_soft) {
      Var<T> soft = Var<T>::constant(frozen_soft->reshaped({1, genes_}));
      return fusion_loss_graph<T>(fwd.pred, y, alpha, &soft);
    }
    return fusion_loss_graph<T>(fwd.pred, y, alpha);
  }

  // Value-level outputs for evaluation and prediction.
  FusionOutput<T> infer_spot(const Var<T>& global_tokens, int64_t row,
                             const Tensor<T>& target_feats, const Tensor<T>& neighbor_feats,
                             Rng& rng) const {
    NoGradGuard ng;
    auto fwd = forward_spot(global_tokens, row, target_feats, neighbor_feats, rng, false);
    FusionOutput<T> out;
    out.z_gt = fwd.z_gt.value();
    out.z_gn = fwd.z_gn.value();
    out.z_gtn = fwd.z_gtn.value();
    out.q_ta = fwd.pred.q_ta.value();
    out.q_ne = fwd.pred.q_ne.value();
    out.q_gl = fwd.pred.q_gl.value();
    out.q_f = fwd.pred.q_f.value();
    return out;
  }

 private:
  EncoderConfig cfg_;
  int64_t genes_;
  ParamStore<T> params_;
  std::optional<ConvTrunk<T>> trunk_;
  TargetEncoder<T> target_;
  NeighborEncoder<T> neighbor_;
  GlobalEncoder<T> global_;
  FusionModule<T> fusion_;
  PredictHeads<T> heads_;
};

}  // namespace triplex
