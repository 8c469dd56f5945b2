#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "triplex/fusion.hpp"
#include "triplex/model.hpp"

namespace triplex {

struct TrainConfig {
  double lr0 = 1e-4;
  int step_size = 50;
  double gamma = 0.9;
  int batch_size = 128;
  int max_epochs = 200;
  int patience = 20;
  uint64_t seed = 2021;
  double alpha = 0.5;

  void validate() const {
    if (lr0 <= 0) throw ValueError("train: lr0 must be positive");
    if (gamma <= 0 || gamma > 1) throw ValueError("train: gamma must be in (0,1]");
    if (step_size < 1) throw ValueError("train: step_size must be >= 1");
    if (batch_size < 1) throw ValueError("train: batch_size must be >= 1");
    if (patience > max_epochs) throw ValueError("train: patience must be <= max_epochs");
    if (alpha < 0 || alpha > 1) throw ValueError("train: alpha must be in [0,1]");
  }
};

// lr = lr0 * gamma^floor(epoch / step_size)
inline double lr_schedule(int epoch, double lr0 = 1e-4, int step_size = 50, double gamma = 0.9) {
  if (epoch < 0) throw ValueError("lr_schedule: epoch must be >= 0");
  return lr0 * std::pow(gamma, static_cast<double>(epoch / step_size));
}

// Standard bias-corrected Adam over a parameter store. Parameters that
// received no gradient this step are treated as having a zero gradient.
template <typename T>
class Adam {
 public:
  explicit Adam(const ParamStore<T>& ps, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(ps.size());
    v_.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
      m_.push_back(Tensor<T>::zeros(ps.at(i).second.value().shape()));
      v_.push_back(Tensor<T>::zeros(ps.at(i).second.value().shape()));
    }
  }

  int64_t step_count() const { return step_; }

  void step(ParamStore<T>& ps, double lr) {
    if (ps.size() != m_.size()) throw ValueError("adam: parameter count changed");
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (size_t i = 0; i < ps.size(); ++i) {
      const auto& [name, var] = ps.at(i);
      const Tensor<T>& value = var.value();
      const int64_t n = value.numel();
      Tensor<T> grad;
      if (var.has_grad()) {
        grad = var.grad();
        for (int64_t j = 0; j < n; ++j)
          if (!std::isfinite(static_cast<double>(grad.data()[j])))
            throw ValueError("adam: non-finite gradient for parameter " + name);
      } else {
        grad = Tensor<T>::zeros(value.shape());
      }
      Tensor<T> updated = value.clone();
      T* p = updated.data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const T* g = grad.data();
      const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
      const T ib1 = static_cast<T>(1.0 - beta1_), ib2 = static_cast<T>(1.0 - beta2_);
      const T lr_t = static_cast<T>(lr), eps_t = static_cast<T>(eps_);
      const T ibc1 = static_cast<T>(1.0 / bc1), ibc2 = static_cast<T>(1.0 / bc2);
      for (int64_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + ib1 * g[j];
        v[j] = b2 * v[j] + ib2 * g[j] * g[j];
        const T mhat = m[j] * ibc1;
        const T vhat = v[j] * ibc2;
        p[j] -= lr_t * mhat / (std::sqrt(vhat) + eps_t);
      }
      ps.at(i).second.set_value(std::move(updated));
    }
  }

 private:
  double beta1_, beta2_, eps_;
  int64_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Early stopping on a monitored score (higher is better). An epoch counts as
// an improvement only when it strictly exceeds the best seen.
struct EarlyStop {
  int patience;
  double best = -std::numeric_limits<double>::infinity();
  int epochs_since = 0;
  int best_epoch = -1;

  explicit EarlyStop(int patience_) : patience(patience_) {}

  // Returns true when training should stop after this epoch.
  bool update(double score, int epoch) {
    if (score > best) {
      best = score;
      best_epoch = epoch;
      epochs_since = 0;
    } else {
      ++epochs_since;
    }
    return epochs_since >= patience;
  }
};

// Training-ready view of one slide: per-spot feature blocks and labels.
template <typename T>
struct SlideTensors {
  std::string slide_id, patient_id;
  Tensor<T> global_features;             // (n, in_dim)
  std::vector<Tensor<T>> target_feats;   // n of (49, in_dim)
  std::vector<Tensor<T>> neighbor_feats; // n of (25, in_dim)
  Tensor<T> labels;                      // (n, m)
  GridCoordinates coords;
  std::vector<std::string> spot_ids;

  int64_t spots() const { return coords.count(); }
};

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  LossBreakdown mean_loss;
  double val_pcc_m = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {
template <typename T>
std::vector<T> row_of(const Tensor<T>& m, int64_t r) {
  const int64_t c = m.shape()[1];
  return std::vector<T>(m.data() + r * c, m.data() + (r + 1) * c);
}
}  // namespace detail

// One pass over the training slides in shuffled spot batches; one optimizer
// step per batch. The global encoder runs once per slide present in a batch
// and spot rows are gathered from it.
template <typename T>
EpochStats train_epoch(TriplexModel<T>& model, std::vector<SlideTensors<T>>& slides,
                       Adam<T>& opt, const TrainConfig& cfg, int epoch, Rng& rng) {
  int64_t total_spots = 0;
  for (const auto& s : slides) total_spots += s.spots();
  if (slides.empty() || total_spots == 0) throw ValueError("train: empty training set");

  std::vector<std::pair<int64_t, int64_t>> order;  // (slide, spot)
  order.reserve(total_spots);
  for (size_t si = 0; si < slides.size(); ++si)
    for (int64_t i = 0; i < slides[si].spots(); ++i)
      order.emplace_back(static_cast<int64_t>(si), i);
  rng.shuffle(order.begin(), order.end());

  const double lr = lr_schedule(epoch, cfg.lr0, cfg.step_size, cfg.gamma);
  LossBreakdown sum{};
  int64_t counted = 0;

  for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const size_t end = std::min(order.size(), start + cfg.batch_size);
    // Global tokens once per slide appearing in this batch.
    std::vector<Var<T>> slide_globals(slides.size());
    std::vector<bool> have_globals(slides.size(), false);
    Var<T> batch_loss;
    for (size_t b = start; b < end; ++b) {
      const auto [si, spot] = order[b];
      auto& sl = slides[si];
      if (!have_globals[si]) {
        slide_globals[si] = model.encode_globals(sl.global_features, sl.coords, rng, true);
        have_globals[si] = true;
      }
      auto fwd = model.forward_spot(slide_globals[si], spot, sl.target_feats[spot],
                                    sl.neighbor_feats[spot], rng, true);
      Tensor<T> y({1, sl.labels.shape()[1]}, detail::row_of(sl.labels, spot));
      Var<T> loss = model.spot_loss(fwd, y, cfg.alpha);
      {
        NoGradGuard ng;
        LossBreakdown bd = fusion_loss(
            detail::row_of(fwd.pred.q_ta.value(), 0), detail::row_of(fwd.pred.q_ne.value(), 0),
            detail::row_of(fwd.pred.q_gl.value(), 0), detail::row_of(fwd.pred.q_f.value(), 0),
            detail::row_of(y, 0), cfg.alpha);
        sum.l_ta += bd.l_ta;
        sum.l_ne += bd.l_ne;
        sum.l_gl += bd.l_gl;
        sum.l_f += bd.l_f;
        sum.total += bd.total;
        ++counted;
      }
      batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
    }
    batch_loss = scale(batch_loss, static_cast<T>(1.0 / static_cast<double>(end - start)));
    model.params().zero_grad();
    backward(batch_loss);
    opt.step(model.params(), lr);
  }

  EpochStats stats;
  stats.epoch = epoch;
  stats.lr = lr;
  stats.mean_loss.alpha = cfg.alpha;
  stats.mean_loss.l_ta = sum.l_ta / counted;
  stats.mean_loss.l_ne = sum.l_ne / counted;
  stats.mean_loss.l_gl = sum.l_gl / counted;
  stats.mean_loss.l_f = sum.l_f / counted;
  stats.mean_loss.total = sum.total / counted;
  return stats;
}

// Fusion-head predictions for every spot of one slide: (n, m).
template <typename T>
Tensor<T> predict_slide(const TriplexModel<T>& model, const SlideTensors<T>& slide, Rng& rng) {
  NoGradGuard ng;
  const int64_t n = slide.spots();
  const int64_t m = model.genes();
  Tensor<T> out({n, m});
  Var<T> globals = model.encode_globals(slide.global_features, slide.coords, rng, false);
  for (int64_t i = 0; i < n; ++i) {
    auto fwd =
        model.forward_spot(globals, i, slide.target_feats[i], slide.neighbor_feats[i], rng, false);
    const T* q = fwd.pred.q_f.value().data();
    std::copy(q, q + m, out.data() + i * m);
  }
  return out;
}

}  // namespace triplex
