#pragma once

#include <string>

#include "triplex/nn.hpp"

namespace triplex {

// Small convolutional trunk mapping a 224x224x3 image to a 7x7x512 feature
// map plus a pooled 512 vector: three stride-2 stages (224 -> 28), a 4x4
// average pool (28 -> 7), and a 1x1 projection to 512 channels.
template <typename T>
struct ConvTrunk {
  Var<T> w1, b1, w2, b2, w3, b3, wp, bp;

  static constexpr int64_t kImageSide = 224;
  static constexpr int64_t kMapSide = 7;
  static constexpr int64_t kFeatureDim = 512;

  static ConvTrunk create(ParamStore<T>& ps, const std::string& prefix, Rng& rng) {
    ConvTrunk t;
    t.w1 = ps.create_normal(prefix + ".conv1.w", {8, 3, 3, 3}, rng, 0.2);
    t.b1 = ps.create_zeros(prefix + ".conv1.b", {8});
    t.w2 = ps.create_normal(prefix + ".conv2.w", {16, 8, 3, 3}, rng, 0.1);
    t.b2 = ps.create_zeros(prefix + ".conv2.b", {16});
    t.w3 = ps.create_normal(prefix + ".conv3.w", {32, 16, 3, 3}, rng, 0.1);
    t.b3 = ps.create_zeros(prefix + ".conv3.b", {32});
    t.wp = ps.create_normal(prefix + ".proj.w", {kFeatureDim, 32, 1, 1}, rng, 0.1);
    t.bp = ps.create_zeros(prefix + ".proj.b", {kFeatureDim});
    return t;
  }

  // image (3, 224, 224) -> feature map (512, 7, 7)
  Var<T> forward_map(const Var<T>& image) const {
    const auto& s = image.shape();
    if (s != std::vector<int64_t>{3, kImageSide, kImageSide})
      throw ShapeError("trunk: expected (3,224,224), got " + shape_str(s));
    Var<T> x = relu(add_chan_bias(conv2d(image, w1, 2), b1));
    x = relu(add_chan_bias(conv2d(x, w2, 2), b2));
    x = relu(add_chan_bias(conv2d(x, w3, 2), b3));
    x = avg_pool2d(x, 4);
    return add_chan_bias(conv2d(x, wp, 1), bp);
  }

  // (512, 7, 7) -> (49, 512) row-major over the spatial grid
  static Var<T> map_to_tokens(const Var<T>& fmap) {
    return reshape(permute(fmap, {1, 2, 0}), {kMapSide * kMapSide, kFeatureDim});
  }

  Var<T> forward_tokens(const Var<T>& image) const { return map_to_tokens(forward_map(image)); }

  Var<T> forward_pooled(const Var<T>& image) const { return mean_rows(forward_tokens(image)); }
};

}  // namespace triplex
