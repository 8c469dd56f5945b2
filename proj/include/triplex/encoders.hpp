#pragma once

#include <string>
#include <unordered_set>
#include <vector>

#include "triplex/nn.hpp"

namespace triplex {

enum class TokenRole { target, neighbor, global_view };

// A block of embedding tokens with its provenance in the pipeline.
template <typename T>
struct TokenMatrix {
  Tensor<T> tokens;  // (k, d)
  TokenRole role = TokenRole::target;

  // expected_rows: 49 for target, 25 for neighbor, the slide's spot count
  // for global tokens.
  static TokenMatrix checked(Tensor<T> tokens, TokenRole role, int64_t expected_rows) {
    if (tokens.rank() != 2 || tokens.dim(0) != expected_rows)
      throw ShapeError("tokens: shape " + shape_str(tokens.shape()) + " for role expecting " +
                       std::to_string(expected_rows) + " rows");
    if (!tokens.all_finite()) throw ValueError("tokens: non-finite values");
    return TokenMatrix{std::move(tokens), role};
  }
};

// Integer grid positions of the spots of one slide, already min-shifted so
// coordinates start at 0. h and w are the grid extents (max coordinate + 1).
struct GridCoordinates {
  std::vector<int64_t> grid_x, grid_y;
  int64_t h = 0, w = 0;

  static GridCoordinates from_points(const std::vector<int64_t>& xs,
                                     const std::vector<int64_t>& ys) {
    if (xs.size() != ys.size() || xs.empty())
      throw ValueError("grid: need matching non-empty coordinate lists");
    GridCoordinates g;
    g.grid_x = xs;
    g.grid_y = ys;
    std::unordered_set<int64_t> seen;
    for (size_t i = 0; i < xs.size(); ++i) {
      if (xs[i] < 0 || ys[i] < 0) throw ValueError("grid: negative coordinate");
      g.h = std::max(g.h, xs[i] + 1);
      g.w = std::max(g.w, ys[i] + 1);
    }
    for (size_t i = 0; i < xs.size(); ++i) {
      int64_t cell = xs[i] * g.w + ys[i];
      if (!seen.insert(cell).second)
        throw ValueError("grid: duplicate coordinate (" + std::to_string(xs[i]) + "," +
                         std::to_string(ys[i]) + ")");
    }
    return g;
  }

  std::vector<int64_t> cell_indices() const {
    std::vector<int64_t> idx(grid_x.size());
    for (size_t i = 0; i < grid_x.size(); ++i) idx[i] = grid_x[i] * w + grid_y[i];
    return idx;
  }

  int64_t count() const { return static_cast<int64_t>(grid_x.size()); }
};

// Architecture hyperparameters for the three encoder stacks and fusion.
// Stack 1 is fusion, stack 2 the global encoder, stack 3 the neighbor encoder.
struct EncoderConfig {
  int64_t d = 512;
  int64_t in_dim = 512;
  int depth1 = 1, depth2 = 3, depth3 = 3;
  int heads1 = 4, heads2 = 16, heads3 = 16;
  int mlp_ratio1 = 4, mlp_ratio2 = 4, mlp_ratio3 = 1;
  double dropout1 = 0.2, dropout2 = 0.1, dropout3 = 0.3;
  int apeg_kernel = 3;
  bool per_head_rel_bias = false;
  int neighbor_grid = 5;  // neighbor view is a neighbor_grid^2 tile layout
  int64_t target_tokens = 49;

  int64_t neighbor_tokens() const {
    return static_cast<int64_t>(neighbor_grid) * neighbor_grid;
  }

  void validate() const {
    if (depth1 < 1 || depth2 < 1 || depth3 < 1) throw ValueError("config: depths must be >= 1");
    if (d < 1 || in_dim < 1) throw ValueError("config: dims must be >= 1");
    if (d % heads1 || d % heads2 || d % heads3)
      throw ValueError("config: num_heads must divide d");
    if (apeg_kernel < 1 || apeg_kernel % 2 == 0)
      throw ValueError("config: apeg kernel must be odd");
  }
};

// Additive relative-position bias for tokens on a fixed side x side grid,
// indexed by coordinate offsets. A zero table reduces attention to vanilla
// scaled dot product.
template <typename T>
struct RelPosBias {
  Var<T> table;  // (heads or 1, (2*side-1)^2)
  std::vector<int64_t> pair_index;
  int64_t side = 0;

  static RelPosBias create(ParamStore<T>& ps, const std::string& prefix, int side, int heads,
                           bool per_head) {
    RelPosBias b;
    b.side = side;
    const int64_t span = 2 * side - 1;
    b.table = ps.create_zeros(prefix + ".rel_bias", {per_head ? heads : 1, span * span});
    const int64_t n = static_cast<int64_t>(side) * side;
    b.pair_index.resize(n * n);
    for (int64_t q = 0; q < n; ++q)
      for (int64_t k = 0; k < n; ++k) {
        const int64_t dr = q / side - k / side + side - 1;
        const int64_t dc = q % side - k % side + side - 1;
        b.pair_index[q * n + k] = dr * span + dc;
      }
    return b;
  }

  // (n, n) when shared, (heads, n, n) when per-head.
  Var<T> forward() const {
    const int64_t n = side * side;
    Var<T> g = gather_last(table, pair_index);
    if (table.shape()[0] == 1) return reshape(g, {n, n});
    return reshape(g, {table.shape()[0], n, n});
  }
};

// Position encoding for tokens on an irregular grid: tokens are spread to
// their grid cells (voids zero), convolved depthwise, the voids zeroed again,
// and the occupied cells gathered back and added to the input tokens.
// With an all-zero kernel this is exactly the identity.
template <typename T>
struct Apeg {
  Var<T> kernel;  // (d, 1, k, k), depthwise, no bias
  int64_t d = 0;
  int k = 3;

  static Apeg create(ParamStore<T>& ps, const std::string& prefix, int64_t d, int kernel,
                     Rng& rng) {
    Apeg a;
    a.d = d;
    a.k = kernel;
    a.kernel = ps.create_normal(prefix + ".conv", {d, 1, kernel, kernel}, rng);
    return a;
  }

  Var<T> forward(const Var<T>& tokens, const GridCoordinates& coords) const {
    const auto& ts = tokens.shape();
    if (ts.size() != 2 || ts[0] != coords.count() || ts[1] != d)
      throw ShapeError("apeg: shape " + shape_str(ts) + " vs " +
                       std::to_string(coords.count()) + " coords, d=" + std::to_string(d));
    const auto idx = coords.cell_indices();
    Var<T> dense = scatter_rows(tokens, idx, coords.h * coords.w);
    Var<T> grid = permute(reshape(dense, {coords.h, coords.w, d}), {2, 0, 1});
    Var<T> conved = conv2d(grid, kernel, /*stride=*/1, /*groups=*/static_cast<int>(d));
    Var<T> flat = reshape(permute(conved, {1, 2, 0}), {coords.h * coords.w, d});
    return add(tokens, gather_rows(flat, idx));
  }
};

// Target tokens: trainable projection with nonlinearity over pre-extracted
// per-patch features (the image-based trunk lives in ConvTrunk and feeds this
// same path). The activation must be smooth: finite-difference gradient
// checks at float precision cannot tolerate kinks.
template <typename T>
struct TargetEncoder {
  Linear<T> proj;

  static TargetEncoder create(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) {
    TargetEncoder e;
    e.proj = Linear<T>::create(ps, "target.proj", cfg.in_dim, cfg.d, rng);
    return e;
  }

  Var<T> forward(const Var<T>& features) const { return gelu(proj.forward(features)); }

  TokenMatrix<T> encode(const Tensor<T>& features) const {
    NoGradGuard ng;
    Tensor<T> out = forward(Var<T>::constant(features)).value();
    return TokenMatrix<T>::checked(std::move(out), TokenRole::target, features.dim(0));
  }
};

// Neighbor tokens: projection followed by self-attention blocks whose logits
// carry a learned relative-position bias over the tile grid.
template <typename T>
struct NeighborEncoder {
  Linear<T> proj;
  std::vector<TransformerBlock<T>> blocks;
  RelPosBias<T> rel_bias;
  LayerNorm<T> final_ln;

  static NeighborEncoder create(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) {
    NeighborEncoder e;
    e.proj = Linear<T>::create(ps, "neighbor.proj", cfg.in_dim, cfg.d, rng);
    e.rel_bias = RelPosBias<T>::create(ps, "neighbor", cfg.neighbor_grid, cfg.heads3,
                                       cfg.per_head_rel_bias);
    for (int i = 0; i < cfg.depth3; ++i)
      e.blocks.push_back(TransformerBlock<T>::create(ps, "neighbor.block" + std::to_string(i),
                                                     cfg.d, cfg.heads3, cfg.mlp_ratio3,
                                                     cfg.dropout3, rng));
    e.final_ln = LayerNorm<T>::create(ps, "neighbor.ln", cfg.d);
    return e;
  }

  Var<T> forward(const Var<T>& features, Rng& rng, bool training) const {
    Var<T> x = proj.forward(features);
    Var<T> bias = rel_bias.forward();
    for (const auto& b : blocks) x = b.forward(x, rng, training, &bias);
    return final_ln.forward(x);
  }

  TokenMatrix<T> encode(const Tensor<T>& features) const {
    NoGradGuard ng;
    Rng rng(0);
    Tensor<T> out = forward(Var<T>::constant(features), rng, false).value();
    return TokenMatrix<T>::checked(std::move(out), TokenRole::neighbor, features.dim(0));
  }
};

// Global tokens: projection, one transformer block, APEG, then the remaining
// blocks. Row i of the output is the global token of spot i.
template <typename T>
struct GlobalEncoder {
  Linear<T> proj;
  std::vector<TransformerBlock<T>> blocks;
  Apeg<T> apeg;
  LayerNorm<T> final_ln;

  static GlobalEncoder create(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) {
    GlobalEncoder e;
    e.proj = Linear<T>::create(ps, "global.proj", cfg.in_dim, cfg.d, rng);
    for (int i = 0; i < cfg.depth2; ++i)
      e.blocks.push_back(TransformerBlock<T>::create(ps, "global.block" + std::to_string(i),
                                                     cfg.d, cfg.heads2, cfg.mlp_ratio2,
                                                     cfg.dropout2, rng));
    e.apeg = Apeg<T>::create(ps, "global.apeg", cfg.d, cfg.apeg_kernel, rng);
    e.final_ln = LayerNorm<T>::create(ps, "global.ln", cfg.d);
    return e;
  }

  Var<T> forward(const Var<T>& features, const GridCoordinates& coords, Rng& rng,
                 bool training) const {
    Var<T> x = proj.forward(features);
    x = blocks[0].forward(x, rng, training);
    x = apeg.forward(x, coords);
    for (size_t i = 1; i < blocks.size(); ++i) x = blocks[i].forward(x, rng, training);
    return final_ln.forward(x);
  }

  TokenMatrix<T> encode(const Tensor<T>& features, const GridCoordinates& coords) const {
    NoGradGuard ng;
    Rng rng(0);
    Tensor<T> out = forward(Var<T>::constant(features), coords, rng, false).value();
    return TokenMatrix<T>::checked(std::move(out), TokenRole::global_view, coords.count());
  }
};

}  // namespace triplex
