#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vqacl/attention.hpp"
#include "vqacl/ops.hpp"
#include "vqacl/tensor.hpp"

namespace vqacl {

// Cross-modal spatial transformer: two localization heads predict bounded
// scale/translation transforms from the two halves of the cross-modal
// feature, and the full feature map is resampled through each transform.

struct SpatialTransformerParams {
  Tensor loc1_w, loc1_b;  // C/2 -> 4 raw affine parameters
  Tensor loc2_w, loc2_b;
  double scale_max = 1.5;

  // Weights start at zero and the bias is chosen so the squashed transform
  // is the identity (s = 1, t = 0): epoch-0 sampling is a no-op.
  static SpatialTransformerParams init(int c, double scale_max = 1.5) {
    if (c % 2 != 0)
      throw std::invalid_argument("spatial transformer: odd channel count");
    if (!(scale_max > 1.0))
      throw std::invalid_argument("spatial transformer: scale_max must exceed 1");
    SpatialTransformerParams p;
    p.scale_max = scale_max;
    const int half = c / 2;
    const double scale_bias = std::log(1.0 / (scale_max - 1.0));
    p.loc1_w = Tensor({4, half});
    p.loc2_w = Tensor({4, half});
    p.loc1_b = Tensor({4}, {scale_bias, scale_bias, 0.0, 0.0});
    p.loc2_b = Tensor({4}, {scale_bias, scale_bias, 0.0, 0.0});
    return p;
  }

  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + "/loc1_w", &loc1_w);
    out.emplace_back(prefix + "/loc1_b", &loc1_b);
    out.emplace_back(prefix + "/loc2_w", &loc2_w);
    out.emplace_back(prefix + "/loc2_b", &loc2_b);
  }

  void watch_all(Tape& tape) {
    tape.watch(loc1_w);
    tape.watch(loc1_b);
    tape.watch(loc2_w);
    tape.watch(loc2_b);
  }
};

// Even channel split of the normalized cross-modal sum, order preserved.
inline std::pair<Tensor, Tensor> split_cross_modal(Tape& tape, const CrossModalProjection& proj) {
  const int c = proj.normalized_sum.dim(1);
  if (c % 2 != 0)
    throw std::invalid_argument("split_cross_modal: odd channel count " + std::to_string(c));
  return {slice_channels(tape, proj.normalized_sum, 0, c / 2),
          slice_channels(tape, proj.normalized_sum, c / 2, c)};
}

// affine parameters [s1, s2, tx, ty] = squash(FC(ReLU(global-average-pool(M))))
// with s in (0, scale_max] and t in [-1, 1]
inline Tensor localize(Tape& tape, const Tensor& half_feature, const Tensor& w, const Tensor& b,
                       double scale_max) {
  Tensor pooled = relu(tape, global_avg_pool(tape, half_feature));
  return squash_affine(tape, linear(tape, pooled, w, b), scale_max);
}

struct TransformedFeatures {
  Tensor first;   // N x C x H x W sampled through theta1
  Tensor second;  // N x C x H x W sampled through theta2
  Tensor theta1;  // N x 4
  Tensor theta2;  // N x 4
};

// split -> localize x2 -> affine grid x2 -> bilinear sampling of the full
// feature map through each grid. identity_forced bypasses the learned
// transforms (ablation mode).
inline TransformedFeatures transform_features(Tape& tape, const CrossModalProjection& proj,
                                              const Tensor& visual,
                                              const SpatialTransformerParams& params,
                                              bool identity_forced = false) {
  const int n = visual.dim(0), h = visual.dim(2), w = visual.dim(3);
  TransformedFeatures out;
  if (identity_forced) {
    Tensor identity({n, 4});
    double* d = identity.mutable_data();
    for (int i = 0; i < n; ++i) {
      d[i * 4 + 0] = 1.0;
      d[i * 4 + 1] = 1.0;
    }
    out.theta1 = identity;
    out.theta2 = identity;
    out.first = visual;
    out.second = visual;
    return out;
  }
  auto [m1, m2] = split_cross_modal(tape, proj);
  out.theta1 = localize(tape, m1, params.loc1_w, params.loc1_b, params.scale_max);
  out.theta2 = localize(tape, m2, params.loc2_w, params.loc2_b, params.scale_max);
  Tensor grid1 = affine_grid(tape, out.theta1, h, w);
  Tensor grid2 = affine_grid(tape, out.theta2, h, w);
  out.first = bilinear_sample(tape, visual, grid1);
  out.second = bilinear_sample(tape, visual, grid2);
  return out;
}

}  // namespace vqacl
