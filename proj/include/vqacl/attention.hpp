#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vqacl/encoders.hpp"
#include "vqacl/ops.hpp"
#include "vqacl/tensor.hpp"

namespace vqacl {

// Cross-modal global attention: the question vector steers soft attention
// over every spatial location of the visual feature map.

struct CrossAttentionParams {
  Tensor proj_conv_w, proj_conv_b;    // 1x1 conv C_in -> C
  Tensor proj_fc_w, proj_fc_b;        // L -> C
  Tensor query_conv_w, query_conv_b;  // 1x1 conv C -> C
  Tensor value_conv_w, value_conv_b;  // 1x1 conv C_in -> C

  static CrossAttentionParams init(int c_in, int c, int l, Rng& rng) {
    CrossAttentionParams p;
    p.proj_conv_w = uniform_init({c, c_in, 1, 1}, c_in, c, rng);
    p.proj_conv_b = Tensor({c});
    p.proj_fc_w = uniform_init({c, l}, l, c, rng);
    p.proj_fc_b = Tensor({c});
    p.query_conv_w = uniform_init({c, c, 1, 1}, c, c, rng);
    p.query_conv_b = Tensor({c});
    p.value_conv_w = uniform_init({c, c_in, 1, 1}, c_in, c, rng);
    p.value_conv_b = Tensor({c});
    return p;
  }

  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + "/proj_conv_w", &proj_conv_w);
    out.emplace_back(prefix + "/proj_conv_b", &proj_conv_b);
    out.emplace_back(prefix + "/proj_fc_w", &proj_fc_w);
    out.emplace_back(prefix + "/proj_fc_b", &proj_fc_b);
    out.emplace_back(prefix + "/query_conv_w", &query_conv_w);
    out.emplace_back(prefix + "/query_conv_b", &query_conv_b);
    out.emplace_back(prefix + "/value_conv_w", &value_conv_w);
    out.emplace_back(prefix + "/value_conv_b", &value_conv_b);
  }

  void watch_all(Tape& tape) {
    tape.watch(proj_conv_w);
    tape.watch(proj_conv_b);
    tape.watch(proj_fc_w);
    tape.watch(proj_fc_b);
    tape.watch(query_conv_w);
    tape.watch(query_conv_b);
    tape.watch(value_conv_w);
    tape.watch(value_conv_b);
  }
};

struct CrossModalProjection {
  Tensor f_attn;          // N x C x H x W, 1x1 conv of the visual features
  Tensor v_attn;          // N x C, FC of the language vector
  Tensor v_attn_map;      // N x C x H x W, v_attn copied to every location
  Tensor normalized_sum;  // l2n(f_attn) + l2n(v_attn) broadcast, shared by
                          // the query head and the transformer channel split
};

// Normalization axes: f_attn is normalized over channels at each location,
// v_attn over the whole per-sample vector.
inline CrossModalProjection project_cross_modal(Tape& tape, const Tensor& visual,
                                                const Tensor& language,
                                                const CrossAttentionParams& params) {
  if (visual.ndim() != 4 || language.ndim() != 2)
    throw std::invalid_argument("project_cross_modal: expected N x C x H x W and N x L");
  if (visual.dim(0) != language.dim(0))
    throw std::invalid_argument("project_cross_modal: batch mismatch");
  CrossModalProjection proj;
  proj.f_attn = conv2d(tape, visual, params.proj_conv_w, params.proj_conv_b, 1, 0);
  proj.v_attn = linear(tape, language, params.proj_fc_w, params.proj_fc_b);
  if (proj.f_attn.dim(1) != proj.v_attn.dim(1))
    throw std::invalid_argument("project_cross_modal: projection channel mismatch");
  const int h = proj.f_attn.dim(2), w = proj.f_attn.dim(3);
  proj.v_attn_map = broadcast_spatial(tape, proj.v_attn, h, w);
  Tensor f_norm = l2_normalize(tape, proj.f_attn, 1);
  Tensor v_norm = broadcast_spatial(tape, l2_normalize(tape, proj.v_attn, 1), h, w);
  proj.normalized_sum = add(tape, f_norm, v_norm);
  return proj;
}

// query = 1x1 conv(ReLU(l2n(f_attn) + l2n(v_attn)))
inline Tensor attention_query(Tape& tape, const CrossModalProjection& proj,
                              const CrossAttentionParams& params) {
  return conv2d(tape, relu(tape, proj.normalized_sum), params.query_conv_w,
                params.query_conv_b, 1, 0);
}

struct AttendedFeature {
  Tensor output;   // N x C x H x W, attention output plus residual
  Tensor weights;  // N x P x P attention, rows (query locations) sum to 1
};

// scores = q . f_attn^T / sqrt(C) over flattened locations, softmax over key
// locations, applied to value = 1x1 conv(F_x), plus residual F_x.
inline AttendedFeature attend(Tape& tape, const Tensor& query, const CrossModalProjection& proj,
                              const Tensor& visual, const CrossAttentionParams& params,
                              bool uniform_weights = false) {
  const int n = query.dim(0), c = query.dim(1), h = query.dim(2), w = query.dim(3);
  const int p = h * w;
  Tensor value = conv2d(tape, visual, params.value_conv_w, params.value_conv_b, 1, 0);
  Tensor value_flat = reshape(tape, value, {n, c, p});
  AttendedFeature out;
  if (uniform_weights) {
    out.weights = Tensor::full({n, p, p}, 1.0 / static_cast<double>(p));
  } else {
    Tensor q_flat = reshape(tape, query, {n, c, p});
    Tensor f_flat = reshape(tape, proj.f_attn, {n, c, p});
    Tensor scores = scale_shift(tape, bmm(tape, q_flat, f_flat, true, false),
                                1.0 / std::sqrt(static_cast<double>(c)), 0.0);
    out.weights = softmax(tape, scores, 2);
  }
  Tensor attended = bmm(tape, value_flat, out.weights, false, true);
  out.output = add(tape, reshape(tape, attended, {n, c, h, w}), visual);
  return out;
}

// Mean attention received by each key location, one H x W map per sample.
inline std::vector<std::vector<double>> attention_heatmaps(const Tensor& weights, int h, int w) {
  const int n = weights.dim(0), p = weights.dim(1);
  if (p != h * w) throw std::invalid_argument("attention_heatmaps: size mismatch");
  std::vector<std::vector<double>> maps;
  const double* pw = weights.data();
  for (int i = 0; i < n; ++i) {
    std::vector<double> map(static_cast<std::size_t>(p), 0.0);
    const double* base = pw + static_cast<std::int64_t>(i) * p * p;
    for (int q = 0; q < p; ++q)
      for (int k = 0; k < p; ++k) map[static_cast<std::size_t>(k)] += base[q * p + k];
    for (double& v : map) v /= static_cast<double>(p);
    maps.push_back(std::move(map));
  }
  return maps;
}

}  // namespace vqacl
