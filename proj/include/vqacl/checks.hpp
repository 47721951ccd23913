#pragma once

// Module-level gradient checks on seeded micro inputs. Each check builds a
// small instance of the module, stacks a fixed random linear head to get a
// scalar, and compares taped gradients against central finite differences
// elementwise over every parameter block.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vqacl/gradcheck.hpp"
#include "vqacl/model.hpp"

namespace vqacl::checks {

inline ModelConfig micro_model_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.image_enc.channels = {4, 6, 8, 8};
  cfg.image_enc.strides = {2, 2, 2, 1};
  cfg.text_enc.embed_dim = 5;
  cfg.text_enc.hidden_dim = 6;
  cfg.text_enc.max_tokens = 20;
  return cfg;
}

namespace detail {

// Scalar heads are scaled down so the objective stays small: central
// differences at the pinned step carry cancellation noise proportional to the
// objective's magnitude, and the small scale keeps that noise below the
// relative-error denominator floor without weakening the check for any
// gradient large enough to matter.
inline constexpr double kHeadScale = 0.01;

inline std::vector<double> random_head(std::int64_t n, Rng& rng) {
  std::vector<double> head(static_cast<std::size_t>(n));
  for (double& h : head) h = rng.next_uniform(-kHeadScale, kHeadScale);
  return head;
}

inline void randomize(Tensor& t, Rng& rng, double lo, double hi) {
  double* d = t.mutable_data();
  for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = rng.next_uniform(lo, hi);
}

struct CheckSetup {
  std::vector<std::pair<std::string, Tensor*>> blocks;
  std::function<Tensor(Tape&)> forward;  // scalar output

  GradCheckReport run(double step, double tolerance) {
    auto loss = [this]() {
      Tape tape(Tape::Mode::kNoGrad);
      return forward(tape).item();
    };
    auto grads = [this]() {
      Tape tape;
      for (auto& [name, t] : blocks) tape.watch(*t);
      Tensor out = forward(tape);
      GradientMap m = tape.backward(out);
      std::map<std::string, Tensor> named;
      for (auto& [name, t] : blocks) named.emplace(name, m.at(t->node()));
      return named;
    };
    return finite_diff_check(loss, grads, blocks, step, tolerance);
  }
};

}  // namespace detail

// scalar heads on both encoders
inline GradCheckReport check_encoders(std::uint64_t seed = 7, double step = 1e-5,
                                      double tolerance = 1e-4) {
  const ModelConfig cfg = micro_model_config();
  Rng rng(hash_key(seed, 0xe27c));

  ImageEncoderParams img_params = ImageEncoderParams::init(cfg.image_enc, rng);
  TextEncoderParams txt_params = TextEncoderParams::init(12, cfg.text_enc, rng);

  Tensor images({2, 3, cfg.image_size, cfg.image_size});
  detail::randomize(images, rng, 0.0, 1.0);
  const std::vector<std::vector<int>> tokens = {{2, 5, 7, 3}, {4, 9, 11}};

  const int spatial = cfg.image_size / cfg.image_enc.total_downsampling();
  Rng head_rng(hash_key(seed, 0x4ead));
  const std::vector<double> head_img = detail::random_head(
      2LL * cfg.feature_channels() * spatial * spatial, head_rng);
  const std::vector<double> head_txt =
      detail::random_head(2LL * cfg.text_enc.hidden_dim, head_rng);

  detail::CheckSetup setup;
  img_params.collect("image_encoder", setup.blocks);
  txt_params.collect("text_encoder", setup.blocks);
  setup.forward = [=, &img_params, &txt_params](Tape& tape) {
    Tensor f_x = encode_image(tape, images, img_params, cfg.image_enc);
    Tensor v_q = encode_question(tape, tokens, txt_params, cfg.text_enc);
    return add(tape, weighted_sum_all(tape, f_x, head_img),
               weighted_sum_all(tape, v_q, head_txt));
  };
  return setup.run(step, tolerance);
}

// scalar head on the attended feature, gradients to parameters and both inputs
inline GradCheckReport check_attention(std::uint64_t seed = 7, double step = 1e-5,
                                       double tolerance = 1e-4) {
  const ModelConfig cfg = micro_model_config();
  const int c = cfg.feature_channels(), l = cfg.text_enc.hidden_dim;
  Rng rng(hash_key(seed, 0xa77e));

  CrossAttentionParams params = CrossAttentionParams::init(c, c, l, rng);
  Tensor f_x({2, c, 2, 2});
  Tensor v_q({2, l});
  detail::randomize(f_x, rng, -1.0, 1.0);
  detail::randomize(v_q, rng, -1.0, 1.0);

  Rng head_rng(hash_key(seed, 0x4ead));
  const std::vector<double> head = detail::random_head(2LL * c * 2 * 2, head_rng);

  detail::CheckSetup setup;
  params.collect("attention", setup.blocks);
  setup.blocks.emplace_back("input/f_x", &f_x);
  setup.blocks.emplace_back("input/v_q", &v_q);
  setup.forward = [=, &params, &f_x, &v_q](Tape& tape) {
    CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, params);
    Tensor query = attention_query(tape, proj, params);
    AttendedFeature att = attend(tape, query, proj, f_x, params);
    return weighted_sum_all(tape, att.output, head);
  };
  return setup.run(step, tolerance);
}

// scalar head on both transformed features; localization weights are
// randomized so the sample grids sit away from pixel centers and the
// coordinate gradients are exercised
inline GradCheckReport check_transform(std::uint64_t seed = 7, double step = 1e-5,
                                       double tolerance = 1e-4) {
  const ModelConfig cfg = micro_model_config();
  const int c = cfg.feature_channels(), l = cfg.text_enc.hidden_dim;
  Rng rng(hash_key(seed, 0x77f0));

  CrossAttentionParams attn_params = CrossAttentionParams::init(c, c, l, rng);
  SpatialTransformerParams st_params = SpatialTransformerParams::init(c, cfg.scale_max);
  detail::randomize(st_params.loc1_w, rng, -0.5, 0.5);
  detail::randomize(st_params.loc2_w, rng, -0.5, 0.5);
  detail::randomize(st_params.loc1_b, rng, -0.3, 0.3);
  detail::randomize(st_params.loc2_b, rng, -0.3, 0.3);
  Tensor f_x({2, c, 2, 2});
  Tensor v_q({2, l});
  detail::randomize(f_x, rng, -1.0, 1.0);
  detail::randomize(v_q, rng, -1.0, 1.0);

  Rng head_rng(hash_key(seed, 0x4ead));
  const std::vector<double> head1 = detail::random_head(2LL * c * 2 * 2, head_rng);
  const std::vector<double> head2 = detail::random_head(2LL * c * 2 * 2, head_rng);

  detail::CheckSetup setup;
  st_params.collect("transform", setup.blocks);
  attn_params.collect("attention_projection", setup.blocks);
  setup.blocks.emplace_back("input/f_x", &f_x);
  setup.blocks.emplace_back("input/v_q", &v_q);
  setup.forward = [=, &attn_params, &st_params, &f_x, &v_q](Tape& tape) {
    CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, attn_params);
    TransformedFeatures st = transform_features(tape, proj, f_x, st_params);
    return add(tape, weighted_sum_all(tape, st.first, head1),
               weighted_sum_all(tape, st.second, head2));
  };
  return setup.run(step, tolerance);
}

// mean cross-entropy of the full model on a 2-sample batch
inline GradCheckReport check_model(std::uint64_t seed = 7, double step = 1e-5,
                                   double tolerance = 1e-4) {
  ModelConfig cfg = micro_model_config();
  Rng rng(hash_key(seed, 0xf311));

  Vocabulary vocab = Vocabulary::build(
      {"Is a road present?", "What is the amount of small buildings?",
       "Is it a rural or an urban area?"});
  VqaModel model = VqaModel::init(cfg, vocab, {"yes", "no", "0", "1", "2"}, hash_key(seed, 1));
  // move the localization heads off the identity so grid gradients are live
  detail::randomize(model.transform.loc1_w, rng, -0.5, 0.5);
  detail::randomize(model.transform.loc2_w, rng, -0.5, 0.5);

  Tensor images({2, 3, cfg.image_size, cfg.image_size});
  detail::randomize(images, rng, 0.0, 1.0);
  const std::vector<std::vector<int>> tokens = {
      vocab.encode(tokenize("Is a road present?")),
      vocab.encode(tokenize("What is the amount of small buildings?"))};
  const std::vector<int> labels = {0, 3};
  const std::vector<double> uniform = {1.0, 1.0};

  detail::CheckSetup setup;
  setup.blocks = model.named_params();
  setup.forward = [=, &model](Tape& tape) {
    ForwardResult fwd = model.forward(tape, images, tokens);
    Tensor losses = cross_entropy(tape, fwd.logits, labels);
    Tensor mean_loss = weighted_mean(tape, losses, uniform, 2.0);
    return scale_shift(tape, mean_loss, detail::kHeadScale, 0.0);
  };
  return setup.run(step, tolerance);
}

struct ModuleCheck {
  std::string module;
  GradCheckReport report;
};

inline std::vector<ModuleCheck> check_all(std::uint64_t seed = 7, double step = 1e-5,
                                          double tolerance = 1e-4) {
  std::vector<ModuleCheck> out;
  out.push_back({"encoders", check_encoders(seed, step, tolerance)});
  out.push_back({"attention", check_attention(seed, step, tolerance)});
  out.push_back({"transform", check_transform(seed, step, tolerance)});
  out.push_back({"model", check_model(seed, step, tolerance)});
  return out;
}

}  // namespace vqacl::checks
