#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "vqacl/attention.hpp"
#include "vqacl/checks.hpp"

using namespace vqacl;

namespace {

CrossAttentionParams seeded_params(int c_in, int c, int l, std::uint64_t seed) {
  Rng rng(seed);
  return CrossAttentionParams::init(c_in, c, l, rng);
}

// explicit-loop recomputation of the projection stage
void check_projection_against_loops(const Tensor& f_x, const Tensor& v_q,
                                    const CrossAttentionParams& p,
                                    const CrossModalProjection& proj) {
  const int n = f_x.dim(0), ci = f_x.dim(1), h = f_x.dim(2), w = f_x.dim(3);
  const int c = p.proj_conv_w.dim(0), l = v_q.dim(1);
  for (int b = 0; b < n; ++b)
    for (int co = 0; co < c; ++co) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = p.proj_conv_b.at(co);
          for (int k = 0; k < ci; ++k)
            acc += p.proj_conv_w.at(co * ci + k) *
                   f_x.at(((static_cast<std::int64_t>(b) * ci + k) * h + y) * w + x);
          EXPECT_NEAR(proj.f_attn.at(((static_cast<std::int64_t>(b) * c + co) * h + y) * w + x),
                      acc, 1e-12);
        }
      double acc = p.proj_fc_b.at(co);
      for (int k = 0; k < l; ++k)
        acc += p.proj_fc_w.at(co * l + k) * v_q.at(b * l + k);
      EXPECT_NEAR(proj.v_attn.at(b * c + co), acc, 1e-12);
    }
}

}  // namespace

TEST(Projection, ZeroInputsZeroBiasGiveZeroProjection) {
  CrossAttentionParams p = seeded_params(4, 4, 6, 3);
  Tensor f_x({1, 4, 2, 2});
  Tensor v_q({1, 6});
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, p);
  for (std::int64_t i = 0; i < proj.f_attn.numel(); ++i)
    EXPECT_DOUBLE_EQ(proj.f_attn.at(i), 0.0);
}

TEST(Projection, ShapeContract) {
  CrossAttentionParams p = seeded_params(64, 64, 128, 5);
  Rng rng(7);
  Tensor f_x = oracles::random_tensor({1, 64, 8, 8}, rng);
  Tensor v_q = oracles::random_tensor({1, 128}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, p);
  EXPECT_EQ(proj.f_attn.shape(), (Shape{1, 64, 8, 8}));
  EXPECT_EQ(proj.v_attn.shape(), (Shape{1, 64}));
  EXPECT_EQ(proj.v_attn_map.shape(), (Shape{1, 64, 8, 8}));
}

TEST(Projection, MatchesLoopOracle) {
  CrossAttentionParams p = seeded_params(3, 4, 5, 11);
  Rng rng(13);
  Tensor f_x = oracles::random_tensor({2, 3, 3, 2}, rng);
  Tensor v_q = oracles::random_tensor({2, 5}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, p);
  check_projection_against_loops(f_x, v_q, p, proj);
  // broadcast copies the same vector to every location
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 2; ++x)
      for (int c = 0; c < 4; ++c)
        EXPECT_DOUBLE_EQ(proj.v_attn_map.at((static_cast<std::int64_t>(c) * 3 + y) * 2 + x),
                         proj.v_attn.at(c));
}

TEST(Query, ZeroProjectionGivesBiasOnly) {
  CrossAttentionParams p = seeded_params(4, 4, 6, 17);
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj;
  proj.f_attn = Tensor({1, 4, 2, 2});
  proj.v_attn = Tensor({1, 4});
  proj.v_attn_map = Tensor({1, 4, 2, 2});
  proj.normalized_sum = Tensor({1, 4, 2, 2});  // cancellation: sum is zero
  Tensor q = attention_query(tape, proj, p);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 4; ++i)
      EXPECT_DOUBLE_EQ(q.at(c * 4 + i), p.query_conv_b.at(c));
}

TEST(Attend, UniformAttentionFromConstantQueryAndKeys) {
  // constant query and keys -> equal scores -> uniform weights -> each output
  // location is the mean of the value map plus the residual
  CrossAttentionParams p = seeded_params(2, 2, 3, 19);
  Rng rng(23);
  Tensor f_x = oracles::random_tensor({1, 2, 2, 2}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj;
  proj.f_attn = Tensor::full({1, 2, 2, 2}, 0.7);
  Tensor query = Tensor::full({1, 2, 2, 2}, -0.3);
  AttendedFeature att = attend(tape, query, proj, f_x, p);

  Tensor value = conv2d(tape, f_x, p.value_conv_w, p.value_conv_b, 1, 0);
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (int j = 0; j < 4; ++j) mean += value.at(c * 4 + j);
    mean /= 4.0;
    for (int i = 0; i < 4; ++i)
      EXPECT_NEAR(att.output.at(c * 4 + i), mean + f_x.at(c * 4 + i), 1e-12);
  }
}

TEST(Attend, SingleLocationIsValuePlusResidual) {
  CrossAttentionParams p = seeded_params(3, 3, 4, 29);
  Rng rng(31);
  Tensor f_x = oracles::random_tensor({1, 3, 1, 1}, rng);
  Tensor v_q = oracles::random_tensor({1, 4}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, p);
  Tensor query = attention_query(tape, proj, p);
  AttendedFeature att = attend(tape, query, proj, f_x, p);
  Tensor value = conv2d(tape, f_x, p.value_conv_w, p.value_conv_b, 1, 0);
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(att.output.at(c), value.at(c) + f_x.at(c), 1e-12);
}

TEST(Attend, MatchesTripleLoopOracle) {
  CrossAttentionParams p = seeded_params(2, 2, 3, 37);
  Rng rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor f_x = oracles::random_tensor({1, 2, 2, 2}, rng);
    Tensor v_q = oracles::random_tensor({1, 3}, rng);
    Tape tape(Tape::Mode::kNoGrad);
    CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, p);
    Tensor query = attention_query(tape, proj, p);
    AttendedFeature att = attend(tape, query, proj, f_x, p);
    Tensor value = conv2d(tape, f_x, p.value_conv_w, p.value_conv_b, 1, 0);
    Tensor expected = oracles::loop_attention(query, proj.f_attn, value, f_x);
    for (std::int64_t i = 0; i < expected.numel(); ++i)
      EXPECT_NEAR(att.output.at(i), expected.at(i), 1e-12);
  }
}

TEST(Attend, WeightsRowsSumToOne) {
  CrossAttentionParams p = seeded_params(4, 4, 6, 43);
  Rng rng(47);
  Tensor f_x = oracles::random_tensor({2, 4, 3, 3}, rng);
  Tensor v_q = oracles::random_tensor({2, 6}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, p);
  Tensor query = attention_query(tape, proj, p);
  AttendedFeature att = attend(tape, query, proj, f_x, p);
  const int locations = 9;
  for (int n = 0; n < 2; ++n)
    for (int q = 0; q < locations; ++q) {
      double sum = 0.0;
      for (int k = 0; k < locations; ++k)
        sum += att.weights.at((static_cast<std::int64_t>(n) * locations + q) * locations + k);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Attend, OutputMinusResidualIsConvexCombinationOfValues) {
  CrossAttentionParams p = seeded_params(4, 4, 5, 53);
  Rng rng(59);
  Tensor f_x = oracles::random_tensor({1, 4, 3, 3}, rng);
  Tensor v_q = oracles::random_tensor({1, 5}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, p);
  Tensor query = attention_query(tape, proj, p);
  AttendedFeature att = attend(tape, query, proj, f_x, p);
  Tensor value = conv2d(tape, f_x, p.value_conv_w, p.value_conv_b, 1, 0);
  const int locations = 9;
  for (int c = 0; c < 4; ++c) {
    double lo = value.at(c * locations), hi = lo;
    for (int j = 1; j < locations; ++j) {
      lo = std::min(lo, value.at(c * locations + j));
      hi = std::max(hi, value.at(c * locations + j));
    }
    for (int i = 0; i < locations; ++i) {
      const double attended = att.output.at(c * locations + i) - f_x.at(c * locations + i);
      EXPECT_GE(attended, lo - 1e-12);
      EXPECT_LE(attended, hi + 1e-12);
    }
  }
}

TEST(Attend, SpatialPermutationEquivariance) {
  // permuting the locations of every input permutes the output identically
  CrossAttentionParams p = seeded_params(2, 2, 3, 61);
  Rng rng(67);
  Tensor f_x = oracles::random_tensor({1, 2, 2, 2}, rng);
  Tensor v_q = oracles::random_tensor({1, 3}, rng);

  auto run = [&](const Tensor& visual) {
    Tape tape(Tape::Mode::kNoGrad);
    CrossModalProjection proj = project_cross_modal(tape, visual, v_q, p);
    Tensor query = attention_query(tape, proj, p);
    return attend(tape, query, proj, visual, p).output;
  };

  const int perm[4] = {2, 0, 3, 1};  // location permutation
  Tensor permuted({1, 2, 2, 2});
  double* pd = permuted.mutable_data();
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) pd[c * 4 + i] = f_x.at(c * 4 + perm[i]);

  Tensor out = run(f_x);
  Tensor out_perm = run(permuted);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i)
      EXPECT_NEAR(out_perm.at(c * 4 + i), out.at(c * 4 + perm[i]), 1e-12);
}

TEST(Attend, ChannelMismatchRejected) {
  CrossAttentionParams p = seeded_params(4, 4, 6, 71);
  p.proj_fc_w = Tensor({3, 6});  // C mismatch vs conv output 4
  p.proj_fc_b = Tensor({3});
  Rng rng(73);
  Tensor f_x = oracles::random_tensor({1, 4, 2, 2}, rng);
  Tensor v_q = oracles::random_tensor({1, 6}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  EXPECT_THROW(project_cross_modal(tape, f_x, v_q, p), std::invalid_argument);
}

TEST(AttentionHeatmaps, AverageOverQueries) {
  Tensor weights({1, 2, 2}, {1.0, 0.0, 0.25, 0.75});
  const auto maps = attention_heatmaps(weights, 1, 2);
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_NEAR(maps[0][0], (1.0 + 0.25) / 2, 1e-15);
  EXPECT_NEAR(maps[0][1], (0.0 + 0.75) / 2, 1e-15);
}

TEST(AttentionGradients, PassFiniteDiffCheck) {
  GradCheckReport report = checks::check_attention(7);
  EXPECT_LT(report.worst(), 1e-4);
  for (const BlockCheck& b : report.blocks) EXPECT_GT(b.checked, 0) << b.name;
}
