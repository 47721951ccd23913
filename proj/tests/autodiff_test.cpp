#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "oracles.hpp"
#include "vqacl/gradcheck.hpp"
#include "vqacl/ops.hpp"
#include "vqacl/tensor.hpp"

using namespace vqacl;

namespace {

// Checks d(weighted sum of op(x...))/dx against central differences for every
// input element. `forward` must rebuild the graph from the leaves each call.
void expect_matches_finite_diff(
    std::vector<Tensor*> leaves,
    const std::function<Tensor(Tape&)>& forward,
    double tol = 1e-6, std::uint64_t head_seed = 99) {
  Tape probe(Tape::Mode::kNoGrad);
  Tensor probe_out = forward(probe);
  Rng head_rng(head_seed);
  std::vector<double> head(static_cast<std::size_t>(probe_out.numel()));
  for (double& h : head) h = head_rng.next_uniform(-1.0, 1.0);

  auto loss = [&]() {
    Tape t(Tape::Mode::kNoGrad);
    return weighted_sum_all(t, forward(t), head).item();
  };
  auto grads = [&]() {
    Tape t;
    for (Tensor* leaf : leaves) t.watch(*leaf);
    Tensor out = weighted_sum_all(t, forward(t), head);
    GradientMap m = t.backward(out);
    std::map<std::string, Tensor> named;
    for (std::size_t i = 0; i < leaves.size(); ++i)
      named.emplace("leaf" + std::to_string(i), m.at(leaves[i]->node()));
    return named;
  };
  std::vector<std::pair<std::string, Tensor*>> blocks;
  for (std::size_t i = 0; i < leaves.size(); ++i)
    blocks.emplace_back("leaf" + std::to_string(i), leaves[i]);

  GradCheckReport report = finite_diff_check(loss, grads, blocks, 1e-5);
  EXPECT_LT(report.worst(), tol);
  for (const BlockCheck& b : report.blocks) EXPECT_GT(b.checked, 0) << b.name;
}

}  // namespace

TEST(Backward, SquareRule) {
  Tensor x = Tensor::scalar(3.0);
  Tape tape;
  tape.watch(x);
  Tensor y = mul(tape, x, x);
  GradientMap g = tape.backward(y);
  EXPECT_DOUBLE_EQ(g.at(x.node()).item(), 6.0);
}

TEST(Backward, ProductRule) {
  Tensor a = Tensor::scalar(2.0);
  Tensor b = Tensor::scalar(5.0);
  Tape tape;
  tape.watch(a);
  tape.watch(b);
  Tensor y = mul(tape, a, b);
  GradientMap g = tape.backward(y);
  EXPECT_DOUBLE_EQ(g.at(a.node()).item(), 5.0);
  EXPECT_DOUBLE_EQ(g.at(b.node()).item(), 2.0);
}

TEST(Backward, DeadRelu) {
  Tensor x = Tensor::scalar(-2.0);
  Tape tape;
  tape.watch(x);
  Tensor y = relu(tape, x);
  GradientMap g = tape.backward(y);
  EXPECT_DOUBLE_EQ(g.at(x.node()).item(), 0.0);
}

TEST(Backward, ReluGradAtExactZeroIsZero) {
  Tensor x = Tensor::scalar(0.0);
  Tape tape;
  tape.watch(x);
  Tensor y = relu(tape, x);
  GradientMap g = tape.backward(y);
  EXPECT_DOUBLE_EQ(g.at(x.node()).item(), 0.0);
}

TEST(Backward, FanOutAccumulates) {
  // y = x*x + 3x: dy/dx = 2x + 3
  Tensor x = Tensor::scalar(4.0);
  Tape tape;
  tape.watch(x);
  Tensor y = add(tape, mul(tape, x, x), scale_shift(tape, x, 3.0, 0.0));
  GradientMap g = tape.backward(y);
  EXPECT_DOUBLE_EQ(g.at(x.node()).item(), 11.0);
}

TEST(Backward, RejectsNonScalarOutput) {
  Tensor x({2}, {1.0, 2.0});
  Tape tape;
  tape.watch(x);
  Tensor y = relu(tape, x);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Backward, RejectsTensorNotOnTape) {
  Tensor x = Tensor::scalar(1.0);
  Tape tape;
  EXPECT_THROW(tape.backward(x), std::invalid_argument);

  // tensor from a different tape is also rejected
  Tape other;
  other.watch(x);
  EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Backward, UntouchedTrainableLeafGetsZeros) {
  Tensor x = Tensor::scalar(2.0);
  Tensor unused({3});
  Tape tape;
  tape.watch(x);
  tape.watch(unused);
  Tensor y = mul(tape, x, x);
  GradientMap g = tape.backward(y);
  ASSERT_TRUE(g.count(unused.node()));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g.at(unused.node()).at(i), 0.0);
}

TEST(Backward, ReplayIsBitIdentical) {
  Rng rng(7);
  Tensor x = oracles::random_tensor({4, 5}, rng);
  Tensor w = oracles::random_tensor({3, 5}, rng);
  Tensor b = oracles::random_tensor({3}, rng);
  Tape tape;
  tape.watch(x);
  tape.watch(w);
  tape.watch(b);
  Tensor h = tanh(tape, linear(tape, x, w, b));
  std::vector<double> head(static_cast<std::size_t>(h.numel()), 0.25);
  Tensor y = weighted_sum_all(tape, h, head);
  GradientMap g1 = tape.backward(y);
  GradientMap g2 = tape.backward(y);
  for (const auto& [node, grad] : g1) {
    const Tensor& other = g2.at(node);
    ASSERT_EQ(grad.numel(), other.numel());
    EXPECT_EQ(0, std::memcmp(grad.data(), other.data(),
                             sizeof(double) * static_cast<std::size_t>(grad.numel())));
  }
}

TEST(Softmax, Examples) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor a = softmax(tape, Tensor({2}, {1.0, 1.0}), 0);
  EXPECT_NEAR(a.at(0), 0.5, 1e-15);
  EXPECT_NEAR(a.at(1), 0.5, 1e-15);

  Tensor b = softmax(tape, Tensor({2}, {0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(b.at(0), 0.25, 1e-12);
  EXPECT_NEAR(b.at(1), 0.75, 1e-12);

  Tensor c = softmax(tape, Tensor({2}, {1000.0, 1000.0}), 0);
  EXPECT_DOUBLE_EQ(c.at(0), 0.5);
  EXPECT_DOUBLE_EQ(c.at(1), 0.5);
}

TEST(Softmax, SumsToOneOnRandomInputs) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = oracles::random_tensor({3, 5, 4}, rng, -30.0, 30.0);
    const int axis = static_cast<int>(rng.next_below(3));
    Tape tape(Tape::Mode::kNoGrad);
    Tensor y = softmax(tape, x, axis);
    const auto span = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= span[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < 3; ++i) inner *= span[static_cast<std::size_t>(i)];
    const std::int64_t len = span[static_cast<std::size_t>(axis)];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        double s = 0.0;
        for (std::int64_t k = 0; k < len; ++k)
          s += y.at(o * len * inner + k * inner + i);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Softmax, RejectsBadAxis) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor x({2, 2});
  EXPECT_THROW(softmax(tape, x, 2), std::invalid_argument);
  EXPECT_THROW(softmax(tape, x, -1), std::invalid_argument);
}

TEST(L2Normalize, Examples) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor a = l2_normalize(tape, Tensor({2}, {3.0, 4.0}), 0);
  EXPECT_NEAR(a.at(0), 0.6, 1e-12);
  EXPECT_NEAR(a.at(1), 0.8, 1e-12);

  Tensor b = l2_normalize(tape, Tensor({2}, {0.0, 0.0}), 0, 1e-12);
  EXPECT_DOUBLE_EQ(b.at(0), 0.0);
  EXPECT_DOUBLE_EQ(b.at(1), 0.0);

  Tensor c = l2_normalize(tape, Tensor({1}, {5.0}), 0);
  EXPECT_NEAR(c.at(0), 1.0, 1e-12);
}

TEST(L2Normalize, UnitNormOnRandomInputs) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = oracles::random_tensor({2, 6}, rng, -2.0, 2.0);
    Tape tape(Tape::Mode::kNoGrad);
    Tensor y = l2_normalize(tape, x, 1);
    for (int r = 0; r < 2; ++r) {
      double s = 0.0;
      for (int c = 0; c < 6; ++c) s += y.at(r * 6 + c) * y.at(r * 6 + c);
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
    }
  }
}

TEST(L2Normalize, RejectsNonPositiveEps) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor x({2});
  EXPECT_THROW(l2_normalize(tape, x, 0, 0.0), std::invalid_argument);
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 8; ++trial) {
    const int stride = 1 + static_cast<int>(rng.next_below(2));
    const int pad = static_cast<int>(rng.next_below(2));
    Tensor x = oracles::random_tensor({2, 3, 6, 5}, rng);
    Tensor w = oracles::random_tensor({4, 3, 3, 3}, rng);
    Tensor b = oracles::random_tensor({4}, rng);
    Tape tape(Tape::Mode::kNoGrad);
    Tensor fast = conv2d(tape, x, w, b, stride, pad);
    Tensor slow = oracles::loop_conv2d(x, w, b, stride, pad);
    ASSERT_EQ(fast.shape(), slow.shape());
    for (std::int64_t i = 0; i < fast.numel(); ++i)
      EXPECT_NEAR(fast.at(i), slow.at(i), 1e-12);
  }
}

TEST(Conv2d, PointwiseMatchesLoopOracle) {
  Rng rng(19);
  Tensor x = oracles::random_tensor({2, 4, 3, 3}, rng);
  Tensor w = oracles::random_tensor({5, 4, 1, 1}, rng);
  Tensor b = oracles::random_tensor({5}, rng);
  Tape tape(Tape::Mode::kNoGrad);
  Tensor fast = conv2d(tape, x, w, b, 1, 0);
  Tensor slow = oracles::loop_conv2d(x, w, b, 1, 0);
  for (std::int64_t i = 0; i < fast.numel(); ++i)
    EXPECT_NEAR(fast.at(i), slow.at(i), 1e-12);
}

TEST(Conv2d, RejectsChannelMismatch) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor x({1, 3, 4, 4});
  Tensor w({2, 4, 3, 3});
  Tensor b({2});
  EXPECT_THROW(conv2d(tape, x, w, b, 1, 1), std::invalid_argument);
}

TEST(Gradients, ElementwiseAndLinear) {
  Rng rng(23);
  Tensor x = oracles::random_tensor({3, 4}, rng);
  Tensor w = oracles::random_tensor({2, 4}, rng);
  Tensor b = oracles::random_tensor({2}, rng);
  expect_matches_finite_diff({&x, &w, &b}, [&](Tape& t) {
    return sigmoid(t, linear(t, tanh(t, x), w, b));
  });
}

TEST(Gradients, ReluChainAwayFromKinks) {
  // inputs shifted away from zero so no stencil crosses the kink
  Rng rng(27);
  Tensor x({3, 4});
  double* d = x.mutable_data();
  for (int i = 0; i < 12; ++i) {
    const double v = rng.next_uniform(0.2, 1.0);
    d[i] = (i % 2 == 0) ? v : -v;
  }
  expect_matches_finite_diff({&x}, [&](Tape& t) {
    return relu(t, scale_shift(t, relu(t, x), 2.0, 0.05));
  });
}

TEST(FiniteDiffCheck, CatchesInjectedGradientBug) {
  // a sign error in the reported gradient must show up as a large error
  Tensor x = Tensor::scalar(0.7);
  auto loss = [&]() { return x.at(0) * x.at(0); };
  auto grads = [&]() {
    std::map<std::string, Tensor> m;
    m.emplace("x", Tensor::scalar(-2.0 * x.at(0)));  // wrong sign
    return m;
  };
  GradCheckReport r = finite_diff_check(loss, grads, {{"x", &x}}, 1e-5);
  EXPECT_FALSE(r.pass(1e-4));
  EXPECT_EQ(r.blocks[0].name, "x");
  EXPECT_GT(r.blocks[0].max_rel_err, 0.5);
}

TEST(Gradients, SoftmaxAndNormalize) {
  Rng rng(29);
  Tensor x = oracles::random_tensor({2, 5}, rng);
  expect_matches_finite_diff({&x}, [&](Tape& t) {
    return softmax(t, l2_normalize(t, x, 1), 1);
  });
}

TEST(Gradients, Conv2dAllInputs) {
  Rng rng(31);
  Tensor x = oracles::random_tensor({2, 2, 5, 4}, rng);
  Tensor w = oracles::random_tensor({3, 2, 3, 3}, rng);
  Tensor b = oracles::random_tensor({3}, rng);
  expect_matches_finite_diff({&x, &w, &b}, [&](Tape& t) {
    return conv2d(t, x, w, b, 2, 1);
  }, 1e-5);
}

TEST(Gradients, PointwiseConv) {
  Rng rng(37);
  Tensor x = oracles::random_tensor({2, 3, 3, 3}, rng);
  Tensor w = oracles::random_tensor({4, 3, 1, 1}, rng);
  Tensor b = oracles::random_tensor({4}, rng);
  expect_matches_finite_diff({&x, &w, &b}, [&](Tape& t) {
    return conv2d(t, x, w, b, 1, 0);
  }, 1e-5);
}

TEST(Gradients, BmmAllTransposeFlags) {
  Rng rng(41);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      Tensor a = oracles::random_tensor(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng);
      Tensor b = oracles::random_tensor(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng);
      expect_matches_finite_diff({&a, &b}, [&, ta, tb](Tape& t) {
        return bmm(t, a, b, ta != 0, tb != 0);
      });
    }
}

TEST(Gradients, MatmulGapBroadcastConcat) {
  Rng rng(43);
  Tensor a = oracles::random_tensor({3, 4}, rng);
  Tensor b = oracles::random_tensor({4, 2}, rng);
  expect_matches_finite_diff({&a, &b}, [&](Tape& t) { return matmul(t, a, b); });

  Tensor x4 = oracles::random_tensor({2, 3, 2, 2}, rng);
  expect_matches_finite_diff({&x4}, [&](Tape& t) { return global_avg_pool(t, x4); });

  Tensor v = oracles::random_tensor({2, 3}, rng);
  expect_matches_finite_diff({&v}, [&](Tape& t) { return broadcast_spatial(t, v, 2, 2); });

  Tensor c1 = oracles::random_tensor({2, 3}, rng);
  Tensor c2 = oracles::random_tensor({2, 2}, rng);
  expect_matches_finite_diff({&c1, &c2}, [&](Tape& t) {
    Tensor cat = concat_cols(t, {c1, c2});
    return slice_cols(t, cat, 1, 4);
  });

  Tensor f1 = oracles::random_tensor({2, 2, 2, 2}, rng);
  Tensor f2 = oracles::random_tensor({2, 2, 2, 2}, rng);
  expect_matches_finite_diff({&f1, &f2}, [&](Tape& t) {
    Tensor cat = concat_channels(t, {f1, f2});
    return slice_channels(t, cat, 1, 3);
  });
}

TEST(Gradients, EmbeddingAndCrossEntropy) {
  Rng rng(47);
  Tensor table = oracles::random_tensor({6, 3}, rng);
  const std::vector<int> ids = {1, 4, 1};
  expect_matches_finite_diff({&table}, [&](Tape& t) {
    return embedding_gather(t, table, ids);
  });

  Tensor logits = oracles::random_tensor({3, 5}, rng);
  const std::vector<int> labels = {0, 4, 2};
  expect_matches_finite_diff({&logits}, [&](Tape& t) {
    return cross_entropy(t, logits, labels);
  });
}

TEST(Gradients, LerpMaskAndSquash) {
  Rng rng(53);
  Tensor on = oracles::random_tensor({3, 4}, rng);
  Tensor off = oracles::random_tensor({3, 4}, rng);
  Tensor mask({3, 1}, {1.0, 0.0, 1.0});
  expect_matches_finite_diff({&on, &off}, [&](Tape& t) {
    return lerp_mask(t, on, off, mask);
  });

  Tensor raw = oracles::random_tensor({2, 4}, rng);
  expect_matches_finite_diff({&raw}, [&](Tape& t) {
    return squash_affine(t, raw, 1.5);
  });
}

TEST(CrossEntropy, RejectsBadLabel) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor logits({1, 3});
  EXPECT_THROW(cross_entropy(tape, logits, {3}), std::invalid_argument);
  EXPECT_THROW(cross_entropy(tape, logits, {-1}), std::invalid_argument);
}

TEST(Ops, NonFiniteOutputIsAnError) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor big = Tensor::scalar(1e308);
  EXPECT_THROW(add(tape, big, big), std::runtime_error);
}

TEST(FiniteDiffCheck, QuadraticIsExact) {
  Tensor x = Tensor::scalar(1.0);
  auto loss = [&]() { return x.at(0) * x.at(0); };
  auto grads = [&]() {
    std::map<std::string, Tensor> m;
    Tape t;
    t.watch(x);
    Tensor y = mul(t, x, x);
    m.emplace("x", t.backward(y).at(x.node()));
    return m;
  };
  GradCheckReport r = finite_diff_check(loss, grads, {{"x", &x}}, 1e-5);
  EXPECT_LT(r.worst(), 1e-10);
}

TEST(FiniteDiffCheck, ReluKinkIsExcluded) {
  Tensor x = Tensor::scalar(0.0);
  auto loss = [&]() { return std::max(0.0, x.at(0)); };
  auto grads = [&]() {
    std::map<std::string, Tensor> m;
    Tape t;
    t.watch(x);
    Tensor y = relu(t, x);
    m.emplace("x", t.backward(y).at(x.node()));
    return m;
  };
  GradCheckReport r = finite_diff_check(loss, grads, {{"x", &x}}, 1e-5);
  ASSERT_EQ(r.blocks.size(), 1u);
  EXPECT_EQ(r.blocks[0].skipped_kinks, 1);
  EXPECT_EQ(r.blocks[0].checked, 0);
}

TEST(FiniteDiffCheck, DetectsNonDeterministicLoss) {
  Tensor x = Tensor::scalar(1.0);
  int calls = 0;
  auto loss = [&]() { return static_cast<double>(calls++); };
  auto grads = [&]() { return std::map<std::string, Tensor>{}; };
  EXPECT_THROW(finite_diff_check(loss, grads, {{"x", &x}}, 1e-5), std::runtime_error);
}

TEST(FiniteDiffCheck, RejectsBadStep) {
  Tensor x = Tensor::scalar(1.0);
  auto loss = [&]() { return 0.0; };
  auto grads = [&]() { return std::map<std::string, Tensor>{}; };
  EXPECT_THROW(finite_diff_check(loss, grads, {{"x", &x}}, 1e-2),
               std::invalid_argument);
}

TEST(Tensor, CopyOnWriteKeepsSavedValues) {
  Tensor a({2}, {1.0, 2.0});
  Tensor b = a;  // shares buffer
  b.mutable_data()[0] = 99.0;
  EXPECT_DOUBLE_EQ(a.at(0), 1.0);
  EXPECT_DOUBLE_EQ(b.at(0), 99.0);
}

TEST(Tensor, ShapeInvariant) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_THROW(Tensor({2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}
