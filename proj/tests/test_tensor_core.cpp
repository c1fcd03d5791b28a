#include <gtest/gtest.h>

#include <random>

#include "hitl/checkpoint.hpp"
#include "hitl/grad_check.hpp"
#include "hitl/ops.hpp"
#include "hitl/optim.hpp"
#include "support/op_gradient_suite.hpp"

using namespace hitl;

namespace {

// Direct nested-loop cross-correlation, accumulated in double.
TensorD naive_conv(const TensorD& x, const TensorD& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  TensorD out({N, F, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long y = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += x[((n * C + c) * H + y) * W + xx] * k[((f * C + c) * kh + i) * kw + j];
              }
          out[((n * F + f) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

}  // namespace

TEST(Conv2d, ScalarKernelScalesInput) {
  Var<float> x(Tensor::ones({1, 1, 3, 3}));
  Var<float> k(Tensor({1, 1, 1, 1}, {2.0f}));
  auto y = conv2d(x, k, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (float v : y.value().data()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  std::mt19937 rng(3);
  Var<float> x(Tensor::randn({2, 1, 6, 7}, rng));
  Tensor k({1, 1, 3, 3});
  k[4] = 1.0f;
  auto y = conv2d(x, Var<float>(k), 1, 1);
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  std::mt19937 rng(11);
  struct Case {
    Shape x, k;
    std::size_t stride, pad;
  };
  const std::vector<Case> cases = {{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 0}, {{2, 4, 9, 9}, {5, 4, 3, 3}, 1, 1},
                                   {{2, 3, 9, 9}, {2, 3, 3, 3}, 2, 1}, {{1, 1, 8, 6}, {4, 1, 1, 1}, 1, 0},
                                   {{2, 4, 7, 9}, {3, 4, 5, 3}, 1, 2}};
  for (const auto& c : cases) {
    TensorD x = TensorD::randn(c.x, rng), k = TensorD::randn(c.k, rng);
    const TensorD expect = naive_conv(x, k, c.stride, c.pad);
    const Tensor got = conv2d(Var<float>(x.cast<float>()), Var<float>(k.cast<float>()), c.stride, c.pad).value();
    ASSERT_EQ(got.shape(), expect.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-5 * (1 + std::abs(expect[i])));
    const TensorD got_d = conv2d(Var<double>(x), Var<double>(k), c.stride, c.pad).value();
    for (std::size_t i = 0; i < got_d.numel(); ++i) EXPECT_NEAR(got_d[i], expect[i], 1e-6);
  }
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  Var<float> x(Tensor::zeros({1, 2, 5, 5}));
  Var<float> k(Tensor::zeros({1, 3, 3, 3}));
  try {
    conv2d(x, k, 1, 0);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x2x5x5]"), std::string::npos);
    EXPECT_NE(msg.find("[1x3x3x3]"), std::string::npos);
  }
  EXPECT_THROW(conv2d(Var<float>(Tensor::zeros({1, 1, 4, 4})), Var<float>(Tensor::zeros({1, 1, 3, 3})), 2, 0),
               DimensionError);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937 rng(1);
  Var<float> x(Tensor::randn({2, 3, 4}, rng), true);
  backward(sum(x));
  for (float g : x.grad().data()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, HalfSquaredNormGivesIdentity) {
  std::mt19937 rng(2);
  Var<float> x(Tensor::randn({7}, rng), true);
  backward(scale(sum(mul(x, x)), 0.5f));
  for (std::size_t i = 0; i < 7; ++i) EXPECT_FLOAT_EQ(x.grad()[i], x.value()[i]);
}

TEST(Backward, AccumulatesUntilReset) {
  Var<float> x(Tensor::ones({3}), true);
  backward(sum(x));
  backward(sum(x));
  for (float g : x.grad().data()) EXPECT_EQ(g, 2.0f);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, NonScalarLossIsContractError) {
  Var<float> x(Tensor::ones({3}), true);
  EXPECT_THROW(backward(relu(x)), ContractError);
}

TEST(Backward, LogisticRegressionMatchesFiniteDifferences) {
  // BCE(sigmoid(w . x), y) on a 3-feature fixture; central differences at eps 1e-3.
  const TensorD features({4, 3}, {0.5, -1.2, 0.3, 1.0, 0.2, -0.7, -0.4, 0.9, 1.1, 0.0, -0.3, 0.8});
  const TensorD labels({4, 1}, {1, 0, 1, 0});
  const TensorD w0({1, 3}, {0.1, -0.2, 0.3});
  auto loss = [&](const Var<double>& w) {
    return binary_cross_entropy(sigmoid(dense(Var<double>(features), w, Var<double>(TensorD::zeros({1})))), labels);
  };
  EXPECT_LT(grad_check(loss, w0, 1e-3), 1e-4);
}

TEST(Backward, GradWrtIntermediateLeavesLeafGradsAlone) {
  Var<double> x(TensorD({3}, {1.0, -2.0, 3.0}), true);
  auto h = mul(x, x);
  auto y = sum(h);
  TensorD g = grad(y, h, TensorD::ones({1}));
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
  EXPECT_FALSE(x.has_grad());
  TensorD gx = grad(y, x, TensorD::ones({1}));
  EXPECT_EQ(gx[1], -4.0);
}

TEST(GradCheck, SumIsExact) {
  std::mt19937 rng(5);
  EXPECT_LT(grad_check([](const Var<double>& x) { return sum(x); }, TensorD::randn({4, 4}, rng), 1e-3), 1e-8);
}

TEST(GradCheck, ReluSumAwayFromKinks) {
  std::mt19937 rng(6);
  const TensorD p = fixtures::away_from_zero({10}, rng, 0.01);
  EXPECT_LT(grad_check([](const Var<double>& x) { return sum(relu(x)); }, p, 1e-3), 1e-4);
}

TEST(GradCheck, NanReportsInfinity) {
  auto f = [](const Var<double>& x) {
    Var<double> out(TensorD::scalar(std::nan("")));
    (void)x;
    return out;
  };
  EXPECT_TRUE(std::isinf(grad_check(f, TensorD::ones({2}), 1e-3)));
}

TEST(GradCheck, EveryOpOnTenSeededFixtures) {
  for (const auto& c : fixtures::op_gradient_cases()) {
    for (unsigned seed = 1; seed <= 10; ++seed) {
      EXPECT_LT(c.run(seed), 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Var<float> x(Tensor::zeros({3}), true);
  backward(sum(relu(x)));
  for (float g : x.grad().data()) EXPECT_EQ(g, 0.0f);
}

TEST(MaxPool, TiesRouteToFirstIndex) {
  Var<float> x(Tensor::ones({1, 1, 2, 2}), true);
  backward(sum(max_pool2d(x, 2, 2)));
  EXPECT_EQ(x.grad().vec(), (std::vector<float>{1, 0, 0, 0}));
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937 rng(4);
  auto p = softmax(Var<float>(Tensor::randn({5, 3}, rng, 10.0)));
  for (std::size_t n = 0; n < 5; ++n) {
    EXPECT_NEAR(p.value()[3 * n] + p.value()[3 * n + 1] + p.value()[3 * n + 2], 1.0, 1e-6);
  }
}

TEST(AddBias, RejectsOtherBroadcasts) {
  EXPECT_THROW(add(Var<float>(Tensor::zeros({2, 3})), Var<float>(Tensor::zeros({3}))), DimensionError);
  EXPECT_THROW(add_bias(Var<float>(Tensor::zeros({2, 3})), Var<float>(Tensor::zeros({2}))), DimensionError);
}

TEST(Sgd, ZeroLearningRateIsBitIdentical) {
  std::mt19937 rng(8);
  std::vector<Var<float>> params = {Var<float>(Tensor::randn({4, 4}, rng), true)};
  const Tensor before = params[0].value();
  backward(sum(mul(params[0], params[0])));
  sgd_step(params, 0.0f, 5e-4f);
  EXPECT_EQ(params[0].value(), before);
  sgd_step(params, 0.1f, 0.0f);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_FLOAT_EQ(params[0].value()[i], before[i] - 0.1f * 2.0f * before[i]);
}

TEST(Forward, NonFiniteValuesAreRejected) {
  Var<float> x(Tensor({2}, {1.0f, std::numeric_limits<float>::infinity()}));
  EXPECT_THROW(relu(x), NumericError);
}

TEST(Forward, Deterministic) {
  std::mt19937 rng(9);
  const Tensor x = Tensor::randn({2, 3, 8, 8}, rng), k = Tensor::randn({4, 3, 3, 3}, rng);
  auto run = [&] { return max_pool2d(relu(conv2d(Var<float>(x), Var<float>(k), 1, 1)), 2, 2).value(); };
  EXPECT_EQ(run(), run());
}

TEST(NoGrad, BuildsNoGraph) {
  Var<float> x(Tensor::ones({2}), true);
  NoGradGuard guard;
  auto y = relu(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937 rng(12);
  Checkpoint ckpt;
  ckpt.metadata = R"({"epoch":3})";
  ckpt.params.push_back({"conv0.weight", Tensor::randn({4, 3, 3, 3}, rng)});
  ckpt.params.push_back({"head.bias", Tensor({2}, {-0.0f, 1e-38f})});
  const std::string bytes = encode_checkpoint(ckpt);
  EXPECT_EQ(bytes.substr(0, 4), "ATTH");
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.metadata, ckpt.metadata);
  ASSERT_EQ(back.params.size(), 2u);
  EXPECT_EQ(std::memcmp(back.params[1].value.raw(), ckpt.params[1].value.raw(), 8), 0);
}

TEST(Checkpoint, TruncationAndVersionAreIncompatibility) {
  Checkpoint ckpt;
  ckpt.params.push_back({"w", Tensor::ones({3, 3})});
  const std::string bytes = encode_checkpoint(ckpt);
  for (std::size_t cut : {std::size_t{2}, std::size_t{9}, bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, cut)), IncompatibleFormatError) << cut;
  }
  std::string wrong = bytes;
  wrong[4] = 9;
  EXPECT_THROW(decode_checkpoint(wrong), IncompatibleFormatError);
}
