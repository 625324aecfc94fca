#include <cmath>
#include <numeric>

#include "test_util.hpp"

namespace mba {
namespace {

using test::expect_gradients_match;
using test::random_tensor;
using TD = Tensor<double>;
using Inputs = std::vector<TD>;

TEST(Tensor, BackwardAccumulatesIntoLeaves) {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  sum(mul(x, x)).backward();
  sum(mul(x, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  auto x = TD::from_data({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, ShapeMismatchThrows) {
  const auto a = TD::zeros({2, 3});
  const auto b = TD::zeros({3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_THROW(reshape(a, {5}), ShapeError);
}

TEST(OpGrad, Elementwise) {
  Rng rng(1);
  const auto a = random_tensor({3, 4}, rng);
  const auto b = random_tensor({3, 4}, rng, 0.5, 2.0);
  expect_gradients_match([](const Inputs& in) { return add(in[0], in[1]); }, {a, b});
  expect_gradients_match([](const Inputs& in) { return sub(in[0], in[1]); }, {a, b});
  expect_gradients_match([](const Inputs& in) { return mul(in[0], in[1]); }, {a, b});
  expect_gradients_match([](const Inputs& in) { return div(in[0], in[1]); }, {a, b});
  expect_gradients_match([](const Inputs& in) { return scale(in[0], 0.3); }, {a});
  expect_gradients_match([](const Inputs& in) { return add_scalar(in[0], 0.3); }, {a});
  expect_gradients_match([](const Inputs& in) { return sigmoid(in[0]); }, {a});
  expect_gradients_match([](const Inputs& in) { return gelu(in[0]); }, {a});
}

TEST(OpGrad, PiecewiseLinearAwayFromKink) {
  Rng rng(2);
  auto a = random_tensor({12}, rng);
  for (double& v : a.mutable_data()) v += v >= 0 ? 0.1 : -0.1;
  expect_gradients_match([](const Inputs& in) { return leaky_relu(in[0]); }, {a});
  expect_gradients_match([](const Inputs& in) { return relu(in[0]); }, {a});
}

TEST(OpGrad, Contractions) {
  Rng rng(3);
  expect_gradients_match([](const Inputs& in) { return matmul(in[0], in[1]); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)});
  expect_gradients_match([](const Inputs& in) { return linear(in[0], in[1], in[2]); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng), random_tensor({5}, rng)});
  expect_gradients_match([](const Inputs& in) { return conv2d(in[0], in[1], in[2], 2, 1); },
                         {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  expect_gradients_match([](const Inputs& in) { return conv_transpose2d(in[0], in[1], in[2], 2); },
                         {random_tensor({2, 3, 3, 3}, rng), random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng)});
}

TEST(OpGrad, Normalization) {
  Rng rng(4);
  expect_gradients_match([](const Inputs& in) { return layer_norm(in[0], in[1], in[2]); },
                         {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  expect_gradients_match([](const Inputs& in) { return instance_norm(in[0], in[1], in[2]); },
                         {random_tensor({2, 3, 3, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  expect_gradients_match([](const Inputs& in) { return softmax(in[0], -1); }, {random_tensor({3, 5}, rng)});
  expect_gradients_match([](const Inputs& in) { return softmax(in[0], 0); }, {random_tensor({3, 5}, rng)});
}

TEST(OpGrad, Layout) {
  Rng rng(5);
  expect_gradients_match([](const Inputs& in) { return permute(in[0], {2, 0, 1}); }, {random_tensor({2, 3, 4}, rng)});
  expect_gradients_match([](const Inputs& in) { return tokens_to_grid(in[0]); }, {random_tensor({2, 9, 3}, rng)});
  expect_gradients_match([](const Inputs& in) { return grid_to_tokens(in[0]); }, {random_tensor({2, 3, 2, 2}, rng)});
  expect_gradients_match([](const Inputs& in) { return concat<double>({in[0], in[1]}, 1); },
                         {random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)});
  expect_gradients_match([](const Inputs& in) { return slice(in[0], 1, 1, 2); }, {random_tensor({2, 4, 2}, rng)});
  expect_gradients_match([](const Inputs& in) { return add_broadcast(in[0], in[1]); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({3, 4}, rng)});
  expect_gradients_match([](const Inputs& in) { return repeat_leading(in[0], 3); }, {random_tensor({2, 2}, rng)});
  expect_gradients_match([](const Inputs& in) { return scale_channels(in[0], in[1]); },
                         {random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 3}, rng)});
  expect_gradients_match([](const Inputs& in) { return global_avg_pool(in[0]); }, {random_tensor({2, 3, 2, 2}, rng)});
  expect_gradients_match([](const Inputs& in) { return sum_last(in[0]); }, {random_tensor({2, 3, 4}, rng)});
  expect_gradients_match([](const Inputs& in) { return mean(in[0]); }, {random_tensor({2, 3}, rng)});
}

TEST(OpGrad, BinaryCrossEntropy) {
  Rng rng(6);
  auto target = TD::from_data({2, 3}, {0, 1, 1, 0, 1, 0});
  expect_gradients_match([&](const Inputs& in) { return bce_with_logits(in[0], target); },
                         {random_tensor({2, 3}, rng, -3, 3)});
}

TEST(OpValue, Conv2dMatchesDirectSum) {
  Rng rng(8);
  const auto x = random_tensor({2, 3, 6, 5}, rng, -1, 1, false);
  const auto w = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
  const auto b = random_tensor({4}, rng, -1, 1, false);
  const Index stride = 2, pad = 1;
  const auto y = conv2d(x, w, b, stride, pad);
  const Index ho = (6 + 2 - 3) / 2 + 1, wo = (5 + 2 - 3) / 2 + 1;
  ASSERT_EQ(y.shape(), (Shape{2, 4, ho, wo}));
  for (Index n = 0; n < 2; ++n) {
    for (Index o = 0; o < 4; ++o) {
      for (Index i = 0; i < ho; ++i) {
        for (Index j = 0; j < wo; ++j) {
          double acc = b.at({o});
          for (Index c = 0; c < 3; ++c) {
            for (Index ki = 0; ki < 3; ++ki) {
              for (Index kj = 0; kj < 3; ++kj) {
                const Index yi = i * stride - pad + ki, xj = j * stride - pad + kj;
                if (yi < 0 || yi >= 6 || xj < 0 || xj >= 5) continue;
                acc += w.at({o, c, ki, kj}) * x.at({n, c, yi, xj});
              }
            }
          }
          EXPECT_NEAR(y.at({n, o, i, j}), acc, 1e-12);
        }
      }
    }
  }
}

TEST(OpValue, ConvTransposeMatchesScatter) {
  Rng rng(9);
  const auto x = random_tensor({1, 2, 3, 3}, rng, -1, 1, false);
  const auto w = random_tensor({2, 3, 2, 2}, rng, -1, 1, false);
  const auto b = random_tensor({3}, rng, -1, 1, false);
  const auto y = conv_transpose2d(x, w, b, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 6, 6}));
  std::vector<double> ref(3 * 36);
  for (Index o = 0; o < 3; ++o) {
    for (Index k = 0; k < 36; ++k) ref[o * 36 + k] = b.at({o});
  }
  for (Index c = 0; c < 2; ++c) {
    for (Index i = 0; i < 3; ++i) {
      for (Index j = 0; j < 3; ++j) {
        for (Index o = 0; o < 3; ++o) {
          for (Index ki = 0; ki < 2; ++ki) {
            for (Index kj = 0; kj < 2; ++kj) {
              ref[o * 36 + (2 * i + ki) * 6 + 2 * j + kj] += x.at({0, c, i, j}) * w.at({c, o, ki, kj});
            }
          }
        }
      }
    }
  }
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(y.data()[k], ref[k], 1e-12);
}

TEST(OpValue, LayerNormTwoPass) {
  Rng rng(10);
  const auto x = random_tensor({4, 7}, rng, -2, 3, false);
  const auto g = TD::full({7}, 1.0), b = TD::zeros({7});
  const auto y = layer_norm(x, g, b);
  for (Index r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (Index c = 0; c < 7; ++c) mu += x.at({r, c}) / 7;
    for (Index c = 0; c < 7; ++c) var += (x.at({r, c}) - mu) * (x.at({r, c}) - mu) / 7;
    for (Index c = 0; c < 7; ++c) {
      EXPECT_NEAR(y.at({r, c}), (x.at({r, c}) - mu) / std::sqrt(var + kNormEps), 1e-12);
    }
  }
}

TEST(OpValue, SoftmaxRowsAreDistributions) {
  Rng rng(11);
  const auto x = random_tensor({3, 6}, rng, -30, 30, false);
  const auto y = softmax(x, -1);
  for (Index r = 0; r < 3; ++r) {
    double s = 0;
    for (Index c = 0; c < 6; ++c) {
      EXPECT_GT(y.at({r, c}), 0.0);
      s += y.at({r, c});
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(OpValue, TokensToGridIsRowMajor) {
  std::vector<double> v(2 * 4 * 3);
  std::iota(v.begin(), v.end(), 0.0);
  const auto tokens = TD::from_data({2, 4, 3}, v);
  const auto grid = tokens_to_grid(tokens);
  ASSERT_EQ(grid.shape(), (Shape{2, 3, 2, 2}));
  for (Index n = 0; n < 2; ++n) {
    for (Index t = 0; t < 4; ++t) {
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(grid.at({n, c, t / 2, t % 2}), tokens.at({n, t, c}));
    }
  }
  const auto back = grid_to_tokens(grid);
  EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), tokens.data().begin()));
}

TEST(OpValue, HandExamples) {
  EXPECT_EQ(matmul(TD::from_data({1, 2}, {1, 2}), TD::from_data({2, 1}, {3, 4})).item(), 11.0);
  EXPECT_EQ(leaky_relu(TD::scalar(-1.0)).item(), -0.01);

  const auto conv = conv2d(TD::full({1, 1, 4, 4}, 1.0), TD::full({1, 1, 3, 3}, 1.0), TD::zeros({1}), 1, 1);
  EXPECT_EQ(conv.at({0, 0, 1, 1}), 9.0);
  EXPECT_EQ(conv.at({0, 0, 2, 2}), 9.0);
  EXPECT_EQ(conv.at({0, 0, 0, 0}), 4.0);
  EXPECT_EQ(conv.at({0, 0, 3, 3}), 4.0);
  EXPECT_EQ(conv.at({0, 0, 0, 1}), 6.0);

  const auto ln = layer_norm(TD::from_data({1, 3}, {1, 2, 3}), TD::full({3}, 1.0), TD::zeros({3}));
  EXPECT_NEAR(ln.data()[0], -1.2247, 1e-3);
  EXPECT_NEAR(ln.data()[1], 0.0, 1e-12);
  EXPECT_NEAR(ln.data()[2], 1.2247, 1e-3);
}

TEST(OpValue, InstanceNormGroupStatistics) {
  Rng rng(12);
  const auto x = random_tensor({2, 3, 5, 4}, rng, -4, 7, false);
  const auto y = instance_norm(x, TD::full({3}, 1.0), TD::zeros({3}));
  for (Index n = 0; n < 2; ++n) {
    for (Index c = 0; c < 3; ++c) {
      double mu = 0, var = 0;
      for (Index i = 0; i < 20; ++i) mu += y.data()[(n * 3 + c) * 20 + i] / 20;
      for (Index i = 0; i < 20; ++i) {
        const double d = y.data()[(n * 3 + c) * 20 + i] - mu;
        var += d * d / 20;
      }
      EXPECT_LT(std::abs(mu), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-4);
    }
  }
}

TEST(KinkProbe, SignatureTracksActivationSigns) {
  const auto x = TD::from_data({3}, {0.5, -0.5, 1.0});
  std::uint64_t first, second, flipped;
  {
    KinkProbe p;
    leaky_relu(x);
    first = p.signature();
    EXPECT_EQ(p.count(), 3u);
  }
  {
    KinkProbe p;
    leaky_relu(x);
    second = p.signature();
  }
  {
    KinkProbe p;
    leaky_relu(TD::from_data({3}, {0.5, 0.5, 1.0}));
    flipped = p.signature();
  }
  EXPECT_EQ(first, second);
  EXPECT_NE(first, flipped);
}

}  // namespace
}  // namespace mba
