#include <cmath>
#include <numeric>

#include "mba/nn.hpp"
#include "test_util.hpp"

namespace mba {
namespace {

using test::random_tensor;
using TD = Tensor<double>;

// Per-head attention computed with plain loops.
std::vector<double> naive_attention(const TD& x, const AttentionParams<double>& p) {
  const Index b = x.extent(0), n = x.extent(1), c = x.extent(2);
  const Index inner = p.q.weight.extent(1), h = p.heads, d = inner / h;
  const auto proj = [&](const LinearParams<double>& lp, Index bi, Index t, Index o) {
    double acc = lp.bias.defined() ? lp.bias.at({o}) : 0.0;
    for (Index i = 0; i < c; ++i) acc += x.at({bi, t, i}) * lp.weight.at({i, o});
    return acc;
  };
  std::vector<double> out(static_cast<std::size_t>(b * n * c), 0.0);
  for (Index bi = 0; bi < b; ++bi) {
    std::vector<double> merged(static_cast<std::size_t>(n * inner), 0.0);
    for (Index hi = 0; hi < h; ++hi) {
      for (Index t = 0; t < n; ++t) {
        std::vector<double> s(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (Index u = 0; u < n; ++u) {
          double dot = 0;
          for (Index e = 0; e < d; ++e) dot += proj(p.q, bi, t, hi * d + e) * proj(p.k, bi, u, hi * d + e);
          s[u] = dot / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, s[u]);
        }
        double z = 0;
        for (double& v : s) z += (v = std::exp(v - mx));
        for (Index e = 0; e < d; ++e) {
          double acc = 0;
          for (Index u = 0; u < n; ++u) acc += s[u] / z * proj(p.v, bi, u, hi * d + e);
          merged[t * inner + hi * d + e] = acc;
        }
      }
    }
    for (Index t = 0; t < n; ++t) {
      for (Index o = 0; o < c; ++o) {
        double acc = p.out.bias.at({o});
        for (Index i = 0; i < inner; ++i) acc += merged[t * inner + i] * p.out.weight.at({i, o});
        out[(bi * n + t) * c + o] = acc;
      }
    }
  }
  return out;
}

void randomize(ParamSet<double>& ps, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : ps.items()) {
    for (double& v : p.tensor.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
}

TEST(Attention, MatchesNaiveMultiHead) {
  ParamSet<double> ps(1);
  const auto p = make_attention(ps, "attn", 6, 6, 3);
  randomize(ps, 2);
  Rng rng(3);
  const auto x = random_tensor({2, 5, 6}, rng, -1, 1, false);
  const auto y = attention(x, x, x, p);
  const auto ref = naive_attention(x, p);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(Attention, GlobalMsaIsPermutationEquivariant) {
  ParamSet<float> ps(21);
  const auto p = make_attention(ps, "attn", 8, 8, 2);
  Rng rng(22);
  std::vector<float> xv(16 * 8);
  for (float& v : xv) v = static_cast<float>(rng.uniform(-1, 1));
  std::vector<Index> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  for (Index i = 15; i > 0; --i) std::swap(perm[i], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
  std::vector<float> pv(xv.size());
  for (Index t = 0; t < 16; ++t) {
    for (Index c = 0; c < 8; ++c) pv[t * 8 + c] = xv[perm[t] * 8 + c];
  }
  const auto y = msa(Tensor<float>::from_data({1, 16, 8}, xv), p, AttentionMode::Global, 4);
  const auto yp = msa(Tensor<float>::from_data({1, 16, 8}, pv), p, AttentionMode::Global, 4);
  for (Index t = 0; t < 16; ++t) {
    for (Index c = 0; c < 8; ++c) EXPECT_NEAR(yp.at({0, t, c}), y.at({0, perm[t], c}), 1e-5);
  }
}

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
  ParamSet<double> ps(23);
  const auto p = make_attention(ps, "attn", 4, 4, 2);
  randomize(ps, 24);
  Rng rng(25);
  const auto x = random_tensor({1, 1, 4}, rng, -1, 1, false);
  const auto y = attention(x, x, x, p);
  const auto ref = apply(p.out, apply(p.v, x));
  for (Index c = 0; c < 4; ++c) EXPECT_NEAR(y.data()[c], ref.data()[c], 1e-14);
}

TEST(Window, PartitionRoundTrip) {
  Rng rng(4);
  const auto x = random_tensor({2, 16, 3}, rng, -1, 1, false);
  const auto tiles = window_partition(x, 2);
  ASSERT_EQ(tiles.shape(), (Shape{8, 4, 3}));
  // Tile 1 of sample 0 is rows 0-1, columns 2-3 of the 4x4 grid.
  EXPECT_EQ(tiles.at({1, 0, 0}), x.at({0, 2, 0}));
  EXPECT_EQ(tiles.at({1, 3, 2}), x.at({0, 7, 2}));
  const auto back = window_unpartition(tiles, 2, 4, 2);
  EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), x.data().begin()));
  EXPECT_THROW(window_partition(x, 3), ShapeError);
}

TEST(Window, FullWindowEqualsGlobal) {
  ParamSet<double> ps(5);
  const auto p = make_attention(ps, "attn", 4, 4, 2);
  randomize(ps, 6);
  Rng rng(7);
  const auto x = random_tensor({1, 16, 4}, rng, -1, 1, false);
  const auto w = msa(x, p, AttentionMode::Window, 4);
  const auto g = msa(x, p, AttentionMode::Global, 4);
  for (Index i = 0; i < x.numel(); ++i) EXPECT_NEAR(w.data()[i], g.data()[i], 1e-12);
}

TEST(Window, TokensOnlySeeTheirTile) {
  ParamSet<double> ps(8);
  const auto p = make_attention(ps, "attn", 4, 4, 2);
  randomize(ps, 9);
  Rng rng(10);
  auto x = random_tensor({1, 16, 4}, rng, -1, 1, false);
  const auto before = msa(x, p, AttentionMode::Window, 2);
  // Token 15 sits in the bottom-right tile; token 0's tile must not change.
  for (Index c = 0; c < 4; ++c) x.mutable_data()[15 * 4 + c] += 1.0;
  const auto after = msa(x, p, AttentionMode::Window, 2);
  for (Index c = 0; c < 4; ++c) EXPECT_EQ(before.at({0, 0, c}), after.at({0, 0, c}));
  EXPECT_NE(before.at({0, 10, 0}), after.at({0, 10, 0}));
}

TEST(TransformerBlock, ZeroNormInjectionIsNoOp) {
  ParamSet<double> ps(11);
  const auto blk = make_transformer_block(ps, "blk", 8, 2, 2, AttentionMode::Global, 2);
  NormParams<double> zero{TD::zeros({8}), TD::zeros({8})};
  Rng rng(12);
  const auto x = random_tensor({2, 4, 8}, rng, -1, 1, false);
  const auto inj = random_tensor({2, 4, 8}, rng, -1, 1, false);
  const Injection<double> injection{inj, &zero};
  const auto a = transformer_block(x, blk);
  const auto b = transformer_block(x, blk, &injection);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(TransformerBlock, GradientsMatchFiniteDifferences) {
  ParamSet<double> ps(13);
  const auto blk = make_transformer_block(ps, "blk", 4, 2, 2, AttentionMode::Window, 2);
  randomize(ps, 14);
  Rng rng(15);
  std::vector<TD> inputs{random_tensor({1, 16, 4}, rng)};
  for (auto& p : ps.items()) inputs.push_back(p.tensor);
  test::expect_gradients_match([&](const std::vector<TD>& in) { return transformer_block(in[0], blk); },
                               inputs, 1e-6, 1e-6);
}

TEST(ResidualSe, ShapesAndGateRange) {
  ParamSet<double> ps(16);
  const auto blk = make_residual_se_block(ps, "res", 3, 8, 2, 4);
  ASSERT_TRUE(blk.shortcut.has_value());
  Rng rng(17);
  const auto x = random_tensor({2, 3, 8, 8}, rng, -1, 1, false);
  const auto y = residual_se_block(x, blk);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 4, 4}));
  const auto gate = se_gate(random_tensor({2, 8, 4, 4}, rng, -5, 5, false), blk);
  for (double g : gate.data()) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
  EXPECT_THROW(residual_se_block(random_tensor({2, 4, 8, 8}, rng), blk), ShapeError);
}

TEST(ResidualSe, IdentityShortcutWhenShapesMatch) {
  ParamSet<double> ps(18);
  const auto blk = make_residual_se_block(ps, "res", 8, 8, 1, 4);
  EXPECT_FALSE(blk.shortcut.has_value());
}

TEST(PatchEmbed, TokenCountAndPositions) {
  ParamSet<double> ps(19);
  const auto pe = make_patch_embed(ps, "embed", 4, 6, 16);
  Rng rng(20);
  const auto y = patch_embed(random_tensor({2, 1, 16, 16}, rng, 0, 1, false), pe);
  EXPECT_EQ(y.shape(), (Shape{2, 16, 6}));
  EXPECT_THROW(patch_embed(random_tensor({2, 1, 18, 16}, rng), pe), ShapeError);
  EXPECT_THROW(patch_embed(random_tensor({2, 1, 20, 20}, rng), pe), ShapeError);
}

}  // namespace
}  // namespace mba
