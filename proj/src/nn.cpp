#include "mba/nn.hpp"

#include <cmath>

namespace mba {

namespace {

constexpr double kTransformerInitStd = 0.02;

Index side_of(Index n) {
  const Index g = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
  if (g * g != n) throw ShapeError("token count " + std::to_string(n) + " is not a perfect square");
  return g;
}

}  // namespace

template <typename T>
LinearParams<T> make_linear(ParamSet<T>& ps, const std::string& prefix, Index in, Index out, Init w,
                            bool with_bias) {
  if (w.kind == InitKind::HeNormal && w.fan_in == 0) w.fan_in = in;
  LinearParams<T> p;
  p.weight = ps.add(prefix + ".weight", {in, out}, w);
  if (with_bias) p.bias = ps.add(prefix + ".bias", {out}, {InitKind::Zeros});
  return p;
}

template <typename T>
ConvParams<T> make_conv(ParamSet<T>& ps, const std::string& prefix, Index in, Index out, Index kernel,
                        Index stride, Index padding) {
  ConvParams<T> p;
  p.weight = ps.add(prefix + ".weight", {out, in, kernel, kernel}, {InitKind::HeNormal});
  p.bias = ps.add(prefix + ".bias", {out}, {InitKind::Zeros});
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <typename T>
NormParams<T> make_norm(ParamSet<T>& ps, const std::string& prefix, Index channels, Init gamma,
                        Init beta) {
  return {ps.add(prefix + ".gamma", {channels}, gamma), ps.add(prefix + ".beta", {channels}, beta)};
}

template <typename T>
AttentionParams<T> make_attention(ParamSet<T>& ps, const std::string& prefix, Index width,
                                  Index internal, Index heads) {
  if (internal % heads != 0) throw ShapeError(prefix + ": internal width not divisible by heads");
  const Init w{InitKind::TruncatedNormal, kTransformerInitStd};
  AttentionParams<T> p;
  p.q = make_linear(ps, prefix + ".q", width, internal, w);
  p.k = make_linear(ps, prefix + ".k", width, internal, w);
  p.v = make_linear(ps, prefix + ".v", width, internal, w);
  p.out = make_linear(ps, prefix + ".out", internal, width, w);
  p.heads = heads;
  return p;
}

template <typename T>
TransformerBlock<T> make_transformer_block(ParamSet<T>& ps, const std::string& prefix, Index width,
                                           Index heads, Index mlp_ratio, AttentionMode mode,
                                           Index window) {
  if (width % heads != 0) throw ShapeError(prefix + ": width not divisible by heads");
  const Init w{InitKind::TruncatedNormal, kTransformerInitStd};
  TransformerBlock<T> b;
  b.ln1 = make_norm(ps, prefix + ".ln1", width);
  b.attn = make_attention(ps, prefix + ".attn", width, width, heads);
  b.ln2 = make_norm(ps, prefix + ".ln2", width);
  b.mlp1 = make_linear(ps, prefix + ".mlp1", width, width * mlp_ratio, w);
  b.mlp2 = make_linear(ps, prefix + ".mlp2", width * mlp_ratio, width, w);
  b.mode = mode;
  b.window = window;
  return b;
}

template <typename T>
ResidualSeBlock<T> make_residual_se_block(ParamSet<T>& ps, const std::string& prefix, Index in,
                                          Index out, Index stride, Index se_reduction) {
  if (stride != 1 && stride != 2) throw ShapeError(prefix + ": stride must be 1 or 2");
  ResidualSeBlock<T> b;
  b.conv1 = make_conv(ps, prefix + ".conv1", in, out, 3, stride, 1);
  b.norm1 = make_norm(ps, prefix + ".norm1", out);
  b.conv2 = make_conv(ps, prefix + ".conv2", out, out, 3, 1, 1);
  b.norm2 = make_norm(ps, prefix + ".norm2", out);
  const Index hidden = std::max<Index>(1, out / se_reduction);
  b.se_reduce = make_linear(ps, prefix + ".se_reduce", out, hidden, {InitKind::HeNormal});
  b.se_expand = make_linear(ps, prefix + ".se_expand", hidden, out, {InitKind::HeNormal});
  if (stride != 1 || in != out) b.shortcut = make_conv(ps, prefix + ".shortcut", in, out, 1, stride, 0);
  b.in_channels = in;
  b.out_channels = out;
  b.stride = stride;
  return b;
}

template <typename T>
PatchEmbed<T> make_patch_embed(ParamSet<T>& ps, const std::string& prefix, Index patch, Index width,
                               Index tokens) {
  PatchEmbed<T> pe;
  pe.proj = make_conv(ps, prefix + ".proj", 1, width, patch, patch, 0);
  pe.pos = ps.add(prefix + ".pos", {tokens, width}, {InitKind::TruncatedNormal, kTransformerInitStd});
  pe.patch = patch;
  return pe;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                    const AttentionParams<T>& p) {
  const Index b = q_in.extent(0), nq = q_in.extent(1), nk = k_in.extent(1);
  if (k_in.extent(0) != b || v_in.extent(0) != b || v_in.extent(1) != nk) {
    throw ShapeError("attention: query/key/value batch or length mismatch");
  }
  const Index inner = p.q.weight.extent(1), h = p.heads, d = inner / h;
  const Tensor<T> q = apply(p.q, q_in);
  const Tensor<T> k = apply(p.k, k_in);
  const Tensor<T> v = apply(p.v, v_in);
  const auto qh = permute(reshape(q, {b, nq, h, d}), {0, 2, 1, 3});
  const auto kt = permute(reshape(k, {b, nk, h, d}), {0, 2, 3, 1});
  const auto vh = permute(reshape(v, {b, nk, h, d}), {0, 2, 1, 3});
  const auto scores = scale(matmul(qh, kt), T(1) / std::sqrt(T(d)));
  const auto weights = softmax(scores, -1);
  const auto merged = reshape(permute(matmul(weights, vh), {0, 2, 1, 3}), {b, nq, inner});
  return apply(p.out, merged);
}

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, Index window) {
  const Index b = x.extent(0), c = x.extent(2), g = side_of(x.extent(1));
  if (window < 1 || g % window != 0) {
    throw ShapeError("window " + std::to_string(window) + " does not tile a " + std::to_string(g) +
                     "x" + std::to_string(g) + " token grid");
  }
  const Index nw = g / window;
  const auto tiles = permute(reshape(x, {b, nw, window, nw, window, c}), {0, 1, 3, 2, 4, 5});
  return reshape(tiles, {b * nw * nw, window * window, c});
}

template <typename T>
Tensor<T> window_unpartition(const Tensor<T>& x, Index batch, Index grid, Index window) {
  const Index nw = grid / window, c = x.extent(2);
  const auto tiles = permute(reshape(x, {batch, nw, nw, window, window, c}), {0, 1, 3, 2, 4, 5});
  return reshape(tiles, {batch, grid * grid, c});
}

template <typename T>
Tensor<T> msa(const Tensor<T>& x, const MsaParams<T>& p, AttentionMode mode, Index window) {
  if (x.dim() != 3) throw ShapeError("msa: expected [B,N,C], got " + shape_str(x.shape()));
  const Index g = side_of(x.extent(1));
  if (mode == AttentionMode::Global) return attention(x, x, x, p);
  const auto tiles = window_partition(x, window);
  return window_unpartition(attention(tiles, tiles, tiles, p), x.extent(0), g, window);
}

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlock<T>& blk,
                            const Injection<T>* injected) {
  Tensor<T> h = msa(layer_norm(x, blk.ln1.gamma, blk.ln1.beta), blk.attn, blk.mode, blk.window);
  if (injected) {
    if (injected->tokens.shape() != x.shape()) {
      throw ShapeError("transformer_block: injected " + shape_str(injected->tokens.shape()) +
                       " does not match tokens " + shape_str(x.shape()));
    }
    h = add(h, layer_norm(injected->tokens, injected->norm->gamma, injected->norm->beta));
  }
  h = add(h, x);
  const auto mlp = apply(blk.mlp2, gelu(apply(blk.mlp1, layer_norm(h, blk.ln2.gamma, blk.ln2.beta))));
  return add(h, mlp);
}

template <typename T>
Tensor<T> se_gate(const Tensor<T>& fx, const ResidualSeBlock<T>& blk) {
  const auto squeezed = global_avg_pool(fx);
  return sigmoid(apply(blk.se_expand, leaky_relu(apply(blk.se_reduce, squeezed))));
}

template <typename T>
Tensor<T> residual_se_block(const Tensor<T>& x, const ResidualSeBlock<T>& blk) {
  if (x.dim() != 4 || x.extent(1) != blk.in_channels) {
    throw ShapeError("residual_se_block: expected " + std::to_string(blk.in_channels) +
                     " input channels, got " + shape_str(x.shape()));
  }
  auto f = leaky_relu(instance_norm(apply(blk.conv1, x), blk.norm1.gamma, blk.norm1.beta));
  f = instance_norm(apply(blk.conv2, f), blk.norm2.gamma, blk.norm2.beta);
  const auto gated = scale_channels(f, se_gate(f, blk));
  const auto skip = blk.shortcut ? apply(*blk.shortcut, x) : x;
  return leaky_relu(add(skip, gated));
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const PatchEmbed<T>& pe) {
  if (x.dim() != 4 || x.extent(1) != 1) {
    throw ShapeError("patch_embed: expected [B,1,H,W], got " + shape_str(x.dim() ? x.shape() : Shape{}));
  }
  if (x.extent(2) % pe.patch != 0 || x.extent(3) % pe.patch != 0) {
    throw ShapeError("patch_embed: resolution " + std::to_string(x.extent(2)) + "x" +
                     std::to_string(x.extent(3)) + " not divisible by patch " +
                     std::to_string(pe.patch));
  }
  const auto tokens = grid_to_tokens(apply(pe.proj, x));
  if (tokens.extent(1) != pe.pos.extent(0)) {
    throw ShapeError("patch_embed: " + std::to_string(tokens.extent(1)) +
                     " tokens but positional table has " + std::to_string(pe.pos.extent(0)));
  }
  return add_broadcast(tokens, pe.pos);
}

#define MBA_INSTANTIATE_NN(T)                                                                     \
  template LinearParams<T> make_linear(ParamSet<T>&, const std::string&, Index, Index, Init, bool); \
  template ConvParams<T> make_conv(ParamSet<T>&, const std::string&, Index, Index, Index, Index,   \
                                   Index);                                                        \
  template NormParams<T> make_norm(ParamSet<T>&, const std::string&, Index, Init, Init);          \
  template AttentionParams<T> make_attention(ParamSet<T>&, const std::string&, Index, Index,      \
                                             Index);                                              \
  template TransformerBlock<T> make_transformer_block(ParamSet<T>&, const std::string&, Index,    \
                                                      Index, Index, AttentionMode, Index);        \
  template ResidualSeBlock<T> make_residual_se_block(ParamSet<T>&, const std::string&, Index,     \
                                                     Index, Index, Index);                        \
  template PatchEmbed<T> make_patch_embed(ParamSet<T>&, const std::string&, Index, Index, Index); \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                               const AttentionParams<T>&);                                        \
  template Tensor<T> window_partition(const Tensor<T>&, Index);                                   \
  template Tensor<T> window_unpartition(const Tensor<T>&, Index, Index, Index);                   \
  template Tensor<T> msa(const Tensor<T>&, const MsaParams<T>&, AttentionMode, Index);            \
  template Tensor<T> transformer_block(const Tensor<T>&, const TransformerBlock<T>&,              \
                                       const Injection<T>*);                                      \
  template Tensor<T> se_gate(const Tensor<T>&, const ResidualSeBlock<T>&);                        \
  template Tensor<T> residual_se_block(const Tensor<T>&, const ResidualSeBlock<T>&);              \
  template Tensor<T> patch_embed(const Tensor<T>&, const PatchEmbed<T>&);

MBA_INSTANTIATE_NN(float)
MBA_INSTANTIATE_NN(double)

#undef MBA_INSTANTIATE_NN

}  // namespace mba
