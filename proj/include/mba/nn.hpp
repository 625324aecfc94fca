#pragma once

#include <optional>
#include <string>

#include "mba/ops.hpp"
#include "mba/params.hpp"

// Parameterized building blocks: attention, transformer block, residual SE
// block, MLPs and patch embedding. Parameter records hold tensor handles that
// alias the entries of the owning ParamSet.

namespace mba {

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], may be undefined
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  Index stride = 1;
  Index padding = 0;
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Attention projections. q/k/v map the model width to an internal width;
/// `out` maps back.
template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, out;
  Index heads = 1;
};
template <typename T>
using MsaParams = AttentionParams<T>;

enum class AttentionMode { Window, Global };

template <typename T>
struct TransformerBlock {
  NormParams<T> ln1, ln2;
  MsaParams<T> attn;
  LinearParams<T> mlp1, mlp2;
  AttentionMode mode = AttentionMode::Window;
  Index window = 1;
};

template <typename T>
struct ResidualSeBlock {
  ConvParams<T> conv1, conv2;
  NormParams<T> norm1, norm2;
  LinearParams<T> se_reduce, se_expand;
  std::optional<ConvParams<T>> shortcut;
  Index in_channels = 0;
  Index out_channels = 0;
  Index stride = 1;
};

template <typename T>
struct PatchEmbed {
  ConvParams<T> proj;
  Tensor<T> pos;  // [N, C]
  Index patch = 16;
};

/// Extra residual term of a transformer block: LN(tokens) with its own affine.
template <typename T>
struct Injection {
  Tensor<T> tokens;
  const NormParams<T>* norm = nullptr;
};

// Construction. Every builder registers its tensors under `prefix`.
template <typename T>
LinearParams<T> make_linear(ParamSet<T>& ps, const std::string& prefix, Index in, Index out, Init w,
                            bool with_bias = true);
template <typename T>
ConvParams<T> make_conv(ParamSet<T>& ps, const std::string& prefix, Index in, Index out, Index kernel,
                        Index stride, Index padding);
template <typename T>
NormParams<T> make_norm(ParamSet<T>& ps, const std::string& prefix, Index channels,
                        Init gamma = {InitKind::Ones}, Init beta = {InitKind::Zeros});
template <typename T>
AttentionParams<T> make_attention(ParamSet<T>& ps, const std::string& prefix, Index width,
                                  Index internal, Index heads);
template <typename T>
TransformerBlock<T> make_transformer_block(ParamSet<T>& ps, const std::string& prefix, Index width,
                                           Index heads, Index mlp_ratio, AttentionMode mode,
                                           Index window);
template <typename T>
ResidualSeBlock<T> make_residual_se_block(ParamSet<T>& ps, const std::string& prefix, Index in,
                                          Index out, Index stride, Index se_reduction);
template <typename T>
PatchEmbed<T> make_patch_embed(ParamSet<T>& ps, const std::string& prefix, Index patch, Index width,
                               Index tokens);

// Forward.
template <typename T>
Tensor<T> apply(const LinearParams<T>& p, const Tensor<T>& x) {
  return linear(x, p.weight, p.bias);
}
template <typename T>
Tensor<T> apply(const ConvParams<T>& p, const Tensor<T>& x) {
  return conv2d(x, p.weight, p.bias, p.stride, p.padding);
}

/// Multi-head scaled dot-product attention over [B,Nq,C] queries and
/// [B,Nk,C] keys/values; scale 1/sqrt(internal/heads).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionParams<T>& p);

/// Self-attention on a square token grid. Window mode attends within
/// non-overlapping window x window tiles; Global mode over all tokens.
template <typename T>
Tensor<T> msa(const Tensor<T>& x, const MsaParams<T>& p, AttentionMode mode, Index window);

/// f' = MSA(LN(f)) [+ LN(injected)] + f, then out = f' + MLP(LN(f')).
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerBlock<T>& blk,
                            const Injection<T>* injected = nullptr);

/// y = act(shortcut(x) + gate * F(x)), F = conv-IN-act-conv-IN, gate from
/// squeeze-and-excitation on F(x).
template <typename T>
Tensor<T> residual_se_block(const Tensor<T>& x, const ResidualSeBlock<T>& blk);

/// SE channel gate in (0,1) for a residual-path tensor [B,C,H,W] -> [B,C].
template <typename T>
Tensor<T> se_gate(const Tensor<T>& fx, const ResidualSeBlock<T>& blk);

/// [B,1,H,W] -> tokens [B,(H/p)*(W/p),C] plus positional embedding.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const PatchEmbed<T>& pe);

/// Window partition [B,g*g,C] -> [B*(g/w)^2, w*w, C] and its inverse.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, Index window);
template <typename T>
Tensor<T> window_unpartition(const Tensor<T>& x, Index batch, Index grid, Index window);

}  // namespace mba
