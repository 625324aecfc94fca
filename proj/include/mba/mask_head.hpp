#pragma once

#include <vector>

#include "mba/config.hpp"
#include "mba/nn.hpp"

// Prompt encoder for a full-image box prompt and a small two-way transformer
// mask decoder producing one logit map at 4x the token-grid resolution.

namespace mba {

/// Deterministic sine-cosine encoding of normalized (x, y) points. Each axis
/// uses width/4 geometric frequencies between 1 and 16 (in units of pi) and
/// contributes [sin, cos]; the layout is [sin x, cos x, sin y, cos y].
/// Returns width values per point, row-major [points.size(), width].
std::vector<double> sincos_encoding(const std::vector<std::pair<double, double>>& points,
                                    int width);

/// Positional encoding of a g x g token grid at cell centres, [g*g, width].
template <typename T>
Tensor<T> grid_encoding(int grid, int width);

template <typename T>
struct PromptEncoder {
  Tensor<T> corner_embed;  // [2, C_d]: top-left, bottom-right
  int width = 0;
};

template <typename T>
PromptEncoder<T> make_prompt_encoder(ParamSet<T>& ps, const ModelConfig& cfg);

/// Box covering the whole (height x width) image: corners (0,0) and (W,H),
/// normalized to [0,1], encoded, plus the corner-type embeddings. [B,2,C_d].
template <typename T>
Tensor<T> encode_prompt(const PromptEncoder<T>& enc, Index batch, Index height, Index width);

template <typename T>
struct TwoWayLayer {
  AttentionParams<T> self_attn;   // tokens attend to tokens
  AttentionParams<T> token_to_image;
  AttentionParams<T> image_to_token;
  NormParams<T> norm1, norm2, norm3, norm4;
  LinearParams<T> mlp1, mlp2;
  bool skip_first_pe = false;
};

template <typename T>
struct MaskDecoder {
  Tensor<T> mask_token;  // [1, C_d]
  std::vector<TwoWayLayer<T>> layers;
  AttentionParams<T> final_attn;
  NormParams<T> final_norm;
  Tensor<T> up1_weight, up1_bias;  // transposed conv C_d -> C_d/2, kernel 2, stride 2
  NormParams<T> up_norm;
  Tensor<T> up2_weight, up2_bias;  // transposed conv C_d/2 -> C_d/4
  LinearParams<T> hyper1, hyper2, hyper3;
  int width = 0;
};

template <typename T>
MaskDecoder<T> make_mask_decoder(ParamSet<T>& ps, const ModelConfig& cfg);

/// Runs the two-way transformer on the fused embedding [B,C_d,g,g] and the
/// prompt tokens [B,2,C_d], upsamples the embedding 4x and returns
/// logits [B,1,4g,4g] as per-pixel dot products with the hypernetwork output.
template <typename T>
Tensor<T> decode(const MaskDecoder<T>& dec, const Tensor<T>& fused, const Tensor<T>& prompts);

}  // namespace mba
