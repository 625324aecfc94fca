#include "mba/mask_head.hpp"

#include <cmath>
#include <numbers>

namespace mba {

namespace {

constexpr double kMaxFrequency = 16.0;

template <typename T>
Tensor<T> constant(const Shape& shape, const std::vector<double>& values) {
  return Tensor<T>::from_data(shape, std::vector<T>(values.begin(), values.end()));
}

/// LayerNorm over the channel axis of [B,C,H,W].
template <typename T>
Tensor<T> channel_layer_norm(const Tensor<T>& x, const NormParams<T>& n) {
  const auto nhwc = permute(x, {0, 2, 3, 1});
  return permute(layer_norm(nhwc, n.gamma, n.beta), {0, 3, 1, 2});
}

template <typename T>
Tensor<T> mlp(const LinearParams<T>& a, const LinearParams<T>& b, const Tensor<T>& x) {
  return apply(b, gelu(apply(a, x)));
}

template <typename T>
TwoWayLayer<T> make_two_way_layer(ParamSet<T>& ps, const std::string& prefix, Index width,
                                  Index heads, Index mlp_dim, bool skip_first_pe) {
  TwoWayLayer<T> l;
  l.self_attn = make_attention(ps, prefix + ".self_attn", width, width, heads);
  l.norm1 = make_norm(ps, prefix + ".norm1", width);
  l.token_to_image = make_attention(ps, prefix + ".token_to_image", width, width / 2, heads);
  l.norm2 = make_norm(ps, prefix + ".norm2", width);
  l.mlp1 = make_linear(ps, prefix + ".mlp1", width, mlp_dim, {InitKind::HeNormal});
  l.mlp2 = make_linear(ps, prefix + ".mlp2", mlp_dim, width, {InitKind::HeNormal});
  l.norm3 = make_norm(ps, prefix + ".norm3", width);
  l.image_to_token = make_attention(ps, prefix + ".image_to_token", width, width / 2, heads);
  l.norm4 = make_norm(ps, prefix + ".norm4", width);
  l.skip_first_pe = skip_first_pe;
  return l;
}

}  // namespace

std::vector<double> sincos_encoding(const std::vector<std::pair<double, double>>& points,
                                    int width) {
  if (width < 4 || width % 4 != 0) {
    throw ShapeError("sincos_encoding: width must be a positive multiple of 4, got " +
                     std::to_string(width));
  }
  const int k = width / 4;
  std::vector<double> freqs(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const double t = k > 1 ? static_cast<double>(i) / (k - 1) : 0.0;
    freqs[static_cast<std::size_t>(i)] = std::numbers::pi * std::pow(kMaxFrequency, t);
  }
  std::vector<double> out;
  out.reserve(points.size() * static_cast<std::size_t>(width));
  for (const auto& [x, y] : points) {
    for (double f : freqs) out.push_back(std::sin(f * x));
    for (double f : freqs) out.push_back(std::cos(f * x));
    for (double f : freqs) out.push_back(std::sin(f * y));
    for (double f : freqs) out.push_back(std::cos(f * y));
  }
  return out;
}

template <typename T>
Tensor<T> grid_encoding(int grid, int width) {
  std::vector<std::pair<double, double>> centres;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) centres.emplace_back((j + 0.5) / grid, (i + 0.5) / grid);
  }
  return constant<T>({Index(grid) * grid, width}, sincos_encoding(centres, width));
}

template <typename T>
PromptEncoder<T> make_prompt_encoder(ParamSet<T>& ps, const ModelConfig& cfg) {
  PromptEncoder<T> enc;
  enc.corner_embed = ps.add("prompt.corner_embed", {2, cfg.C_d}, {InitKind::Normal, 1.0});
  enc.width = cfg.C_d;
  return enc;
}

template <typename T>
Tensor<T> encode_prompt(const PromptEncoder<T>& enc, Index batch, Index height, Index width) {
  if (height <= 0 || width <= 0) throw ShapeError("encode_prompt: empty image extent");
  // Corners (0,0) and (W,H) divided by the extent.
  const auto pe = constant<T>({2, enc.width}, sincos_encoding({{0.0, 0.0}, {1.0, 1.0}}, enc.width));
  return repeat_leading(add(pe, enc.corner_embed), batch);
}

template <typename T>
MaskDecoder<T> make_mask_decoder(ParamSet<T>& ps, const ModelConfig& cfg) {
  const Index c = cfg.C_d, heads = cfg.decoder_heads;
  if (c % 8 != 0 || (c / 2) % heads != 0) {
    throw ShapeError("mask decoder: C_d must be a multiple of 8 with C_d/2 divisible by heads");
  }
  MaskDecoder<T> dec;
  dec.width = cfg.C_d;
  dec.mask_token = ps.add("decoder.mask_token", {1, c}, {InitKind::Normal, 1.0});
  for (int i = 0; i < cfg.decoder_depth; ++i) {
    dec.layers.push_back(make_two_way_layer(ps, "decoder.layer" + std::to_string(i + 1), c, heads,
                                            cfg.decoder_mlp_dim, i == 0));
  }
  dec.final_attn = make_attention(ps, "decoder.final_attn", c, c / 2, heads);
  dec.final_norm = make_norm(ps, "decoder.final_norm", c);
  // Each output pixel of a stride-2, kernel-2 transposed conv sees Cin inputs.
  dec.up1_weight = ps.add("decoder.up1.weight", {c, c / 2, 2, 2}, {InitKind::HeNormal, 0.0, c});
  dec.up1_bias = ps.add("decoder.up1.bias", {c / 2}, {InitKind::Zeros});
  dec.up_norm = make_norm(ps, "decoder.up_norm", c / 2);
  dec.up2_weight = ps.add("decoder.up2.weight", {c / 2, c / 4, 2, 2}, {InitKind::HeNormal, 0.0, c / 2});
  dec.up2_bias = ps.add("decoder.up2.bias", {c / 4}, {InitKind::Zeros});
  dec.hyper1 = make_linear(ps, "decoder.hyper1", c, c, {InitKind::HeNormal});
  dec.hyper2 = make_linear(ps, "decoder.hyper2", c, c, {InitKind::HeNormal});
  dec.hyper3 = make_linear(ps, "decoder.hyper3", c, c / 4, {InitKind::HeNormal});
  return dec;
}

template <typename T>
Tensor<T> decode(const MaskDecoder<T>& dec, const Tensor<T>& fused, const Tensor<T>& prompts) {
  if (fused.dim() != 4 || fused.extent(1) != dec.width) {
    throw ShapeError("decode: expected fused [B," + std::to_string(dec.width) + ",g,g], got " +
                     shape_str(fused.shape()));
  }
  const Index b = fused.extent(0), g = fused.extent(2);
  if (g < 2 || fused.extent(3) != g) throw ShapeError("decode: grid must be square with side >= 2");
  if (prompts.dim() != 3 || prompts.extent(0) != b || prompts.extent(2) != dec.width) {
    throw ShapeError("decode: prompt tokens " + shape_str(prompts.shape()) + " do not match batch " +
                     std::to_string(b) + " and width " + std::to_string(dec.width));
  }

  const auto query_pe = concat<T>({repeat_leading(dec.mask_token, b), prompts}, 1);
  const auto key_pe = grid_encoding<T>(static_cast<int>(g), dec.width);
  Tensor<T> queries = query_pe;
  Tensor<T> keys = grid_to_tokens(fused);

  for (const auto& l : dec.layers) {
    if (l.skip_first_pe) {
      queries = attention(queries, queries, queries, l.self_attn);
    } else {
      const auto q = add(queries, query_pe);
      queries = add(queries, attention(q, q, queries, l.self_attn));
    }
    queries = layer_norm(queries, l.norm1.gamma, l.norm1.beta);

    auto q = add(queries, query_pe);
    auto k = add_broadcast(keys, key_pe);
    queries = add(queries, attention(q, k, keys, l.token_to_image));
    queries = layer_norm(queries, l.norm2.gamma, l.norm2.beta);

    queries = add(queries, mlp(l.mlp1, l.mlp2, queries));
    queries = layer_norm(queries, l.norm3.gamma, l.norm3.beta);

    q = add(queries, query_pe);
    k = add_broadcast(keys, key_pe);
    keys = add(keys, attention(k, q, queries, l.image_to_token));
    keys = layer_norm(keys, l.norm4.gamma, l.norm4.beta);
  }
  const auto q = add(queries, query_pe);
  const auto k = add_broadcast(keys, key_pe);
  queries = add(queries, attention(q, k, keys, dec.final_attn));
  queries = layer_norm(queries, dec.final_norm.gamma, dec.final_norm.beta);

  auto up = conv_transpose2d(tokens_to_grid(keys), dec.up1_weight, dec.up1_bias, 2);
  up = gelu(channel_layer_norm(up, dec.up_norm));
  up = gelu(conv_transpose2d(up, dec.up2_weight, dec.up2_bias, 2));

  const auto mask_out = slice(queries, 1, 0, 1);  // [B,1,C_d]
  const auto hyper = apply(dec.hyper3, gelu(apply(dec.hyper2, gelu(apply(dec.hyper1, mask_out)))));
  const Index side = 4 * g, c4 = dec.width / 4;
  const auto logits = matmul(hyper, reshape(up, {b, c4, side * side}));
  return reshape(logits, {b, 1, side, side});
}

#define MBA_INSTANTIATE_MASK_HEAD(T)                                                          \
  template Tensor<T> grid_encoding<T>(int, int);                                             \
  template PromptEncoder<T> make_prompt_encoder(ParamSet<T>&, const ModelConfig&);           \
  template Tensor<T> encode_prompt(const PromptEncoder<T>&, Index, Index, Index);            \
  template MaskDecoder<T> make_mask_decoder(ParamSet<T>&, const ModelConfig&);               \
  template Tensor<T> decode(const MaskDecoder<T>&, const Tensor<T>&, const Tensor<T>&);

MBA_INSTANTIATE_MASK_HEAD(float)
MBA_INSTANTIATE_MASK_HEAD(double)

#undef MBA_INSTANTIATE_MASK_HEAD

}  // namespace mba
