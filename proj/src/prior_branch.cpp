#include "mba/prior_branch.hpp"

namespace mba {

std::vector<int> global_layers(int m) { return {m, 2 * m, 3 * m}; }

template <typename T>
PriorBranch<T> make_prior_branch(ParamSet<T>& ps, const ModelConfig& cfg,
                                 const std::set<int>& injection_layers) {
  PriorBranch<T> pb;
  pb.m = cfg.m;
  const Index g = cfg.grid();
  pb.embed = make_patch_embed(ps, "prior.embed", cfg.patch, cfg.C, g * g);
  for (int i = 1; i <= cfg.layers(); ++i) {
    const bool global = i == cfg.m || i == 2 * cfg.m || i == 3 * cfg.m;
    pb.layers.push_back(make_transformer_block(
        ps, "prior.layer" + std::to_string(i), cfg.C, cfg.heads, cfg.mlp_ratio,
        global ? AttentionMode::Global : AttentionMode::Window, cfg.window_size()));
  }
  pb.neck_proj = make_linear(ps, "prior.neck.proj", cfg.C, cfg.C_d, {InitKind::HeNormal});
  pb.neck_norm = make_norm(ps, "prior.neck.norm", cfg.C_d);
  for (int i : injection_layers) {
    if (i < 1 || i > cfg.layers()) {
      throw ShapeError("prior branch: injection layer " + std::to_string(i) + " out of range");
    }
  }
  pb.injection_layers = injection_layers;
  return pb;
}

template <typename T>
SegmentResult<T> prior_forward_segment(const PriorBranch<T>& pb, const Tensor<T>& state,
                                       int from_layer, int to_layer,
                                       const std::map<int, Injection<T>>& injections) {
  if (from_layer < 1 || from_layer > to_layer || to_layer > pb.layer_count()) {
    throw std::out_of_range("prior segment [" + std::to_string(from_layer) + ", " +
                            std::to_string(to_layer) + "] outside layers 1.." +
                            std::to_string(pb.layer_count()));
  }
  for (const auto& [layer, inj] : injections) {
    (void)inj;
    if (!pb.injection_layers.contains(layer)) {
      throw std::invalid_argument("prior layer " + std::to_string(layer) +
                                  " does not accept a DKIN injection");
    }
  }
  SegmentResult<T> out;
  out.state = state;
  for (int i = from_layer; i <= to_layer; ++i) {
    const auto it = injections.find(i);
    out.state = transformer_block(out.state, pb.layers[i - 1],
                                  it == injections.end() ? nullptr : &it->second);
    if (pb.is_global(i)) out.taps.emplace(i, out.state);
  }
  return out;
}

template <typename T>
Tensor<T> neck(const PriorBranch<T>& pb, const Tensor<T>& tokens) {
  auto h = apply(pb.neck_proj, tokens);
  if (pb.neck_norm_enabled) h = layer_norm(h, pb.neck_norm.gamma, pb.neck_norm.beta);
  return tokens_to_grid(h);
}

#define MBA_INSTANTIATE_PRIOR(T)                                                               \
  template PriorBranch<T> make_prior_branch(ParamSet<T>&, const ModelConfig&,                 \
                                            const std::set<int>&);                            \
  template SegmentResult<T> prior_forward_segment(const PriorBranch<T>&, const Tensor<T>&,    \
                                                  int, int, const std::map<int, Injection<T>>&); \
  template Tensor<T> neck(const PriorBranch<T>&, const Tensor<T>&);

MBA_INSTANTIATE_PRIOR(float)
MBA_INSTANTIATE_PRIOR(double)

#undef MBA_INSTANTIATE_PRIOR

}  // namespace mba
