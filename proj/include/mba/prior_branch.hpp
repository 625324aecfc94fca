#pragma once

#include <map>
#include <set>
#include <vector>

#include "mba/config.hpp"
#include "mba/nn.hpp"

namespace mba {

/// SAM-style transformer encoder: patch embedding, 4m transformer layers with
/// global attention at layers {m, 2m, 3m} (1-based) and windowed attention
/// elsewhere, followed by a neck projecting tokens to the decoder width.
template <typename T>
struct PriorBranch {
  PatchEmbed<T> embed;
  std::vector<TransformerBlock<T>> layers;  // layers[i - 1] is layer i
  LinearParams<T> neck_proj;                // 1x1 projection C -> C_d
  NormParams<T> neck_norm;
  bool neck_norm_enabled = true;
  int m = 0;
  std::set<int> injection_layers;  // layers accepting a DKIN term

  int layer_count() const { return static_cast<int>(layers.size()); }
  bool is_global(int layer) const { return layer == m || layer == 2 * m || layer == 3 * m; }
};

std::vector<int> global_layers(int m);

template <typename T>
PriorBranch<T> make_prior_branch(ParamSet<T>& ps, const ModelConfig& cfg,
                                 const std::set<int>& injection_layers);

template <typename T>
struct SegmentResult {
  Tensor<T> state;
  std::map<int, Tensor<T>> taps;  // outputs of global layers inside the segment
};

/// Runs layers [from_layer, to_layer] (1-based, inclusive). Layers present in
/// `injections` add the DKIN term inside their attention sublayer.
template <typename T>
SegmentResult<T> prior_forward_segment(const PriorBranch<T>& pb, const Tensor<T>& state,
                                       int from_layer, int to_layer,
                                       const std::map<int, Injection<T>>& injections);

/// Tokens [B,N,C] -> [B,C_d,g,g].
template <typename T>
Tensor<T> neck(const PriorBranch<T>& pb, const Tensor<T>& tokens);

}  // namespace mba
