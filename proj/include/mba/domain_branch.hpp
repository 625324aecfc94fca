#pragma once

#include <vector>

#include "mba/config.hpp"
#include "mba/nn.hpp"

namespace mba {

inline constexpr int kDomainLayers = 8;

/// Eight residual SE blocks on the low-resolution view. Layers 1-2 halve the
/// resolution (C_c/2 then C_c channels); layers 3-8 keep extent and width.
template <typename T>
struct DomainBranch {
  std::vector<ResidualSeBlock<T>> layers;  // layers[j - 1] is layer j
  ConvParams<T> out_proj;                  // 1x1 C_c -> C_d
};

template <typename T>
DomainBranch<T> make_domain_branch(ParamSet<T>& ps, const ModelConfig& cfg);

/// f_j = block_j(x) [+ injection]; injections are legal only at layers 3, 4, 5.
template <typename T>
Tensor<T> domain_forward_layer(const DomainBranch<T>& db, int layer, const Tensor<T>& x,
                               const Tensor<T>* injection = nullptr);

template <typename T>
Tensor<T> domain_output(const DomainBranch<T>& db, const Tensor<T>& x8);

}  // namespace mba
