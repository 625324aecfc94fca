#pragma once

#include <cstdint>
#include <vector>

#include "mba/config.hpp"
#include "mba/domain_branch.hpp"
#include "mba/fusion.hpp"
#include "mba/mask_head.hpp"
#include "mba/prior_branch.hpp"

namespace mba {

/// The full network: prior branch on the x_s view, domain branch on the x_c
/// view, RFIN/DKIN fusion executed in plan order, element-wise fusion of the
/// two branch outputs and the prompted mask decoder.
template <typename T>
class MbaNet {
 public:
  MbaNet(const ModelConfig& cfg, std::uint64_t seed);
  MbaNet(const MbaNet&) = delete;
  MbaNet& operator=(const MbaNet&) = delete;
  MbaNet(MbaNet&&) = default;
  MbaNet& operator=(MbaNet&&) = default;

  /// prior_view [B,1,x_s,x_s], domain_view [B,1,x_c,x_c] -> logits [B,1,x_c,x_c].
  Tensor<T> forward(const Tensor<T>& prior_view, const Tensor<T>& domain_view) const;

  const ModelConfig& config() const { return cfg_; }
  const FusionPlan& plan() const { return plan_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  const PriorBranch<T>& prior() const { return prior_; }
  PriorBranch<T>& prior() { return prior_; }
  const DomainBranch<T>& domain() const { return domain_; }
  const std::vector<RfinModule<T>>& rfin_modules() const { return rfin_; }
  const std::vector<DkinModule<T>>& dkin_modules() const { return dkin_; }
  const PromptEncoder<T>& prompt_encoder() const { return prompt_; }
  const MaskDecoder<T>& decoder() const { return decoder_; }

  /// Names of every RFIN and DKIN parameter.
  std::vector<std::string> fusion_parameter_names() const;

 private:
  ModelConfig cfg_;
  ParamSet<T> params_;
  FusionPlan plan_;
  PriorBranch<T> prior_;
  DomainBranch<T> domain_;
  std::vector<RfinModule<T>> rfin_;
  std::vector<DkinModule<T>> dkin_;
  PromptEncoder<T> prompt_;
  MaskDecoder<T> decoder_;
};

}  // namespace mba
