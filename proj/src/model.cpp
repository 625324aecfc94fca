#include "mba/model.hpp"

#include <map>
#include <set>

namespace mba {

template <typename T>
MbaNet<T>::MbaNet(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), params_(seed), plan_(build_plan(cfg.m, cfg.rfin_count, cfg.dkin_count)) {
  cfg_.validate();
  std::set<int> dkin_targets;
  for (const auto& p : plan_.dkin) dkin_targets.insert(p.prior_layer);
  prior_ = make_prior_branch(params_, cfg_, dkin_targets);
  domain_ = make_domain_branch(params_, cfg_);
  for (const auto& p : plan_.rfin) rfin_.push_back(make_rfin(params_, cfg_, p));
  for (const auto& p : plan_.dkin) dkin_.push_back(make_dkin(params_, cfg_, p));
  prompt_ = make_prompt_encoder(params_, cfg_);
  decoder_ = make_mask_decoder(params_, cfg_);
}

template <typename T>
std::vector<std::string> MbaNet<T>::fusion_parameter_names() const {
  std::vector<std::string> names;
  for (const auto& p : params_.items()) {
    if (p.name.starts_with("fusion.")) names.push_back(p.name);
  }
  return names;
}

template <typename T>
Tensor<T> MbaNet<T>::forward(const Tensor<T>& prior_view, const Tensor<T>& domain_view) const {
  const Index b = prior_view.extent(0);
  if (prior_view.shape() != Shape{b, 1, cfg_.x_s, cfg_.x_s}) {
    throw ShapeError("prior view must be [B,1," + std::to_string(cfg_.x_s) + "," +
                     std::to_string(cfg_.x_s) + "], got " + shape_str(prior_view.shape()));
  }
  if (domain_view.shape() != Shape{b, 1, cfg_.x_c, cfg_.x_c}) {
    throw ShapeError("domain view must be [B,1," + std::to_string(cfg_.x_c) + "," +
                     std::to_string(cfg_.x_c) + "], got " + shape_str(domain_view.shape()));
  }

  std::map<int, const RfinModule<T>*> rfin_by_target;
  std::map<int, const DkinModule<T>*> dkin_by_target;
  for (const auto& r : rfin_) rfin_by_target[r.pair.domain_layer] = &r;
  for (const auto& d : dkin_) dkin_by_target[d.pair.prior_layer] = &d;

  Tensor<T> tokens = patch_embed(prior_view, prior_.embed);
  Tensor<T> feature = domain_view;
  std::map<int, Tensor<T>> taps, domain_feats, rfin_inputs;
  std::map<int, Injection<T>> dkin_inputs;
  Tensor<T> prior_out, domain_out, fused;

  for (const auto& step : plan_.steps) {
    switch (step.kind) {
      case StepKind::Prior: {
        std::map<int, Injection<T>> segment_inputs;
        for (int i = step.first; i <= step.second; ++i) {
          const auto it = dkin_inputs.find(i);
          if (it != dkin_inputs.end()) segment_inputs.emplace(i, it->second);
        }
        auto seg = prior_forward_segment(prior_, tokens, step.first, step.second, segment_inputs);
        tokens = seg.state;
        taps.merge(seg.taps);
        break;
      }
      case StepKind::Domain: {
        const auto it = rfin_inputs.find(step.first);
        feature = domain_forward_layer(domain_, step.first, feature,
                                       it == rfin_inputs.end() ? nullptr : &it->second);
        domain_feats[step.first] = feature;
        break;
      }
      case StepKind::Rfin:
        rfin_inputs[step.second] = rfin(taps.at(step.first), *rfin_by_target.at(step.second));
        break;
      case StepKind::Dkin: {
        const auto* mod = dkin_by_target.at(step.second);
        dkin_inputs[step.second] = Injection<T>{dkin(domain_feats.at(step.first), *mod), &mod->norm};
        break;
      }
      case StepKind::Neck:
        prior_out = neck(prior_, tokens);
        break;
      case StepKind::DomainOut:
        domain_out = domain_output(domain_, feature);
        break;
      case StepKind::Fuse:
        fused = final_fuse(prior_out, domain_out);
        break;
    }
  }
  const auto prompts = encode_prompt(prompt_, b, cfg_.x_s, cfg_.x_s);
  return decode(decoder_, fused, prompts);
}

template class MbaNet<float>;
template class MbaNet<double>;

}  // namespace mba
