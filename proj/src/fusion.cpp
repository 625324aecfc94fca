#include "mba/fusion.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "mba/domain_branch.hpp"
#include "mba/errors.hpp"

namespace mba {

std::vector<RfinPair> rfin_pairs(int m, int count) {
  if (count < 0 || count > 3) throw ConfigError("rfin_count must be in 0..3");
  std::vector<RfinPair> pairs;
  for (int k = 0; k < count; ++k) pairs.push_back({(k + 1) * m, 3 + k});
  return pairs;
}

std::vector<DkinPair> dkin_pairs(int m, int count) {
  if (count < 0 || count > 4 * m) throw ConfigError("dkin_count must be in 0..4m");
  static constexpr int kSources[3] = {8, 7, 6};
  std::vector<DkinPair> pairs;
  for (int k = 0; k < count; ++k) pairs.push_back({kSources[k % 3], 4 * m - k});
  std::reverse(pairs.begin(), pairs.end());
  return pairs;
}

std::string FusionPlan::trace() const {
  std::ostringstream os;
  for (const auto& s : steps) {
    switch (s.kind) {
      case StepKind::Prior:
        os << "prior " << s.first << ".." << s.second;
        break;
      case StepKind::Domain:
        os << "domain " << s.first;
        break;
      case StepKind::Rfin:
        os << "rfin prior " << s.first << " -> domain " << s.second;
        break;
      case StepKind::Dkin:
        os << "dkin domain " << s.first << " -> prior " << s.second;
        break;
      case StepKind::Neck:
        os << "neck";
        break;
      case StepKind::DomainOut:
        os << "domain_out";
        break;
      case StepKind::Fuse:
        os << "fuse";
        break;
    }
    os << '\n';
  }
  return os.str();
}

FusionPlan build_plan(int m, int rfin_count, int dkin_count) {
  if (m < 1) throw ConfigError("m must be >= 1");
  FusionPlan plan;
  plan.m = m;
  plan.rfin_count = rfin_count;
  plan.dkin_count = dkin_count;
  plan.rfin = rfin_pairs(m, rfin_count);
  plan.dkin = dkin_pairs(m, dkin_count);

  const int prior_layers = 4 * m;
  std::map<int, int> rfin_source_of;  // domain layer -> prior source
  std::map<int, int> dkin_source_of;  // prior layer -> domain source
  for (const auto& p : plan.rfin) rfin_source_of[p.domain_layer] = p.prior_layer;
  for (const auto& p : plan.dkin) dkin_source_of[p.prior_layer] = p.domain_layer;

  int p = 0, q = 0;  // layers completed in each branch
  const auto prior_ready = [&](int layer) {
    const auto it = dkin_source_of.find(layer);
    return it == dkin_source_of.end() || it->second <= q;
  };
  const auto domain_ready = [&](int layer) {
    const auto it = rfin_source_of.find(layer);
    return it == rfin_source_of.end() || it->second <= p;
  };

  bool prior_turn = true;
  int idle_turns = 0;
  while (p < prior_layers || q < kDomainLayers) {
    bool advanced = false;
    if (prior_turn) {
      const int start = p + 1;
      while (p < prior_layers && prior_ready(p + 1)) {
        ++p;
        advanced = true;
        if (std::any_of(plan.rfin.begin(), plan.rfin.end(),
                        [p](const RfinPair& r) { return r.prior_layer == p; }))
          break;
      }
      if (advanced) {
        plan.steps.push_back({StepKind::Prior, start, p});
        for (const auto& r : plan.rfin)
          if (r.prior_layer == p) plan.steps.push_back({StepKind::Rfin, r.prior_layer, r.domain_layer});
      }
    } else {
      while (q < kDomainLayers && domain_ready(q + 1)) {
        ++q;
        advanced = true;
        plan.steps.push_back({StepKind::Domain, q, 0});
        bool emitted = false;
        for (const auto& d : plan.dkin) {
          if (d.domain_layer == q) {
            plan.steps.push_back({StepKind::Dkin, d.domain_layer, d.prior_layer});
            emitted = true;
          }
        }
        if (emitted) break;
      }
    }
    idle_turns = advanced ? 0 : idle_turns + 1;
    if (idle_turns >= 2) {
      const int waiting_prior = p + 1, waiting_domain = q + 1;
      std::ostringstream os;
      os << "fusion plan (m=" << m << ", rfin=" << rfin_count << ", dkin=" << dkin_count
         << ") has a cycle: prior layer " << waiting_prior << " needs DKIN from domain layer "
         << dkin_source_of.at(waiting_prior) << ", but domain layer " << waiting_domain
         << " needs RFIN from prior layer " << rfin_source_of.at(waiting_domain);
      throw PlanCycleError(os.str());
    }
    prior_turn = !prior_turn;
  }
  plan.steps.push_back({StepKind::Neck});
  plan.steps.push_back({StepKind::DomainOut});
  plan.steps.push_back({StepKind::Fuse});
  validate_plan(plan);
  return plan;
}

void validate_plan(const FusionPlan& plan) {
  int p = 0, q = 0;
  std::set<int> taps;            // prior layers whose output was recorded
  std::set<int> rfin_ready;      // domain layers with an injection available
  std::set<int> domain_feats;    // domain layers whose output was recorded
  std::set<int> dkin_ready;      // prior layers with an injection available
  bool neck_done = false, domain_out_done = false, fused = false;
  std::map<int, int> rfin_target_of, dkin_target_of;
  std::set<int> rfin_targets, dkin_targets;
  for (const auto& r : plan.rfin) rfin_targets.insert(r.domain_layer);
  for (const auto& d : plan.dkin) dkin_targets.insert(d.prior_layer);

  const auto fail = [](const std::string& what) { throw std::logic_error("invalid plan: " + what); };
  for (const auto& s : plan.steps) {
    switch (s.kind) {
      case StepKind::Prior:
        if (s.first != p + 1 || s.second < s.first || s.second > 4 * plan.m)
          fail("prior segment out of order");
        for (int i = s.first; i <= s.second; ++i) {
          if (dkin_targets.contains(i) && !dkin_ready.contains(i))
            fail("prior layer " + std::to_string(i) + " runs before its DKIN input");
          taps.insert(i);
        }
        p = s.second;
        break;
      case StepKind::Domain:
        if (s.first != q + 1) fail("domain layer out of order");
        if (rfin_targets.contains(s.first) && !rfin_ready.contains(s.first))
          fail("domain layer " + std::to_string(s.first) + " runs before its RFIN input");
        domain_feats.insert(s.first);
        q = s.first;
        break;
      case StepKind::Rfin:
        if (!taps.contains(s.first)) fail("RFIN reads prior layer " + std::to_string(s.first) + " early");
        rfin_ready.insert(s.second);
        break;
      case StepKind::Dkin:
        if (!domain_feats.contains(s.first))
          fail("DKIN reads domain layer " + std::to_string(s.first) + " early");
        dkin_ready.insert(s.second);
        break;
      case StepKind::Neck:
        if (p != 4 * plan.m) fail("neck before the last prior layer");
        neck_done = true;
        break;
      case StepKind::DomainOut:
        if (q != kDomainLayers) fail("domain output before layer 8");
        domain_out_done = true;
        break;
      case StepKind::Fuse:
        if (!neck_done || !domain_out_done) fail("fuse before both branch outputs");
        fused = true;
        break;
    }
  }
  if (!fused) fail("plan never fuses");
}

template <typename T>
RfinModule<T> make_rfin(ParamSet<T>& ps, const ModelConfig& cfg, RfinPair pair) {
  const std::string prefix = "fusion.rfin.d" + std::to_string(pair.domain_layer);
  RfinModule<T> mod;
  mod.proj = make_conv(ps, prefix + ".proj", cfg.C, cfg.C_c, 1, 1, 0);
  mod.norm = make_norm(ps, prefix + ".norm", cfg.C_c, {InitKind::Zeros}, {InitKind::Zeros});
  mod.pair = pair;
  return mod;
}

template <typename T>
DkinModule<T> make_dkin(ParamSet<T>& ps, const ModelConfig& cfg, DkinPair pair) {
  const std::string prefix = "fusion.dkin.p" + std::to_string(pair.prior_layer);
  DkinModule<T> mod;
  if (cfg.C_c != cfg.C) mod.align = make_conv(ps, prefix + ".align", cfg.C_c, cfg.C, 1, 1, 0);
  mod.norm = make_norm(ps, prefix + ".norm", cfg.C, {InitKind::Zeros}, {InitKind::Zeros});
  mod.pair = pair;
  return mod;
}

template <typename T>
Tensor<T> rfin(const Tensor<T>& f_s, const RfinModule<T>& mod) {
  const auto grid = tokens_to_grid(f_s);
  const auto projected = apply(mod.proj, grid);
  return leaky_relu(instance_norm(projected, mod.norm.gamma, mod.norm.beta));
}

template <typename T>
Tensor<T> dkin(const Tensor<T>& f_c, const DkinModule<T>& mod) {
  if (f_c.dim() != 4) throw ShapeError("dkin: expected [B,C_c,h,w], got " + shape_str(f_c.shape()));
  const auto aligned = mod.align ? apply(*mod.align, f_c) : f_c;
  const auto tokens = grid_to_tokens(aligned);
  if (tokens.extent(2) != mod.norm.gamma.extent(0)) {
    throw ShapeError("dkin: feature width " + std::to_string(tokens.extent(2)) +
                     " does not match prior width " + std::to_string(mod.norm.gamma.extent(0)));
  }
  return tokens;
}

template <typename T>
Tensor<T> final_fuse(const Tensor<T>& prior_out, const Tensor<T>& domain_out) {
  return add(prior_out, domain_out);
}

#define MBA_INSTANTIATE_FUSION(T)                                                    \
  template RfinModule<T> make_rfin(ParamSet<T>&, const ModelConfig&, RfinPair);     \
  template DkinModule<T> make_dkin(ParamSet<T>&, const ModelConfig&, DkinPair);     \
  template Tensor<T> rfin(const Tensor<T>&, const RfinModule<T>&);                  \
  template Tensor<T> dkin(const Tensor<T>&, const DkinModule<T>&);                  \
  template Tensor<T> final_fuse(const Tensor<T>&, const Tensor<T>&);

MBA_INSTANTIATE_FUSION(float)
MBA_INSTANTIATE_FUSION(double)

#undef MBA_INSTANTIATE_FUSION

}  // namespace mba
