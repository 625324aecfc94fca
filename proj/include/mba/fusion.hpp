#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mba/config.hpp"
#include "mba/nn.hpp"

// Bidirectional aggregation between the two encoder branches.
//
// RFIN carries a global-layer embedding of the prior branch into one of the
// shallow domain layers {3, 4, 5}:
//     f~ = LeakyReLU(IN(W_af * R(f_s) + b_af)),   f_c' = f_c + f~
// DKIN carries a deep domain feature map (layers 6, 7, 8) into one of the
// last prior layers as an extra residual term of the attention sublayer:
//     f_s' = MSA(LN(f_s)) + LN(R(f_c)) + f_s
//
// The two directions make the branches interleave; build_plan derives the
// execution order and rejects wirings whose dependencies form a cycle.

namespace mba {

struct RfinPair {
  int prior_layer = 0;
  int domain_layer = 0;
  bool operator==(const RfinPair&) const = default;
};

struct DkinPair {
  int domain_layer = 0;
  int prior_layer = 0;
  bool operator==(const DkinPair&) const = default;
};

/// First `count` of ((m,3), (2m,4), (3m,5)).
std::vector<RfinPair> rfin_pairs(int m, int count);
/// Targets are the last `count` prior layers; sources cycle 8, 7, 6, 8, ...
/// starting from the last target. Returned in ascending target order.
std::vector<DkinPair> dkin_pairs(int m, int count);

enum class StepKind { Prior, Domain, Rfin, Dkin, Neck, DomainOut, Fuse };

struct PlanStep {
  StepKind kind;
  int first = 0;   // Prior: first layer; Domain: layer; Rfin/Dkin: source layer
  int second = 0;  // Prior: last layer; Rfin/Dkin: target layer
  bool operator==(const PlanStep&) const = default;
};

struct FusionPlan {
  int m = 0;
  int rfin_count = 0;
  int dkin_count = 0;
  std::vector<RfinPair> rfin;
  std::vector<DkinPair> dkin;
  std::vector<PlanStep> steps;

  /// One step per line, e.g. "prior 1..3", "rfin prior 3 -> domain 3".
  std::string trace() const;
};

/// Schedules the two branches: each runs until it is blocked or has just
/// produced a cross-branch source, then hands over. Fusion steps run right
/// after their source. Throws PlanCycleError naming the conflicting layers
/// when neither branch can advance.
FusionPlan build_plan(int m, int rfin_count, int dkin_count);

/// Replays the plan symbolically and throws std::logic_error if a step reads
/// a value that has not been produced yet.
void validate_plan(const FusionPlan& plan);

template <typename T>
struct RfinModule {
  ConvParams<T> proj;  // W_af [C_c, C, 1, 1], b_af [C_c]
  NormParams<T> norm;  // instance norm affine
  RfinPair pair;
};

template <typename T>
struct DkinModule {
  std::optional<ConvParams<T>> align;  // 1x1 C_c -> C, absent when C_c == C
  NormParams<T> norm;                  // LN applied to the injected tokens
  DkinPair pair;
};

/// Fusion modules start at zero output (norm gamma = beta = 0), so a fresh
/// model behaves like the two independent branches.
template <typename T>
RfinModule<T> make_rfin(ParamSet<T>& ps, const ModelConfig& cfg, RfinPair pair);
template <typename T>
DkinModule<T> make_dkin(ParamSet<T>& ps, const ModelConfig& cfg, DkinPair pair);

/// Prior tokens [B,N,C] -> projected feature map [B,C_c,g,g].
template <typename T>
Tensor<T> rfin(const Tensor<T>& f_s, const RfinModule<T>& mod);

/// Domain feature map [B,C_c,h,w] -> tokens [B,h*w,C]. The consuming
/// transformer block applies mod.norm and the residual addition.
template <typename T>
Tensor<T> dkin(const Tensor<T>& f_c, const DkinModule<T>& mod);

template <typename T>
Tensor<T> final_fuse(const Tensor<T>& prior_out, const Tensor<T>& domain_out);

}  // namespace mba
