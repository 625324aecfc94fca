#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mba/dataio.hpp"
#include "mba/model.hpp"
#include "mba/rng.hpp"

namespace mba {

enum class LrSchedule { Poly, Exp };
LrSchedule lr_schedule_from_string(const std::string& s);

struct AugConfig {
  double scale_lo = 0.9, scale_hi = 1.1;
  double shift_lo = -0.1, shift_hi = 0.1;
  double flip_prob = 0.5;
};

struct TrainConfig {
  int epochs = 50;
  int batch = 2;
  double lr0 = 3e-4;
  double momentum = 0.99;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  LrSchedule schedule = LrSchedule::Poly;
  double exp_gamma = 0.9;  // per-epoch factor for LrSchedule::Exp
  std::uint64_t seed = 0;
  AugConfig aug;
  double dice_weight = 1.0;
  double bce_weight = 1.0;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
};

/// Learning rate for a 0-based epoch: lr0 * (1 - e/E)^power (poly) or
/// lr0 * gamma^e (exp).
double learning_rate(const TrainConfig& cfg, int epoch);

/// Soft Dice per sample, (2 sum(p g) + 1) / (sum p + sum g + 1) with
/// p = sigmoid(logits), averaged over the batch. [1].
template <typename T>
Tensor<T> soft_dice(const Tensor<T>& logits, const Tensor<T>& target);

/// dice_weight * (1 - soft_dice) + bce_weight * mean BCE-with-logits.
template <typename T>
Tensor<T> seg_loss(const Tensor<T>& logits, const Tensor<T>& target, double dice_weight = 1.0,
                   double bce_weight = 1.0);

/// Momentum SGD with L2 weight decay on one flat parameter:
///   g' = g + wd * theta;  v = momentum * v + g';  theta -= lr * v
template <typename T>
void sgd_update(std::span<T> theta, std::span<const T> grad, std::span<T> velocity, double lr,
                double momentum, double weight_decay);

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> velocity;  // one buffer per parameter, same order as the ParamSet
  int epoch = 0;
};

/// Applies sgd_update to every parameter. Throws std::logic_error naming a
/// parameter that has no gradient.
template <typename T>
void sgd_step(ParamSet<T>& params, OptimizerState<T>& state, double lr, double momentum,
              double weight_decay);

struct AugParams {
  double scale = 1.0;
  double shift = 0.0;
  bool flip_h = false;
  bool flip_v = false;
};

AugParams sample_aug(const AugConfig& cfg, Rng& rng);
/// image' = clamp(image * scale + shift, 0, 1); flips apply to both images.
void apply_aug(const AugParams& p, GrayImage& image, GrayImage& mask);
void flip_horizontal(GrayImage& image);
void flip_vertical(GrayImage& image);

struct LossRecord {
  int iteration = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  std::vector<LossRecord> log;
  int epochs_completed = 0;
};

/// CSV with header `iteration,epoch,lr,loss`; values printed with %.9g.
std::string loss_log_csv(const std::vector<LossRecord>& log);

/// Runs cfg.epochs passes over `data` in batches of cfg.batch. Each epoch
/// shuffles the order from (seed, epoch); each sample is augmented with an
/// RNG derived from (seed, epoch, sample index). Throws NumericError when a
/// loss is not finite. `on_epoch` (optional) is called after every epoch.
TrainResult train(MbaNet<float>& model, const std::vector<LoadedSample>& data, const TrainConfig& cfg,
                  const std::function<void(int epoch, const std::vector<LossRecord>&)>& on_epoch = {});

}  // namespace mba
