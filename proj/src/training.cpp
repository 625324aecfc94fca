#include "mba/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mba/errors.hpp"

namespace mba {

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "poly") return LrSchedule::Poly;
  if (s == "exp") return LrSchedule::Exp;
  throw ConfigError("--lr-schedule must be poly or exp, got '" + s + "'");
}

void TrainConfig::validate() const {
  const auto check = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  check(epochs > 0, "epochs must be positive");
  check(batch > 0, "batch must be positive");
  check(lr0 > 0, "lr must be positive");
  check(momentum >= 0 && momentum < 1, "momentum must be in [0, 1)");
  check(weight_decay >= 0, "weight decay must be non-negative");
  check(poly_power > 0, "poly power must be positive");
  check(exp_gamma > 0 && exp_gamma <= 1, "exp gamma must be in (0, 1]");
  check(aug.scale_lo > 0 && aug.scale_lo <= aug.scale_hi, "invalid scale range");
  check(aug.shift_lo <= aug.shift_hi, "invalid shift range");
  check(aug.flip_prob >= 0 && aug.flip_prob <= 1, "flip probability must be in [0, 1]");
  check(dice_weight >= 0 && bce_weight >= 0 && dice_weight + bce_weight > 0,
        "loss weights must be non-negative and not both zero");
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch > cfg.epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside 0.." + std::to_string(cfg.epochs));
  }
  if (cfg.schedule == LrSchedule::Exp) return cfg.lr0 * std::pow(cfg.exp_gamma, epoch);
  return cfg.lr0 * std::pow(1.0 - static_cast<double>(epoch) / cfg.epochs, cfg.poly_power);
}

template <typename T>
Tensor<T> soft_dice(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("soft_dice: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  const Index b = logits.extent(0), n = logits.numel() / b;
  const auto p = reshape(sigmoid(logits), {b, n});
  const auto g = reshape(target, {b, n});
  const auto numerator = add_scalar(scale(sum_last(mul(p, g)), T(2)), T(1));
  const auto denominator = add_scalar(add(sum_last(p), sum_last(g)), T(1));
  return mean(div(numerator, denominator));
}

template <typename T>
Tensor<T> seg_loss(const Tensor<T>& logits, const Tensor<T>& target, double dice_weight, double bce_weight) {
  for (T v : target.data()) {
    if (v != T(0) && v != T(1)) throw ShapeError("seg_loss: target must be binary");
  }
  Tensor<T> loss;
  if (dice_weight != 0) {
    loss = scale(add_scalar(scale(soft_dice(logits, target), T(-1)), T(1)), T(dice_weight));
  }
  if (bce_weight != 0) {
    const auto bce = scale(bce_with_logits(logits, target), T(bce_weight));
    loss = loss.defined() ? add(loss, bce) : bce;
  }
  if (!loss.defined()) throw ConfigError("seg_loss: both loss weights are zero");
  return loss;
}

template <typename T>
void sgd_update(std::span<T> theta, std::span<const T> grad, std::span<T> velocity, double lr,
                double momentum, double weight_decay) {
  if (grad.size() != theta.size() || velocity.size() != theta.size()) {
    throw ShapeError("sgd_update: parameter, gradient and velocity sizes differ");
  }
  const T l = static_cast<T>(lr), mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad[i] + wd * theta[i];
    velocity[i] = mu * velocity[i] + g;
    theta[i] -= l * velocity[i];
  }
}

template <typename T>
void sgd_step(ParamSet<T>& params, OptimizerState<T>& state, double lr, double momentum,
              double weight_decay) {
  auto& items = params.items();
  if (state.velocity.empty()) {
    for (const auto& p : items) state.velocity.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
  if (state.velocity.size() != items.size()) throw std::logic_error("optimizer state does not match parameters");
  for (const auto& p : items) {
    if (!p.tensor.has_grad()) throw std::logic_error("parameter '" + p.name + "' has no gradient");
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& t = items[i].tensor;
    sgd_update<T>(t.mutable_data(), t.grad(), state.velocity[i], lr, momentum, weight_decay);
  }
}

AugParams sample_aug(const AugConfig& cfg, Rng& rng) {
  AugParams p;
  p.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  p.shift = rng.uniform(cfg.shift_lo, cfg.shift_hi);
  p.flip_h = rng.bernoulli(cfg.flip_prob);
  p.flip_v = rng.bernoulli(cfg.flip_prob);
  return p;
}

void flip_horizontal(GrayImage& image) {
  for (int y = 0; y < image.height; ++y) {
    auto row = image.pixels.begin() + static_cast<std::ptrdiff_t>(y) * image.width;
    std::reverse(row, row + image.width);
  }
}

void flip_vertical(GrayImage& image) {
  for (int y = 0; y < image.height / 2; ++y) {
    auto a = image.pixels.begin() + static_cast<std::ptrdiff_t>(y) * image.width;
    auto b = image.pixels.begin() + static_cast<std::ptrdiff_t>(image.height - 1 - y) * image.width;
    std::swap_ranges(a, a + image.width, b);
  }
}

void apply_aug(const AugParams& p, GrayImage& image, GrayImage& mask) {
  if (p.scale != 1.0 || p.shift != 0.0) {
    for (float& v : image.pixels) {
      v = static_cast<float>(std::clamp(v * p.scale + p.shift, 0.0, 1.0));
    }
  }
  if (p.flip_h) {
    flip_horizontal(image);
    flip_horizontal(mask);
  }
  if (p.flip_v) {
    flip_vertical(image);
    flip_vertical(mask);
  }
}

std::string loss_log_csv(const std::vector<LossRecord>& log) {
  std::string out = "iteration,epoch,lr,loss\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g\n", r.iteration, r.epoch, r.lr, r.loss);
    out += buf;
  }
  return out;
}

TrainResult train(MbaNet<float>& model, const std::vector<LoadedSample>& data, const TrainConfig& cfg,
                  const std::function<void(int, const std::vector<LossRecord>&)>& on_epoch) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  const ModelConfig& mc = model.config();
  OptimizerState<float> state;
  TrainResult result;
  const std::uint64_t aug_stream = mix_seed(cfg.seed, hash_string("augment"));
  const std::uint64_t order_stream = mix_seed(cfg.seed, hash_string("order"));

  int iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(mix_seed(order_stream, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<GrayImage> images, masks;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        GrayImage img = data[idx].image, mask = data[idx].mask;
        Rng rng(mix_seed(mix_seed(aug_stream, static_cast<std::uint64_t>(epoch)), idx));
        apply_aug(sample_aug(cfg.aug, rng), img, mask);
        images.push_back(std::move(img));
        masks.push_back(std::move(mask));
      }
      std::vector<const GrayImage*> image_ptrs, mask_ptrs;
      for (std::size_t k = 0; k < images.size(); ++k) {
        image_ptrs.push_back(&images[k]);
        mask_ptrs.push_back(&masks[k]);
      }
      const auto inputs = make_inputs<float>(image_ptrs, mc);
      const auto target = make_targets<float>(mask_ptrs, mc);

      model.params().zero_grad();
      const auto logits = model.forward(inputs.prior, inputs.domain);
      const auto loss = seg_loss(logits, target, cfg.dice_weight, cfg.bce_weight);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("loss is not finite (" + std::to_string(value) + ") at iteration " +
                           std::to_string(iteration) + ", epoch " + std::to_string(epoch));
      }
      loss.backward();
      sgd_step(model.params(), state, lr, cfg.momentum, cfg.weight_decay);
      result.log.push_back({iteration, epoch, lr, value});
      ++iteration;
    }
    state.epoch = epoch + 1;
    result.epochs_completed = epoch + 1;
    if (on_epoch) on_epoch(epoch, result.log);
  }
  return result;
}

#define MBA_INSTANTIATE_TRAINING(T)                                                                    \
  template Tensor<T> soft_dice(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> seg_loss(const Tensor<T>&, const Tensor<T>&, double, double);                    \
  template void sgd_update(std::span<T>, std::span<const T>, std::span<T>, double, double, double);  \
  template void sgd_step(ParamSet<T>&, OptimizerState<T>&, double, double, double);

MBA_INSTANTIATE_TRAINING(float)
MBA_INSTANTIATE_TRAINING(double)

#undef MBA_INSTANTIATE_TRAINING

}  // namespace mba
