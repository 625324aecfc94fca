#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mba/dataio.hpp"
#include "mba/model.hpp"
#include "mba/training.hpp"

// Evaluation, reporting, the fusion ablation and the model gradient check.

namespace mba {

/// 2|P and G| / (|P| + |G|) over nonzero pixels; 1.0 when both are empty.
double dice(std::span<const float> pred, std::span<const float> gt);
double dice(const GrayImage& pred, const GrayImage& gt);

/// Binary mask at the image's own resolution: logits are resampled
/// bilinearly from x_c and thresholded at probability 0.5.
GrayImage predict_mask(const MbaNet<float>& model, const GrayImage& image);

/// Rebuilds the model recorded in a checkpoint directory and loads its
/// parameters.
MbaNet<float> load_model(const fs::path& dir);

using Predictor = std::function<GrayImage(const LoadedSample&)>;

struct SampleScore {
  std::string id;
  std::string lesion_class;
  std::string domain;
  double dice = 0;
};

/// Dice statistics in percent; std is the population standard deviation.
struct EvalRow {
  std::string lesion_class;  // "all" for the per-domain summary
  std::string domain;
  int n = 0;
  double mean = 0;
  double std = 0;
};

struct EvalReport {
  std::string split;
  std::vector<SampleScore> samples;
  std::vector<EvalRow> rows;

  std::string csv() const;
  std::string text() const;
  const EvalRow* find(const std::string& lesion_class, const std::string& domain) const;
};

/// Groups scores by (class, domain) in the order cystic, solid, mixed and
/// A, B, followed by an "all" row per domain.
EvalReport summarize(const std::string& split, std::vector<SampleScore> scores);

/// Scores every sample of `split` (and `domain` unless empty). Throws
/// DataError when nothing matches.
EvalReport evaluate(const Predictor& predictor, const Manifest& manifest, const std::string& split,
                    const std::string& domain);

/// In-domain and cross-domain rows side by side, one column per class plus
/// the average, formatted as mean +/- std.
std::string cross_domain_table(const std::string& train_domain, const EvalReport& report);

struct AblationCell {
  int rfin = 0;
  int dkin = 0;
  bool valid = true;
  std::string reason;
  double dice = 0;  // val-split mean Dice in percent
  bool is_default = false;
  bool sanity = false;  // the (0, 0) independent-branch row
};

struct AblationOptions {
  ModelConfig base;
  TrainConfig train;
  std::vector<int> rfin{0, 1, 2, 3};
  std::vector<int> dkin{1, 3, 6};
  bool sanity_row = true;
  std::string eval_split = "val";
};

/// Trains and evaluates every (r, d) cell with the same seed and budget.
/// Cells whose plan cannot be built are reported as invalid with the reason.
std::vector<AblationCell> ablate(const Manifest& manifest, const AblationOptions& opts,
                                 const std::function<void(const std::string&)>& log = {});
std::string ablation_csv(const std::vector<AblationCell>& cells);
std::string ablation_table(const std::vector<AblationCell>& cells, int m);

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Absolute term of the pass rule |a - n| <= atol + tol * max(|a|, |n|).
  /// It sits above the round-off of a central difference of an O(1) loss
  /// (about 1e-10 at eps = 1e-5) and covers gradients that are exactly zero,
  /// such as key biases under softmax or conv biases before instance norm.
  double atol = 1e-9;
  int coords_per_tensor = 3;
  bool full = false;  // every scalar of every tensor
  std::uint64_t seed = 0;
  int batch = 2;
  std::function<void(const std::string&)> progress;
};

struct TensorCheck {
  std::string name;
  Index numel = 0;
  int checks = 0;
  int kink_adjusted = 0;  // checks that needed a one-sided or shorter step
  int below_floor = 0;    // checks with max(|a|, |n|) < atol / tol
  double max_rel = 0;     // over checks at or above the floor
  double max_abs = 0;
  bool passed = true;
  std::string failure;
};

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  bool passed = true;
  double max_rel = 0;
  int total_checks = 0;
  int below_floor = 0;
  double seconds = 0;

  std::string text() const;
};

/// Compares reverse-mode gradients of the segmentation loss with central
/// differences in double precision. Every parameter tensor gets one check
/// along a random unit direction plus `coords_per_tensor` single-coordinate
/// checks (all coordinates with `full`).
GradcheckReport gradcheck(const ModelConfig& cfg, const GradcheckOptions& opts);

}  // namespace mba
