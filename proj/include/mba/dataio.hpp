#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mba/config.hpp"
#include "mba/params.hpp"

// Images, the synthetic two-domain phantom dataset, manifests, model input
// views and checkpoints.

namespace mba {

namespace fs = std::filesystem;

/// Row-major grayscale image with values in [0, 1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Binary (P5) 8-bit PGM. Reading divides by maxval; writing rounds v * 255.
GrayImage read_pgm(const fs::path& path);
void write_pgm(const fs::path& path, const GrayImage& image);

/// Bilinear resampling with pixel-centre alignment and edge clamping.
GrayImage resize_bilinear(const GrayImage& image, int width, int height);

enum class LesionClass { Cystic, Solid, Mixed };
std::string to_string(LesionClass c);
LesionClass lesion_class_from_string(const std::string& s);

struct SampleRecord {
  std::string id;
  std::string geometry;  // shared by the A and B renderings of a paired sample
  std::string image;     // path relative to the dataset root
  std::string mask;
  LesionClass lesion_class = LesionClass::Cystic;
  std::string domain;  // "A" or "B"
  std::string split;   // "train", "val" or "test"

  nlohmann::json to_json() const;
  static SampleRecord from_json(const nlohmann::json& j);
};

struct Manifest {
  fs::path root;
  std::vector<SampleRecord> samples;

  /// Samples in `split` ("" = all) and `domain` ("" = all), in manifest order.
  std::vector<SampleRecord> select(const std::string& split, const std::string& domain) const;
};

/// Reads DIR/manifest.jsonl. Throws DataError on missing files, malformed
/// lines or duplicate ids.
Manifest load_manifest(const fs::path& root);
void save_manifest(const Manifest& manifest);

struct GenOptions {
  std::uint64_t seed = 0;
  int train = 6;
  int val = 1;
  int test = 3;
  int size = 64;
  bool paired = false;
};

/// Lesion outline r(theta) = r0 * (1 + sum_k a_k sin(k theta + phi_k)), k = 1..4.
struct LesionGeometry {
  double cx = 0, cy = 0, r0 = 0;
  double a[4] = {0, 0, 0, 0};
  double phi[4] = {0, 0, 0, 0};
  LesionClass lesion_class = LesionClass::Cystic;
  double split_angle = 0;      // mixed lesions: orientation of the dividing line
  double texture[3][3] = {};   // solid texture: (frequency, direction, phase) per wave

  double radius(double theta) const;
  /// Upper bound on radius(theta).
  double max_radius() const;
};

LesionGeometry sample_geometry(std::uint64_t seed, int size);
/// Binary mask: pixel centres with distance <= radius(angle). Values 0/1.
GrayImage rasterize_mask(const LesionGeometry& geo, int size);
/// Renders the phantom in domain "A" (hypointense lesion, speckle, blur) or
/// "B" (hyperintense lesion, bias field, Gaussian noise).
GrayImage render_phantom(const LesionGeometry& geo, int size, const std::string& domain,
                         std::uint64_t noise_seed);

/// Writes images/, masks/ and manifest.jsonl under `out`. Counts are numbers
/// of lesion geometries per split; with `paired` each geometry is rendered in
/// both domains, otherwise geometries alternate between A and B.
Manifest gen_dataset(const fs::path& out, const GenOptions& opts);

struct LoadedSample {
  SampleRecord record;
  GrayImage image;
  GrayImage mask;  // values 0/1
};

/// Throws DataError for unreadable files, extent mismatch or non-binary masks.
LoadedSample load_sample(const fs::path& root, const SampleRecord& record);
std::vector<LoadedSample> load_samples(const Manifest& manifest, const std::string& split,
                                       const std::string& domain);

/// Batched model inputs: prior view [B,1,x_s,x_s] and domain view [B,1,x_c,x_c].
template <typename T>
struct ModelInputs {
  Tensor<T> prior;
  Tensor<T> domain;
};

template <typename T>
ModelInputs<T> make_inputs(const std::vector<const GrayImage*>& images, const ModelConfig& cfg);

/// Masks resampled to x_c and thresholded at 0.5, [B,1,x_c,x_c].
template <typename T>
Tensor<T> make_targets(const std::vector<const GrayImage*>& masks, const ModelConfig& cfg);

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  ModelConfig config;
  int epoch = 0;
  std::uint64_t seed = 0;
  int version = kCheckpointVersion;
};

/// meta.json plus one little-endian float32 row-major file per tensor.
template <typename T>
void save_checkpoint(const fs::path& dir, const ParamSet<T>& params, const CheckpointMeta& meta);

CheckpointMeta read_checkpoint_meta(const fs::path& dir);

/// Loads every tensor of `params` from `dir`. Errors name the offending
/// tensor (missing file, wrong shape, wrong size, checksum mismatch).
template <typename T>
void load_checkpoint_params(const fs::path& dir, ParamSet<T>& params);

}  // namespace mba
