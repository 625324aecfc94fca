#pragma once

#include <string>

#include "json.hpp"

namespace mba {

/// Architecture hyperparameters. Defaults are the desk-scale configuration:
/// a 12-layer prior branch (m = 3) on 128x128 inputs and a domain branch on
/// 32x32 inputs, meeting on an 8x8 grid.
struct ModelConfig {
  int m = 3;            // prior-branch layers per stage; 4m layers in total
  int C = 96;           // prior-branch token width
  int C_c = 64;         // domain-branch width
  int C_d = 64;         // decoder embedding width
  int heads = 3;        // prior-branch attention heads
  int x_c = 32;         // domain-branch input side
  int x_s = 128;        // prior-branch input side
  int window = 0;       // windowed-attention side; 0 selects grid / 2
  int rfin_count = 3;   // RFIN connections, 0..3
  int dkin_count = 3;   // DKIN connections
  int patch = 16;
  int mlp_ratio = 4;
  int se_reduction = 4;
  int decoder_heads = 2;
  int decoder_depth = 2;
  int decoder_mlp_dim = 128;

  /// Side of the token grid shared by both branches.
  int grid() const { return x_s / patch; }
  int window_size() const { return window > 0 ? window : (grid() >= 2 ? grid() / 2 : 1); }
  int layers() const { return 4 * m; }

  /// Throws ConfigError naming the violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig load(const std::string& path);
};

}  // namespace mba
