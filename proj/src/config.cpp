#include "mba/config.hpp"

#include <fstream>

#include "mba/errors.hpp"

namespace mba {

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid model config: " + what);
}

}  // namespace

void ModelConfig::validate() const {
  check(m >= 1, "m must be >= 1");
  check(C > 0 && C_c > 0 && C_d > 0, "widths must be positive");
  check(heads > 0 && C % heads == 0, "C must be divisible by heads");
  check(patch > 0 && x_s % patch == 0, "x_s must be divisible by the patch size");
  check(x_s == 4 * x_c, "x_s must equal 4 * x_c so both branches meet on one grid");
  check(x_c % 4 == 0, "x_c must be divisible by 4");
  check(grid() * 4 == x_c, "domain grid (x_c / 4) must equal the token grid (x_s / patch)");
  check(grid() >= 2, "token grid side must be >= 2");
  check(window_size() >= 1 && grid() % window_size() == 0, "window must tile the token grid");
  check(rfin_count >= 0 && rfin_count <= 3, "rfin_count must be in 0..3");
  check(dkin_count >= 0 && dkin_count <= 4 * m, "dkin_count must be in 0..4m");
  check(C_c % 2 == 0, "C_c must be even");
  check(C_d % 8 == 0, "C_d must be divisible by 8");
  check(mlp_ratio > 0 && se_reduction > 0 && C_c / se_reduction > 0, "bad block ratios");
  check(decoder_heads > 0 && (C_d / 2) % decoder_heads == 0,
        "C_d / 2 must be divisible by decoder_heads");
  check(decoder_depth >= 1 && decoder_mlp_dim > 0, "bad decoder dims");
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"m", m},
                        {"C", C},
                        {"C_c", C_c},
                        {"C_d", C_d},
                        {"heads", heads},
                        {"x_c", x_c},
                        {"x_s", x_s},
                        {"window", window},
                        {"rfin_count", rfin_count},
                        {"dkin_count", dkin_count},
                        {"patch", patch},
                        {"mlp_ratio", mlp_ratio},
                        {"se_reduction", se_reduction},
                        {"decoder_heads", decoder_heads},
                        {"decoder_depth", decoder_depth},
                        {"decoder_mlp_dim", decoder_mlp_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  const auto get = [&j](const char* key, int& field) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number_integer()) throw ConfigError(std::string("config key '") + key + "' must be an integer");
    field = j.at(key).get<int>();
  };
  get("m", c.m);
  get("C", c.C);
  get("C_c", c.C_c);
  get("C_d", c.C_d);
  get("heads", c.heads);
  get("x_c", c.x_c);
  get("x_s", c.x_s);
  get("window", c.window);
  get("rfin_count", c.rfin_count);
  get("dkin_count", c.dkin_count);
  get("patch", c.patch);
  get("mlp_ratio", c.mlp_ratio);
  get("se_reduction", c.se_reduction);
  get("decoder_heads", c.decoder_heads);
  get("decoder_depth", c.decoder_depth);
  get("decoder_mlp_dim", c.decoder_mlp_dim);
  // Unknown keys are rejected so typos do not silently fall back to defaults.
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!ModelConfig{}.to_json().contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace mba
