#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mba/tensor.hpp"

namespace mba {

enum class InitKind {
  Zeros,
  Ones,
  TruncatedNormal,  // std = scale, clipped at 2 std
  HeNormal,         // std = sqrt(2 / fan_in), fan_in = product of trailing extents
  Normal,           // std = scale
};

struct Init {
  InitKind kind = InitKind::Zeros;
  double scale = 0.0;
  // Overrides the fan-in used by HeNormal; 0 derives it from the shape.
  std::int64_t fan_in = 0;
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  Init init;
};

/// Ordered registry of trainable leaves. Each tensor is initialized from a
/// stream keyed by (seed, name), so two models sharing a parameter name get
/// identical values regardless of which other parameters exist.
template <typename T>
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor<T> add(const std::string& name, const Shape& shape, Init init);

  const std::vector<NamedParam<T>>& items() const { return items_; }
  std::vector<NamedParam<T>>& items() { return items_; }
  const NamedParam<T>* find(const std::string& name) const;
  std::int64_t total_elements() const;
  std::uint64_t seed() const { return seed_; }

  void zero_grad();
  /// Re-runs initialization for every parameter with a new seed.
  void reinitialize(std::uint64_t seed);

 private:
  std::uint64_t seed_;
  std::vector<NamedParam<T>> items_;
};

template <typename T>
void fill_init(Tensor<T>& t, const Init& init, std::uint64_t stream_seed);

extern template class ParamSet<float>;
extern template class ParamSet<double>;

}  // namespace mba
