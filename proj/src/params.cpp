#include "mba/params.hpp"

#include <cmath>
#include <stdexcept>

#include "mba/rng.hpp"

namespace mba {

template <typename T>
void fill_init(Tensor<T>& t, const Init& init, std::uint64_t stream_seed) {
  auto data = t.mutable_data();
  Rng rng(stream_seed);
  switch (init.kind) {
    case InitKind::Zeros:
      std::fill(data.begin(), data.end(), T(0));
      break;
    case InitKind::Ones:
      std::fill(data.begin(), data.end(), T(1));
      break;
    case InitKind::TruncatedNormal:
      for (T& v : data) v = static_cast<T>(rng.truncated_normal(init.scale));
      break;
    case InitKind::Normal:
      for (T& v : data) v = static_cast<T>(init.scale * rng.normal());
      break;
    case InitKind::HeNormal: {
      std::int64_t fan_in = init.fan_in;
      if (fan_in <= 0) {
        fan_in = 1;
        for (std::size_t i = 1; i < t.shape().size(); ++i) fan_in *= t.shape()[i];
      }
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (T& v : data) v = static_cast<T>(stddev * rng.normal());
      break;
    }
  }
}

template <typename T>
Tensor<T> ParamSet<T>::add(const std::string& name, const Shape& shape, Init init) {
  if (find(name)) throw std::logic_error("duplicate parameter name " + name);
  Tensor<T> t = Tensor<T>::zeros(shape, true);
  fill_init(t, init, mix_seed(seed_, hash_string(name)));
  items_.push_back({name, t, init});
  return t;
}

template <typename T>
const NamedParam<T>* ParamSet<T>::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::int64_t ParamSet<T>::total_elements() const {
  std::int64_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

template <typename T>
void ParamSet<T>::reinitialize(std::uint64_t seed) {
  seed_ = seed;
  for (auto& p : items_) fill_init(p.tensor, p.init, mix_seed(seed_, hash_string(p.name)));
}

template void fill_init<float>(Tensor<float>&, const Init&, std::uint64_t);
template void fill_init<double>(Tensor<double>&, const Init&, std::uint64_t);
template class ParamSet<float>;
template class ParamSet<double>;

}  // namespace mba
