#include "mba/domain_branch.hpp"

namespace mba {

template <typename T>
DomainBranch<T> make_domain_branch(ParamSet<T>& ps, const ModelConfig& cfg) {
  DomainBranch<T> db;
  for (int j = 1; j <= kDomainLayers; ++j) {
    const Index in = j == 1 ? 1 : (j == 2 ? cfg.C_c / 2 : cfg.C_c);
    const Index out = j == 1 ? cfg.C_c / 2 : cfg.C_c;
    const Index stride = j <= 2 ? 2 : 1;
    db.layers.push_back(make_residual_se_block(ps, "domain.layer" + std::to_string(j), in, out,
                                               stride, cfg.se_reduction));
  }
  db.out_proj = make_conv(ps, "domain.out_proj", cfg.C_c, cfg.C_d, 1, 1, 0);
  return db;
}

template <typename T>
Tensor<T> domain_forward_layer(const DomainBranch<T>& db, int layer, const Tensor<T>& x,
                               const Tensor<T>* injection) {
  if (layer < 1 || layer > kDomainLayers) {
    throw std::out_of_range("domain layer " + std::to_string(layer) + " outside 1..8");
  }
  if (injection && (layer < 3 || layer > 5)) {
    throw std::invalid_argument("domain layer " + std::to_string(layer) +
                                " does not accept an RFIN injection (only 3, 4, 5)");
  }
  auto y = residual_se_block(x, db.layers[layer - 1]);
  if (injection) {
    if (injection->shape() != y.shape()) {
      throw ShapeError("RFIN injection " + shape_str(injection->shape()) +
                       " does not match domain layer " + std::to_string(layer) + " output " +
                       shape_str(y.shape()));
    }
    y = add(y, *injection);
  }
  return y;
}

template <typename T>
Tensor<T> domain_output(const DomainBranch<T>& db, const Tensor<T>& x8) {
  return apply(db.out_proj, x8);
}

#define MBA_INSTANTIATE_DOMAIN(T)                                                        \
  template DomainBranch<T> make_domain_branch(ParamSet<T>&, const ModelConfig&);        \
  template Tensor<T> domain_forward_layer(const DomainBranch<T>&, int, const Tensor<T>&, \
                                          const Tensor<T>*);                            \
  template Tensor<T> domain_output(const DomainBranch<T>&, const Tensor<T>&);

MBA_INSTANTIATE_DOMAIN(float)
MBA_INSTANTIATE_DOMAIN(double)

#undef MBA_INSTANTIATE_DOMAIN

}  // namespace mba
