#pragma once

#include <cstdint>
#include <vector>

#include "mba/tensor.hpp"

// Differentiable tensor operations. Binary elementwise ops require equal
// shapes; the only implicit broadcast is a scalar factor. Every broadcast the
// model needs is a named op (linear bias, add_broadcast, scale_channels,
// repeat_leading) so each backward stays unambiguous. All shape checks run at
// call time.

namespace mba {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kLeakySlope = 0.01;

// Elementwise.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(kLeakySlope));
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);

// Contractions. matmul: [..,M,K] x [..,K,N] with identical batch extents.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x[..,K] * w[K,N] + bias[N]; bias may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Cross-correlation. x[B,Cin,H,W], w[Cout,Cin,k,k], bias[Cout] (optional).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Index stride,
                 Index padding);
/// Transposed convolution without padding. w[Cin,Cout,k,k].
/// Output extent (H-1)*stride + k.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           Index stride);

// Normalization. layer_norm normalizes the last axis; instance_norm
// normalizes H,W per (sample, channel) of an NCHW tensor.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(kNormEps));
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(kNormEps));

template <typename T> Tensor<T> softmax(const Tensor<T>& x, Index axis = -1);

// Layout.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<Index>& perm);
/// R: tokens [B,N,C] -> grid [B,C,g,g] with N = g*g.
template <typename T> Tensor<T> tokens_to_grid(const Tensor<T>& tokens);
/// Inverse of R: grid [B,C,H,W] -> tokens [B,H*W,C].
template <typename T> Tensor<T> grid_to_tokens(const Tensor<T>& grid);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, Index axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, Index axis, Index start, Index length);

// Broadcasting helpers.
/// x[B,...] + y[...]: y is added to every leading slice of x.
template <typename T> Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y);
/// x[...] -> [n, ...].
template <typename T> Tensor<T> repeat_leading(const Tensor<T>& x, Index n);
/// x[B,C,H,W] * gate[B,C] per channel.
template <typename T> Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& gate);
/// [B,C,H,W] -> [B,C].
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// Reductions.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
/// Sum over the last axis: [..,K] -> [..].
template <typename T> Tensor<T> sum_last(const Tensor<T>& x);

/// Mean binary cross-entropy on logits; target is treated as a constant.
template <typename T> Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target);

/// Records the sign pattern of every piecewise-linear activation input while
/// in scope. Finite-difference probes use it to detect when a perturbation
/// crosses a kink.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  std::uint64_t signature() const { return hash_; }
  std::uint64_t count() const { return count_; }
  void record(bool positive) {
    hash_ = (hash_ ^ (positive ? 0x9e3779b97f4a7c15ull : 0x632be59bd9b4e019ull)) * 0x100000001b3ull;
    ++count_;
  }
  static KinkProbe* active();

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ull;
  std::uint64_t count_ = 0;
  KinkProbe* prev_;
};

}  // namespace mba
