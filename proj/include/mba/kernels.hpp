#pragma once

#include <cstdint>
#include <span>

// Dense compute kernels. Each kernel exists twice: a serial reference and an
// OpenMP variant. The OpenMP variants only split work over output elements,
// so every output is accumulated in the same order as the serial version and
// the two agree bitwise regardless of thread count.

namespace mba::kernels {

using Index = std::int64_t;

struct ConvGeometry {
  Index channels = 0;  // input channels
  Index height = 0;
  Index width = 0;
  Index kernel = 1;
  Index stride = 1;
  Index padding = 0;

  Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  Index col_rows() const { return channels * kernel * kernel; }
  Index col_cols() const { return out_height() * out_width(); }
};

namespace serial {

/// c[M,N] (+)= op(a) * op(b). op(a) is [M,K]; a is stored [K,M] when trans_a.
/// op(b) is [K,N]; b is stored [N,K] when trans_b.
template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate);

/// Unfold one image [C,H,W] into columns [C*k*k, Ho*Wo].
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols);

/// Adjoint of im2col: scatter-add columns back into image [C,H,W].
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* image);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate);

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols);

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* image);

}  // namespace parallel

/// Dispatch used by the tensor ops: the OpenMP variants when built with
/// OpenMP, the serial reference otherwise.
template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate);
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols);
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* image);

bool openmp_enabled();
int max_threads();

}  // namespace mba::kernels
