#include "mba/kernels.hpp"

#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mba::kernels {

namespace {

// op(b) as a contiguous [K,N] matrix. Packs a transposed b into `scratch`.
template <typename T>
const T* row_major_b(bool trans_b, Index n, Index k, const T* b, std::vector<T>& scratch) {
  if (!trans_b) return b;
  scratch.resize(static_cast<std::size_t>(n * k));
  for (Index j = 0; j < n; ++j)
    for (Index p = 0; p < k; ++p) scratch[p * n + j] = b[j * k + p];
  return scratch.data();
}

template <typename T>
inline void gemm_row(bool trans_a, Index i, Index m, Index n, Index k, const T* a, const T* b,
                     T* c, bool accumulate) {
  T* crow = c + i * n;
  if (!accumulate)
    for (Index j = 0; j < n; ++j) crow[j] = T(0);
  for (Index p = 0; p < k; ++p) {
    const T av = trans_a ? a[p * m + i] : a[i * k + p];
    const T* brow = b + p * n;
    for (Index j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

template <typename T>
inline void im2col_channel(const ConvGeometry& g, Index c, const T* image, T* cols) {
  const Index oh = g.out_height(), ow = g.out_width();
  const Index kk = g.kernel;
  for (Index ky = 0; ky < kk; ++ky) {
    for (Index kx = 0; kx < kk; ++kx) {
      T* dst = cols + ((c * kk + ky) * kk + kx) * oh * ow;
      for (Index oy = 0; oy < oh; ++oy) {
        const Index iy = oy * g.stride - g.padding + ky;
        for (Index ox = 0; ox < ow; ++ox) {
          const Index ix = ox * g.stride - g.padding + kx;
          const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
          dst[oy * ow + ox] = inside ? image[(c * g.height + iy) * g.width + ix] : T(0);
        }
      }
    }
  }
}

template <typename T>
inline void col2im_channel(const ConvGeometry& g, Index c, const T* cols, T* image) {
  const Index oh = g.out_height(), ow = g.out_width();
  const Index kk = g.kernel;
  for (Index ky = 0; ky < kk; ++ky) {
    for (Index kx = 0; kx < kk; ++kx) {
      const T* src = cols + ((c * kk + ky) * kk + kx) * oh * ow;
      for (Index oy = 0; oy < oh; ++oy) {
        const Index iy = oy * g.stride - g.padding + ky;
        if (iy < 0 || iy >= g.height) continue;
        for (Index ox = 0; ox < ow; ++ox) {
          const Index ix = ox * g.stride - g.padding + kx;
          if (ix < 0 || ix >= g.width) continue;
          image[(c * g.height + iy) * g.width + ix] += src[oy * ow + ox];
        }
      }
    }
  }
}

}  // namespace

namespace serial {

template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate) {
  std::vector<T> scratch;
  const T* bb = row_major_b(trans_b, n, k, b, scratch);
  for (Index i = 0; i < m; ++i) gemm_row(trans_a, i, m, n, k, a, bb, c, accumulate);
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols) {
  for (Index c = 0; c < g.channels; ++c) im2col_channel(g, c, image, cols);
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* image) {
  for (Index c = 0; c < g.channels; ++c) col2im_channel(g, c, cols, image);
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate) {
  std::vector<T> scratch;
  const T* bb = row_major_b(trans_b, n, k, b, scratch);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (Index i = 0; i < m; ++i) gemm_row(trans_a, i, m, n, k, a, bb, c, accumulate);
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols) {
#pragma omp parallel for schedule(static) if (g.channels > 1)
  for (Index c = 0; c < g.channels; ++c) im2col_channel(g, c, image, cols);
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* image) {
#pragma omp parallel for schedule(static) if (g.channels > 1)
  for (Index c = 0; c < g.channels; ++c) col2im_channel(g, c, cols, image);
}

}  // namespace parallel

#ifdef _OPENMP
namespace active = parallel;
#else
namespace active = serial;
#endif

template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate) {
  active::gemm(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols) {
  active::im2col(g, image, cols);
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* image) {
  active::col2im(g, cols, image);
}

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define MBA_INSTANTIATE_KERNELS(NS, T)                                                     \
  template void NS gemm<T>(bool, bool, Index, Index, Index, const T*, const T*, T*, bool); \
  template void NS im2col<T>(const ConvGeometry&, const T*, T*);                           \
  template void NS col2im<T>(const ConvGeometry&, const T*, T*);

MBA_INSTANTIATE_KERNELS(serial::, float)
MBA_INSTANTIATE_KERNELS(serial::, double)
MBA_INSTANTIATE_KERNELS(parallel::, float)
MBA_INSTANTIATE_KERNELS(parallel::, double)
MBA_INSTANTIATE_KERNELS(, float)
MBA_INSTANTIATE_KERNELS(, double)

#undef MBA_INSTANTIATE_KERNELS

}  // namespace mba::kernels
