#include "mba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mba/kernels.hpp"

namespace mba {

namespace {

thread_local KinkProbe* g_probe = nullptr;

template <typename T>
using Impl = TensorImpl<T>;

template <typename T>
using BackwardFn = std::function<void(const Impl<T>&)>;

// Builds the result node and wires history when any input needs gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      BackwardFn<T> fn) {
  auto impl = std::make_shared<Impl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const Tensor<T>* in : inputs) needs = needs || (in->defined() && in->requires_grad());
  }
  if (needs) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    for (const Tensor<T>* in : inputs) impl->parents.push_back(in->impl_ptr());
    impl->backward_fn = std::move(fn);
  }
  return Tensor<T>(std::move(impl));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      BackwardFn<T> fn) {
  auto impl = std::make_shared<Impl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    for (const auto& in : inputs) impl->parents.push_back(in.impl_ptr());
    impl->backward_fn = std::move(fn);
  }
  return Tensor<T>(std::move(impl));
}

// Parent i when it wants a gradient, else nullptr.
template <typename T>
Impl<T>* wants(const Impl<T>& out, std::size_t i) {
  Impl<T>* p = out.parents[i].get();
  return (p && p->requires_grad) ? p : nullptr;
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": " + what + " is undefined");
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require_defined(a, op, "lhs");
  require_defined(b, op, "rhs");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, Index rank, const char* op, const char* what) {
  require_defined(t, op, what);
  if (t.dim() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

Index perfect_square_side(Index n, const char* op) {
  Index g = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
  if (g * g != n) {
    throw ShapeError(std::string(op) + ": token count " + std::to_string(n) +
                     " is not a perfect square");
  }
  return g;
}

template <typename T, typename F, typename G>
Tensor<T> unary(const Tensor<T>& a, F forward, G derivative) {
  require_defined(a, "unary op", "input");
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  return make_result<T>(a.shape(), std::move(y), {&a}, [derivative](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += out.grad[i] * derivative(p->data[i], out.data[i]);
    }
  });
}

}  // namespace

KinkProbe::KinkProbe() : prev_(g_probe) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = prev_; }
KinkProbe* KinkProbe::active() { return g_probe; }

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<T> r(x.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(r), {&a, &b}, [](const Impl<T>& out) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* p = wants(out, k)) p->accumulate_grad(out.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<T> r(x.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] - y[i];
  return make_result<T>(a.shape(), std::move(r), {&a, &b}, [](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) p->accumulate_grad(out.grad);
    if (auto* p = wants(out, 1)) {
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<T> r(x.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(r), {&a, &b}, [](const Impl<T>& out) {
    const auto& pa = *out.parents[0];
    const auto& pb = *out.parents[1];
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * pb.data[i];
    }
    if (auto* p = wants(out, 1)) {
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  const auto x = a.data(), y = b.data();
  std::vector<T> r(x.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] / y[i];
  return make_result<T>(a.shape(), std::move(r), {&a, &b}, [](const Impl<T>& out) {
    const auto& pb = *out.parents[1];
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] / pb.data[i];
    }
    if (auto* p = wants(out, 1)) {
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i] * out.data[i] / pb.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary(a, [value](T x) { return x + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  if (KinkProbe* probe = KinkProbe::active())
    for (T x : a.data()) probe->record(x > T(0));
  return unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return leaky_relu(a, T(0));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * T(inv_sqrt2))); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * T(inv_sqrt2))) +
               x * T(inv_sqrt2pi) * std::exp(T(-0.5) * x * x);
      });
}

// ---------------------------------------------------------------------------
// Contractions

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul", "lhs");
  require_defined(b, "matmul", "rhs");
  if (a.dim() < 2 || a.dim() != b.dim()) {
    throw ShapeError("matmul: operands need equal rank >= 2, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const Index r = a.dim();
  for (Index i = 0; i + 2 < r; ++i) {
    if (a.extent(i) != b.extent(i)) {
      throw ShapeError("matmul: batch extents differ " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  const Index m = a.extent(r - 2), k = a.extent(r - 1), n = b.extent(r - 1);
  if (b.extent(r - 2) != k) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Index batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape[r - 1] = n;
  std::vector<T> c(static_cast<std::size_t>(batch * m * n));
  for (Index i = 0; i < batch; ++i) {
    kernels::gemm<T>(false, false, m, n, k, a.data().data() + i * m * k,
                     b.data().data() + i * k * n, c.data() + i * m * n, false);
  }
  return make_result<T>(out_shape, std::move(c), {&a, &b}, [batch, m, n, k](const Impl<T>& out) {
    const T* dc = out.grad.data();
    const auto& pa = *out.parents[0];
    const auto& pb = *out.parents[1];
    if (auto* p = wants(out, 0)) {
      T* da = p->grad_buffer().data();
      for (Index i = 0; i < batch; ++i)
        kernels::gemm<T>(false, true, m, k, n, dc + i * m * n, pb.data.data() + i * k * n,
                         da + i * m * k, true);
    }
    if (auto* p = wants(out, 1)) {
      T* db = p->grad_buffer().data();
      for (Index i = 0; i < batch; ++i)
        kernels::gemm<T>(true, false, k, n, m, pa.data.data() + i * m * k, dc + i * m * n,
                         db + i * k * n, true);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_defined(x, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const Index k = w.extent(0), n = w.extent(1);
  if (x.extent(-1) != k) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.extent(0) != n)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(n) + " outputs");
  }
  const Index rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<T> y(static_cast<std::size_t>(rows * n));
  kernels::gemm<T>(false, false, rows, n, k, x.data().data(), w.data().data(), y.data(), false);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < n; ++j) y[r * n + j] += bv[j];
  }
  return make_result<T>(out_shape, std::move(y), {&x, &w, &bias}, [rows, n, k](const Impl<T>& out) {
    const T* dy = out.grad.data();
    const auto& px = *out.parents[0];
    const auto& pw = *out.parents[1];
    if (auto* p = wants(out, 0))
      kernels::gemm<T>(false, true, rows, k, n, dy, pw.data.data(), p->grad_buffer().data(), true);
    if (auto* p = wants(out, 1))
      kernels::gemm<T>(true, false, k, n, rows, px.data.data(), dy, p->grad_buffer().data(), true);
    if (auto* p = wants(out, 2)) {
      auto g = p->grad_buffer();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < n; ++j) g[j] += dy[r * n + j];
    }
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Index stride,
                 Index padding) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  const Index batch = x.extent(0), cin = x.extent(1);
  const Index cout = w.extent(0), kk = w.extent(2);
  if (w.extent(1) != cin || w.extent(3) != kk) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (bias.defined() && (bias.dim() != 1 || bias.extent(0) != cout))
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match Cout");
  const kernels::ConvGeometry g{cin, x.extent(2), x.extent(3), kk, stride, padding};
  if (g.height + 2 * padding < kk || g.width + 2 * padding < kk || g.out_height() < 1 ||
      g.out_width() < 1) {
    throw ShapeError("conv2d: output extent < 1 for input " + shape_str(x.shape()) +
                     " kernel " + std::to_string(kk));
  }
  const Index ckk = g.col_rows(), len = g.col_cols();
  const Index in_plane = cin * g.height * g.width;
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch * ckk * len));
  std::vector<T> y(static_cast<std::size_t>(batch * cout * len));
  for (Index b = 0; b < batch; ++b) {
    T* cb = cols->data() + b * ckk * len;
    kernels::im2col<T>(g, x.data().data() + b * in_plane, cb);
    kernels::gemm<T>(false, false, cout, len, ckk, w.data().data(), cb, y.data() + b * cout * len,
                     false);
    if (bias.defined())
      for (Index c = 0; c < cout; ++c)
        for (Index l = 0; l < len; ++l) y[(b * cout + c) * len + l] += bias.data()[c];
  }
  Shape out_shape{batch, cout, g.out_height(), g.out_width()};
  return make_result<T>(
      out_shape, std::move(y), {&x, &w, &bias},
      [g, cols, batch, cout, ckk, len, in_plane](const Impl<T>& out) {
        const T* dy = out.grad.data();
        const auto& pw = *out.parents[1];
        if (auto* p = wants(out, 1)) {
          T* dw = p->grad_buffer().data();
          for (Index b = 0; b < batch; ++b)
            kernels::gemm<T>(false, true, cout, ckk, len, dy + b * cout * len,
                             cols->data() + b * ckk * len, dw, true);
        }
        if (auto* p = wants(out, 2)) {
          auto gb = p->grad_buffer();
          for (Index b = 0; b < batch; ++b)
            for (Index c = 0; c < cout; ++c)
              for (Index l = 0; l < len; ++l) gb[c] += dy[(b * cout + c) * len + l];
        }
        if (auto* p = wants(out, 0)) {
          T* dx = p->grad_buffer().data();
          std::vector<T> dcols(static_cast<std::size_t>(ckk * len));
          for (Index b = 0; b < batch; ++b) {
            kernels::gemm<T>(true, false, ckk, len, cout, pw.data.data(), dy + b * cout * len,
                             dcols.data(), false);
            kernels::col2im<T>(g, dcols.data(), dx + b * in_plane);
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           Index stride) {
  require_rank(x, 4, "conv_transpose2d", "input");
  require_rank(w, 4, "conv_transpose2d", "weight");
  const Index batch = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
  const Index cout = w.extent(1), kk = w.extent(2);
  if (w.extent(0) != cin || w.extent(3) != kk) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  if (stride < 1) throw ShapeError("conv_transpose2d: invalid stride");
  if (bias.defined() && (bias.dim() != 1 || bias.extent(0) != cout))
    throw ShapeError("conv_transpose2d: bias does not match Cout");
  const Index oh = (h - 1) * stride + kk, ow = (wd - 1) * stride + kk;
  // Geometry of the equivalent forward convolution on the output.
  const kernels::ConvGeometry g{cout, oh, ow, kk, stride, 0};
  const Index ckk = cout * kk * kk, len = h * wd;
  const Index out_plane = cout * oh * ow;
  std::vector<T> y(static_cast<std::size_t>(batch * out_plane), T(0));
  std::vector<T> cols(static_cast<std::size_t>(ckk * len));
  for (Index b = 0; b < batch; ++b) {
    kernels::gemm<T>(true, false, ckk, len, cin, w.data().data(), x.data().data() + b * cin * len,
                     cols.data(), false);
    kernels::col2im<T>(g, cols.data(), y.data() + b * out_plane);
    if (bias.defined())
      for (Index c = 0; c < cout; ++c)
        for (Index l = 0; l < oh * ow; ++l) y[b * out_plane + c * oh * ow + l] += bias.data()[c];
  }
  Shape out_shape{batch, cout, oh, ow};
  return make_result<T>(
      out_shape, std::move(y), {&x, &w, &bias},
      [g, batch, cin, cout, ckk, len, out_plane, oh, ow](const Impl<T>& out) {
        const T* dy = out.grad.data();
        const auto& px = *out.parents[0];
        const auto& pw = *out.parents[1];
        Impl<T>* gx = wants(out, 0);
        Impl<T>* gw = wants(out, 1);
        if (gx || gw) {
          std::vector<T> dcols(static_cast<std::size_t>(ckk * len));
          for (Index b = 0; b < batch; ++b) {
            kernels::im2col<T>(g, dy + b * out_plane, dcols.data());
            if (gx)
              kernels::gemm<T>(false, false, cin, len, ckk, pw.data.data(), dcols.data(),
                               gx->grad_buffer().data() + b * cin * len, true);
            if (gw)
              kernels::gemm<T>(false, true, cin, ckk, len, px.data.data() + b * cin * len,
                               dcols.data(), gw->grad_buffer().data(), true);
          }
        }
        if (auto* p = wants(out, 2)) {
          auto gb = p->grad_buffer();
          for (Index b = 0; b < batch; ++b)
            for (Index c = 0; c < cout; ++c)
              for (Index l = 0; l < oh * ow; ++l) gb[c] += dy[b * out_plane + c * oh * ow + l];
        }
      });
}


// ---------------------------------------------------------------------------
// Normalization

namespace {

// Normalizes `groups` groups of `count` elements. Element e of group q lives
// at index(q, e) and uses affine channel affine(q, e).
template <typename T, typename IndexFn, typename AffineFn>
Tensor<T> normalize(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                    Index groups, Index count, IndexFn index, AffineFn affine) {
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups));
  std::vector<T> y(xv.size());
  for (Index q = 0; q < groups; ++q) {
    T mu = 0;
    for (Index e = 0; e < count; ++e) mu += xv[index(q, e)];
    mu /= T(count);
    T var = 0;
    for (Index e = 0; e < count; ++e) {
      const T d = xv[index(q, e)] - mu;
      var += d * d;
    }
    var /= T(count);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[q] = rs;
    for (Index e = 0; e < count; ++e) {
      const Index i = index(q, e);
      const Index c = affine(q, e);
      const T h = (xv[i] - mu) * rs;
      (*xhat)[i] = h;
      y[i] = h * gv[c] + bv[c];
    }
  }
  return make_result<T>(
      x.shape(), std::move(y), {&x, &gamma, &beta},
      [xhat, rstd, groups, count, index, affine](const Impl<T>& out) {
        const auto& dy = out.grad;
        const auto& pg = *out.parents[1];
        Impl<T>* gx = wants(out, 0);
        Impl<T>* gg = wants(out, 1);
        Impl<T>* gb = wants(out, 2);
        T* dg = gg ? gg->grad_buffer().data() : nullptr;
        T* db = gb ? gb->grad_buffer().data() : nullptr;
        T* dx = gx ? gx->grad_buffer().data() : nullptr;
        for (Index q = 0; q < groups; ++q) {
          T mean_d = 0, mean_dh = 0;
          for (Index e = 0; e < count; ++e) {
            const Index i = index(q, e);
            const Index c = affine(q, e);
            const T d = dy[i] * pg.data[c];
            mean_d += d;
            mean_dh += d * (*xhat)[i];
            if (dg) dg[c] += dy[i] * (*xhat)[i];
            if (db) db[c] += dy[i];
          }
          if (!dx) continue;
          mean_d /= T(count);
          mean_dh /= T(count);
          const T rs = (*rstd)[q];
          for (Index e = 0; e < count; ++e) {
            const Index i = index(q, e);
            const T d = dy[i] * pg.data[affine(q, e)];
            dx[i] += rs * (d - mean_d - (*xhat)[i] * mean_dh);
          }
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_defined(x, "layer_norm", "input");
  require_rank(gamma, 1, "layer_norm", "gamma");
  require_rank(beta, 1, "layer_norm", "beta");
  const Index c = x.extent(-1);
  if (gamma.extent(0) != c || beta.extent(0) != c) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) +
                     " do not match channel axis of " + shape_str(x.shape()));
  }
  return normalize<T>(
      x, gamma, beta, eps, x.numel() / c, c, [c](Index q, Index e) { return q * c + e; },
      [](Index, Index e) { return e; });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank(x, 4, "instance_norm", "input");
  require_rank(gamma, 1, "instance_norm", "gamma");
  require_rank(beta, 1, "instance_norm", "beta");
  const Index c = x.extent(1), hw = x.extent(2) * x.extent(3);
  if (gamma.extent(0) != c || beta.extent(0) != c) {
    throw ShapeError("instance_norm: affine params " + shape_str(gamma.shape()) +
                     " do not match channels of " + shape_str(x.shape()));
  }
  return normalize<T>(
      x, gamma, beta, eps, x.extent(0) * c, hw, [hw](Index q, Index e) { return q * hw + e; },
      [c](Index q, Index) { return q % c; });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, Index axis) {
  require_defined(x, "softmax", "input");
  if (axis < 0) axis += x.dim();
  if (axis < 0 || axis >= x.dim()) throw ShapeError("softmax: axis out of range");
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.extent(i);
  for (Index i = axis + 1; i < x.dim(); ++i) inner *= x.extent(i);
  const Index n = x.extent(axis);
  const auto xv = x.data();
  std::vector<T> y(xv.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      T mx = xv[base];
      for (Index k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      T total = 0;
      for (Index k = 0; k < n; ++k) {
        const T e = std::exp(xv[base + k * inner] - mx);
        y[base + k * inner] = e;
        total += e;
      }
      for (Index k = 0; k < n; ++k) y[base + k * inner] /= total;
    }
  }
  return make_result<T>(x.shape(), std::move(y), {&x}, [outer, inner, n](const Impl<T>& out) {
    auto* p = wants(out, 0);
    if (!p) return;
    auto g = p->grad_buffer();
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * n * inner + in;
        T dot = 0;
        for (Index k = 0; k < n; ++k) dot += out.grad[base + k * inner] * out.data[base + k * inner];
        for (Index k = 0; k < n; ++k) {
          const Index i = base + k * inner;
          g[i] += out.data[i] * (out.grad[i] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  require_defined(x, "reshape", "input");
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                     shape_str(shape));
  }
  std::vector<T> y(x.data().begin(), x.data().end());
  return make_result<T>(shape, std::move(y), {&x}, [](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) p->accumulate_grad(out.grad);
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<Index>& perm) {
  require_defined(x, "permute", "input");
  const Index r = x.dim();
  if (static_cast<Index>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (Index a : perm) {
    if (a < 0 || a >= r || used[a]) throw ShapeError("permute: invalid permutation");
    used[a] = true;
  }
  Shape in_strides(r, 1);
  for (Index i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.extent(i + 1);
  Shape out_shape(r);
  Shape strides(r);  // input stride of each output axis
  for (Index i = 0; i < r; ++i) {
    out_shape[i] = x.extent(perm[i]);
    strides[i] = in_strides[perm[i]];
  }
  const Index n = x.numel();
  auto src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  Shape counter(r, 0);
  Index offset = 0;
  for (Index o = 0; o < n; ++o) {
    (*src)[o] = offset;
    for (Index a = r - 1; a >= 0; --a) {
      offset += strides[a];
      if (++counter[a] < out_shape[a]) break;
      offset -= strides[a] * out_shape[a];
      counter[a] = 0;
    }
  }
  const auto xv = x.data();
  std::vector<T> y(static_cast<std::size_t>(n));
  for (Index o = 0; o < n; ++o) y[o] = xv[(*src)[o]];
  return make_result<T>(out_shape, std::move(y), {&x}, [src](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (std::size_t o = 0; o < src->size(); ++o) g[(*src)[o]] += out.grad[o];
    }
  });
}

template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens) {
  require_rank(tokens, 3, "tokens_to_grid", "tokens");
  const Index g = perfect_square_side(tokens.extent(1), "tokens_to_grid");
  const Index b = tokens.extent(0), c = tokens.extent(2);
  return permute(reshape(tokens, {b, g, g, c}), {0, 3, 1, 2});
}

template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
  require_rank(grid, 4, "grid_to_tokens", "grid");
  const Index b = grid.extent(0), c = grid.extent(1), hw = grid.extent(2) * grid.extent(3);
  return reshape(permute(grid, {0, 2, 3, 1}), {b, hw, c});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat", "part");
  const Index r = parts[0].dim();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<Index>(s.size()) != r) throw ShapeError("concat: rank mismatch");
    for (Index i = 0; i < r; ++i) {
      if (i != axis && s[i] != parts[0].extent(i)) {
        throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= out_shape[i];
  for (Index i = axis + 1; i < r; ++i) inner *= out_shape[i];
  const Index total = out_shape[axis];
  std::vector<T> y(static_cast<std::size_t>(numel_of(out_shape)));
  std::vector<Index> spans;
  Index start = 0;
  for (const auto& p : parts) {
    const Index len = p.extent(axis) * inner;
    const auto pv = p.data();
    for (Index o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * len, len, y.begin() + o * total * inner + start);
    spans.push_back(start);
    start += len;
  }
  return make_result<T>(out_shape, std::move(y), parts, [outer, inner, total, spans](const Impl<T>& out) {
    for (std::size_t k = 0; k < out.parents.size(); ++k) {
      auto* p = wants(out, k);
      if (!p) continue;
      auto g = p->grad_buffer();
      const Index len = static_cast<Index>(g.size()) / outer;
      for (Index o = 0; o < outer; ++o)
        for (Index e = 0; e < len; ++e) g[o * len + e] += out.grad[o * total * inner + spans[k] + e];
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, Index axis, Index start, Index length) {
  require_defined(x, "slice", "input");
  const Index r = x.dim();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
  const Index n = x.extent(axis);
  if (start < 0 || length < 1 || start + length > n) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") outside extent " + std::to_string(n));
  }
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.extent(i);
  for (Index i = axis + 1; i < r; ++i) inner *= x.extent(i);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto xv = x.data();
  std::vector<T> y(static_cast<std::size_t>(outer * length * inner));
  for (Index o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + (o * n + start) * inner, length * inner,
                y.begin() + o * length * inner);
  return make_result<T>(out_shape, std::move(y), {&x}, [outer, inner, n, start, length](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (Index o = 0; o < outer; ++o)
        for (Index e = 0; e < length * inner; ++e)
          g[(o * n + start) * inner + e] += out.grad[o * length * inner + e];
    }
  });
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
  require_defined(x, "add_broadcast", "input");
  require_defined(y, "add_broadcast", "addend");
  const Index rx = x.dim(), ry = y.dim();
  bool ok = ry < rx;
  for (Index i = 0; ok && i < ry; ++i) ok = x.extent(rx - ry + i) == y.extent(i);
  if (!ok) {
    throw ShapeError("add_broadcast: " + shape_str(y.shape()) + " is not a trailing shape of " +
                     shape_str(x.shape()));
  }
  const Index inner = y.numel(), outer = x.numel() / inner;
  const auto xv = x.data(), yv = y.data();
  std::vector<T> r(xv.size());
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) r[o * inner + i] = xv[o * inner + i] + yv[i];
  return make_result<T>(x.shape(), std::move(r), {&x, &y}, [outer, inner](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) p->accumulate_grad(out.grad);
    if (auto* p = wants(out, 1)) {
      auto g = p->grad_buffer();
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < inner; ++i) g[i] += out.grad[o * inner + i];
    }
  });
}

template <typename T>
Tensor<T> repeat_leading(const Tensor<T>& x, Index n) {
  require_defined(x, "repeat_leading", "input");
  if (n < 1) throw ShapeError("repeat_leading: count must be positive");
  Shape out_shape{n};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const auto xv = x.data();
  std::vector<T> y;
  y.reserve(static_cast<std::size_t>(n * x.numel()));
  for (Index i = 0; i < n; ++i) y.insert(y.end(), xv.begin(), xv.end());
  return make_result<T>(out_shape, std::move(y), {&x}, [n](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      const std::size_t inner = g.size();
      for (Index i = 0; i < n; ++i)
        for (std::size_t e = 0; e < inner; ++e) g[e] += out.grad[i * inner + e];
    }
  });
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& gate) {
  require_rank(x, 4, "scale_channels", "input");
  require_rank(gate, 2, "scale_channels", "gate");
  const Index b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  if (gate.extent(0) != b || gate.extent(1) != c) {
    throw ShapeError("scale_channels: gate " + shape_str(gate.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const auto xv = x.data(), gv = gate.data();
  std::vector<T> y(xv.size());
  for (Index q = 0; q < b * c; ++q)
    for (Index e = 0; e < hw; ++e) y[q * hw + e] = xv[q * hw + e] * gv[q];
  return make_result<T>(x.shape(), std::move(y), {&x, &gate}, [b, c, hw](const Impl<T>& out) {
    const auto& px = *out.parents[0];
    const auto& pg = *out.parents[1];
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (Index q = 0; q < b * c; ++q)
        for (Index e = 0; e < hw; ++e) g[q * hw + e] += out.grad[q * hw + e] * pg.data[q];
    }
    if (auto* p = wants(out, 1)) {
      auto g = p->grad_buffer();
      for (Index q = 0; q < b * c; ++q) {
        T acc = 0;
        for (Index e = 0; e < hw; ++e) acc += out.grad[q * hw + e] * px.data[q * hw + e];
        g[q] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const Index b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  const auto xv = x.data();
  std::vector<T> y(static_cast<std::size_t>(b * c));
  for (Index q = 0; q < b * c; ++q) {
    T acc = 0;
    for (Index e = 0; e < hw; ++e) acc += xv[q * hw + e];
    y[q] = acc / T(hw);
  }
  return make_result<T>({b, c}, std::move(y), {&x}, [b, c, hw](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (Index q = 0; q < b * c; ++q)
        for (Index e = 0; e < hw; ++e) g[q * hw + e] += out.grad[q] / T(hw);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum", "input");
  T acc = 0;
  for (T v : x.data()) acc += v;
  return make_result<T>({1}, {acc}, {&x}, [](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      const T g0 = out.grad[0];
      for (T& g : p->grad_buffer()) g += g0;
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined(x, "mean", "input");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  require_defined(x, "sum_last", "input");
  if (x.dim() < 2) throw ShapeError("sum_last: needs rank >= 2, got " + shape_str(x.shape()));
  const Index k = x.extent(-1), rows = x.numel() / k;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const auto xv = x.data();
  std::vector<T> y(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    T acc = 0;
    for (Index e = 0; e < k; ++e) acc += xv[r * k + e];
    y[r] = acc;
  }
  return make_result<T>(out_shape, std::move(y), {&x}, [rows, k](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      auto g = p->grad_buffer();
      for (Index r = 0; r < rows; ++r)
        for (Index e = 0; e < k; ++e) g[r * k + e] += out.grad[r];
    }
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
  require_same_shape(logits, target, "bce_with_logits");
  const auto x = logits.data(), t = target.data();
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    acc += std::max(x[i], T(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  const T n = T(x.size());
  return make_result<T>({1}, {acc / n}, {&logits, &target}, [n](const Impl<T>& out) {
    if (auto* p = wants(out, 0)) {
      const auto& tv = out.parents[1]->data;
      auto g = p->grad_buffer();
      const T g0 = out.grad[0] / n;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T xi = p->data[i];
        const T s = xi >= T(0) ? T(1) / (T(1) + std::exp(-xi)) : std::exp(xi) / (T(1) + std::exp(xi));
        g[i] += g0 * (s - tv[i]);
      }
    }
  });
}

// ---------------------------------------------------------------------------

#define MBA_INSTANTIATE_OPS(T)                                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                         \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index,      \
                            Index);                                                           \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                      Index);                                                 \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);  \
  template Tensor<T> softmax(const Tensor<T>&, Index);                                        \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                 \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<Index>&);                    \
  template Tensor<T> tokens_to_grid(const Tensor<T>&);                                        \
  template Tensor<T> grid_to_tokens(const Tensor<T>&);                                        \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, Index);                            \
  template Tensor<T> slice(const Tensor<T>&, Index, Index, Index);                            \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> repeat_leading(const Tensor<T>&, Index);                                 \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> sum_last(const Tensor<T>&);                                              \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

MBA_INSTANTIATE_OPS(float)
MBA_INSTANTIATE_OPS(double)

#undef MBA_INSTANTIATE_OPS

}  // namespace mba
