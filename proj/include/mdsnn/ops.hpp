#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#if defined(MDSNN_USE_CBLAS)
#include <cblas.h>
#endif

#include "mdsnn/autodiff.hpp"
#include "mdsnn/tensor.hpp"

// Differentiable tensor ops recorded on a Tape. Broadcasting is limited to
// per-feature bias vectors over the leading batch dimension.
namespace mdsnn {

namespace detail {

#if defined(MDSNN_USE_CBLAS)
// Row-major C += op(A) * op(B) through CBLAS. Returns false for scalar types
// BLAS does not cover. OpenBLAS is pinned to one thread on first use.
template <typename Real>
bool blas_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
               const Real* a, const Real* b, Real* c) {
#if defined(OPENBLAS_VERSION)
  static const bool single = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)single;
#endif
  const auto M = static_cast<int>(m), N = static_cast<int>(n), K = static_cast<int>(k);
  const int lda = ta ? M : K, ldb = tb ? K : N;
  const auto opa = ta ? CblasTrans : CblasNoTrans, opb = tb ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<Real, float>) {
    cblas_sgemm(CblasRowMajor, opa, opb, M, N, K, 1.0f, a, lda, b, ldb, 1.0f, c, N);
    return true;
  } else if constexpr (std::is_same_v<Real, double>) {
    cblas_dgemm(CblasRowMajor, opa, opb, M, N, K, 1.0, a, lda, b, ldb, 1.0, c, N);
    return true;
  }
  return false;
}
#else
template <typename Real>
bool blas_gemm(bool, bool, std::size_t, std::size_t, std::size_t, const Real*, const Real*,
               Real*) {
  return false;
}
#endif

// C[m,n] += A[m,k] * B[k,n]
template <typename Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* a,
             const Real* b, Real* c) {
  if (blas_gemm(false, false, m, n, k, a, b, c)) return;
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      if (av == Real(0)) continue;
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* a,
             const Real* b, Real* c) {
  if (blas_gemm(false, true, m, n, k, a, b, c)) return;
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* a,
             const Real* b, Real* c) {
  if (blas_gemm(true, false, m, n, k, a, b, c)) return;
  for (std::size_t p = 0; p < k; ++p) {
    const Real* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real av = a[p * m + i];
      if (av == Real(0)) continue;
      Real* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Real>
void require_same(const char* op, const Var<Real>& a, const Var<Real>& b) {
  require_same_shape(op, a.value(), b.value());
}

template <typename Real>
void require_rank(const char* op, const Tensor<Real>& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
  }
}

}  // namespace detail

template <typename Real>
Var<Real> identity(const Var<Real>& x) {
  return x.tape->record("identity", x.value(), {x},
                        [x](Tape<Real>& t, const Tensor<Real>& g) {
                          t.accumulate(x, g);
                        });
}

// Same value, cut from the graph.
template <typename Real>
Var<Real> detach(const Var<Real>& x) {
  return x.tape->constant(x.value(), "detach");
}

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same("add", a, b);
  Tensor<Real> out = a.value();
  add_inplace(out, b.value());
  return a.tape->record("add", std::move(out), {a, b},
                        [a, b](Tape<Real>& t, const Tensor<Real>& g) {
                          t.accumulate(a, g);
                          t.accumulate(b, g);
                        });
}

template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same("sub", a, b);
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record("sub", std::move(out), {a, b},
                        [a, b](Tape<Real>& t, const Tensor<Real>& g) {
                          t.accumulate(a, g);
                          t.accumulate(b, map(g, [](Real v) { return -v; }));
                        });
}

template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same("mul", a, b);
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(
      "mul", std::move(out), {a, b}, [a, b](Tape<Real>& t, const Tensor<Real>& g) {
        Tensor<Real> ga = g, gb = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] *= b.value()[i];
          gb[i] *= a.value()[i];
        }
        t.accumulate(a, ga);
        t.accumulate(b, gb);
      });
}

// Elementwise product with a constant (non-differentiated) tensor.
template <typename Real>
Var<Real> mul_const(const Var<Real>& a, Tensor<Real> mask) {
  require_same_shape("mul_const", a.value(), mask);
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return a.tape->record("mul_const", std::move(out), {a},
                        [a, mask = std::move(mask)](Tape<Real>& t,
                                                    const Tensor<Real>& g) {
                          Tensor<Real> ga = g;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            ga[i] *= mask[i];
                          }
                          t.accumulate(a, ga);
                        });
}

template <typename Real>
Var<Real> scale(const Var<Real>& a, Real c) {
  return a.tape->record(
      "scale", map(a.value(), [c](Real v) { return v * c; }), {a},
      [a, c](Tape<Real>& t, const Tensor<Real>& g) {
        t.accumulate(a, map(g, [c](Real v) { return v * c; }));
      });
}

template <typename Real>
Var<Real> relu(const Var<Real>& x) {
  return x.tape->record(
      "relu", map(x.value(), [](Real v) { return v > 0 ? v : Real(0); }), {x},
      [x](Tape<Real>& t, const Tensor<Real>& g) {
        Tensor<Real> gx = g;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!(x.value()[i] > 0)) gx[i] = 0;
        }
        t.accumulate(x, gx);
      });
}

template <typename Real>
Var<Real> reshape(const Var<Real>& x, Shape shape) {
  Shape original = x.shape();
  return x.tape->record("reshape", x.value().reshaped(std::move(shape)), {x},
                        [x, original](Tape<Real>& t, const Tensor<Real>& g) {
                          t.accumulate(x, g.reshaped(original));
                        });
}

// Flattens everything after the leading dimension.
template <typename Real>
Var<Real> flatten(const Var<Real>& x) {
  const auto n = x.shape()[0];
  return reshape(x, Shape{n, x.value().size() / n});
}

template <typename Real>
Var<Real> sum(const Var<Real>& x) {
  Real s = 0;
  for (auto v : x.value().data()) s += v;
  return x.tape->record("sum", Tensor<Real>::scalar(s), {x},
                        [x](Tape<Real>& t, const Tensor<Real>& g) {
                          t.accumulate(x, Tensor<Real>(x.shape(), g[0]));
                        });
}

template <typename Real>
Var<Real> mean(const Var<Real>& x) {
  return scale(sum(x), Real(1) / static_cast<Real>(x.value().size()));
}

// a[m,k] x b[k,n]
template <typename Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank("matmul", av, 2);
  detail::require_rank("matmul", bv, 2);
  if (av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ, " +
                     to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<Real> out(Shape{m, n});
  detail::gemm_nn(m, n, k, av.data().data(), bv.data().data(),
                  out.data().data());
  return a.tape->record(
      "matmul", std::move(out), {a, b},
      [a, b, m, n, k](Tape<Real>& t, const Tensor<Real>& g) {
        if (a.requires_grad()) {
          Tensor<Real> ga(Shape{m, k});
          detail::gemm_nt(m, k, n, g.data().data(),
                          b.value().data().data(), ga.data().data());
          t.accumulate(a, ga);
        }
        if (b.requires_grad()) {
          Tensor<Real> gb(Shape{k, n});
          detail::gemm_tn(k, n, m, a.value().data().data(), g.data().data(),
                          gb.data().data());
          t.accumulate(b, gb);
        }
      });
}

// x[batch, in] * w[out, in]^T (+ bias[out])
template <typename Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& w,
                 const Var<Real>* bias = nullptr) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require_rank("linear", xv, 2);
  detail::require_rank("linear", wv, 2);
  if (xv.dim(1) != wv.dim(1)) {
    throw ShapeError("linear: input features " + to_string(xv.shape()) +
                     " do not match weight " + to_string(wv.shape()));
  }
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out_f = wv.dim(0);
  Tensor<Real> out(Shape{batch, out_f});
  detail::gemm_nt(batch, out_f, in, xv.data().data(), wv.data().data(),
                  out.data().data());
  if (bias) {
    const auto& bv = bias->value();
    if (bv.shape() != Shape{out_f}) {
      throw ShapeError("linear: bias shape " + to_string(bv.shape()) +
                       " does not match " + std::to_string(out_f) +
                       " outputs");
    }
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t j = 0; j < out_f; ++j) out[r * out_f + j] += bv[j];
    }
  }
  Var<Real> b = bias ? *bias : w;
  const bool has_bias = bias != nullptr;
  auto fn = [x, w, b, has_bias, batch, in, out_f](Tape<Real>& t,
                                                 const Tensor<Real>& g) {
    if (x.requires_grad()) {
      Tensor<Real> gx(Shape{batch, in});
      detail::gemm_nn(batch, in, out_f, g.data().data(),
                      w.value().data().data(), gx.data().data());
      t.accumulate(x, gx);
    }
    if (w.requires_grad()) {
      Tensor<Real> gw(Shape{out_f, in});
      detail::gemm_tn(out_f, in, batch, g.data().data(),
                      x.value().data().data(), gw.data().data());
      t.accumulate(w, gw);
    }
    if (has_bias && b.requires_grad()) {
      Tensor<Real> gb(Shape{out_f});
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
      }
      t.accumulate(b, gb);
    }
  };
  if (has_bias) {
    return x.tape->record("linear", std::move(out), {x, w, b}, std::move(fn));
  }
  return x.tape->record("linear", std::move(out), {x, w}, std::move(fn));
}

struct Conv2dGeometry {
  std::size_t batch, in_c, in_h, in_w;
  std::size_t out_c, k_h, k_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_c * k_h * k_w; }
  std::size_t pixels() const { return out_h * out_w; }
};

namespace detail {

// Source offset within one input image for every (output position, patch
// element) pair, or -1 where the receptive field hits padding.
inline std::vector<std::ptrdiff_t> unfold_index(const Conv2dGeometry& g) {
  const std::size_t patch = g.patch();
  std::vector<std::ptrdiff_t> idx(g.pixels() * patch);
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      std::ptrdiff_t* row = idx.data() + (oy * g.out_w + ox) * patch;
      for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t i = 0; i < g.k_h; ++i) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                         static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t j = 0; j < g.k_w; ++j) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = y >= 0 && xx >= 0 &&
                                y < static_cast<std::ptrdiff_t>(g.in_h) &&
                                xx < static_cast<std::ptrdiff_t>(g.in_w);
            row[(c * g.k_h + i) * g.k_w + j] =
                inside ? (static_cast<std::ptrdiff_t>(c * g.in_h) + y) *
                                 static_cast<std::ptrdiff_t>(g.in_w) + xx
                       : -1;
          }
        }
      }
    }
  }
  return idx;
}

// Whole-batch unfolding into [N*pixels, patch]: one row per output position
// holding its receptive field.
template <typename Real>
std::vector<Real> batch_rows(const Conv2dGeometry& g,
                             const std::vector<std::ptrdiff_t>& idx, const Real* x) {
  const std::size_t in_size = g.in_c * g.in_h * g.in_w;
  const std::size_t per_sample = idx.size();
  std::vector<Real> rows(g.batch * per_sample);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const Real* img = x + n * in_size;
    Real* dst = rows.data() + n * per_sample;
    for (std::size_t k = 0; k < per_sample; ++k) {
      dst[k] = idx[k] >= 0 ? img[idx[k]] : Real(0);
    }
  }
  return rows;
}

// Adjoint of batch_rows: scatters row gradients back onto the images.
template <typename Real>
void batch_unrows(const Conv2dGeometry& g, const std::vector<std::ptrdiff_t>& idx,
                  const Real* rows, Real* x) {
  const std::size_t in_size = g.in_c * g.in_h * g.in_w;
  const std::size_t per_sample = idx.size();
  for (std::size_t n = 0; n < g.batch; ++n) {
    Real* img = x + n * in_size;
    const Real* src = rows + n * per_sample;
    for (std::size_t k = 0; k < per_sample; ++k) {
      if (idx[k] >= 0) img[idx[k]] += src[k];
    }
  }
}

}  // namespace detail

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w,
                                      std::size_t stride, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError("conv2d: expected NCHW input and OIHW kernel, got " +
                     to_string(x) + " and " + to_string(w));
  }
  if (x[1] != w[1]) {
    throw ShapeError("conv2d: input channels " + to_string(x) +
                     " do not match kernel " + to_string(w));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3]) {
    throw ShapeError("conv2d: kernel " + to_string(w) +
                     " larger than padded input " + to_string(x));
  }
  Conv2dGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
  g.out_h = (g.in_h + 2 * pad - g.k_h) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.k_w) / stride + 1;
  return g;
}

// Bias-free 2-D cross-correlation, x[N,C,H,W] with w[O,C,kh,kw].
//
// The batch is unfolded into one [N*Ho*Wo, C*kh*kw] matrix with the
// receptive fields as rows. Inputs are mostly binary spike maps, so the
// GEMMs are arranged to stream over the unfolded rows and skip zeros.
template <typename Real>
Var<Real> conv2d(const Var<Real>& x, const Var<Real>& w, std::size_t stride = 1,
                 std::size_t pad = 0) {
  const Conv2dGeometry geo = conv2d_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t px = geo.pixels();
  const std::size_t positions = geo.batch * px;
  const std::size_t patch = geo.patch();
  const std::size_t oc = geo.out_c;
  auto idx = std::make_shared<const std::vector<std::ptrdiff_t>>(
      detail::unfold_index(geo));
  const std::vector<Real> rows = detail::batch_rows(geo, *idx, x.value().data().data());
  std::vector<Real> w_t(patch * oc);  // [patch, O]
  const Real* wd = w.value().data().data();
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t q = 0; q < patch; ++q) w_t[q * oc + o] = wd[o * patch + q];
  }
  std::vector<Real> y(positions * oc, Real(0));  // [N*P, O]
  detail::gemm_nn(positions, oc, patch, rows.data(), w_t.data(), y.data());
  Tensor<Real> out(Shape{geo.batch, oc, geo.out_h, geo.out_w});
  Real* od = out.data().data();
  for (std::size_t n = 0; n < geo.batch; ++n) {
    for (std::size_t p = 0; p < px; ++p) {
      const Real* src = y.data() + (n * px + p) * oc;
      for (std::size_t o = 0; o < oc; ++o) od[(n * oc + o) * px + p] = src[o];
    }
  }
  return x.tape->record(
      "conv2d", std::move(out), {x, w},
      [x, w, geo, idx, px, positions, patch, oc](Tape<Real>& t,
                                                   const Tensor<Real>& g) {
        std::vector<Real> gy(positions * oc);  // [N*P, O]
        const Real* gd = g.data().data();
        for (std::size_t n = 0; n < geo.batch; ++n) {
          for (std::size_t o = 0; o < oc; ++o) {
            const Real* src = gd + (n * oc + o) * px;
            for (std::size_t p = 0; p < px; ++p) gy[(n * px + p) * oc + o] = src[p];
          }
        }
        if (w.requires_grad()) {
          const std::vector<Real> rows =
              detail::batch_rows(geo, *idx, x.value().data().data());
          std::vector<Real> gw_t(patch * oc, Real(0));  // [patch, O]
          detail::gemm_tn(patch, oc, positions, rows.data(), gy.data(), gw_t.data());
          Tensor<Real> gw(w.shape());
          for (std::size_t o = 0; o < oc; ++o) {
            for (std::size_t q = 0; q < patch; ++q) gw[o * patch + q] = gw_t[q * oc + o];
          }
          t.accumulate(w, gw);
        }
        if (x.requires_grad()) {
          std::vector<Real> grows(positions * patch, Real(0));
          detail::gemm_nn(positions, patch, oc, gy.data(), w.value().data().data(),
                          grows.data());
          Tensor<Real> gx(x.shape());
          detail::batch_unrows(geo, *idx, grows.data(), gx.data().data());
          t.accumulate(x, gx);
        }
      });
}

// Mean over the spatial axes: [N,C,H,W] -> [N,C].
template <typename Real>
Var<Real> global_avg_pool(const Var<Real>& x) {
  detail::require_rank("global_avg_pool", x.value(), 4);
  const auto& s = x.shape();
  const std::size_t nc = s[0] * s[1], hw = s[2] * s[3];
  Tensor<Real> out(Shape{s[0], s[1]});
  for (std::size_t i = 0; i < nc; ++i) {
    Real acc = 0;
    for (std::size_t p = 0; p < hw; ++p) acc += x.value()[i * hw + p];
    out[i] = acc / static_cast<Real>(hw);
  }
  return x.tape->record("global_avg_pool", std::move(out), {x},
                        [x, nc, hw](Tape<Real>& t, const Tensor<Real>& g) {
                          Tensor<Real> gx(x.shape());
                          for (std::size_t i = 0; i < nc; ++i) {
                            const Real v = g[i] / static_cast<Real>(hw);
                            for (std::size_t p = 0; p < hw; ++p) {
                              gx[i * hw + p] = v;
                            }
                          }
                          t.accumulate(x, gx);
                        });
}

// Running statistics owned by a batch-norm layer.
template <typename Real = double>
struct BatchNormStats {
  Tensor<Real> mean;
  Tensor<Real> var;

  explicit BatchNormStats(std::size_t channels = 1)
      : mean(Shape{channels}), var(Shape{channels}, Real(1)) {}
};

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// y = gamma * (x - mu) / sqrt(var + eps) + beta over channel axis 1 of a
// [N,C] or [N,C,H,W] input. Training mode normalizes with batch statistics
// and folds them into `stats`; evaluation mode uses `stats`.
template <typename Real>
Var<Real> batch_norm(const Var<Real>& x, const Var<Real>& gamma,
                     const Var<Real>& beta, BatchNormStats<Real>& stats,
                     const BatchNormOptions& opt) {
  const auto& s = x.shape();
  if (s.size() != 2 && s.size() != 4) {
    throw ShapeError("batch_norm: expected [N,C] or [N,C,H,W], got " +
                     to_string(s));
  }
  const std::size_t n = s[0], c = s[1];
  const std::size_t inner = s.size() == 4 ? s[2] * s[3] : 1;
  for (const Tensor<Real>* p :
       {&gamma.value(), &beta.value(), &std::as_const(stats.mean), &std::as_const(stats.var)}) {
    if (p->shape() != Shape{c}) {
      throw ShapeError("batch_norm: channel mismatch, input " + to_string(s) +
                       " with parameter " + to_string(p->shape()));
    }
  }
  if (!(opt.eps > 0)) throw ConfigError("batch_norm: eps must be positive");
  const std::size_t m = n * inner;
  std::vector<Real> mu(c), inv_std(c);
  const auto& xv = x.value();
  if (opt.training) {
    const Real mom = static_cast<Real>(opt.momentum);
    for (std::size_t ch = 0; ch < c; ++ch) {
      Real acc = 0;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < inner; ++p) {
          acc += xv[(b * c + ch) * inner + p];
        }
      }
      mu[ch] = acc / static_cast<Real>(m);
      Real sq = 0;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < inner; ++p) {
          const Real d = xv[(b * c + ch) * inner + p] - mu[ch];
          sq += d * d;
        }
      }
      const Real var = sq / static_cast<Real>(m);
      inv_std[ch] = Real(1) / std::sqrt(var + static_cast<Real>(opt.eps));
      const Real unbiased =
          m > 1 ? sq / static_cast<Real>(m - 1) : var;
      stats.mean[ch] = (1 - mom) * stats.mean[ch] + mom * mu[ch];
      stats.var[ch] = (1 - mom) * stats.var[ch] + mom * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.mean[ch];
      inv_std[ch] =
          Real(1) / std::sqrt(stats.var[ch] + static_cast<Real>(opt.eps));
    }
  }
  Tensor<Real> out(s);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const Real gm = gamma.value()[ch], bt = beta.value()[ch];
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (b * c + ch) * inner + p;
        out[i] = gm * (xv[i] - mu[ch]) * inv_std[ch] + bt;
      }
    }
  }
  const bool training = opt.training;
  return x.tape->record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, mu = std::move(mu), inv_std = std::move(inv_std), n, c,
       inner, m, training](Tape<Real>& t, const Tensor<Real>& g) {
        const auto& xv = x.value();
        Tensor<Real> gx(x.shape()), gg(Shape{c}), gb(Shape{c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          Real sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t p = 0; p < inner; ++p) {
              const std::size_t i = (b * c + ch) * inner + p;
              const Real xhat = (xv[i] - mu[ch]) * inv_std[ch];
              sum_g += g[i];
              sum_gx += g[i] * xhat;
            }
          }
          gg[ch] = sum_gx;
          gb[ch] = sum_g;
          const Real gm = gamma.value()[ch];
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t p = 0; p < inner; ++p) {
              const std::size_t i = (b * c + ch) * inner + p;
              if (training) {
                const Real xhat = (xv[i] - mu[ch]) * inv_std[ch];
                gx[i] = gm * inv_std[ch] / static_cast<Real>(m) *
                        (static_cast<Real>(m) * g[i] - sum_g - xhat * sum_gx);
              } else {
                gx[i] = gm * inv_std[ch] * g[i];
              }
            }
          }
        }
        t.accumulate(x, gx);
        t.accumulate(gamma, gg);
        t.accumulate(beta, gb);
      });
}

// Row-wise softmax / log-softmax of a [rows, features] tensor after dividing
// by a temperature. Max-subtracted for stability.
template <typename Real>
Tensor<Real> log_softmax_rows(const Tensor<Real>& x, Real temperature) {
  detail::require_rank("log_softmax", x, 2);
  const std::size_t rows = x.dim(0), f = x.dim(1);
  Tensor<Real> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    Real mx = x[r * f] / temperature;
    for (std::size_t j = 1; j < f; ++j) mx = std::max(mx, x[r * f + j] / temperature);
    Real acc = 0;
    for (std::size_t j = 0; j < f; ++j) acc += std::exp(x[r * f + j] / temperature - mx);
    const Real lse = mx + std::log(acc);
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] = x[r * f + j] / temperature - lse;
  }
  return out;
}

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x, Real temperature) {
  return map(log_softmax_rows(x, temperature), [](Real v) { return std::exp(v); });
}

// Mean softmax cross-entropy of logits[batch, classes] against class ids.
template <typename Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::span<const int> labels) {
  const auto& z = logits.value();
  detail::require_rank("cross_entropy", z, 2);
  const std::size_t batch = z.dim(0), k = z.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + to_string(z.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw Error("cross_entropy: label " + std::to_string(y) +
                  " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor<Real> logp = log_softmax_rows(z, Real(1));
  Real loss = 0;
  for (std::size_t r = 0; r < batch; ++r) {
    loss -= logp[r * k + static_cast<std::size_t>(labels[r])];
  }
  loss /= static_cast<Real>(batch);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record(
      "cross_entropy", Tensor<Real>::scalar(loss), {logits},
      [logits, logp = std::move(logp), ys = std::move(ys), batch, k](
          Tape<Real>& t, const Tensor<Real>& g) {
        Tensor<Real> gz(logits.shape());
        const Real w = g[0] / static_cast<Real>(batch);
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            gz[r * k + j] = w * std::exp(logp[r * k + j]);
          }
          gz[r * k + static_cast<std::size_t>(ys[r])] -= w;
        }
        t.accumulate(logits, gz);
      });
}

// Mean squared error over all elements.
template <typename Real>
Var<Real> mse(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same("mse", a, b);
  const std::size_t n = a.value().size();
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return a.tape->record(
      "mse", Tensor<Real>::scalar(acc / static_cast<Real>(n)), {a, b},
      [a, b, n](Tape<Real>& t, const Tensor<Real>& g) {
        Tensor<Real> ga(a.shape());
        const Real w = 2 * g[0] / static_cast<Real>(n);
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] = w * (a.value()[i] - b.value()[i]);
        }
        t.accumulate(a, ga);
        t.accumulate(b, map(ga, [](Real v) { return -v; }));
      });
}

}  // namespace mdsnn
