// Scalar reference lane. Loop orders are chosen so that each output element
// accumulates in the same sequence as the AVX2 lane where possible (gemm_nn /
// gemm_tn walk k innermost per element); reductions and gemm_nt differ in
// summation order and are compared with tolerances.

#include "kernels_impl.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dfa::kernels::scalar {
namespace {

template <class T>
void add_impl(const T* a, const T* b, T* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class T>
void sub_impl(const T* a, const T* b, T* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <class T>
void mul_impl(const T* a, const T* b, T* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class T>
void scale_impl(T alpha, const T* x, T* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <class T>
void axpy_impl(T alpha, const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void clamp_min_impl(const T* x, T floor_value, T* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] < floor_value ? floor_value : x[i];
}

template <class T>
void clamp_min_mask_acc_impl(const T* x, T floor_value, const T* g, T* dx,
                             int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (x[i] > floor_value) dx[i] += g[i];
}

template <class T>
void affine_impl(T a, const T* x, T b, T* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a * x[i] + b;
}

template <class T>
void acc_axbyc_impl(T a, const T* x, T b, const T* y, T c, T* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] += a * x[i] + b * y[i] + c;
}

template <class T>
T sum_impl(const T* x, int64_t n) {
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <class T>
T sumsq_impl(const T* x, int64_t n) {
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

template <class T>
T dot_impl(const T* a, const T* b, int64_t n) {
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
void zero_rows(T* c, int64_t m, int64_t n, int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) std::memset(c + i * ldc, 0, sizeof(T) * n);
}

template <class T>
void gemm_nn_impl(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
                  const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  if (!accumulate) zero_rows(c, m, n, ldc);
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    for (int64_t p = 0; p < k; ++p) {
      const T av = a[i * lda + p];
      const T* brow = b + p * ldb;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm_nt_impl(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
                  const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * lda;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * ldb;
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      T* cij = c + i * ldc + j;
      *cij = accumulate ? *cij + acc : acc;
    }
  }
}

template <class T>
void gemm_tn_impl(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
                  const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  if (!accumulate) zero_rows(c, m, n, ldc);
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    for (int64_t p = 0; p < k; ++p) {
      const T av = a[p * lda + i];
      const T* brow = b + p * ldb;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void sgd_update_impl(T* p, const T* g, T* v, int64_t n, T lr, T momentum, T wd) {
  for (int64_t i = 0; i < n; ++i) {
    v[i] = momentum * v[i] + g[i] + wd * p[i];
    p[i] -= lr * v[i];
  }
}

template <class T>
void adam_update_impl(T* p, const T* g, T* m, T* v, int64_t n, T lr, T beta1,
                      T beta2, T eps, T wd, bool decoupled_wd, T bias1, T bias2) {
  for (int64_t i = 0; i < n; ++i) {
    T grad = g[i];
    if (!decoupled_wd) grad += wd * p[i];
    m[i] = beta1 * m[i] + (T(1) - beta1) * grad;
    v[i] = beta2 * v[i] + (T(1) - beta2) * grad * grad;
    const T mhat = m[i] / bias1;
    const T vhat = v[i] / bias2;
    T step = lr * mhat / (std::sqrt(vhat) + eps);
    if (decoupled_wd) step += lr * wd * p[i];
    p[i] -= step;
  }
}

}  // namespace

#define DFA_DEFINE_KERNELS(T)                                                  \
  void add(const T* a, const T* b, T* out, int64_t n) { add_impl(a, b, out, n); } \
  void sub(const T* a, const T* b, T* out, int64_t n) { sub_impl(a, b, out, n); } \
  void mul(const T* a, const T* b, T* out, int64_t n) { mul_impl(a, b, out, n); } \
  void scale(T alpha, const T* x, T* out, int64_t n) { scale_impl(alpha, x, out, n); } \
  void axpy(T alpha, const T* x, T* y, int64_t n) { axpy_impl(alpha, x, y, n); } \
  void clamp_min(const T* x, T f, T* out, int64_t n) { clamp_min_impl(x, f, out, n); } \
  void clamp_min_mask_acc(const T* x, T f, const T* g, T* dx, int64_t n) {     \
    clamp_min_mask_acc_impl(x, f, g, dx, n);                                   \
  }                                                                            \
  void affine(T a, const T* x, T b, T* out, int64_t n) { affine_impl(a, x, b, out, n); } \
  void acc_axbyc(T a, const T* x, T b, const T* y, T c, T* out, int64_t n) {   \
    acc_axbyc_impl(a, x, b, y, c, out, n);                                     \
  }                                                                            \
  T sum(const T* x, int64_t n) { return sum_impl(x, n); }                      \
  T sumsq(const T* x, int64_t n) { return sumsq_impl(x, n); }                  \
  T dot(const T* a, const T* b, int64_t n) { return dot_impl(a, b, n); }       \
  void gemm_nn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    gemm_nn_impl(m, n, k, a, lda, b, ldb, c, ldc, acc);                        \
  }                                                                            \
  void gemm_nt(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    gemm_nt_impl(m, n, k, a, lda, b, ldb, c, ldc, acc);                        \
  }                                                                            \
  void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    gemm_tn_impl(m, n, k, a, lda, b, ldb, c, ldc, acc);                        \
  }                                                                            \
  void sgd_update(T* p, const T* g, T* v, int64_t n, T lr, T mom, T wd) {      \
    sgd_update_impl(p, g, v, n, lr, mom, wd);                                  \
  }                                                                            \
  void adam_update(T* p, const T* g, T* m, T* v, int64_t n, T lr, T b1, T b2,  \
                   T eps, T wd, bool dec, T bc1, T bc2) {                      \
    adam_update_impl(p, g, m, v, n, lr, b1, b2, eps, wd, dec, bc1, bc2);       \
  }

DFA_DEFINE_KERNELS(float)
DFA_DEFINE_KERNELS(double)

#undef DFA_DEFINE_KERNELS

}  // namespace dfa::kernels::scalar
