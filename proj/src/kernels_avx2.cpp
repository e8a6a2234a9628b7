// AVX2+FMA lane. This translation unit is compiled with -mavx2 -mfma; nothing
// here runs unless the dispatcher verified CPUID support first.

#include "kernels_impl.hpp"

#if DFA_HAVE_AVX2_LANE

#include <immintrin.h>

#include <cmath>
#include <cstring>

namespace dfa::kernels::avx2 {
namespace {

template <class T>
struct V;

template <>
struct V<float> {
  using reg = __m256;
  static constexpr int64_t W = 8;
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg bcast(float x) { return _mm256_set1_ps(x); }
  static reg zero() { return _mm256_setzero_ps(); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_ps(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
  static reg div(reg a, reg b) { return _mm256_div_ps(a, b); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg fnma(reg a, reg b, reg c) { return _mm256_fnmadd_ps(a, b, c); }
  static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
  static reg sqrt(reg a) { return _mm256_sqrt_ps(a); }
  static reg gt(reg a, reg b) { return _mm256_cmp_ps(a, b, _CMP_GT_OQ); }
  static reg and_(reg a, reg b) { return _mm256_and_ps(a, b); }
  static float hsum(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    return _mm_cvtss_f32(s);
  }
};

template <>
struct V<double> {
  using reg = __m256d;
  static constexpr int64_t W = 4;
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg bcast(double x) { return _mm256_set1_pd(x); }
  static reg zero() { return _mm256_setzero_pd(); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_pd(a, b); }
  static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
  static reg div(reg a, reg b) { return _mm256_div_pd(a, b); }
  static reg fma(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg fnma(reg a, reg b, reg c) { return _mm256_fnmadd_pd(a, b, c); }
  static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
  static reg sqrt(reg a) { return _mm256_sqrt_pd(a); }
  static reg gt(reg a, reg b) { return _mm256_cmp_pd(a, b, _CMP_GT_OQ); }
  static reg and_(reg a, reg b) { return _mm256_and_pd(a, b); }
  static double hsum(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    __m128d s = _mm_add_pd(lo, hi);
    s = _mm_add_sd(s, _mm_unpackhi_pd(s, s));
    return _mm_cvtsd_f64(s);
  }
};

template <class T, class F, class FS>
void ew2(const T* a, const T* b, T* out, int64_t n, F f, FS fs) {
  using v = V<T>;
  int64_t i = 0;
  for (; i + v::W <= n; i += v::W) v::store(out + i, f(v::load(a + i), v::load(b + i)));
  for (; i < n; ++i) out[i] = fs(a[i], b[i]);
}

template <class T>
void add_impl(const T* a, const T* b, T* out, int64_t n) {
  ew2(a, b, out, n, [](auto x, auto y) { return V<T>::add(x, y); },
      [](T x, T y) { return x + y; });
}

template <class T>
void sub_impl(const T* a, const T* b, T* out, int64_t n) {
  ew2(a, b, out, n, [](auto x, auto y) { return V<T>::sub(x, y); },
      [](T x, T y) { return x - y; });
}

template <class T>
void mul_impl(const T* a, const T* b, T* out, int64_t n) {
  ew2(a, b, out, n, [](auto x, auto y) { return V<T>::mul(x, y); },
      [](T x, T y) { return x * y; });
}

template <class T>
void scale_impl(T alpha, const T* x, T* out, int64_t n) {
  using v = V<T>;
  const auto va = v::bcast(alpha);
  int64_t i = 0;
  for (; i + v::W <= n; i += v::W) v::store(out + i, v::mul(va, v::load(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

template <class T>
void axpy_impl(T alpha, const T* x, T* y, int64_t n) {
  using v = V<T>;
  const auto va = v::bcast(alpha);
  int64_t i = 0;
  for (; i + v::W <= n; i += v::W)
    v::store(y + i, v::fma(va, v::load(x + i), v::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void clamp_min_impl(const T* x, T f, T* out, int64_t n) {
  using v = V<T>;
  const auto vf = v::bcast(f);
  int64_t i = 0;
  for (; i + v::W <= n; i += v::W) v::store(out + i, v::max(vf, v::load(x + i)));
  for (; i < n; ++i) out[i] = x[i] < f ? f : x[i];
}

template <class T>
void clamp_min_mask_acc_impl(const T* x, T f, const T* g, T* dx, int64_t n) {
  using v = V<T>;
  const auto vf = v::bcast(f);
  int64_t i = 0;
  for (; i + v::W <= n; i += v::W) {
    auto mask = v::gt(v::load(x + i), vf);
    auto contrib = v::and_(mask, v::load(g + i));
    v::store(dx + i, v::add(v::load(dx + i), contrib));
  }
  for (; i < n; ++i)
    if (x[i] > f) dx[i] += g[i];
}

template <class T>
void affine_impl(T a, const T* x, T b, T* out, int64_t n) {
  using v = V<T>;
  const auto va = v::bcast(a), vb = v::bcast(b);
  int64_t i = 0;
  for (; i + v::W <= n; i += v::W) v::store(out + i, v::fma(va, v::load(x + i), vb));
  for (; i < n; ++i) out[i] = a * x[i] + b;
}

template <class T>
void acc_axbyc_impl(T a, const T* x, T b, const T* y, T c, T* out, int64_t n) {
  using v = V<T>;
  const auto va = v::bcast(a), vb = v::bcast(b), vc = v::bcast(c);
  int64_t i = 0;
  for (; i + v::W <= n; i += v::W) {
    auto t = v::fma(va, v::load(x + i), vc);
    t = v::fma(vb, v::load(y + i), t);
    v::store(out + i, v::add(v::load(out + i), t));
  }
  for (; i < n; ++i) out[i] += a * x[i] + b * y[i] + c;
}

// Reductions use 4 independent accumulators; the blockwise order differs from
// the scalar lane, so cross-lane tests compare with a tolerance.
template <class T, class LoadF, class TailF>
T reduce4(int64_t n, LoadF body, TailF tail) {
  using v = V<T>;
  auto a0 = v::zero(), a1 = v::zero(), a2 = v::zero(), a3 = v::zero();
  int64_t i = 0;
  for (; i + 4 * v::W <= n; i += 4 * v::W) {
    a0 = body(i + 0 * v::W, a0);
    a1 = body(i + 1 * v::W, a1);
    a2 = body(i + 2 * v::W, a2);
    a3 = body(i + 3 * v::W, a3);
  }
  for (; i + v::W <= n; i += v::W) a0 = body(i, a0);
  T acc = v::hsum(v::add(v::add(a0, a1), v::add(a2, a3)));
  for (; i < n; ++i) acc += tail(i);
  return acc;
}

template <class T>
T sum_impl(const T* x, int64_t n) {
  using v = V<T>;
  return reduce4<T>(
      n, [&](int64_t i, auto acc) { return v::add(acc, v::load(x + i)); },
      [&](int64_t i) { return x[i]; });
}

template <class T>
T sumsq_impl(const T* x, int64_t n) {
  using v = V<T>;
  return reduce4<T>(
      n,
      [&](int64_t i, auto acc) {
        auto xv = v::load(x + i);
        return v::fma(xv, xv, acc);
      },
      [&](int64_t i) { return x[i] * x[i]; });
}

template <class T>
T dot_impl(const T* a, const T* b, int64_t n) {
  using v = V<T>;
  return reduce4<T>(
      n,
      [&](int64_t i, auto acc) { return v::fma(v::load(a + i), v::load(b + i), acc); },
      [&](int64_t i) { return a[i] * b[i]; });
}

template <class T>
void zero_rows(T* c, int64_t m, int64_t n, int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) std::memset(c + i * ldc, 0, sizeof(T) * n);
}

// gemm_nn / gemm_tn: 2 output rows x 4 vectors of C held in registers across
// the full k loop, so each C element accumulates sequentially in k (matching
// the scalar lane's order up to FMA rounding).
template <class T, bool kTransA>
void gemm_axb(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
              const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  using v = V<T>;
  constexpr int64_t W = v::W;
  const int64_t JT = 4 * W;
  auto aval = [&](int64_t i, int64_t p) -> T {
    return kTransA ? a[p * lda + i] : a[i * lda + p];
  };
  if (!accumulate) zero_rows(c, m, n, ldc);

  int64_t i = 0;
  for (; i + 2 <= m; i += 2) {
    T* c0 = c + i * ldc;
    T* c1 = c0 + ldc;
    int64_t j = 0;
    for (; j + JT <= n; j += JT) {
      typename v::reg r00 = v::load(c0 + j), r01 = v::load(c0 + j + W),
                      r02 = v::load(c0 + j + 2 * W), r03 = v::load(c0 + j + 3 * W);
      typename v::reg r10 = v::load(c1 + j), r11 = v::load(c1 + j + W),
                      r12 = v::load(c1 + j + 2 * W), r13 = v::load(c1 + j + 3 * W);
      for (int64_t p = 0; p < k; ++p) {
        const auto a0 = v::bcast(aval(i, p));
        const auto a1 = v::bcast(aval(i + 1, p));
        const T* bp = b + p * ldb + j;
        const auto b0 = v::load(bp), b1 = v::load(bp + W), b2 = v::load(bp + 2 * W),
                   b3 = v::load(bp + 3 * W);
        r00 = v::fma(a0, b0, r00);
        r01 = v::fma(a0, b1, r01);
        r02 = v::fma(a0, b2, r02);
        r03 = v::fma(a0, b3, r03);
        r10 = v::fma(a1, b0, r10);
        r11 = v::fma(a1, b1, r11);
        r12 = v::fma(a1, b2, r12);
        r13 = v::fma(a1, b3, r13);
      }
      v::store(c0 + j, r00);
      v::store(c0 + j + W, r01);
      v::store(c0 + j + 2 * W, r02);
      v::store(c0 + j + 3 * W, r03);
      v::store(c1 + j, r10);
      v::store(c1 + j + W, r11);
      v::store(c1 + j + 2 * W, r12);
      v::store(c1 + j + 3 * W, r13);
    }
    for (; j + W <= n; j += W) {
      auto r0 = v::load(c0 + j);
      auto r1 = v::load(c1 + j);
      for (int64_t p = 0; p < k; ++p) {
        const T* bp = b + p * ldb + j;
        r0 = v::fma(v::bcast(aval(i, p)), v::load(bp), r0);
        r1 = v::fma(v::bcast(aval(i + 1, p)), v::load(bp), r1);
      }
      v::store(c0 + j, r0);
      v::store(c1 + j, r1);
    }
    for (; j < n; ++j) {
      T s0 = c0[j], s1 = c1[j];
      for (int64_t p = 0; p < k; ++p) {
        s0 += aval(i, p) * b[p * ldb + j];
        s1 += aval(i + 1, p) * b[p * ldb + j];
      }
      c0[j] = s0;
      c1[j] = s1;
    }
  }
  if (i < m) {
    T* c0 = c + i * ldc;
    int64_t j = 0;
    for (; j + W <= n; j += W) {
      auto r0 = v::load(c0 + j);
      for (int64_t p = 0; p < k; ++p)
        r0 = v::fma(v::bcast(aval(i, p)), v::load(b + p * ldb + j), r0);
      v::store(c0 + j, r0);
    }
    for (; j < n; ++j) {
      T s0 = c0[j];
      for (int64_t p = 0; p < k; ++p) s0 += aval(i, p) * b[p * ldb + j];
      c0[j] = s0;
    }
  }
}

template <class T>
void gemm_nt_impl(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
                  const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  using v = V<T>;
  constexpr int64_t W = v::W;
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * lda;
    int64_t j = 0;
    for (; j + 4 <= n; j += 4) {
      auto d0 = v::zero(), d1 = v::zero(), d2 = v::zero(), d3 = v::zero();
      const T* b0 = b + (j + 0) * ldb;
      const T* b1 = b + (j + 1) * ldb;
      const T* b2 = b + (j + 2) * ldb;
      const T* b3 = b + (j + 3) * ldb;
      int64_t p = 0;
      for (; p + W <= k; p += W) {
        const auto av = v::load(arow + p);
        d0 = v::fma(av, v::load(b0 + p), d0);
        d1 = v::fma(av, v::load(b1 + p), d1);
        d2 = v::fma(av, v::load(b2 + p), d2);
        d3 = v::fma(av, v::load(b3 + p), d3);
      }
      T s0 = v::hsum(d0), s1 = v::hsum(d1), s2 = v::hsum(d2), s3 = v::hsum(d3);
      for (; p < k; ++p) {
        s0 += arow[p] * b0[p];
        s1 += arow[p] * b1[p];
        s2 += arow[p] * b2[p];
        s3 += arow[p] * b3[p];
      }
      T* crow = c + i * ldc + j;
      if (accumulate) {
        crow[0] += s0;
        crow[1] += s1;
        crow[2] += s2;
        crow[3] += s3;
      } else {
        crow[0] = s0;
        crow[1] = s1;
        crow[2] = s2;
        crow[3] = s3;
      }
    }
    for (; j < n; ++j) {
      const T* brow = b + j * ldb;
      auto d0 = v::zero();
      int64_t p = 0;
      for (; p + W <= k; p += W) d0 = v::fma(v::load(arow + p), v::load(brow + p), d0);
      T s = v::hsum(d0);
      for (; p < k; ++p) s += arow[p] * brow[p];
      T* cij = c + i * ldc + j;
      *cij = accumulate ? *cij + s : s;
    }
  }
}

template <class T>
void sgd_update_impl(T* p, const T* g, T* v, int64_t n, T lr, T mom, T wd) {
  using vt = V<T>;
  const auto vmom = vt::bcast(mom), vwd = vt::bcast(wd), vlr = vt::bcast(lr);
  int64_t i = 0;
  for (; i + vt::W <= n; i += vt::W) {
    auto pv = vt::load(p + i);
    auto vel = vt::fma(vmom, vt::load(v + i), vt::fma(vwd, pv, vt::load(g + i)));
    vt::store(v + i, vel);
    vt::store(p + i, vt::fnma(vlr, vel, pv));
  }
  for (; i < n; ++i) {
    v[i] = mom * v[i] + g[i] + wd * p[i];
    p[i] -= lr * v[i];
  }
}

template <class T>
void adam_update_impl(T* p, const T* g, T* m, T* v, int64_t n, T lr, T b1, T b2,
                      T eps, T wd, bool dec, T bc1, T bc2) {
  using vt = V<T>;
  const auto vb1 = vt::bcast(b1), vb2 = vt::bcast(b2);
  const auto v1mb1 = vt::bcast(T(1) - b1), v1mb2 = vt::bcast(T(1) - b2);
  const auto vwd = vt::bcast(wd), vlr = vt::bcast(lr), veps = vt::bcast(eps);
  const auto vbc1 = vt::bcast(bc1), vbc2 = vt::bcast(bc2);
  int64_t i = 0;
  for (; i + vt::W <= n; i += vt::W) {
    auto pv = vt::load(p + i);
    auto grad = vt::load(g + i);
    if (!dec) grad = vt::fma(vwd, pv, grad);
    auto mv = vt::fma(vb1, vt::load(m + i), vt::mul(v1mb1, grad));
    auto vv = vt::fma(vb2, vt::load(v + i), vt::mul(v1mb2, vt::mul(grad, grad)));
    vt::store(m + i, mv);
    vt::store(v + i, vv);
    auto mhat = vt::div(mv, vbc1);
    auto vhat = vt::div(vv, vbc2);
    auto step = vt::div(vt::mul(vlr, mhat), vt::add(vt::sqrt(vhat), veps));
    if (dec) step = vt::fma(vt::mul(vlr, vwd), pv, step);
    vt::store(p + i, vt::sub(pv, step));
  }
  for (; i < n; ++i) {
    T grad = g[i];
    if (!dec) grad += wd * p[i];
    m[i] = b1 * m[i] + (T(1) - b1) * grad;
    v[i] = b2 * v[i] + (T(1) - b2) * grad * grad;
    T step = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    if (dec) step += lr * wd * p[i];
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
    gemm_axb<T, false>(m, n, k, a, lda, b, ldb, c, ldc, acc);                  \
  }                                                                            \
  void gemm_nt(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    gemm_nt_impl(m, n, k, a, lda, b, ldb, c, ldc, acc);                        \
  }                                                                            \
  void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    gemm_axb<T, true>(m, n, k, a, lda, b, ldb, c, ldc, acc);                   \
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

}  // namespace dfa::kernels::avx2

#endif  // DFA_HAVE_AVX2_LANE
