#pragma once

// Per-lane kernel entry points. Not part of the public API; only the
// dispatcher in kernels.cpp includes this.

#include <cstdint>

#if defined(__x86_64__) || defined(_M_X64)
#define DFA_HAVE_AVX2_LANE 1
#else
#define DFA_HAVE_AVX2_LANE 0
#endif

namespace dfa::kernels {

#define DFA_KERNEL_DECLS(T)                                                    \
  void add(const T* a, const T* b, T* out, int64_t n);                         \
  void sub(const T* a, const T* b, T* out, int64_t n);                         \
  void mul(const T* a, const T* b, T* out, int64_t n);                         \
  void scale(T alpha, const T* x, T* out, int64_t n);                          \
  void axpy(T alpha, const T* x, T* y, int64_t n);                             \
  void clamp_min(const T* x, T floor_value, T* out, int64_t n);                \
  void clamp_min_mask_acc(const T* x, T floor_value, const T* g, T* dx,        \
                          int64_t n);                                          \
  void affine(T a, const T* x, T b, T* out, int64_t n);                        \
  void acc_axbyc(T a, const T* x, T b, const T* y, T c, T* out, int64_t n);    \
  T sum(const T* x, int64_t n);                                                \
  T sumsq(const T* x, int64_t n);                                              \
  T dot(const T* a, const T* b, int64_t n);                                    \
  void gemm_nn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);   \
  void gemm_nt(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);   \
  void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);   \
  void sgd_update(T* p, const T* g, T* v, int64_t n, T lr, T momentum, T wd);  \
  void adam_update(T* p, const T* g, T* m, T* v, int64_t n, T lr, T beta1,     \
                   T beta2, T eps, T wd, bool decoupled_wd, T bias1, T bias2);

namespace scalar {
DFA_KERNEL_DECLS(float)
DFA_KERNEL_DECLS(double)
}  // namespace scalar

#if DFA_HAVE_AVX2_LANE
namespace avx2 {
DFA_KERNEL_DECLS(float)
DFA_KERNEL_DECLS(double)
}  // namespace avx2
#endif

#undef DFA_KERNEL_DECLS

}  // namespace dfa::kernels
