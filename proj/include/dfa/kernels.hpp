#pragma once

// Data-parallel inner loops behind the tensor ops. Every kernel has a scalar
// reference implementation and, on x86-64, an AVX2+FMA variant; the lane is
// picked once at startup from CPUID (override with set_lane() or the DFA_LANE
// environment variable). The two lanes are equivalence-tested against each
// other: elementwise kernels must match bit-for-bit, reductions and GEMM
// within a summation-order tolerance.
//
// GEMM operands are row-major with explicit leading dimensions.

#include <cstdint>

namespace dfa::kernels {

enum class Lane { scalar, avx2 };

Lane active_lane();
// Returns the lane actually selected (a request for avx2 on a CPU without it
// falls back to scalar).
Lane set_lane(Lane lane);
bool cpu_supports_avx2();
const char* lane_name(Lane lane);

// Overloads for float and double.
#define DFA_KERNEL_API(T)                                                      \
  /* elementwise */                                                            \
  void add(const T* a, const T* b, T* out, int64_t n);                         \
  void sub(const T* a, const T* b, T* out, int64_t n);                         \
  void mul(const T* a, const T* b, T* out, int64_t n);                         \
  void scale(T alpha, const T* x, T* out, int64_t n);                          \
  /* y += alpha * x */                                                         \
  void axpy(T alpha, const T* x, T* y, int64_t n);                             \
  void clamp_min(const T* x, T floor_value, T* out, int64_t n);                \
  /* dx += g wherever x > floor_value (the clamp/relu subgradient) */          \
  void clamp_min_mask_acc(const T* x, T floor_value, const T* g, T* dx,        \
                          int64_t n);                                          \
  /* out = a*x + b (batchnorm normalization) */                                \
  void affine(T a, const T* x, T b, T* out, int64_t n);                        \
  /* out += a*x + b*y + c (batchnorm backward) */                              \
  void acc_axbyc(T a, const T* x, T b, const T* y, T c, T* out, int64_t n);    \
  /* reductions */                                                             \
  T sum(const T* x, int64_t n);                                                \
  T sumsq(const T* x, int64_t n);                                              \
  T dot(const T* a, const T* b, int64_t n);                                    \
  bool all_finite(const T* x, int64_t n);                                      \
  /* C = A(m,k)*B(k,n) [+C if accumulate] */                                   \
  void gemm_nn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);   \
  /* C = A(m,k)*B(n,k)^T */                                                    \
  void gemm_nt(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);   \
  /* C = A(k,m)^T*B(k,n) */                                                    \
  void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);   \
  /* v = momentum*v + g + wd*p;  p -= lr*v */                                  \
  void sgd_update(T* p, const T* g, T* v, int64_t n, T lr, T momentum, T wd);  \
  /* Bias-corrected Adam step; bias1/bias2 are the 1-beta^t corrections. */    \
  void adam_update(T* p, const T* g, T* m, T* v, int64_t n, T lr, T beta1,     \
                   T beta2, T eps, T wd, bool decoupled_wd, T bias1, T bias2);

DFA_KERNEL_API(float)
DFA_KERNEL_API(double)

#undef DFA_KERNEL_API

}  // namespace dfa::kernels
