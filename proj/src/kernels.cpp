#include "dfa/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"

namespace dfa::kernels {
namespace {

bool detect_avx2() {
#if DFA_HAVE_AVX2_LANE
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Lane initial_lane() {
  if (const char* env = std::getenv("DFA_LANE")) {
    std::string_view v(env);
    if (v == "scalar") return Lane::scalar;
    if (v == "avx2" && detect_avx2()) return Lane::avx2;
  }
  return detect_avx2() ? Lane::avx2 : Lane::scalar;
}

Lane g_lane = initial_lane();

}  // namespace

bool cpu_supports_avx2() { return detect_avx2(); }

Lane active_lane() { return g_lane; }

Lane set_lane(Lane lane) {
  if (lane == Lane::avx2 && !detect_avx2()) lane = Lane::scalar;
  g_lane = lane;
  return g_lane;
}

const char* lane_name(Lane lane) {
  return lane == Lane::avx2 ? "avx2" : "scalar";
}

#if DFA_HAVE_AVX2_LANE
#define DFA_DISPATCH(fn, ...)                                   \
  if (g_lane == Lane::avx2) return avx2::fn(__VA_ARGS__);       \
  return scalar::fn(__VA_ARGS__)
#else
#define DFA_DISPATCH(fn, ...) return scalar::fn(__VA_ARGS__)
#endif

#define DFA_DEFINE_DISPATCH(T)                                                 \
  void add(const T* a, const T* b, T* out, int64_t n) {                        \
    DFA_DISPATCH(add, a, b, out, n);                                           \
  }                                                                            \
  void sub(const T* a, const T* b, T* out, int64_t n) {                        \
    DFA_DISPATCH(sub, a, b, out, n);                                           \
  }                                                                            \
  void mul(const T* a, const T* b, T* out, int64_t n) {                        \
    DFA_DISPATCH(mul, a, b, out, n);                                           \
  }                                                                            \
  void scale(T alpha, const T* x, T* out, int64_t n) {                         \
    DFA_DISPATCH(scale, alpha, x, out, n);                                     \
  }                                                                            \
  void axpy(T alpha, const T* x, T* y, int64_t n) {                            \
    DFA_DISPATCH(axpy, alpha, x, y, n);                                        \
  }                                                                            \
  void clamp_min(const T* x, T f, T* out, int64_t n) {                         \
    DFA_DISPATCH(clamp_min, x, f, out, n);                                     \
  }                                                                            \
  void clamp_min_mask_acc(const T* x, T f, const T* g, T* dx, int64_t n) {     \
    DFA_DISPATCH(clamp_min_mask_acc, x, f, g, dx, n);                          \
  }                                                                            \
  void affine(T a, const T* x, T b, T* out, int64_t n) {                       \
    DFA_DISPATCH(affine, a, x, b, out, n);                                     \
  }                                                                            \
  void acc_axbyc(T a, const T* x, T b, const T* y, T c, T* out, int64_t n) {   \
    DFA_DISPATCH(acc_axbyc, a, x, b, y, c, out, n);                            \
  }                                                                            \
  T sum(const T* x, int64_t n) { DFA_DISPATCH(sum, x, n); }                    \
  T sumsq(const T* x, int64_t n) { DFA_DISPATCH(sumsq, x, n); }                \
  T dot(const T* a, const T* b, int64_t n) { DFA_DISPATCH(dot, a, b, n); }     \
  bool all_finite(const T* x, int64_t n) {                                     \
    for (int64_t i = 0; i < n; ++i)                                            \
      if (!std::isfinite(x[i])) return false;                                  \
    return true;                                                               \
  }                                                                            \
  void gemm_nn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    DFA_DISPATCH(gemm_nn, m, n, k, a, lda, b, ldb, c, ldc, acc);               \
  }                                                                            \
  void gemm_nt(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    DFA_DISPATCH(gemm_nt, m, n, k, a, lda, b, ldb, c, ldc, acc);               \
  }                                                                            \
  void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,       \
               const T* b, int64_t ldb, T* c, int64_t ldc, bool acc) {         \
    DFA_DISPATCH(gemm_tn, m, n, k, a, lda, b, ldb, c, ldc, acc);               \
  }                                                                            \
  void sgd_update(T* p, const T* g, T* v, int64_t n, T lr, T mom, T wd) {      \
    DFA_DISPATCH(sgd_update, p, g, v, n, lr, mom, wd);                         \
  }                                                                            \
  void adam_update(T* p, const T* g, T* m, T* v, int64_t n, T lr, T b1, T b2,  \
                   T eps, T wd, bool dec, T bc1, T bc2) {                      \
    DFA_DISPATCH(adam_update, p, g, m, v, n, lr, b1, b2, eps, wd, dec, bc1,    \
                 bc2);                                                         \
  }

DFA_DEFINE_DISPATCH(float)
DFA_DEFINE_DISPATCH(double)

#undef DFA_DEFINE_DISPATCH
#undef DFA_DISPATCH

}  // namespace dfa::kernels
