// Scalar vs AVX2 lane equivalence. Elementwise kernels must agree bit-for-bit
// (identical operations, no reassociation); GEMM, reductions and the fused
// optimizer updates may differ by summation order / FMA rounding and are
// compared with tolerances.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "dfa/kernels.hpp"

using namespace dfa;
namespace kn = dfa::kernels;

namespace {

template <class T>
std::vector<T> rand_vec(std::mt19937_64& rng, size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

const std::vector<int64_t> kSizes = {1, 2, 3, 7, 8, 9, 15, 16, 31, 32, 33, 64, 100, 257, 1024};

template <class T>
double tol() {
  return std::is_same_v<T, float> ? 2e-4 : 1e-11;
}

template <class T>
void expect_close(const std::vector<T>& a, const std::vector<T>& b, double t) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(double(a[i]) - double(b[i]));
    const double denom = std::abs(double(a[i])) + std::abs(double(b[i])) + 1.0;
    CHECK(diff <= t * denom);
  }
}

struct LaneGuard {
  kn::Lane saved;
  explicit LaneGuard(kn::Lane want) : saved(kn::active_lane()) { kn::set_lane(want); }
  ~LaneGuard() { kn::set_lane(saved); }
};

}  // namespace

TEST_CASE("lane selection") {
  const kn::Lane initial = kn::active_lane();
  if (kn::cpu_supports_avx2()) {
    CHECK(kn::set_lane(kn::Lane::avx2) == kn::Lane::avx2);
  } else {
    CHECK(kn::set_lane(kn::Lane::avx2) == kn::Lane::scalar);
  }
  CHECK(kn::set_lane(kn::Lane::scalar) == kn::Lane::scalar);
  kn::set_lane(initial);
}

TEST_CASE_TEMPLATE("elementwise kernels agree bitwise across lanes", T, float, double) {
  if (!kn::cpu_supports_avx2()) return;
  std::mt19937_64 rng(7);
  for (int64_t n : kSizes) {
    const size_t un = static_cast<size_t>(n);
    auto a = rand_vec<T>(rng, un, -2.0, 2.0);
    auto b = rand_vec<T>(rng, un, -2.0, 2.0);
    std::vector<T> r_s(un), r_v(un);

    auto both = [&](auto&& fn) {
      {
        LaneGuard g(kn::Lane::scalar);
        fn(r_s);
      }
      {
        LaneGuard g(kn::Lane::avx2);
        fn(r_v);
      }
      for (size_t i = 0; i < un; ++i) CHECK(r_s[i] == r_v[i]);
    };

    both([&](std::vector<T>& out) { kn::add(a.data(), b.data(), out.data(), n); });
    both([&](std::vector<T>& out) { kn::sub(a.data(), b.data(), out.data(), n); });
    both([&](std::vector<T>& out) { kn::mul(a.data(), b.data(), out.data(), n); });
    both([&](std::vector<T>& out) { kn::scale(T(0.37), a.data(), out.data(), n); });
    both([&](std::vector<T>& out) { kn::clamp_min(a.data(), T(-0.5), out.data(), n); });
  }
}

TEST_CASE_TEMPLATE("clamp mask accumulate agrees across lanes", T, float, double) {
  if (!kn::cpu_supports_avx2()) return;
  std::mt19937_64 rng(11);
  for (int64_t n : kSizes) {
    const size_t un = static_cast<size_t>(n);
    auto x = rand_vec<T>(rng, un, -2.0, 2.0);
    auto g = rand_vec<T>(rng, un);
    auto base = rand_vec<T>(rng, un);
    std::vector<T> s = base, v = base;
    {
      LaneGuard lg(kn::Lane::scalar);
      kn::clamp_min_mask_acc(x.data(), T(-1), g.data(), s.data(), n);
    }
    {
      LaneGuard lg(kn::Lane::avx2);
      kn::clamp_min_mask_acc(x.data(), T(-1), g.data(), v.data(), n);
    }
    for (size_t i = 0; i < un; ++i) CHECK(s[i] == v[i]);
  }
}

TEST_CASE_TEMPLATE("reductions agree across lanes within tolerance", T, float, double) {
  if (!kn::cpu_supports_avx2()) return;
  std::mt19937_64 rng(13);
  for (int64_t n : kSizes) {
    const size_t un = static_cast<size_t>(n);
    auto a = rand_vec<T>(rng, un);
    auto b = rand_vec<T>(rng, un);
    T s_sum, v_sum, s_sq, v_sq, s_dot, v_dot;
    {
      LaneGuard g(kn::Lane::scalar);
      s_sum = kn::sum(a.data(), n);
      s_sq = kn::sumsq(a.data(), n);
      s_dot = kn::dot(a.data(), b.data(), n);
    }
    {
      LaneGuard g(kn::Lane::avx2);
      v_sum = kn::sum(a.data(), n);
      v_sq = kn::sumsq(a.data(), n);
      v_dot = kn::dot(a.data(), b.data(), n);
    }
    const double t = tol<T>() * std::sqrt(double(n));
    CHECK(std::abs(double(s_sum - v_sum)) <= t * (std::abs(double(s_sum)) + 1));
    CHECK(std::abs(double(s_sq - v_sq)) <= t * (std::abs(double(s_sq)) + 1));
    CHECK(std::abs(double(s_dot - v_dot)) <= t * (std::abs(double(s_dot)) + 1));
  }
}

TEST_CASE_TEMPLATE("gemm variants agree across lanes", T, float, double) {
  if (!kn::cpu_supports_avx2()) return;
  std::mt19937_64 rng(17);
  std::vector<std::array<int64_t, 3>> dims = {
      {1, 1, 1}, {2, 3, 4}, {5, 7, 3}, {8, 8, 8}, {9, 17, 5}, {16, 33, 12}, {33, 64, 20}};
  for (auto [m, n, k] : dims) {
    auto a_nn = rand_vec<T>(rng, size_t(m * k));
    auto b_nn = rand_vec<T>(rng, size_t(k * n));
    auto a_nt = rand_vec<T>(rng, size_t(m * k));
    auto b_nt = rand_vec<T>(rng, size_t(n * k));
    auto a_tn = rand_vec<T>(rng, size_t(k * m));
    auto b_tn = rand_vec<T>(rng, size_t(k * n));
    auto base = rand_vec<T>(rng, size_t(m * n));
    const double t = tol<T>() * std::sqrt(double(k) + 1);

    for (bool acc : {false, true}) {
      std::vector<T> cs = base, cv = base;
      {
        LaneGuard g(kn::Lane::scalar);
        kn::gemm_nn(m, n, k, a_nn.data(), k, b_nn.data(), n, cs.data(), n, acc);
      }
      {
        LaneGuard g(kn::Lane::avx2);
        kn::gemm_nn(m, n, k, a_nn.data(), k, b_nn.data(), n, cv.data(), n, acc);
      }
      expect_close(cs, cv, t);

      cs = base, cv = base;
      {
        LaneGuard g(kn::Lane::scalar);
        kn::gemm_nt(m, n, k, a_nt.data(), k, b_nt.data(), k, cs.data(), n, acc);
      }
      {
        LaneGuard g(kn::Lane::avx2);
        kn::gemm_nt(m, n, k, a_nt.data(), k, b_nt.data(), k, cv.data(), n, acc);
      }
      expect_close(cs, cv, t);

      cs = base, cv = base;
      {
        LaneGuard g(kn::Lane::scalar);
        kn::gemm_tn(m, n, k, a_tn.data(), m, b_tn.data(), n, cs.data(), n, acc);
      }
      {
        LaneGuard g(kn::Lane::avx2);
        kn::gemm_tn(m, n, k, a_tn.data(), m, b_tn.data(), n, cv.data(), n, acc);
      }
      expect_close(cs, cv, t);
    }
  }
}

TEST_CASE("gemm_nn against a hand-computed product") {
  // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
  std::vector<double> a = {1, 2, 3, 4}, b = {5, 6, 7, 8}, c(4);
  kn::gemm_nn(2, 2, 2, a.data(), 2, b.data(), 2, c.data(), 2, false);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE_TEMPLATE("fused optimizer kernels agree across lanes", T, float, double) {
  if (!kn::cpu_supports_avx2()) return;
  std::mt19937_64 rng(23);
  for (int64_t n : kSizes) {
    const size_t un = static_cast<size_t>(n);
    auto p0 = rand_vec<T>(rng, un);
    auto g = rand_vec<T>(rng, un);
    auto v0 = rand_vec<T>(rng, un, -0.1, 0.1);
    const double t = tol<T>();

    std::vector<T> ps = p0, vs = v0, pv = p0, vv = v0;
    {
      LaneGuard lg(kn::Lane::scalar);
      kn::sgd_update(ps.data(), g.data(), vs.data(), n, T(0.1), T(0.9), T(5e-4));
    }
    {
      LaneGuard lg(kn::Lane::avx2);
      kn::sgd_update(pv.data(), g.data(), vv.data(), n, T(0.1), T(0.9), T(5e-4));
    }
    expect_close(ps, pv, t);
    expect_close(vs, vv, t);

    auto m0 = rand_vec<T>(rng, un, -0.1, 0.1);
    auto var0 = rand_vec<T>(rng, un, 0.0, 0.1);
    std::vector<T> pas = p0, mas = m0, vas = var0, pav = p0, mav = m0, vav = var0;
    {
      LaneGuard lg(kn::Lane::scalar);
      kn::adam_update(pas.data(), g.data(), mas.data(), vas.data(), n, T(1e-3), T(0.5),
                      T(0.999), T(1e-8), T(1e-3), false, T(0.5), T(0.001));
    }
    {
      LaneGuard lg(kn::Lane::avx2);
      kn::adam_update(pav.data(), g.data(), mav.data(), vav.data(), n, T(1e-3), T(0.5),
                      T(0.999), T(1e-8), T(1e-3), false, T(0.5), T(0.001));
    }
    expect_close(pas, pav, t);
  }
}

TEST_CASE_TEMPLATE("affine and acc_axbyc agree across lanes", T, float, double) {
  if (!kn::cpu_supports_avx2()) return;
  std::mt19937_64 rng(29);
  for (int64_t n : kSizes) {
    const size_t un = static_cast<size_t>(n);
    auto x = rand_vec<T>(rng, un);
    auto y = rand_vec<T>(rng, un);
    auto base = rand_vec<T>(rng, un);
    std::vector<T> s(un), v(un);
    {
      LaneGuard g(kn::Lane::scalar);
      kn::affine(T(1.3), x.data(), T(-0.2), s.data(), n);
    }
    {
      LaneGuard g(kn::Lane::avx2);
      kn::affine(T(1.3), x.data(), T(-0.2), v.data(), n);
    }
    expect_close(s, v, tol<T>());

    std::vector<T> as = base, av = base;
    {
      LaneGuard g(kn::Lane::scalar);
      kn::acc_axbyc(T(0.5), x.data(), T(-1.1), y.data(), T(0.01), as.data(), n);
    }
    {
      LaneGuard g(kn::Lane::avx2);
      kn::acc_axbyc(T(0.5), x.data(), T(-1.1), y.data(), T(0.01), av.data(), n);
    }
    expect_close(as, av, tol<T>());
  }
}
