#include "dfa/ops.hpp"

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "dfa/kernels.hpp"

namespace dfa::ops {
namespace {

namespace kn = dfa::kernels;

bool want_record(Tape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

Tensor make_out(Shape shape, DType dt) { return Tensor::zeros(std::move(shape), dt); }

void check_finite(const char* op, const Tensor& t) {
  bool ok = dispatch_dtype(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return kn::all_finite(t.data<T>().data(), t.numel());
  });
  if (!ok)
    throw NumericError(std::string(op) + ": produced non-finite values (numeric overflow)");
}

void record(Tape* tape, Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  out.impl()->tape = tape;
  out.impl()->node = tape->emit(out.impl(), std::move(fn));
}

template <class T>
T* acc_grad(const std::shared_ptr<TensorImpl>& t) {
  t->ensure_grad();
  return t->grad.data<T>();
}

template <class T>
const T* out_grad(const std::shared_ptr<TensorImpl>& t) {
  return t->grad.data<T>();
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    throw ShapeError(std::string(op) + ": mixed dtypes");
}

// Thread-local grow-only scratch for the conv kernels.
template <class T>
std::vector<T>& scratch(int which) {
  thread_local std::vector<T> bufs[4];
  auto& b = bufs[which];
  return b;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------
template <class T>
Tensor matmul_t(Tape* tape, const Tensor& a, const Tensor& b) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_out({m, n}, a.dtype());
  kn::gemm_nn(m, n, k, a.data<T>().data(), k, b.data<T>().data(), n,
              out.data<T>().data(), n, false);
  check_finite("matmul", out);
  if (want_record(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(tape, out, [ai, bi, oi, m, n, k] {
      const T* g = out_grad<T>(oi);
      if (ai->requires_grad)
        kn::gemm_nt(m, k, n, g, n, bi->data.data<T>(), n, acc_grad<T>(ai), k, true);
      if (bi->requires_grad)
        kn::gemm_tn(k, n, m, ai->data.data<T>(), k, g, n, acc_grad<T>(bi), n, true);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d (im2col + GEMM)
// ---------------------------------------------------------------------------
struct ConvDims {
  int64_t n, cin, h, w, cout, kh, kw, oh, ow;
  int64_t stride, pad_top, pad_left;
  int64_t patch() const { return cin * kh * kw; }
  int64_t cols() const { return n * oh * ow; }
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, const Conv2dAttrs& attrs) {
  ConvDims d{};
  d.n = xs[0];
  d.cin = xs[1];
  d.h = xs[2];
  d.w = xs[3];
  d.cout = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  d.stride = attrs.stride;
  if (attrs.padding == Padding::same) {
    d.oh = (d.h + d.stride - 1) / d.stride;
    d.ow = (d.w + d.stride - 1) / d.stride;
    const int64_t ph = std::max<int64_t>((d.oh - 1) * d.stride + d.kh - d.h, 0);
    const int64_t pw = std::max<int64_t>((d.ow - 1) * d.stride + d.kw - d.w, 0);
    d.pad_top = ph / 2;
    d.pad_left = pw / 2;
  } else {
    if (d.h < d.kh || d.w < d.kw)
      shape_fail("conv2d", "kernel larger than input under valid padding");
    d.oh = (d.h - d.kh) / d.stride + 1;
    d.ow = (d.w - d.kw) / d.stride + 1;
  }
  return d;
}

template <class T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const int64_t hw = d.h * d.w, ohw = d.oh * d.ow, cols = d.cols();
  for (int64_t c = 0; c < d.cin; ++c) {
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        T* row = col + ((c * d.kh + ky) * d.kw + kx) * cols;
        for (int64_t img = 0; img < d.n; ++img) {
          const T* xc = x + (img * d.cin + c) * hw;
          T* dst = row + img * ohw;
          for (int64_t oy = 0; oy < d.oh; ++oy) {
            const int64_t iy = oy * d.stride - d.pad_top + ky;
            if (iy < 0 || iy >= d.h) {
              std::memset(dst + oy * d.ow, 0, sizeof(T) * d.ow);
              continue;
            }
            const T* xrow = xc + iy * d.w;
            T* drow = dst + oy * d.ow;
            for (int64_t ox = 0; ox < d.ow; ++ox) {
              const int64_t ix = ox * d.stride - d.pad_left + kx;
              drow[ox] = (ix >= 0 && ix < d.w) ? xrow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_acc(const T* col, const ConvDims& d, T* dx) {
  const int64_t hw = d.h * d.w, ohw = d.oh * d.ow, cols = d.cols();
  for (int64_t c = 0; c < d.cin; ++c) {
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const T* row = col + ((c * d.kh + ky) * d.kw + kx) * cols;
        for (int64_t img = 0; img < d.n; ++img) {
          T* xc = dx + (img * d.cin + c) * hw;
          const T* src = row + img * ohw;
          for (int64_t oy = 0; oy < d.oh; ++oy) {
            const int64_t iy = oy * d.stride - d.pad_top + ky;
            if (iy < 0 || iy >= d.h) continue;
            T* xrow = xc + iy * d.w;
            const T* srow = src + oy * d.ow;
            for (int64_t ox = 0; ox < d.ow; ++ox) {
              const int64_t ix = ox * d.stride - d.pad_left + kx;
              if (ix >= 0 && ix < d.w) xrow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

template <class T>
Tensor conv2d_t(Tape* tape, const Tensor& x, const Tensor& w, const Conv2dAttrs& attrs) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), attrs);
  const int64_t K = d.patch(), cols = d.cols(), ohw = d.oh * d.ow;

  auto& col = scratch<T>(0);
  col.resize(static_cast<size_t>(K * cols));
  im2col(x.data<T>().data(), d, col.data());

  auto& out2 = scratch<T>(1);
  out2.resize(static_cast<size_t>(d.cout * cols));
  kn::gemm_nn(d.cout, cols, K, w.data<T>().data(), K, col.data(), cols, out2.data(),
              cols, false);

  Tensor out = make_out({d.n, d.cout, d.oh, d.ow}, x.dtype());
  T* y = out.data<T>().data();
  for (int64_t co = 0; co < d.cout; ++co)
    for (int64_t img = 0; img < d.n; ++img)
      std::memcpy(y + (img * d.cout + co) * ohw, out2.data() + co * cols + img * ohw,
                  sizeof(T) * ohw);
  check_finite("conv2d", out);

  if (want_record(tape, {&x, &w})) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    record(tape, out, [xi, wi, oi, d, K, cols, ohw] {
      const T* g = out_grad<T>(oi);
      auto& g2 = scratch<T>(1);
      g2.resize(static_cast<size_t>(d.cout * cols));
      for (int64_t co = 0; co < d.cout; ++co)
        for (int64_t img = 0; img < d.n; ++img)
          std::memcpy(g2.data() + co * cols + img * ohw, g + (img * d.cout + co) * ohw,
                      sizeof(T) * ohw);
      if (wi->requires_grad) {
        auto& col = scratch<T>(0);
        col.resize(static_cast<size_t>(K * cols));
        im2col(xi->data.data<T>(), d, col.data());
        kn::gemm_nt(d.cout, K, cols, g2.data(), cols, col.data(), cols,
                    acc_grad<T>(wi), K, true);
      }
      if (xi->requires_grad) {
        auto& dcol = scratch<T>(2);
        dcol.resize(static_cast<size_t>(K * cols));
        kn::gemm_tn(K, cols, d.cout, wi->data.data<T>(), K, g2.data(), cols,
                    dcol.data(), cols, false);
        col2im_acc(dcol.data(), d, acc_grad<T>(xi));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------
template <class T>
Tensor batchnorm2d_t(Tape* tape, const Tensor& x, const Tensor& gamma,
                     const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                     bool training, bool update_stats, double momentum, double eps) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int64_t count = N * HW;
  const T* xd = x.data<T>().data();

  std::vector<T> mu(static_cast<size_t>(C)), inv(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    double m, v;
    if (training) {
      double s = 0, ss = 0;
      for (int64_t img = 0; img < N; ++img) {
        const T* plane = xd + (img * C + c) * HW;
        s += static_cast<double>(kn::sum(plane, HW));
        ss += static_cast<double>(kn::sumsq(plane, HW));
      }
      m = s / static_cast<double>(count);
      v = std::max(ss / static_cast<double>(count) - m * m, 0.0);
      if (update_stats) {
        const double unbiased = count > 1 ? v * count / (count - 1) : v;
        running_mean.set_value_at(c, (1 - momentum) * running_mean.value_at(c) + momentum * m);
        running_var.set_value_at(c, (1 - momentum) * running_var.value_at(c) + momentum * unbiased);
      }
    } else {
      m = running_mean.value_at(c);
      v = running_var.value_at(c);
    }
    mu[static_cast<size_t>(c)] = static_cast<T>(m);
    inv[static_cast<size_t>(c)] = static_cast<T>(1.0 / std::sqrt(v + eps));
  }

  Tensor out = make_out(x.shape(), x.dtype());
  T* y = out.data<T>().data();
  for (int64_t c = 0; c < C; ++c) {
    const T a = static_cast<T>(gamma.value_at(c)) * inv[static_cast<size_t>(c)];
    const T b = static_cast<T>(beta.value_at(c)) - mu[static_cast<size_t>(c)] * a;
    for (int64_t img = 0; img < N; ++img)
      kn::affine(a, xd + (img * C + c) * HW, b, y + (img * C + c) * HW, HW);
  }
  check_finite("batchnorm2d", out);

  if (want_record(tape, {&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    // mu/inv are copied into the closure: later forwards may change the
    // running stats but must not affect this node's backward.
    record(tape, out, [xi, gi, bi, oi, mu, inv, training, N, C, HW, count] {
      const T* g = out_grad<T>(oi);
      const T* xd = xi->data.data<T>();
      T* dx = xi->requires_grad ? acc_grad<T>(xi) : nullptr;
      T* dgamma = gi->requires_grad ? acc_grad<T>(gi) : nullptr;
      T* dbeta = bi->requires_grad ? acc_grad<T>(bi) : nullptr;
      for (int64_t c = 0; c < C; ++c) {
        const double m = mu[static_cast<size_t>(c)];
        const double iv = inv[static_cast<size_t>(c)];
        double sum_dy = 0, dot_dy_x = 0;
        for (int64_t img = 0; img < N; ++img) {
          const T* gp = g + (img * C + c) * HW;
          const T* xp = xd + (img * C + c) * HW;
          sum_dy += static_cast<double>(kn::sum(gp, HW));
          dot_dy_x += static_cast<double>(kn::dot(gp, xp, HW));
        }
        const double sum_dy_xhat = iv * (dot_dy_x - m * sum_dy);
        if (dgamma) dgamma[c] += static_cast<T>(sum_dy_xhat);
        if (dbeta) dbeta[c] += static_cast<T>(sum_dy);
        if (dx) {
          const double gm = static_cast<double>(gi->data.data<T>()[c]);
          double A, B, Cc;
          if (training) {
            A = gm * iv;
            B = -gm * iv * iv * sum_dy_xhat / count;
            Cc = -gm * iv * sum_dy / count + gm * iv * iv * m * sum_dy_xhat / count;
          } else {
            A = gm * iv;
            B = 0;
            Cc = 0;
          }
          for (int64_t img = 0; img < N; ++img) {
            const int64_t off = (img * C + c) * HW;
            kn::acc_axbyc(static_cast<T>(A), g + off, static_cast<T>(B), xd + off,
                          static_cast<T>(Cc), dx + off, HW);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// clamp_min / relu
// ---------------------------------------------------------------------------
template <class T>
Tensor clamp_min_t(Tape* tape, const Tensor& x, double threshold, const char* name) {
  Tensor out = make_out(x.shape(), x.dtype());
  kn::clamp_min(x.data<T>().data(), static_cast<T>(threshold), out.data<T>().data(),
                x.numel());
  check_finite(name, out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    const T th = static_cast<T>(threshold);
    record(tape, out, [xi, oi, th] {
      if (!xi->requires_grad) return;
      kn::clamp_min_mask_acc(xi->data.data<T>(), th, out_grad<T>(oi), acc_grad<T>(xi),
                             xi->numel());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise add/sub, scale, smul
// ---------------------------------------------------------------------------
template <class T>
Tensor add_t(Tape* tape, const Tensor& a, const Tensor& b) {
  Tensor out = make_out(a.shape(), a.dtype());
  kn::add(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), a.numel());
  check_finite("add", out);
  if (want_record(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(tape, out, [ai, bi, oi] {
      const T* g = out_grad<T>(oi);
      if (ai->requires_grad) kn::axpy(T(1), g, acc_grad<T>(ai), ai->numel());
      if (bi->requires_grad) kn::axpy(T(1), g, acc_grad<T>(bi), bi->numel());
    });
  }
  return out;
}

template <class T>
Tensor sub_t(Tape* tape, const Tensor& a, const Tensor& b) {
  Tensor out = make_out(a.shape(), a.dtype());
  kn::sub(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), a.numel());
  check_finite("sub", out);
  if (want_record(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(tape, out, [ai, bi, oi] {
      const T* g = out_grad<T>(oi);
      if (ai->requires_grad) kn::axpy(T(1), g, acc_grad<T>(ai), ai->numel());
      if (bi->requires_grad) kn::axpy(T(-1), g, acc_grad<T>(bi), bi->numel());
    });
  }
  return out;
}

template <class T>
Tensor mul_t(Tape* tape, const Tensor& a, const Tensor& b) {
  Tensor out = make_out(a.shape(), a.dtype());
  kn::mul(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), a.numel());
  check_finite("mul", out);
  if (want_record(tape, {&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(tape, out, [ai, bi, oi] {
      const T* g = out_grad<T>(oi);
      const int64_t n = ai->numel();
      if (ai->requires_grad) {
        T* da = acc_grad<T>(ai);
        const T* bd = bi->data.data<T>();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bd[i];
      }
      if (bi->requires_grad) {
        T* db = acc_grad<T>(bi);
        const T* ad = ai->data.data<T>();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * ad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor scale_t(Tape* tape, const Tensor& x, double factor) {
  Tensor out = make_out(x.shape(), x.dtype());
  kn::scale(static_cast<T>(factor), x.data<T>().data(), out.data<T>().data(), x.numel());
  check_finite("scale", out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    const T f = static_cast<T>(factor);
    record(tape, out, [xi, oi, f] {
      if (xi->requires_grad) kn::axpy(f, out_grad<T>(oi), acc_grad<T>(xi), xi->numel());
    });
  }
  return out;
}

template <class T>
Tensor smul_t(Tape* tape, const Tensor& x, const Tensor& s) {
  const T sv = static_cast<T>(s.value_at(0));
  Tensor out = make_out(x.shape(), x.dtype());
  kn::scale(sv, x.data<T>().data(), out.data<T>().data(), x.numel());
  check_finite("smul", out);
  if (want_record(tape, {&x, &s})) {
    auto xi = x.impl(), si = s.impl(), oi = out.impl();
    record(tape, out, [xi, si, oi, sv] {
      const T* g = out_grad<T>(oi);
      if (xi->requires_grad) kn::axpy(sv, g, acc_grad<T>(xi), xi->numel());
      if (si->requires_grad)
        acc_grad<T>(si)[0] += kn::dot(xi->data.data<T>(), g, xi->numel());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------
template <class T>
Tensor mean_t(Tape* tape, const Tensor& x) {
  const int64_t n = x.numel();
  Tensor out = Tensor::scalar_value(x.dtype(), 0);
  out.data<T>()[0] = kn::sum(x.data<T>().data(), n) / static_cast<T>(n);
  check_finite("mean", out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi, n] {
      if (!xi->requires_grad) return;
      const T g = out_grad<T>(oi)[0] / static_cast<T>(n);
      T* dx = acc_grad<T>(xi);
      for (int64_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor sum_squares_t(Tape* tape, const Tensor& x) {
  Tensor out = Tensor::scalar_value(x.dtype(), 0);
  out.data<T>()[0] = kn::sumsq(x.data<T>().data(), x.numel());
  check_finite("sum_squares", out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi] {
      if (!xi->requires_grad) return;
      const T g = out_grad<T>(oi)[0];
      kn::axpy(T(2) * g, xi->data.data<T>(), acc_grad<T>(xi), xi->numel());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / log_softmax (rowwise, max-subtracted)
// ---------------------------------------------------------------------------
void softmax_rows_of(const Shape& s, int64_t& rows, int64_t& cols) {
  if (s.size() == 1) {
    rows = 1;
    cols = s[0];
  } else if (s.size() == 2) {
    rows = s[0];
    cols = s[1];
  } else {
    shape_fail("softmax", "expects a 1-D or 2-D tensor, got " + shape_str(s));
  }
}

template <class T>
Tensor softmax_t(Tape* tape, const Tensor& x) {
  int64_t R, C;
  softmax_rows_of(x.shape(), R, C);
  Tensor out = make_out(x.shape(), x.dtype());
  const T* xd = x.data<T>().data();
  T* y = out.data<T>().data();
  for (int64_t r = 0; r < R; ++r) {
    const T* xr = xd + r * C;
    T* yr = y + r * C;
    T mx = xr[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, xr[j]);
    double z = 0;
    for (int64_t j = 0; j < C; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += static_cast<double>(yr[j]);
    }
    const T izv = static_cast<T>(1.0 / z);
    for (int64_t j = 0; j < C; ++j) yr[j] *= izv;
  }
  check_finite("softmax", out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi, R, C] {
      if (!xi->requires_grad) return;
      const T* g = out_grad<T>(oi);
      const T* y = oi->data.data<T>();
      T* dx = acc_grad<T>(xi);
      for (int64_t r = 0; r < R; ++r) {
        const T d = kn::dot(g + r * C, y + r * C, C);
        for (int64_t j = 0; j < C; ++j)
          dx[r * C + j] += y[r * C + j] * (g[r * C + j] - d);
      }
    });
  }
  return out;
}

template <class T>
Tensor log_softmax_t(Tape* tape, const Tensor& x) {
  int64_t R, C;
  softmax_rows_of(x.shape(), R, C);
  Tensor out = make_out(x.shape(), x.dtype());
  const T* xd = x.data<T>().data();
  T* y = out.data<T>().data();
  for (int64_t r = 0; r < R; ++r) {
    const T* xr = xd + r * C;
    T* yr = y + r * C;
    T mx = xr[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, xr[j]);
    double z = 0;
    for (int64_t j = 0; j < C; ++j) z += std::exp(static_cast<double>(xr[j] - mx));
    const T lz = static_cast<T>(std::log(z)) + mx;
    for (int64_t j = 0; j < C; ++j) yr[j] = xr[j] - lz;
  }
  check_finite("log_softmax", out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi, R, C] {
      if (!xi->requires_grad) return;
      const T* g = out_grad<T>(oi);
      const T* y = oi->data.data<T>();
      T* dx = acc_grad<T>(xi);
      for (int64_t r = 0; r < R; ++r) {
        const T s = kn::sum(g + r * C, C);
        for (int64_t j = 0; j < C; ++j)
          dx[r * C + j] += g[r * C + j] - std::exp(y[r * C + j]) * s;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// avgpool / reshape / add_bias / index
// ---------------------------------------------------------------------------
template <class T>
Tensor avgpool_t(Tape* tape, const Tensor& x) {
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out = make_out({N, C}, x.dtype());
  const T* xd = x.data<T>().data();
  T* y = out.data<T>().data();
  for (int64_t i = 0; i < N * C; ++i)
    y[i] = kn::sum(xd + i * HW, HW) / static_cast<T>(HW);
  check_finite("avgpool", out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi, N, C, HW] {
      if (!xi->requires_grad) return;
      const T* g = out_grad<T>(oi);
      T* dx = acc_grad<T>(xi);
      for (int64_t i = 0; i < N * C; ++i) {
        const T gi = g[i] / static_cast<T>(HW);
        T* p = dx + i * HW;
        for (int64_t j = 0; j < HW; ++j) p[j] += gi;
      }
    });
  }
  return out;
}

template <class T>
Tensor reshape_t(Tape* tape, const Tensor& x, Shape target) {
  Tensor out = make_out(std::move(target), x.dtype());
  std::memcpy(out.raw_bytes_mut().data(), x.raw_bytes().data(), x.raw_bytes().size());
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi] {
      if (!xi->requires_grad) return;
      kn::axpy(T(1), out_grad<T>(oi), acc_grad<T>(xi), xi->numel());
    });
  }
  return out;
}

template <class T>
Tensor add_bias_t(Tape* tape, const Tensor& x, const Tensor& b) {
  const int64_t R = x.dim(0), D = x.dim(1);
  Tensor out = make_out(x.shape(), x.dtype());
  const T* xd = x.data<T>().data();
  const T* bd = b.data<T>().data();
  T* y = out.data<T>().data();
  for (int64_t r = 0; r < R; ++r)
    kn::add(xd + r * D, bd, y + r * D, D);
  check_finite("add_bias", out);
  if (want_record(tape, {&x, &b})) {
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    record(tape, out, [xi, bi, oi, R, D] {
      const T* g = out_grad<T>(oi);
      if (xi->requires_grad) kn::axpy(T(1), g, acc_grad<T>(xi), R * D);
      if (bi->requires_grad) {
        T* db = acc_grad<T>(bi);
        for (int64_t r = 0; r < R; ++r) kn::axpy(T(1), g + r * D, db, D);
      }
    });
  }
  return out;
}

template <class T>
Tensor index_t(Tape* tape, const Tensor& x, int64_t i) {
  Tensor out = Tensor::scalar_value(x.dtype(), x.value_at(i));
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi, i] {
      if (xi->requires_grad) acc_grad<T>(xi)[i] += out_grad<T>(oi)[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// l2_normalize_rows / nll
// ---------------------------------------------------------------------------
template <class T>
Tensor l2_normalize_rows_t(Tape* tape, const Tensor& x) {
  const int64_t R = x.dim(0), D = x.dim(1);
  Tensor out = make_out(x.shape(), x.dtype());
  const T* xd = x.data<T>().data();
  T* y = out.data<T>().data();
  std::vector<T> norms(static_cast<size_t>(R));
  for (int64_t r = 0; r < R; ++r) {
    const double nsq = static_cast<double>(kn::sumsq(xd + r * D, D));
    if (nsq <= 0)
      throw NumericError("l2_normalize_rows: degenerate normalization (zero-norm row " +
                         std::to_string(r) + ")");
    const T nr = static_cast<T>(std::sqrt(nsq));
    norms[static_cast<size_t>(r)] = nr;
    kn::scale(T(1) / nr, xd + r * D, y + r * D, D);
  }
  check_finite("l2_normalize_rows", out);
  if (want_record(tape, {&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(tape, out, [xi, oi, norms, R, D] {
      if (!xi->requires_grad) return;
      const T* g = out_grad<T>(oi);
      const T* y = oi->data.data<T>();
      T* dx = acc_grad<T>(xi);
      for (int64_t r = 0; r < R; ++r) {
        const T inv = T(1) / norms[static_cast<size_t>(r)];
        const T d = kn::dot(g + r * D, y + r * D, D);
        for (int64_t j = 0; j < D; ++j)
          dx[r * D + j] += inv * (g[r * D + j] - y[r * D + j] * d);
      }
    });
  }
  return out;
}

template <class T>
Tensor nll_t(Tape* tape, const Tensor& log_probs, std::vector<int> labels) {
  const int64_t R = log_probs.dim(0), C = log_probs.dim(1);
  const T* lp = log_probs.data<T>().data();
  double total = 0;
  for (int64_t r = 0; r < R; ++r) total -= static_cast<double>(lp[r * C + labels[r]]);
  Tensor out = Tensor::scalar_value(log_probs.dtype(), total / static_cast<double>(R));
  check_finite("nll", out);
  if (want_record(tape, {&log_probs})) {
    auto xi = log_probs.impl(), oi = out.impl();
    record(tape, out, [xi, oi, labels = std::move(labels), R, C] {
      if (!xi->requires_grad) return;
      const T g = out_grad<T>(oi)[0] / static_cast<T>(R);
      T* dx = acc_grad<T>(xi);
      for (int64_t r = 0; r < R; ++r) dx[r * C + labels[r]] -= g;
    });
  }
  return out;
}

}  // namespace

// ===========================================================================
// public wrappers: validation + dtype dispatch
// ===========================================================================

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  check_same_dtype("matmul", a, b);
  return dispatch_dtype(a.dtype(), [&](auto tag) {
    return matmul_t<decltype(tag)>(tape, a, b);
  });
}

Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Conv2dAttrs& attrs) {
  if (x.ndim() != 4 || w.ndim() != 4)
    shape_fail("conv2d", "expects 4-D input and weight, got " + shape_str(x.shape()) +
                             " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    shape_fail("conv2d", "channel mismatch: input " + shape_str(x.shape()) +
                             " vs weight " + shape_str(w.shape()));
  if (attrs.stride < 1) shape_fail("conv2d", "stride must be positive");
  check_same_dtype("conv2d", x, w);
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return conv2d_t<decltype(tag)>(tape, x, w, attrs);
  });
}

Tensor batchnorm2d(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool training,
                   bool update_stats, double momentum, double eps) {
  if (x.ndim() != 4)
    shape_fail("batchnorm2d", "expects 4-D input, got " + shape_str(x.shape()));
  const int64_t C = x.dim(1);
  for (const Tensor* t :
       {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
        static_cast<const Tensor*>(&running_var)})
    if (t->numel() != C)
      shape_fail("batchnorm2d", "per-channel parameter size " + shape_str(t->shape()) +
                                    " does not match input " + shape_str(x.shape()));
  check_same_dtype("batchnorm2d", x, gamma);
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return batchnorm2d_t<decltype(tag)>(tape, x, gamma, beta, running_mean, running_var,
                                        training, update_stats, momentum, eps);
  });
}

Tensor relu(Tape* tape, const Tensor& x) {
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return clamp_min_t<decltype(tag)>(tape, x, 0.0, "relu");
  });
}

Tensor clamp_min(Tape* tape, const Tensor& x, double threshold) {
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return clamp_min_t<decltype(tag)>(tape, x, threshold, "clamp_min");
  });
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("add", "shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  check_same_dtype("add", a, b);
  return dispatch_dtype(a.dtype(), [&](auto tag) { return add_t<decltype(tag)>(tape, a, b); });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("sub", "shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  check_same_dtype("sub", a, b);
  return dispatch_dtype(a.dtype(), [&](auto tag) { return sub_t<decltype(tag)>(tape, a, b); });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("mul", "shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  check_same_dtype("mul", a, b);
  return dispatch_dtype(a.dtype(), [&](auto tag) { return mul_t<decltype(tag)>(tape, a, b); });
}

Tensor scale(Tape* tape, const Tensor& x, double factor) {
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return scale_t<decltype(tag)>(tape, x, factor);
  });
}

Tensor smul(Tape* tape, const Tensor& x, const Tensor& s) {
  if (s.numel() != 1)
    shape_fail("smul", "scale factor must be a 1-element tensor, got " +
                           shape_str(s.shape()));
  check_same_dtype("smul", x, s);
  return dispatch_dtype(x.dtype(), [&](auto tag) { return smul_t<decltype(tag)>(tape, x, s); });
}

Tensor mean(Tape* tape, const Tensor& x) {
  return dispatch_dtype(x.dtype(), [&](auto tag) { return mean_t<decltype(tag)>(tape, x); });
}

Tensor sum_squares(Tape* tape, const Tensor& x) {
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return sum_squares_t<decltype(tag)>(tape, x);
  });
}

Tensor softmax(Tape* tape, const Tensor& x) {
  return dispatch_dtype(x.dtype(), [&](auto tag) { return softmax_t<decltype(tag)>(tape, x); });
}

Tensor log_softmax(Tape* tape, const Tensor& x) {
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return log_softmax_t<decltype(tag)>(tape, x);
  });
}

Tensor avgpool(Tape* tape, const Tensor& x) {
  if (x.ndim() != 4)
    shape_fail("avgpool", "expects 4-D input, got " + shape_str(x.shape()));
  return dispatch_dtype(x.dtype(), [&](auto tag) { return avgpool_t<decltype(tag)>(tape, x); });
}

Tensor reshape(Tape* tape, const Tensor& x, Shape target) {
  if (numel(target) != x.numel())
    shape_fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " +
                              shape_str(target));
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return reshape_t<decltype(tag)>(tape, x, std::move(target));
  });
}

Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& b) {
  if (x.ndim() != 2 || b.ndim() != 1 || x.dim(1) != b.dim(0))
    shape_fail("add_bias", "expects (R,D) + (D), got " + shape_str(x.shape()) + " + " +
                               shape_str(b.shape()));
  check_same_dtype("add_bias", x, b);
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return add_bias_t<decltype(tag)>(tape, x, b);
  });
}

Tensor index(Tape* tape, const Tensor& x, int64_t i) {
  if (i < 0 || i >= x.numel())
    shape_fail("index", "index " + std::to_string(i) + " out of range for " +
                            shape_str(x.shape()));
  return dispatch_dtype(x.dtype(), [&](auto tag) { return index_t<decltype(tag)>(tape, x, i); });
}

Tensor l2_normalize_rows(Tape* tape, const Tensor& x) {
  if (x.ndim() != 2)
    shape_fail("l2_normalize_rows", "expects 2-D input, got " + shape_str(x.shape()));
  return dispatch_dtype(x.dtype(), [&](auto tag) {
    return l2_normalize_rows_t<decltype(tag)>(tape, x);
  });
}

Tensor nll(Tape* tape, const Tensor& log_probs, std::span<const int> labels) {
  if (log_probs.ndim() != 2)
    shape_fail("nll", "expects 2-D log-probs, got " + shape_str(log_probs.shape()));
  const int64_t R = log_probs.dim(0), C = log_probs.dim(1);
  if (static_cast<int64_t>(labels.size()) != R)
    shape_fail("nll", "label count " + std::to_string(labels.size()) +
                          " does not match batch " + std::to_string(R));
  for (int64_t r = 0; r < R; ++r)
    if (labels[r] < 0 || labels[r] >= C)
      throw ShapeError("nll: label " + std::to_string(labels[r]) + " out of range [0," +
                       std::to_string(C) + ") at row " + std::to_string(r));
  return dispatch_dtype(log_probs.dtype(), [&](auto tag) {
    return nll_t<decltype(tag)>(tape, log_probs,
                                std::vector<int>(labels.begin(), labels.end()));
  });
}

Tensor forward_op(Tape* tape, std::string_view op, std::span<const Tensor> inputs,
                  const OpAttrs& attrs) {
  auto arity = [&](size_t n) {
    if (inputs.size() != n)
      shape_fail(op, "expects " + std::to_string(n) + " inputs, got " +
                         std::to_string(inputs.size()));
  };
  if (op == "matmul") {
    arity(2);
    return matmul(tape, inputs[0], inputs[1]);
  }
  if (op == "conv2d") {
    arity(2);
    return conv2d(tape, inputs[0], inputs[1], {attrs.stride, attrs.padding});
  }
  if (op == "batchnorm2d") {
    arity(5);
    Tensor rm = inputs[3], rv = inputs[4];
    return batchnorm2d(tape, inputs[0], inputs[1], inputs[2], rm, rv, attrs.training,
                       attrs.update_stats, attrs.momentum, attrs.eps);
  }
  if (op == "relu") {
    arity(1);
    return relu(tape, inputs[0]);
  }
  if (op == "clamp_min") {
    arity(1);
    return clamp_min(tape, inputs[0], attrs.threshold);
  }
  if (op == "add") {
    arity(2);
    return add(tape, inputs[0], inputs[1]);
  }
  if (op == "scale") {
    arity(1);
    return scale(tape, inputs[0], attrs.factor);
  }
  if (op == "mean") {
    arity(1);
    return mean(tape, inputs[0]);
  }
  if (op == "sum_squares") {
    arity(1);
    return sum_squares(tape, inputs[0]);
  }
  if (op == "softmax") {
    arity(1);
    return softmax(tape, inputs[0]);
  }
  if (op == "log_softmax") {
    arity(1);
    return log_softmax(tape, inputs[0]);
  }
  if (op == "avgpool") {
    arity(1);
    return avgpool(tape, inputs[0]);
  }
  if (op == "reshape") {
    arity(1);
    return reshape(tape, inputs[0], attrs.target_shape);
  }
  throw ShapeError("forward_op: unknown op '" + std::string(op) + "'");
}

}  // namespace dfa::ops
