#include "dfa/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "dfa/ops.hpp"

namespace dfa {
namespace {

constexpr double kStep = 1e-5;
constexpr double kAbsFloor = 1e-7;

using GraphFn = std::function<Tensor(Tape*, const std::vector<Tensor>&)>;

Tensor rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), DType::f64);
  auto d = t.data<double>();
  for (auto& v : d) v = rng.uniform(lo, hi);
  return t;
}

// Keeps values away from a kink at `at` so the central difference is valid.
void nudge_away(Tensor& t, double at, double margin = 0.05) {
  auto d = t.data<double>();
  for (auto& v : d)
    if (std::abs(v - at) < margin) v = at + (v >= at ? margin : -margin);
}

// Scalar readout of an arbitrary-shaped op output: mean(out * W) with a fixed
// random weight tensor, so every output element influences the loss.
GraphFn weighted(Rng& rng, std::function<Tensor(Tape*, const std::vector<Tensor>&)> op_fn,
                 const Shape& out_shape) {
  Tensor w = rand_tensor(rng, out_shape, 0.2, 1.0);
  return [op_fn = std::move(op_fn), w](Tape* tape, const std::vector<Tensor>& ins) {
    Tensor out = op_fn(tape, ins);
    return ops::mean(tape, ops::mul(tape, out, w));
  };
}

struct CaseResult {
  double max_rel_err = 0.0;
  int checks = 0;
};

CaseResult check_graph(const GraphFn& fn, std::vector<Tensor> inputs,
                       const std::vector<int>& wrt) {
  for (int i : wrt) inputs[static_cast<size_t>(i)].set_requires_grad(true);

  Tape tape;
  Tensor loss = fn(&tape, inputs);
  tape.backward(loss);

  CaseResult res;
  for (int i : wrt) {
    Tensor& x = inputs[static_cast<size_t>(i)];
    for (int64_t j = 0; j < x.numel(); ++j) {
      const double orig = x.value_at(j);
      x.set_value_at(j, orig + kStep);
      const double up = fn(nullptr, inputs).item();
      x.set_value_at(j, orig - kStep);
      const double dn = fn(nullptr, inputs).item();
      x.set_value_at(j, orig);
      const double numeric = (up - dn) / (2 * kStep);
      const double analytic = x.has_grad() ? x.grad_at(j) : 0.0;
      const double diff = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), kAbsFloor});
      res.max_rel_err = std::max(res.max_rel_err, diff / denom);
      ++res.checks;
    }
  }
  return res;
}

struct CaseSpec {
  std::string name;
  GraphFn fn;
  std::vector<Tensor> inputs;
  std::vector<int> wrt;
};

std::vector<CaseSpec> build_round(Rng& rng) {
  std::vector<CaseSpec> cases;
  auto add = [&](std::string name, GraphFn fn, std::vector<Tensor> ins,
                 std::vector<int> wrt) {
    cases.push_back({std::move(name), std::move(fn), std::move(ins), std::move(wrt)});
  };

  {  // matmul
    const int64_t m = rng.uniform_int(1, 4), k = rng.uniform_int(1, 5),
                  n = rng.uniform_int(1, 4);
    auto fn = weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
      return ops::matmul(t, in[0], in[1]);
    }, {m, n});
    add("matmul", fn, {rand_tensor(rng, {m, k}), rand_tensor(rng, {k, n})}, {0, 1});
  }
  {  // conv2d, stride 1 same and stride 2 valid
    const int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const int64_t h = rng.uniform_int(4, 6), w = rng.uniform_int(4, 6);
    for (int variant = 0; variant < 2; ++variant) {
      ops::Conv2dAttrs attrs;
      attrs.stride = variant == 0 ? 1 : 2;
      attrs.padding = variant == 0 ? ops::Padding::same : ops::Padding::valid;
      Tensor x = rand_tensor(rng, {2, ci, h, w});
      Tensor kern = rand_tensor(rng, {co, ci, 3, 3});
      const Shape out_shape = ops::conv2d(nullptr, x, kern, attrs).shape();
      auto fn = weighted(rng, [attrs](Tape* t, const std::vector<Tensor>& in) {
        return ops::conv2d(t, in[0], in[1], attrs);
      }, out_shape);
      add(variant == 0 ? "conv2d/s1same" : "conv2d/s2valid", fn, {x, kern}, {0, 1});
    }
  }
  {  // batchnorm2d in training and eval normalization
    const int64_t c = rng.uniform_int(1, 3);
    for (int training = 0; training < 2; ++training) {
      Tensor x = rand_tensor(rng, {2, c, 3, 3});
      Tensor gamma = rand_tensor(rng, {c}, 0.5, 1.5);
      Tensor beta = rand_tensor(rng, {c}, -0.3, 0.3);
      Tensor rm = rand_tensor(rng, {c}, -0.2, 0.2);
      Tensor rv = rand_tensor(rng, {c}, 0.5, 1.5);
      auto fn = weighted(rng, [rm, rv, training](Tape* t, const std::vector<Tensor>& in) mutable {
        return ops::batchnorm2d(t, in[0], in[1], in[2], rm, rv, training != 0, false);
      }, x.shape());
      add(training ? "batchnorm2d/train" : "batchnorm2d/eval", fn, {x, gamma, beta},
          {0, 1, 2});
    }
  }
  {  // relu / clamp_min away from their kinks
    Tensor x = rand_tensor(rng, {3, 5});
    nudge_away(x, 0.0);
    add("relu", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::relu(t, in[0]);
        }, x.shape()),
        {x}, {0});
    Tensor y = rand_tensor(rng, {2, 7}, -2.0, 2.0);
    nudge_away(y, -1.0);
    add("clamp_min", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::clamp_min(t, in[0], -1.0);
        }, y.shape()),
        {y}, {0});
  }
  {  // add / sub / mul / scale / smul
    const int64_t n = rng.uniform_int(2, 8);
    add("add", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::add(t, in[0], in[1]);
        }, {n}),
        {rand_tensor(rng, {n}), rand_tensor(rng, {n})}, {0, 1});
    add("sub", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::sub(t, in[0], in[1]);
        }, {n}),
        {rand_tensor(rng, {n}), rand_tensor(rng, {n})}, {0, 1});
    add("mul", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::mul(t, in[0], in[1]);
        }, {n}),
        {rand_tensor(rng, {n}), rand_tensor(rng, {n})}, {0, 1});
    add("scale", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::scale(t, in[0], -0.7);
        }, {n}),
        {rand_tensor(rng, {n})}, {0});
    add("smul", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::smul(t, in[0], in[1]);
        }, {n}),
        {rand_tensor(rng, {n}), rand_tensor(rng, {1}, 0.3, 1.5)}, {0, 1});
  }
  {  // reductions
    Tensor x = rand_tensor(rng, {2, 6});
    add("mean", [](Tape* t, const std::vector<Tensor>& in) { return ops::mean(t, in[0]); },
        {x}, {0});
    add("sum_squares", [](Tape* t, const std::vector<Tensor>& in) {
          return ops::sum_squares(t, in[0]);
        },
        {x.clone()}, {0});
  }
  {  // softmax / log_softmax
    const int64_t r = rng.uniform_int(1, 3), c = rng.uniform_int(2, 6);
    add("softmax", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::softmax(t, in[0]);
        }, {r, c}),
        {rand_tensor(rng, {r, c}, -2.0, 2.0)}, {0});
    add("log_softmax", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::log_softmax(t, in[0]);
        }, {r, c}),
        {rand_tensor(rng, {r, c}, -2.0, 2.0)}, {0});
  }
  {  // avgpool / reshape / add_bias / index
    Tensor x = rand_tensor(rng, {2, 3, 4, 4});
    add("avgpool", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::avgpool(t, in[0]);
        }, {2, 3}),
        {x}, {0});
    add("reshape", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::reshape(t, in[0], {6, 16});
        }, {6, 16}),
        {x.clone()}, {0});
    const int64_t r = rng.uniform_int(1, 4), d = rng.uniform_int(1, 5);
    add("add_bias", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::add_bias(t, in[0], in[1]);
        }, {r, d}),
        {rand_tensor(rng, {r, d}), rand_tensor(rng, {d})}, {0, 1});
    Tensor z = rand_tensor(rng, {5});
    const int64_t pick = rng.uniform_int(0, 4);
    add("index", [pick](Tape* t, const std::vector<Tensor>& in) {
          return ops::index(t, in[0], pick);
        },
        {z}, {0});
  }
  {  // l2_normalize_rows, rows bounded away from zero norm
    Tensor x = rand_tensor(rng, {3, 6}, 0.3, 1.0);
    add("l2_normalize_rows", weighted(rng, [](Tape* t, const std::vector<Tensor>& in) {
          return ops::l2_normalize_rows(t, in[0]);
        }, x.shape()),
        {x}, {0});
  }
  {  // cross-entropy composite: nll(log_softmax(.))
    const int64_t b = rng.uniform_int(2, 4), c = rng.uniform_int(2, 5);
    std::vector<int> labels(static_cast<size_t>(b));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(0, c - 1));
    add("nll_log_softmax", [labels](Tape* t, const std::vector<Tensor>& in) {
          return ops::nll(t, ops::log_softmax(t, in[0]), labels);
        },
        {rand_tensor(rng, {b, c}, -2.0, 2.0)}, {0});
  }
  {  // composite graphs over the op set
    const int64_t b = 3, din = 4, dout = 3;
    Tensor x = rand_tensor(rng, {b, din});
    nudge_away(x, 0.0);
    add("composite/mlp", [](Tape* t, const std::vector<Tensor>& in) {
          Tensor h = ops::add_bias(t, ops::matmul(t, in[0], in[1]), in[2]);
          return ops::mean(t, ops::relu(t, h));
        },
        {x, rand_tensor(rng, {din, dout}), rand_tensor(rng, {dout})}, {0, 1, 2});

    // aggregation-style path: softmax(beta) weights a sum of maps, compared
    // against a target by normalized squared distance
    const int64_t taps = 3, dim = 6;
    std::vector<Tensor> ins;
    ins.push_back(rand_tensor(rng, {taps}));                // beta
    for (int64_t i = 0; i < taps; ++i) ins.push_back(rand_tensor(rng, {2, dim}, 0.2, 1.0));
    ins.push_back(rand_tensor(rng, {2, dim}, 0.2, 1.0));    // target
    add("composite/aggregate", [taps](Tape* t, const std::vector<Tensor>& in) {
          Tensor alpha = ops::softmax(t, in[0]);
          Tensor agg;
          for (int64_t i = 0; i < taps; ++i) {
            Tensor w = ops::index(t, alpha, i);
            Tensor term = ops::smul(t, in[static_cast<size_t>(1 + i)], w);
            agg = i == 0 ? term : ops::add(t, agg, term);
          }
          Tensor u = ops::l2_normalize_rows(t, agg);
          Tensor v = ops::l2_normalize_rows(t, in.back());
          return ops::scale(t, ops::sum_squares(t, ops::sub(t, u, v)), 0.5);
        },
        std::move(ins), {0, 1, 2, 3});

    // small conv net head
    Tensor img = rand_tensor(rng, {2, 2, 4, 4});
    Tensor kern = rand_tensor(rng, {3, 2, 3, 3});
    Tensor fc = rand_tensor(rng, {3, 4});
    std::vector<int> labels = {1, 3};
    add("composite/convnet", [labels](Tape* t, const std::vector<Tensor>& in) {
          ops::Conv2dAttrs attrs;
          attrs.stride = 2;
          Tensor h = ops::conv2d(t, in[0], in[1], attrs);
          Tensor pooled = ops::avgpool(t, ops::relu(t, h));
          Tensor logits = ops::matmul(t, pooled, in[2]);
          return ops::nll(t, ops::log_softmax(t, logits), labels);
        },
        {img, kern, fc}, {0, 1, 2});
  }
  return cases;
}

}  // namespace

GradCheckReport run_gradcheck(uint64_t seed, double tol, int rounds) {
  GradCheckReport report;
  for (int round = 0; round < rounds; ++round) {
    Rng rng(splitmix64(seed + static_cast<uint64_t>(round) * 0x9e37ull));
    for (auto& spec : build_round(rng)) {
      CaseResult r = check_graph(spec.fn, std::move(spec.inputs), spec.wrt);
      GradCheckCase c;
      c.name = spec.name + "#" + std::to_string(round);
      c.max_rel_err = r.max_rel_err;
      c.checks = r.checks;
      c.pass = r.max_rel_err <= tol;
      report.max_rel_err = std::max(report.max_rel_err, r.max_rel_err);
      report.total_checks += r.checks;
      report.pass = report.pass && c.pass;
      report.cases.push_back(std::move(c));
    }
  }
  report.total_cases = static_cast<int>(report.cases.size());
  return report;
}

}  // namespace dfa
