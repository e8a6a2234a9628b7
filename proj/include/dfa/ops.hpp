#pragma once

// Differentiable operations. Every op validates shapes (throwing ShapeError
// with the op name and both shapes), checks its output for non-finite values
// (NumericError), and records a backward closure on the tape when `tape` is
// non-null and any input requires a gradient. Passing tape == nullptr runs
// the op in plain evaluation mode.

#include <span>
#include <string_view>

#include "dfa/tensor.hpp"

namespace dfa::ops {

enum class Padding { same, valid };

struct Conv2dAttrs {
  int stride = 1;
  Padding padding = Padding::same;
};

// core op set ---------------------------------------------------------------
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Conv2dAttrs& attrs = {});
// Running stats are updated in place only when training && update_stats.
Tensor batchnorm2d(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool training,
                   bool update_stats, double momentum = 0.1, double eps = 1e-5);
Tensor relu(Tape* tape, const Tensor& x);
Tensor clamp_min(Tape* tape, const Tensor& x, double threshold);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& x, double factor);
Tensor mean(Tape* tape, const Tensor& x);
Tensor sum_squares(Tape* tape, const Tensor& x);
// softmax / log_softmax operate on the last axis of a 2-D tensor; a 1-D
// tensor is treated as a single row. Max-subtracted for stability.
Tensor softmax(Tape* tape, const Tensor& x);
Tensor log_softmax(Tape* tape, const Tensor& x);
Tensor avgpool(Tape* tape, const Tensor& x);  // global: (N,C,H,W) -> (N,C)
Tensor reshape(Tape* tape, const Tensor& x, Shape target);

// additional primitives used by the losses and networks ----------------------
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);  // hadamard
// x * s with s a 1-element tensor; differentiable in both arguments.
Tensor smul(Tape* tape, const Tensor& x, const Tensor& s);
Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& b);  // (R,D) + (D)
Tensor index(Tape* tape, const Tensor& x, int64_t i);           // flat pick -> scalar
// Rows of a (R,D) tensor scaled to unit L2 norm. Throws NumericError on a
// zero-norm row (degenerate normalization).
Tensor l2_normalize_rows(Tape* tape, const Tensor& x);
// Mean over rows of -log_probs[r, labels[r]].
Tensor nll(Tape* tape, const Tensor& log_probs, std::span<const int> labels);

// generic string-keyed dispatcher over the core op set (tooling/gradcheck) ---
struct OpAttrs {
  int stride = 1;
  Padding padding = Padding::same;
  double threshold = 0.0;  // clamp_min
  double factor = 1.0;     // scale
  Shape target_shape;      // reshape
  bool training = false;   // batchnorm2d
  bool update_stats = false;
  double momentum = 0.1;
  double eps = 1e-5;
};

// `op` is one of: matmul conv2d batchnorm2d relu clamp_min add scale mean
// sum_squares softmax log_softmax avgpool reshape. batchnorm2d expects inputs
// {x, gamma, beta, running_mean, running_var}.
Tensor forward_op(Tape* tape, std::string_view op, std::span<const Tensor> inputs,
                  const OpAttrs& attrs = {});

}  // namespace dfa::ops
