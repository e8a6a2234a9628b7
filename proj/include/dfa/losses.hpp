#pragma once

// Scalar objectives: cross-entropy, aggregated feature distillation, the
// student-to-teacher (ST) and teacher-to-student (TS) search losses, their
// bridge combination, and the architecture-parameter regularizer.
//
// Distillation compares features in teacher channel space: the student tap
// goes through its ST connector (F_s), the aggregation is used as-is. In the
// search stage the TS connector (F_t) maps the aggregation into student
// channel space before injection.

#include <span>

#include "dfa/network.hpp"

namespace dfa {

// Per-group architecture parameters (beta) and their softmax image (alpha).
// Baseline schemes may carry exact alphas with no betas behind them.
struct AggregationWeights {
  std::vector<Tensor> beta;                // 1-D f64 tensors, one per group
  std::vector<std::vector<double>> alpha;  // current weights, rows sum to 1
  bool exact_alpha = false;                // alpha authoritative, bypasses softmax

  std::vector<int> group_sizes() const;
  // alpha = softmax(beta) for every group (no-op for exact_alpha).
  void refresh_alpha();
  // Alpha of one group as a constant tensor of the given dtype.
  Tensor alpha_tensor(int group_index, DType dt) const;  // 1-based
};

struct LossWeights {
  double gamma_fd = 1.0;    // distillation weight in the student loss
  double gamma_st = 1e-3;   // ST term in the bridge loss
  double gamma_ts = 1.0;    // TS term in the bridge loss
  double lambda_reg = 1e-4; // beta regularizer
};

enum class DistillMode { aggregated, last };

// mean over the batch of -log softmax(logits)[gt]
Tensor cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> labels);

// A = sum_j alpha[j] * taps[j]; alpha is a 1-D tensor (on-tape softmax image
// during search, a constant during distillation).
Tensor aggregate(Tape* tape, const std::vector<Tensor>& taps, const Tensor& alpha);

// Normalized squared distance between flattened per-sample features:
// || u/|u| - v/|v| ||^2 with u = F_s(student_tap), v = aggregation, averaged
// over the batch. Always in [0, 4]; invariant to positive rescaling.
Tensor st_loss(Tape* tape, const Tensor& student_tap, const Connector& st_connector,
               const Tensor& aggregation);

// Cross-entropy of the student classifying from F_t(A_i) injected at group
// index+1.
Tensor ts_loss(Tape* tape, const Tensor& aggregation, const Connector& ts_connector,
               GroupedNetwork& student, std::span<const int> labels, int group_index,
               bool training, bool update_stats);

// Sum over groups of the batch-averaged squared distance between the
// (aggregated or last) teacher feature and F_s(student last tap).
Tensor feature_distill_loss(Tape* tape,
                            const std::vector<std::vector<Tensor>>& teacher_taps,
                            const std::vector<Tensor>& alphas,
                            const std::vector<Tensor>& student_last_taps,
                            const std::vector<Connector>& st_connectors,
                            DistillMode mode);

struct BridgeParts {
  Tensor total;
  Tensor st;
  Tensor ts;
};

// gamma_st * L_ST + gamma_ts * L_TS for one group, with A recomputed from the
// current beta via softmax. teacher_taps_i are the group's feature taps,
// computed by the caller in eval mode with no gradients.
BridgeParts bridge_loss(Tape* tape, int group_index, const Tensor& beta_i,
                        const std::vector<Tensor>& teacher_taps_i,
                        const Connector& st_connector, const Connector& ts_connector,
                        GroupedNetwork& student, const Tensor& x,
                        std::span<const int> labels, const LossWeights& weights,
                        bool training, bool update_stats);

// L_ce + gamma_fd * L_fd
Tensor student_loss(Tape* tape, const Tensor& ce, const Tensor& fd, double gamma_fd);

// lambda * sum_i ||beta_i||^2
Tensor beta_regularizer(Tape* tape, const std::vector<Tensor>& betas, double lambda);

}  // namespace dfa
