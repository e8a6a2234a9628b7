#include "dfa/losses.hpp"

#include <cmath>

namespace dfa {

std::vector<int> AggregationWeights::group_sizes() const {
  std::vector<int> sizes;
  for (const auto& a : alpha) sizes.push_back(static_cast<int>(a.size()));
  return sizes;
}

void AggregationWeights::refresh_alpha() {
  if (exact_alpha) return;
  alpha.clear();
  for (const auto& b : beta) {
    Tensor a = ops::softmax(nullptr, b);
    alpha.push_back(a.to_vector());
  }
}

Tensor AggregationWeights::alpha_tensor(int group_index, DType dt) const {
  const auto& a = alpha[static_cast<size_t>(group_index - 1)];
  return Tensor::from_values({static_cast<int64_t>(a.size())}, dt, a);
}

Tensor cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> labels) {
  return ops::nll(tape, ops::log_softmax(tape, logits), labels);
}

Tensor aggregate(Tape* tape, const std::vector<Tensor>& taps, const Tensor& alpha) {
  if (taps.empty()) shape_fail("aggregate", "no taps");
  if (alpha.numel() != static_cast<int64_t>(taps.size()))
    shape_fail("aggregate", "weight count " + std::to_string(alpha.numel()) +
                                " does not match tap count " + std::to_string(taps.size()));
  for (size_t j = 1; j < taps.size(); ++j)
    if (taps[j].shape() != taps[0].shape())
      shape_fail("aggregate", "tap shapes differ: " + shape_str(taps[0].shape()) + " vs " +
                                  shape_str(taps[j].shape()));
  Tensor acc;
  for (size_t j = 0; j < taps.size(); ++j) {
    Tensor term = ops::smul(tape, taps[j], ops::index(tape, alpha, static_cast<int64_t>(j)));
    acc = j == 0 ? term : ops::add(tape, acc, term);
  }
  return acc;
}

namespace {

Tensor flatten_rows(Tape* tape, const Tensor& x) {
  return ops::reshape(tape, x, {x.dim(0), x.numel() / x.dim(0)});
}

// sum of squared differences, averaged over the batch dimension
Tensor l2_sq_batchmean(Tape* tape, const Tensor& a, const Tensor& b) {
  Tensor diff = ops::sub(tape, a, b);
  return ops::scale(tape, ops::sum_squares(tape, diff), 1.0 / static_cast<double>(a.dim(0)));
}

}  // namespace

Tensor st_loss(Tape* tape, const Tensor& student_tap, const Connector& st_connector,
               const Tensor& aggregation) {
  Tensor mapped = apply_connector(tape, st_connector, student_tap);
  if (mapped.shape() != aggregation.shape())
    shape_fail("st_loss", "connected student tap " + shape_str(mapped.shape()) +
                              " does not match aggregation " +
                              shape_str(aggregation.shape()));
  Tensor u = ops::l2_normalize_rows(tape, flatten_rows(tape, mapped));
  Tensor v = ops::l2_normalize_rows(tape, flatten_rows(tape, aggregation));
  return l2_sq_batchmean(tape, u, v);
}

Tensor ts_loss(Tape* tape, const Tensor& aggregation, const Connector& ts_connector,
               GroupedNetwork& student, std::span<const int> labels, int group_index,
               bool training, bool update_stats) {
  Tensor injected = apply_connector(tape, ts_connector, aggregation);
  Tensor logits =
      student.forward_from_group(tape, injected, group_index + 1, training, update_stats);
  return cross_entropy(tape, logits, labels);
}

Tensor feature_distill_loss(Tape* tape,
                            const std::vector<std::vector<Tensor>>& teacher_taps,
                            const std::vector<Tensor>& alphas,
                            const std::vector<Tensor>& student_last_taps,
                            const std::vector<Connector>& st_connectors,
                            DistillMode mode) {
  const size_t G = teacher_taps.size();
  if (student_last_taps.size() != G || st_connectors.size() != G)
    shape_fail("feature_distill_loss", "per-group argument counts differ");
  Tensor total;
  for (size_t i = 0; i < G; ++i) {
    Tensor target = mode == DistillMode::last
                        ? teacher_taps[i].back()
                        : aggregate(tape, teacher_taps[i], alphas[i]);
    Tensor mapped = apply_connector(tape, st_connectors[i], student_last_taps[i]);
    if (mapped.shape() != target.shape())
      shape_fail("feature_distill_loss",
                 "group " + std::to_string(i + 1) + ": connected student tap " +
                     shape_str(mapped.shape()) + " vs teacher feature " +
                     shape_str(target.shape()));
    Tensor term = l2_sq_batchmean(tape, mapped, target);
    total = i == 0 ? term : ops::add(tape, total, term);
  }
  return total;
}

BridgeParts bridge_loss(Tape* tape, int group_index, const Tensor& beta_i,
                        const std::vector<Tensor>& teacher_taps_i,
                        const Connector& st_connector, const Connector& ts_connector,
                        GroupedNetwork& student, const Tensor& x,
                        std::span<const int> labels, const LossWeights& weights,
                        bool training, bool update_stats) {
  Tensor alpha = ops::softmax(tape, beta_i);
  Tensor agg = aggregate(tape, teacher_taps_i, alpha);

  auto part = student.forward_groups(tape, x, group_index, training, update_stats,
                                     GroupedNetwork::TapMode::last);
  Tensor student_tap = part.taps[static_cast<size_t>(group_index - 1)].back();

  BridgeParts out;
  out.st = st_loss(tape, student_tap, st_connector, agg);
  out.ts = ts_loss(tape, agg, ts_connector, student, labels, group_index, training,
                   update_stats);
  out.total = ops::add(tape, ops::scale(tape, out.st, weights.gamma_st),
                       ops::scale(tape, out.ts, weights.gamma_ts));
  return out;
}

Tensor student_loss(Tape* tape, const Tensor& ce, const Tensor& fd, double gamma_fd) {
  return ops::add(tape, ce, ops::scale(tape, fd, gamma_fd));
}

Tensor beta_regularizer(Tape* tape, const std::vector<Tensor>& betas, double lambda) {
  Tensor total;
  for (size_t i = 0; i < betas.size(); ++i) {
    Tensor term = ops::sum_squares(tape, betas[i]);
    total = i == 0 ? term : ops::add(tape, total, term);
  }
  if (!total.defined()) return Tensor::scalar_value(DType::f64, 0.0);
  return ops::scale(tape, total, lambda);
}

}  // namespace dfa
