#pragma once

// Two-stage driver. Stage 1 searches per-group aggregation weights by
// alternating gradient steps: Adam on beta_i against the bridge loss plus
// regularizer on validation batches (weights and connectors frozen, batchnorm
// stats untouched), then SGD on the student weights and the group's
// connectors against the bridge loss on training batches (beta frozen).
// Groups are searched strictly in order; the student warm-starts across
// groups. Stage 2 re-trains a fresh student from scratch against the frozen
// aggregation weights.

#include <functional>

#include "dfa/config.hpp"
#include "dfa/dataset.hpp"
#include "dfa/losses.hpp"
#include "dfa/metrics.hpp"

namespace dfa {

// Teacher-side abstraction: the search consumes per-group feature taps in
// eval mode with no gradients attached. Tests may substitute synthetic tap
// sources (labels are forwarded for that purpose; a real network ignores
// them).
class TeacherTapProvider {
 public:
  virtual ~TeacherTapProvider() = default;
  virtual int num_groups() const = 0;
  virtual std::vector<int> group_sizes() const = 0;
  virtual int group_channels(int group) const = 0;  // 1-based
  virtual std::vector<std::vector<Tensor>> taps(const Tensor& x, std::span<const int> labels,
                                                int upto_group) = 0;
};

class NetworkTeacher : public TeacherTapProvider {
 public:
  explicit NetworkTeacher(GroupedNetwork& net) : net_(net) { net_.set_requires_grad(false); }
  int num_groups() const override { return net_.num_groups(); }
  std::vector<int> group_sizes() const override;
  int group_channels(int group) const override { return net_.group_channels(group); }
  std::vector<std::vector<Tensor>> taps(const Tensor& x, std::span<const int> labels,
                                        int upto_group) override;

 private:
  GroupedNetwork& net_;
};

// ---------------------------------------------------------------------------
// architecture parameter construction & persistence
// ---------------------------------------------------------------------------

// beta = 0 except beta[last] = last_bias, so alpha starts close to one-hot on
// the last layer (softmax cannot represent an exact one-hot).
AggregationWeights init_arch(const std::vector<int>& group_sizes, double last_bias,
                             DType dt = DType::f64);

enum class BaselineScheme { last, average, random };
BaselineScheme baseline_scheme_from_name(std::string_view name);
const char* baseline_scheme_name(BaselineScheme s);

// last/average are exact alphas (no softmax behind them); random draws each
// group's alpha from a flat Dirichlet.
AggregationWeights baseline_weights(BaselineScheme scheme,
                                    const std::vector<int>& group_sizes, uint64_t seed);

void save_arch(const AggregationWeights& arch, const std::string& path,
               uint64_t config_hash_value, uint64_t seed);
AggregationWeights load_arch(const std::string& path, uint64_t* config_hash_out = nullptr,
                             uint64_t* seed_out = nullptr);

// ---------------------------------------------------------------------------
// stage 1
// ---------------------------------------------------------------------------
struct SearchStepInfo {
  int group = 0;
  int64_t iteration = 0;
  bool beta_step = false;
  double l_st = 0, l_ts = 0, l_total = 0;
};

struct SearchHooks {
  // after every optimizer step (both kinds)
  std::function<void(const SearchStepInfo&)> after_step;
  // after each epoch, with the global epoch counter
  std::function<void(int group, int global_epoch)> after_epoch;
};

struct SearchContext {
  TeacherTapProvider& teacher;
  GroupedNetwork& student;
  const SearchSchedule& schedule;
  const LossWeights& weights;
  const Dataset& train;
  const Dataset& val;
  uint64_t seed = 1;
  DType dtype = DType::f64;
  bool augment_train = true;
  MetricsWriter* metrics = nullptr;
  std::string run_id;
  SearchHooks hooks;
};

AggregationWeights run_search(SearchContext& ctx);

// ---------------------------------------------------------------------------
// stage 2
// ---------------------------------------------------------------------------
struct DistillContext {
  TeacherTapProvider* teacher = nullptr;  // may be null when gamma_fd == 0
  GroupedNetwork& student;
  const AggregationWeights& arch;
  const TrainSchedule& schedule;
  const LossWeights& weights;
  const Dataset& train;  // stage 2 trains on the full train+val pool
  const Dataset& test;
  uint64_t seed = 1;
  DType dtype = DType::f64;
  DistillMode mode = DistillMode::aggregated;
  MetricsWriter* metrics = nullptr;
  std::string run_id;
};

struct DistillResult {
  double final_test_acc = 0;
  double best_test_acc = 0;
  double wall_ms = 0;
};

DistillResult run_distill(DistillContext& ctx);

double evaluate_accuracy(GroupedNetwork& net, const Dataset& ds, int batch_size);

// ---------------------------------------------------------------------------
// timing probe (fast/f32 mode)
// ---------------------------------------------------------------------------
struct TimeProbeResult {
  double t1_ms = 0;               // one stage-1 bridge gradient step, last group
  double t2_ms = 0;               // one stage-2 aggregated distillation step
  double t2_last_ms = 0;          // same with plain last-tap distillation
  double teacher_forward_ms = 0;  // full teacher forward with taps
  double student_fwdbwd_ms = 0;   // student forward+backward on cross-entropy
  int iterations = 0;
};

TimeProbeResult stage_time_probe(GroupedNetwork& teacher, GroupedNetwork& student,
                                 const Batch& batch, const LossWeights& weights,
                                 int iterations = 21);

}  // namespace dfa
