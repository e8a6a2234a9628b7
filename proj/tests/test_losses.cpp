#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dfa/losses.hpp"

using namespace dfa;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), DType::f64);
  for (int64_t i = 0; i < t.numel(); ++i) t.set_value_at(i, rng.uniform(lo, hi));
  return t;
}

std::vector<int> iota_labels(int batch, int classes) {
  std::vector<int> l(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i) l[static_cast<size_t>(i)] = i % classes;
  return l;
}

NetworkSpec small_student() {
  NetworkSpec s;
  s.groups = {{1, 8}, {1, 16}};
  s.classes = 5;
  s.input_size = 8;
  s.dtype = DType::f64;
  return s;
}

}  // namespace

TEST_CASE("cross-entropy of uniform logits is ln C") {
  Tensor logits = Tensor::zeros({4, 10}, DType::f64);
  auto labels = iota_labels(4, 10);
  Tensor ce = cross_entropy(nullptr, logits, labels);
  CHECK(std::abs(ce.item() - std::log(10.0)) <= 1e-12);
}

TEST_CASE("cross-entropy of very confident logits approaches zero") {
  Tensor logits = Tensor::zeros({2, 3}, DType::f64);
  logits.set_value_at(0 * 3 + 1, 60.0);
  logits.set_value_at(1 * 3 + 2, 60.0);
  std::vector<int> labels = {1, 2};
  CHECK(cross_entropy(nullptr, logits, labels).item() <= 1e-12);
}

TEST_CASE("cross-entropy direct evaluation") {
  Tensor logits = Tensor::from_values({1, 3}, DType::f64, std::vector<double>{1, 2, 3});
  std::vector<int> labels = {2};
  CHECK(cross_entropy(nullptr, logits, labels).item() ==
        doctest::Approx(0.40760596).epsilon(1e-7));
}

TEST_CASE("cross-entropy rejects out-of-range labels") {
  Tensor logits = Tensor::zeros({2, 3}, DType::f64);
  std::vector<int> labels = {0, 3};
  CHECK_THROWS_AS(cross_entropy(nullptr, logits, labels), ShapeError);
}

TEST_CASE("aggregate: one-hot-last weight reproduces the last tap bit-exactly") {
  Rng rng(1);
  std::vector<Tensor> taps = {rand_tensor(rng, {2, 4, 3, 3}), rand_tensor(rng, {2, 4, 3, 3}),
                              rand_tensor(rng, {2, 4, 3, 3})};
  Tensor alpha = Tensor::from_values({3}, DType::f64, std::vector<double>{0, 0, 1});
  Tensor a = aggregate(nullptr, taps, alpha);
  CHECK(a.checksum() == taps.back().checksum());
}

TEST_CASE("aggregate: identical taps are a fixed point of any convex weighting") {
  Rng rng(2);
  Tensor tap = rand_tensor(rng, {2, 3, 2, 2});
  std::vector<Tensor> taps = {tap, tap.clone()};
  Tensor alpha = Tensor::from_values({2}, DType::f64, std::vector<double>{1.0 / 3, 2.0 / 3});
  Tensor a = aggregate(nullptr, taps, alpha);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.value_at(i) == doctest::Approx(tap.value_at(i)).epsilon(1e-14));
}

TEST_CASE("aggregate: direct weighted sum") {
  std::vector<Tensor> taps = {Tensor::full({1, 2, 2, 2}, DType::f64, 1.0),
                              Tensor::full({1, 2, 2, 2}, DType::f64, 2.0)};
  Tensor alpha = Tensor::from_values({2}, DType::f64, std::vector<double>{1.0 / 3, 2.0 / 3});
  Tensor a = aggregate(nullptr, taps, alpha);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.value_at(i) == doctest::Approx(5.0 / 3).epsilon(1e-14));
}

TEST_CASE("aggregate: convexity bounds hold elementwise") {
  Rng rng(3);
  std::vector<Tensor> taps = {rand_tensor(rng, {2, 2, 2, 2}), rand_tensor(rng, {2, 2, 2, 2}),
                              rand_tensor(rng, {2, 2, 2, 2})};
  Tensor beta = rand_tensor(rng, {3}, -2, 2);
  Tensor alpha = ops::softmax(nullptr, beta);
  Tensor a = aggregate(nullptr, taps, alpha);
  for (int64_t i = 0; i < a.numel(); ++i) {
    double lo = taps[0].value_at(i), hi = lo;
    for (const auto& t : taps) {
      lo = std::min(lo, t.value_at(i));
      hi = std::max(hi, t.value_at(i));
    }
    CHECK(a.value_at(i) >= lo - 1e-12);
    CHECK(a.value_at(i) <= hi + 1e-12);
  }
}

TEST_CASE("aggregate: mismatched weight count is an error") {
  Rng rng(4);
  std::vector<Tensor> taps = {rand_tensor(rng, {1, 2, 2, 2})};
  Tensor alpha = Tensor::from_values({2}, DType::f64, std::vector<double>{0.5, 0.5});
  CHECK_THROWS_AS(aggregate(nullptr, taps, alpha), ShapeError);
}

TEST_CASE("st_loss: matching features give zero, orthogonal give two") {
  Connector id = identity_connector(ConnectorDirection::student_to_teacher, 1, 2, DType::f64);
  Rng rng(5);
  Tensor tap = rand_tensor(rng, {3, 2, 2, 2}, 0.1, 1.0);
  CHECK(st_loss(nullptr, tap, id, tap.clone()).item() <= 1e-28);

  // per-sample orthogonal flattened vectors
  Tensor a = Tensor::zeros({1, 2, 1, 1}, DType::f64);
  Tensor b = Tensor::zeros({1, 2, 1, 1}, DType::f64);
  a.set_value_at(0, 1.0);
  b.set_value_at(1, 1.0);
  CHECK(st_loss(nullptr, a, id, b).item() == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("st_loss: invariant to positive rescaling of either side") {
  Connector id = identity_connector(ConnectorDirection::student_to_teacher, 1, 3, DType::f64);
  Rng rng(6);
  Tensor tap = rand_tensor(rng, {2, 3, 2, 2}, 0.1, 1.0);
  Tensor agg = rand_tensor(rng, {2, 3, 2, 2}, 0.1, 1.0);
  const double base = st_loss(nullptr, tap, id, agg).item();
  Tensor agg_scaled = ops::scale(nullptr, agg, 7.3);
  Tensor tap_scaled = ops::scale(nullptr, tap, 0.002);
  CHECK(st_loss(nullptr, tap, id, agg_scaled).item() == doctest::Approx(base).epsilon(1e-10));
  CHECK(st_loss(nullptr, tap_scaled, id, agg).item() == doctest::Approx(base).epsilon(1e-10));

  // c*A for c>0 against A itself is exactly the zero case
  CHECK(st_loss(nullptr, agg, id, agg_scaled).item() <= 1e-25);
}

TEST_CASE("st_loss stays in [0,4] and rejects zero-norm inputs") {
  Connector id = identity_connector(ConnectorDirection::student_to_teacher, 1, 4, DType::f64);
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor tap = rand_tensor(rng, {2, 4, 2, 2}, -3, 3);
    Tensor agg = rand_tensor(rng, {2, 4, 2, 2}, -3, 3);
    const double v = st_loss(nullptr, tap, id, agg).item();
    CHECK(v >= 0.0);
    CHECK(v <= 4.0 + 1e-12);
  }
  Tensor zero = Tensor::zeros({1, 4, 2, 2}, DType::f64);
  Tensor agg = rand_tensor(rng, {1, 4, 2, 2}, 0.1, 1.0);
  CHECK_THROWS_AS(st_loss(nullptr, zero, id, agg), NumericError);
}

TEST_CASE("feature distillation: identical sides with identity connectors vanish") {
  Rng rng(8);
  Tensor teacher_tap = rand_tensor(rng, {2, 4, 3, 3});
  Tensor student_tap = teacher_tap.clone();
  std::vector<Connector> conns = {
      identity_connector(ConnectorDirection::student_to_teacher, 1, 4, DType::f64)};
  Tensor fd = feature_distill_loss(nullptr, {{teacher_tap}}, {}, {student_tap}, conns,
                                   DistillMode::last);
  CHECK(fd.item() == 0.0);
}

TEST_CASE("feature distillation: one-hot-last aggregation equals last mode bit-exactly") {
  Rng rng(9);
  std::vector<std::vector<Tensor>> teacher_taps(1);
  for (int j = 0; j < 3; ++j) teacher_taps[0].push_back(rand_tensor(rng, {2, 4, 3, 3}));
  std::vector<Tensor> alphas = {
      Tensor::from_values({3}, DType::f64, std::vector<double>{0, 0, 1})};
  Tensor student_tap = rand_tensor(rng, {2, 3, 3, 3});
  Rng crng(10);
  std::vector<Connector> conns = {
      make_connector(ConnectorDirection::student_to_teacher, 1, 3, 4, DType::f64, crng)};

  Tensor agg = feature_distill_loss(nullptr, teacher_taps, alphas, {student_tap}, conns,
                                    DistillMode::aggregated);
  Tensor last = feature_distill_loss(nullptr, teacher_taps, {}, {student_tap}, conns,
                                     DistillMode::last);
  CHECK(agg.item() == last.item());  // bit-identical
}

TEST_CASE("feature distillation: unit difference over 8 elements is 8.0") {
  Tensor teacher_tap = Tensor::full({1, 2, 2, 2}, DType::f64, 1.0);
  Tensor student_tap = Tensor::zeros({1, 2, 2, 2}, DType::f64);
  std::vector<Connector> conns = {
      identity_connector(ConnectorDirection::student_to_teacher, 1, 2, DType::f64)};
  Tensor fd = feature_distill_loss(nullptr, {{teacher_tap}}, {}, {student_tap}, conns,
                                   DistillMode::last);
  CHECK(fd.item() == doctest::Approx(8.0).epsilon(1e-14));
}

TEST_CASE("ts_loss at the last group with the student's own output is its cross-entropy") {
  GroupedNetwork student(small_student(), 21);
  Rng rng(11);
  Tensor x = rand_tensor(rng, {4, 3, 8, 8});
  auto labels = iota_labels(4, 5);

  auto part = student.forward_groups(nullptr, x, student.num_groups(), false, false,
                                     GroupedNetwork::TapMode::none);
  Tensor logits = student.forward_from_group(nullptr, part.output,
                                             student.num_groups() + 1, false, false);
  const double plain_ce = cross_entropy(nullptr, logits, labels).item();

  Connector id = identity_connector(ConnectorDirection::teacher_to_student,
                                    student.num_groups(), 16, DType::f64);
  const double ts = ts_loss(nullptr, part.output, id, student, labels,
                            student.num_groups(), false, false).item();
  CHECK(ts == plain_ce);
}

TEST_CASE("ts_loss: zero injection through the fresh head gives ln C") {
  GroupedNetwork student(small_student(), 22);
  Tensor zero = Tensor::zeros({3, 16, 4, 4}, DType::f64);
  Connector id = identity_connector(ConnectorDirection::teacher_to_student, 2, 16, DType::f64);
  auto labels = iota_labels(3, 5);
  const double ts = ts_loss(nullptr, zero, id, student, labels, 2, false, false).item();
  CHECK(ts == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("bridge loss composes ST and TS terms") {
  GroupedNetwork student(small_student(), 23);
  Rng rng(12);
  Tensor x = rand_tensor(rng, {4, 3, 8, 8});
  auto labels = iota_labels(4, 5);

  // teacher taps for group 1: two taps of 8 channels at 8x8
  std::vector<Tensor> taps = {rand_tensor(rng, {4, 8, 8, 8}), rand_tensor(rng, {4, 8, 8, 8})};
  Tensor beta = Tensor::from_values({2}, DType::f64, std::vector<double>{0.0, 0.0});
  Connector fs = identity_connector(ConnectorDirection::student_to_teacher, 1, 8, DType::f64);
  Rng crng(13);
  Connector ft = make_connector(ConnectorDirection::teacher_to_student, 1, 8, 8, DType::f64, crng);

  LossWeights w;
  w.gamma_st = 0.0;
  w.gamma_ts = 1.0;
  auto only_ts = bridge_loss(nullptr, 1, beta, taps, fs, ft, student, x, labels, w,
                             false, false);
  CHECK(only_ts.total.item() == only_ts.ts.item());

  w.gamma_st = 1e-3;
  auto both = bridge_loss(nullptr, 1, beta, taps, fs, ft, student, x, labels, w, false, false);
  CHECK(both.total.item() ==
        doctest::Approx(1e-3 * both.st.item() + both.ts.item()).epsilon(1e-12));
}

TEST_CASE("bridge loss with gamma_ts=0 and a matching student tap is zero") {
  GroupedNetwork student(small_student(), 24);
  Rng rng(14);
  Tensor x = rand_tensor(rng, {2, 3, 8, 8});
  auto labels = iota_labels(2, 5);

  // make the single teacher tap equal the student's own clamped tap
  auto part = student.forward_groups(nullptr, x, 1, false, false,
                                     GroupedNetwork::TapMode::last);
  std::vector<Tensor> taps = {part.taps[0].back().clone()};
  Tensor beta = Tensor::from_values({1}, DType::f64, std::vector<double>{3.7});
  Connector fs = identity_connector(ConnectorDirection::student_to_teacher, 1, 8, DType::f64);
  Connector ft = identity_connector(ConnectorDirection::teacher_to_student, 1, 8, DType::f64);

  LossWeights w;
  w.gamma_st = 1.0;
  w.gamma_ts = 0.0;
  auto parts = bridge_loss(nullptr, 1, beta, taps, fs, ft, student, x, labels, w, false, false);
  CHECK(parts.total.item() <= 1e-24);
}

TEST_CASE("student loss arithmetic and regularizer values") {
  Tensor ce = Tensor::scalar_value(DType::f64, 2.3);
  Tensor fd = Tensor::scalar_value(DType::f64, 0.5);
  CHECK(student_loss(nullptr, ce, fd, 1.0).item() == doctest::Approx(2.8));
  CHECK(student_loss(nullptr, ce, fd, 0.0).item() == doctest::Approx(2.3));

  std::vector<Tensor> betas = {
      Tensor::from_values({2}, DType::f64, std::vector<double>{1, -1})};
  CHECK(beta_regularizer(nullptr, betas, 1e-3).item() == doctest::Approx(2e-3).epsilon(1e-12));
  CHECK(beta_regularizer(nullptr, betas, 0.0).item() == 0.0);
}

TEST_CASE("gradient of the student loss w.r.t. beta flows only through distillation") {
  // d(ce + gamma_fd*fd)/dbeta must equal gamma_fd * d(fd)/dbeta elementwise.
  NetworkSpec tspec;
  tspec.groups = {{2, 8}, {2, 16}};
  tspec.classes = 5;
  tspec.input_size = 8;
  tspec.dtype = DType::f64;
  GroupedNetwork teacher(tspec, 31);
  GroupedNetwork student(small_student(), 32);
  Rng rng(15);
  Tensor x = rand_tensor(rng, {4, 3, 8, 8});
  auto labels = iota_labels(4, 5);
  const double gamma_fd = 0.37;

  teacher.set_requires_grad(false);
  auto tfwd = teacher.forward_with_taps(nullptr, x, false);

  Rng crng(16);
  std::vector<Connector> conns;
  for (int g = 1; g <= 2; ++g)
    conns.push_back(make_connector(ConnectorDirection::student_to_teacher, g,
                                   student.group_channels(g), teacher.group_channels(g),
                                   DType::f64, crng));

  auto beta_grads = [&](bool with_ce) {
    std::vector<Tensor> betas = {
        Tensor::from_values({2}, DType::f64, std::vector<double>{0.3, -0.2}),
        Tensor::from_values({2}, DType::f64, std::vector<double>{-1.0, 0.5})};
    for (auto& b : betas) b.set_requires_grad(true);
    Tape tape;
    std::vector<Tensor> alphas;
    for (auto& b : betas) alphas.push_back(ops::softmax(&tape, b));
    auto sfwd = student.forward_with_taps(&tape, x, false, false,
                                          GroupedNetwork::TapMode::last);
    std::vector<Tensor> last_taps;
    for (auto& g : sfwd.taps) last_taps.push_back(g.back());
    Tensor fd = feature_distill_loss(&tape, tfwd.taps, alphas, last_taps, conns,
                                     DistillMode::aggregated);
    Tensor loss = with_ce
                      ? student_loss(&tape, cross_entropy(&tape, sfwd.logits, labels), fd,
                                     gamma_fd)
                      : fd;
    tape.backward(loss);
    std::vector<double> grads;
    for (auto& b : betas)
      for (int64_t i = 0; i < b.numel(); ++i) grads.push_back(b.grad_at(i));
    return grads;
  };

  auto full = beta_grads(true);
  auto fd_only = beta_grads(false);
  REQUIRE(full.size() == fd_only.size());
  for (size_t i = 0; i < full.size(); ++i)
    CHECK(std::abs(full[i] - gamma_fd * fd_only[i]) <= 1e-10);
}

TEST_CASE("bridge loss is differentiable w.r.t. beta (finite differences)") {
  GroupedNetwork student(small_student(), 41);
  Rng rng(17);
  Tensor x = rand_tensor(rng, {2, 3, 8, 8});
  auto labels = iota_labels(2, 5);
  std::vector<Tensor> taps = {rand_tensor(rng, {2, 8, 8, 8}), rand_tensor(rng, {2, 8, 8, 8})};
  Rng crng(18);
  Connector fs = make_connector(ConnectorDirection::student_to_teacher, 1, 8, 8, DType::f64, crng);
  Connector ft = make_connector(ConnectorDirection::teacher_to_student, 1, 8, 8, DType::f64, crng);
  LossWeights w;

  Tensor beta = Tensor::from_values({2}, DType::f64, std::vector<double>{0.4, -0.1});
  beta.set_requires_grad(true);
  student.set_requires_grad(false);
  Tape tape;
  auto parts = bridge_loss(&tape, 1, beta, taps, fs, ft, student, x, labels, w, false, false);
  tape.backward(parts.total);

  const double h = 1e-5;
  for (int64_t i = 0; i < 2; ++i) {
    const double orig = beta.value_at(i);
    beta.set_value_at(i, orig + h);
    const double up = bridge_loss(nullptr, 1, beta, taps, fs, ft, student, x, labels, w,
                                  false, false).total.item();
    beta.set_value_at(i, orig - h);
    const double dn = bridge_loss(nullptr, 1, beta, taps, fs, ft, student, x, labels, w,
                                  false, false).total.item();
    beta.set_value_at(i, orig);
    const double numeric = (up - dn) / (2 * h);
    const double analytic = beta.grad_at(i);
    CHECK(std::abs(numeric - analytic) <=
          1e-4 * std::max({std::abs(numeric), std::abs(analytic), 1e-7}));
  }
}
