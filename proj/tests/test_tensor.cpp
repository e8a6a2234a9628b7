#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dfa/gradcheck.hpp"
#include "dfa/ops.hpp"

using namespace dfa;

namespace {

Tensor vec64(std::initializer_list<double> vals) {
  std::vector<double> v(vals);
  return Tensor::from_values({static_cast<int64_t>(v.size())}, DType::f64, v);
}

}  // namespace

TEST_CASE("relu clamps negatives to zero") {
  Tensor y = ops::relu(nullptr, vec64({-2, 0, 3}));
  CHECK(y.to_vector() == std::vector<double>{0, 0, 3});
}

TEST_CASE("clamp_min floors at the threshold") {
  Tensor y = ops::clamp_min(nullptr, vec64({-2, -0.5, 3}), -1.0);
  CHECK(y.to_vector() == std::vector<double>{-1, -0.5, 3});
}

TEST_CASE("clamp_min is idempotent, exactly") {
  Rng rng(5);
  std::vector<double> vals(257);
  for (auto& v : vals) v = rng.uniform(-3, 3);
  Tensor x = Tensor::from_values({257}, DType::f64, vals);
  Tensor once = ops::clamp_min(nullptr, x, -1.0);
  Tensor twice = ops::clamp_min(nullptr, once, -1.0);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(once.value_at(i) == twice.value_at(i));
}

TEST_CASE("softmax of equal logits is uniform") {
  Tensor y = ops::softmax(nullptr, vec64({0, 0, 0}));
  for (int64_t i = 0; i < 3; ++i) CHECK(y.value_at(i) == doctest::Approx(1.0 / 3).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one and shift-invariance holds") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t r = rng.uniform_int(1, 4), c = rng.uniform_int(2, 9);
    std::vector<double> vals(static_cast<size_t>(r * c));
    for (auto& v : vals) v = rng.uniform(-30, 30);  // beta values are unbounded
    Tensor x = Tensor::from_values({r, c}, DType::f64, vals);
    Tensor y = ops::softmax(nullptr, x);
    for (int64_t i = 0; i < r; ++i) {
      double s = 0;
      for (int64_t j = 0; j < c; ++j) s += y.value_at(i * c + j);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    const double shift = rng.uniform(-50, 50);
    for (auto& v : vals) v += shift;
    Tensor y2 = ops::softmax(nullptr, Tensor::from_values({r, c}, DType::f64, vals));
    for (int64_t i = 0; i < r * c; ++i)
      CHECK(std::abs(y.value_at(i) - y2.value_at(i)) <= 1e-10);
  }
}

TEST_CASE("backward: d/dx sum of squares is 2x") {
  Tensor x = vec64({1, 2}).set_requires_grad(true);
  Tape tape;
  Tensor loss = ops::sum_squares(&tape, x);
  tape.backward(loss);
  CHECK(x.grad_at(0) == doctest::Approx(2.0));
  CHECK(x.grad_at(1) == doctest::Approx(4.0));
}

TEST_CASE("backward: mean of relu uses the relu subgradient") {
  Tensor x = vec64({-1, 1}).set_requires_grad(true);
  Tape tape;
  Tensor loss = ops::mean(&tape, ops::relu(&tape, x));
  tape.backward(loss);
  CHECK(x.grad_at(0) == 0.0);
  CHECK(x.grad_at(1) == doctest::Approx(0.5));
}

TEST_CASE("backward accumulates additively across fan-out") {
  Tensor x = vec64({3}).set_requires_grad(true);
  Tape tape;
  Tensor loss = ops::mean(&tape, ops::add(&tape, x, x));
  tape.backward(loss);
  CHECK(x.grad_at(0) == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar and off-tape roots") {
  Tensor x = vec64({1, 2}).set_requires_grad(true);
  Tape tape;
  Tensor y = ops::relu(&tape, x);
  CHECK_THROWS_AS(tape.backward(y), NumericError);  // not scalar
  Tensor stray = Tensor::scalar_value(DType::f64, 1.0);
  CHECK_THROWS_AS(tape.backward(stray), NumericError);  // not on tape
  Tape other;
  Tensor z = ops::mean(&other, ops::relu(&other, x));
  CHECK_THROWS_AS(tape.backward(z), NumericError);  // wrong tape
}

TEST_CASE("shape errors name the op and both shapes") {
  Tensor a = Tensor::zeros({2, 3}, DType::f64);
  Tensor b = Tensor::zeros({4, 2}, DType::f64);
  try {
    ops::matmul(nullptr, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("non-finite outputs raise a numeric error") {
  Tensor big = Tensor::full({4}, DType::f64, 1e308);
  CHECK_THROWS_AS(ops::add(nullptr, big, big), NumericError);
  Tensor z = Tensor::zeros({2, 3}, DType::f64);
  CHECK_THROWS_AS(ops::l2_normalize_rows(nullptr, z), NumericError);
}

TEST_CASE("batchnorm updates running stats only when asked") {
  Rng rng(3);
  std::vector<double> vals(2 * 3 * 4 * 4);
  for (auto& v : vals) v = rng.uniform(-1, 1);
  Tensor x = Tensor::from_values({2, 3, 4, 4}, DType::f64, vals);
  Tensor gamma = Tensor::full({3}, DType::f64, 1.0);
  Tensor beta = Tensor::zeros({3}, DType::f64);
  Tensor rm = Tensor::zeros({3}, DType::f64);
  Tensor rv = Tensor::full({3}, DType::f64, 1.0);
  const uint64_t before = rm.checksum() ^ rv.checksum();

  ops::batchnorm2d(nullptr, x, gamma, beta, rm, rv, true, false);
  CHECK((rm.checksum() ^ rv.checksum()) == before);
  ops::batchnorm2d(nullptr, x, gamma, beta, rm, rv, false, false);
  CHECK((rm.checksum() ^ rv.checksum()) == before);
  ops::batchnorm2d(nullptr, x, gamma, beta, rm, rv, true, true);
  CHECK((rm.checksum() ^ rv.checksum()) != before);
}

TEST_CASE("eval-mode batchnorm with identity stats is the identity") {
  Tensor x = Tensor::from_values({1, 1, 2, 2}, DType::f64, std::vector<double>{1, -2, 3, 0.5});
  Tensor gamma = Tensor::full({1}, DType::f64, 1.0);
  Tensor beta = Tensor::zeros({1}, DType::f64);
  Tensor rm = Tensor::zeros({1}, DType::f64);
  Tensor rv = Tensor::full({1}, DType::f64, 1.0);
  Tensor y = ops::batchnorm2d(nullptr, x, gamma, beta, rm, rv, false, false, 0.1, 0.0);
  for (int64_t i = 0; i < 4; ++i)
    CHECK(y.value_at(i) == doctest::Approx(x.value_at(i)).epsilon(1e-12));
}

TEST_CASE("forward_op dispatches the full core op set") {
  Tensor x = Tensor::from_values({2, 2}, DType::f64, std::vector<double>{1, -1, 2, 0});
  ops::OpAttrs attrs;
  CHECK(ops::forward_op(nullptr, "relu", std::vector<Tensor>{x}).value_at(1) == 0.0);
  attrs.factor = 2.0;
  CHECK(ops::forward_op(nullptr, "scale", std::vector<Tensor>{x}, attrs).value_at(0) == 2.0);
  attrs.target_shape = {4};
  CHECK(ops::forward_op(nullptr, "reshape", std::vector<Tensor>{x}, attrs).shape() == Shape{4});
  CHECK_THROWS_AS(ops::forward_op(nullptr, "no_such_op", std::vector<Tensor>{x}), ShapeError);
}

TEST_CASE("gradient oracle: analytic gradients match central differences") {
  GradCheckReport report = run_gradcheck(/*seed=*/42, /*tol=*/1e-4, /*rounds=*/2);
  INFO("max relative error ", report.max_rel_err);
  for (const auto& c : report.cases) {
    INFO(c.name, " err=", c.max_rel_err);
    CHECK(c.pass);
  }
  CHECK(report.pass);
  CHECK(report.max_rel_err <= 1e-4);
}
