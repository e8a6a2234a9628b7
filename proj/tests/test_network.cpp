#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "dfa/network.hpp"

using namespace dfa;

namespace {

NetworkSpec toy_teacher_spec() {
  NetworkSpec s;
  s.groups = {{3, 16}, {3, 32}, {3, 64}};
  s.classes = 10;
  s.input_size = 8;
  s.dtype = DType::f64;
  return s;
}

NetworkSpec toy_student_spec() {
  NetworkSpec s;
  s.groups = {{1, 8}, {1, 16}, {1, 32}};
  s.classes = 10;
  s.input_size = 8;
  s.dtype = DType::f64;
  return s;
}

Tensor rand_batch(Rng& rng, int64_t n, int64_t c, int64_t hw) {
  Tensor x = Tensor::zeros({n, c, hw, hw}, DType::f64);
  for (int64_t i = 0; i < x.numel(); ++i) x.set_value_at(i, rng.uniform(-1, 1));
  return x;
}

// Closed-form count for the pre-activation architecture: each block holds
// bn(2*c_in) + conv1(c_out*c_in*9) and, for residual blocks, bn2(2*c_out) +
// conv2(c_out^2*9) + a 1x1 projection when the shape changes.
int64_t expected_param_count(const NetworkSpec& s) {
  int64_t total = int64_t(s.input_channels) * s.stem_out() * 9;  // stem
  int in_ch = s.stem_out();
  for (size_t gi = 0; gi < s.groups.size(); ++gi) {
    const auto& g = s.groups[gi];
    for (int bi = 0; bi < g.num_layers; ++bi) {
      const int out_ch = g.channels;
      const bool strided = bi == 0 && gi > 0;
      total += 2 * in_ch;                      // bn1
      total += int64_t(out_ch) * in_ch * 9;    // conv1
      if (s.block == BlockKind::basic_residual) {
        total += 2 * out_ch;                   // bn2
        total += int64_t(out_ch) * out_ch * 9; // conv2
        if (strided || in_ch != out_ch) total += int64_t(out_ch) * in_ch;  // skip
      }
      in_ch = out_ch;
    }
  }
  total += 2 * s.groups.back().channels;                        // head bn
  total += int64_t(s.groups.back().channels) * s.classes + s.classes;  // fc
  return total;
}

}  // namespace

TEST_CASE("parameter count matches the closed-form formula") {
  GroupedNetwork teacher(toy_teacher_spec(), 1);
  CHECK(teacher.param_count() == expected_param_count(toy_teacher_spec()));

  NetworkSpec plain = toy_teacher_spec();
  plain.block = BlockKind::plain_conv;
  GroupedNetwork pnet(plain, 1);
  CHECK(pnet.param_count() == expected_param_count(plain));
}

TEST_CASE("student with halved channels has fewer parameters than teacher") {
  GroupedNetwork teacher(toy_teacher_spec(), 1);
  GroupedNetwork student(toy_student_spec(), 2);
  CHECK(student.param_count() < teacher.param_count());
}

TEST_CASE("taps have the right shapes and counts") {
  GroupedNetwork teacher(toy_teacher_spec(), 3);
  Rng rng(4);
  Tensor x = rand_batch(rng, 4, 3, 8);
  auto fwd = teacher.forward_with_taps(nullptr, x, false);
  REQUIRE(fwd.taps.size() == 3);
  const Shape want[] = {{4, 16, 8, 8}, {4, 32, 4, 4}, {4, 64, 2, 2}};
  for (int g = 0; g < 3; ++g) {
    CHECK(fwd.taps[g].size() == 3);  // N_i taps per group
    for (const auto& t : fwd.taps[g]) CHECK(t.shape() == want[g]);
  }
  CHECK(fwd.logits.shape() == Shape{4, 10});
}

TEST_CASE("every tap value is floored at -1 exactly") {
  GroupedNetwork teacher(toy_teacher_spec(), 5);
  Rng rng(6);
  Tensor x = rand_batch(rng, 2, 3, 8);
  auto fwd = teacher.forward_with_taps(nullptr, x, true);
  double lo = 0;
  for (auto& group : fwd.taps)
    for (auto& t : group)
      for (int64_t i = 0; i < t.numel(); ++i) lo = std::min(lo, t.value_at(i));
  CHECK(lo >= -1.0);
}

TEST_CASE("eval forward is deterministic and does not touch stats") {
  GroupedNetwork net(toy_student_spec(), 7);
  Rng rng(8);
  Tensor x = rand_batch(rng, 3, 3, 8);
  const uint64_t stats0 = net.stats_checksum();
  auto a = net.forward_with_taps(nullptr, x, false);
  auto b = net.forward_with_taps(nullptr, x, false);
  CHECK(a.logits.checksum() == b.logits.checksum());
  for (size_t g = 0; g < a.taps.size(); ++g)
    for (size_t i = 0; i < a.taps[g].size(); ++i)
      CHECK(a.taps[g][i].checksum() == b.taps[g][i].checksum());
  CHECK(net.stats_checksum() == stats0);

  // training mode with stat updates changes them
  net.forward_with_taps(nullptr, x, true);
  CHECK(net.stats_checksum() != stats0);
}

TEST_CASE("forward_from_group reproduces the full forward at both ends") {
  GroupedNetwork net(toy_student_spec(), 9);
  Rng rng(10);
  Tensor x = rand_batch(rng, 2, 3, 8);

  auto full = net.forward_with_taps(nullptr, x, false);

  Tensor stem_out = net.stem(nullptr, x);
  Tensor from1 = net.forward_from_group(nullptr, stem_out, 1, false, false);
  CHECK(from1.checksum() == full.logits.checksum());

  auto part = net.forward_groups(nullptr, x, net.num_groups(), false, false,
                                 GroupedNetwork::TapMode::none);
  Tensor fromHead = net.forward_from_group(nullptr, part.output, net.num_groups() + 1,
                                           false, false);
  CHECK(fromHead.checksum() == full.logits.checksum());

  // intermediate entry produces well-shaped logits
  auto upto = net.forward_groups(nullptr, x, net.num_groups() - 1, false, false,
                                 GroupedNetwork::TapMode::none);
  Tensor mid = net.forward_from_group(nullptr, upto.output, net.num_groups(), false, false);
  CHECK(mid.shape() == Shape{2, 10});

  CHECK_THROWS_AS(net.forward_from_group(nullptr, stem_out, net.num_groups() + 1, false, false),
                  ShapeError);
}

TEST_CASE("group alignment check") {
  GroupedNetwork teacher(toy_teacher_spec(), 1);
  GroupedNetwork student(toy_student_spec(), 2);
  CHECK_NOTHROW(check_group_alignment(teacher, student));

  NetworkSpec bad = toy_student_spec();
  bad.input_size = 16;
  GroupedNetwork mismatched(bad, 3);
  CHECK_THROWS_AS(check_group_alignment(teacher, mismatched), ConfigError);
}

TEST_CASE("identity connector passes tensors through unchanged") {
  Connector conn = identity_connector(ConnectorDirection::teacher_to_student, 1, 8, DType::f64);
  Rng rng(11);
  Tensor x = rand_batch(rng, 4, 8, 8);
  Tensor y = apply_connector(nullptr, conn, x);
  CHECK(y.checksum() == x.checksum());
}

TEST_CASE("connector maps channel count and keeps spatial size") {
  Rng rng(12);
  Connector conn = make_connector(ConnectorDirection::student_to_teacher, 1, 8, 16,
                                  DType::f64, rng);
  Tensor x = rand_batch(rng, 4, 8, 8);
  Tensor y = apply_connector(nullptr, conn, x);
  CHECK(y.shape() == Shape{4, 16, 8, 8});

  Tensor wrong = rand_batch(rng, 4, 5, 8);
  CHECK_THROWS_AS(apply_connector(nullptr, conn, wrong), ShapeError);

  Connector zero = conn;
  zero.weight = Tensor::zeros(conn.weight.shape(), DType::f64);
  Tensor z = apply_connector(nullptr, zero, x);
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.value_at(i) == 0.0);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  NetworkSpec spec = toy_student_spec();
  GroupedNetwork net(spec, 13);
  Rng rng(14);
  Tensor x = rand_batch(rng, 2, 3, 8);
  net.forward_with_taps(nullptr, x, true);  // move stats off their init values

  const uint64_t psum = net.params_checksum();
  const uint64_t ssum = net.stats_checksum();
  const std::string path = "test_ckpt_roundtrip.bin";
  save_checkpoint(net, path, 13, 42);

  CheckpointMeta meta;
  GroupedNetwork back = load_checkpoint(path, &meta);
  CHECK(meta.seed == 13);
  CHECK(meta.training_step == 42);
  CHECK(back.params_checksum() == psum);
  CHECK(back.stats_checksum() == ssum);

  auto a = net.forward_with_taps(nullptr, x, false);
  auto b = back.forward_with_taps(nullptr, x, false);
  CHECK(a.logits.checksum() == b.logits.checksum());
  std::remove(path.c_str());
}
