#pragma once

// Teacher/student classifier networks partitioned into layer groups. A group
// is a run of blocks sharing one spatial resolution; groups after the first
// open with a stride-2 block. Blocks are pre-activation (BN -> ReLU -> conv),
// so the signal at each block's end is pre-ReLU; that is where feature taps
// are extracted, floored at -1. The clamp happens on the tap branch only —
// the classification path continues with the unclamped value.

#include <optional>
#include <string>
#include <vector>

#include "dfa/ops.hpp"
#include "dfa/optim.hpp"
#include "dfa/tensor.hpp"

namespace dfa {

enum class BlockKind { basic_residual, plain_conv };

const char* block_kind_name(BlockKind k);
BlockKind block_kind_from_name(std::string_view name);

struct GroupSpec {
  int num_layers = 1;  // blocks in this group
  int channels = 16;
};

struct NetworkSpec {
  std::vector<GroupSpec> groups;
  BlockKind block = BlockKind::basic_residual;
  int classes = 10;
  int input_channels = 3;
  int input_size = 16;    // square inputs
  int stem_channels = 0;  // 0: use groups[0].channels
  DType dtype = DType::f64;

  int stem_out() const { return stem_channels > 0 ? stem_channels : groups.front().channels; }
};

constexpr double kTapFloor = -1.0;

class GroupedNetwork {
 public:
  enum class TapMode { none, last, all };

  struct Forward {
    Tensor logits;
    std::vector<std::vector<Tensor>> taps;  // taps[i] for group i (0-based)
  };

  struct Partial {
    Tensor output;  // last computed group output (pre-ReLU, unclamped)
    std::vector<std::vector<Tensor>> taps;
  };

  // Builds with He-initialized convolutions (fan-in), batchnorm scale 1 /
  // shift 0, zero classifier bias, all drawn from `seed`.
  GroupedNetwork(NetworkSpec spec, uint64_t seed);

  GroupedNetwork(const GroupedNetwork&) = delete;
  GroupedNetwork& operator=(const GroupedNetwork&) = delete;
  GroupedNetwork(GroupedNetwork&&) = default;
  GroupedNetwork& operator=(GroupedNetwork&&) = default;

  const NetworkSpec& spec() const { return spec_; }
  int num_groups() const { return static_cast<int>(spec_.groups.size()); }
  int group_channels(int group) const;  // 1-based
  int group_spatial(int group) const;   // 1-based; group_spatial(0) = stem
  int classes() const { return spec_.classes; }

  Forward forward_with_taps(Tape* tape, const Tensor& x, bool training);
  Forward forward_with_taps(Tape* tape, const Tensor& x, bool training,
                            bool update_stats, TapMode mode);
  // Stem + groups 1..upto (inclusive); used by the search paths.
  Partial forward_groups(Tape* tape, const Tensor& x, int upto, bool training,
                         bool update_stats, TapMode mode);
  // Runs groups start_group..G and the classifier head on an injected tensor
  // shaped like the output of group start_group-1 (start_group = G+1 feeds
  // the head directly; start_group = 1 expects a stem output).
  Tensor forward_from_group(Tape* tape, const Tensor& injected, int start_group,
                            bool training, bool update_stats);
  Tensor stem(Tape* tape, const Tensor& x);

  ParamList params();  // trainable parameters, stable order
  ParamList state();   // batchnorm running stats
  void set_requires_grad(bool v);
  int64_t param_count();
  uint64_t params_checksum();
  uint64_t stats_checksum();

 private:
  struct BnLayer {
    Tensor gamma, beta, rmean, rvar;
  };
  struct Block {
    BnLayer bn1;
    Tensor conv1;
    BnLayer bn2;               // residual blocks only
    Tensor conv2;              // residual blocks only
    std::optional<Tensor> skip;  // 1x1 projection when shape changes
    int stride = 1;
  };
  struct Group {
    std::vector<Block> blocks;
  };

  Tensor run_bn(Tape* tape, BnLayer& bn, const Tensor& x, bool training, bool update) const;
  Tensor run_block(Tape* tape, Block& blk, const Tensor& x, bool training, bool update) const;
  Tensor run_group(Tape* tape, int gi, const Tensor& x, bool training, bool update,
                   TapMode mode, std::vector<Tensor>* taps);
  Tensor run_head(Tape* tape, const Tensor& x, bool training, bool update);

  NetworkSpec spec_;
  Tensor stem_w_;
  std::vector<Group> groups_;
  BnLayer head_bn_;
  Tensor fc_w_, fc_b_;
  std::vector<int> spatial_;  // [0]=stem/group1 input size, [i]=group i spatial
};

// Teacher and student must agree on group count and per-group spatial size.
void check_group_alignment(const GroupedNetwork& teacher, const GroupedNetwork& student);

// ---------------------------------------------------------------------------
// 1x1 channel-mapping connectors
// ---------------------------------------------------------------------------
enum class ConnectorDirection { student_to_teacher, teacher_to_student };

struct Connector {
  ConnectorDirection direction;
  int group_index = 1;  // 1-based
  Tensor weight;        // (c_out, c_in, 1, 1)
};

Connector make_connector(ConnectorDirection dir, int group_index, int in_channels,
                         int out_channels, DType dt, Rng& rng);
// Square identity mapping; test helper.
Connector identity_connector(ConnectorDirection dir, int group_index, int channels, DType dt);
Tensor apply_connector(Tape* tape, const Connector& conn, const Tensor& x);
std::string connector_param_name(const Connector& conn);

// ---------------------------------------------------------------------------
// Checkpoints: manifest (JSON text) + raw little-endian parameter blobs.
// Round-trips are bit-exact for matching dtype.
// ---------------------------------------------------------------------------
struct CheckpointMeta {
  int schema_version = 1;
  uint64_t seed = 0;
  int64_t training_step = 0;
  NetworkSpec spec;
};

void save_checkpoint(GroupedNetwork& net, const std::string& path, uint64_t seed,
                     int64_t training_step);
// Rebuilds the network from the stored spec and restores every tensor.
// `override_dtype`, when set, converts parameters on load.
GroupedNetwork load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr,
                               std::optional<DType> override_dtype = std::nullopt);

}  // namespace dfa
