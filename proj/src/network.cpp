#include "dfa/network.hpp"

#include <fstream>

#include <json.hpp>

namespace dfa {

using nlohmann::json;

const char* block_kind_name(BlockKind k) {
  return k == BlockKind::basic_residual ? "basic-residual" : "plain-conv";
}

BlockKind block_kind_from_name(std::string_view name) {
  if (name == "basic-residual") return BlockKind::basic_residual;
  if (name == "plain-conv") return BlockKind::plain_conv;
  throw ConfigError("unknown block kind: " + std::string(name));
}

namespace {

Tensor he_conv(Rng& rng, int64_t cout, int64_t cin, int64_t kh, int64_t kw, DType dt) {
  Tensor w = Tensor::zeros({cout, cin, kh, kw}, dt);
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * kh * kw));
  for (int64_t i = 0; i < w.numel(); ++i) w.set_value_at(i, rng.normal(0.0, stddev));
  return w;
}

Tensor he_linear(Rng& rng, int64_t in, int64_t out, DType dt) {
  Tensor w = Tensor::zeros({in, out}, dt);
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  for (int64_t i = 0; i < w.numel(); ++i) w.set_value_at(i, rng.normal(0.0, stddev));
  return w;
}

}  // namespace

GroupedNetwork::GroupedNetwork(NetworkSpec spec, uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.groups.empty()) throw ConfigError("network spec has no groups");
  for (const auto& g : spec_.groups)
    if (g.num_layers < 1 || g.channels < 1)
      throw ConfigError("network spec: group sizes and channels must be positive");

  const DType dt = spec_.dtype;
  Rng rng = Rng::stream(seed, "network-init");

  auto make_bn = [&](int64_t c) {
    BnLayer bn;
    bn.gamma = Tensor::full({c}, dt, 1.0);
    bn.beta = Tensor::zeros({c}, dt);
    bn.rmean = Tensor::zeros({c}, dt);
    bn.rvar = Tensor::full({c}, dt, 1.0);
    return bn;
  };

  stem_w_ = he_conv(rng, spec_.stem_out(), spec_.input_channels, 3, 3, dt);

  spatial_.resize(spec_.groups.size() + 1);
  spatial_[0] = spec_.input_size;
  int in_ch = spec_.stem_out();
  for (size_t gi = 0; gi < spec_.groups.size(); ++gi) {
    const auto& gs = spec_.groups[gi];
    spatial_[gi + 1] = gi == 0 ? spatial_[gi] : (spatial_[gi] + 1) / 2;
    Group group;
    for (int bi = 0; bi < gs.num_layers; ++bi) {
      Block blk;
      blk.stride = (bi == 0 && gi > 0) ? 2 : 1;
      const int out_ch = gs.channels;
      blk.bn1 = make_bn(in_ch);
      blk.conv1 = he_conv(rng, out_ch, in_ch, 3, 3, dt);
      if (spec_.block == BlockKind::basic_residual) {
        blk.bn2 = make_bn(out_ch);
        blk.conv2 = he_conv(rng, out_ch, out_ch, 3, 3, dt);
        if (blk.stride != 1 || in_ch != out_ch)
          blk.skip = he_conv(rng, out_ch, in_ch, 1, 1, dt);
      }
      group.blocks.push_back(std::move(blk));
      in_ch = out_ch;
    }
    groups_.push_back(std::move(group));
  }

  head_bn_ = make_bn(spec_.groups.back().channels);
  fc_w_ = he_linear(rng, spec_.groups.back().channels, spec_.classes, dt);
  fc_b_ = Tensor::zeros({spec_.classes}, dt);
}

int GroupedNetwork::group_channels(int group) const {
  return spec_.groups[static_cast<size_t>(group - 1)].channels;
}

int GroupedNetwork::group_spatial(int group) const {
  return spatial_[static_cast<size_t>(group)];
}

Tensor GroupedNetwork::run_bn(Tape* tape, BnLayer& bn, const Tensor& x, bool training,
                              bool update) const {
  return ops::batchnorm2d(tape, x, bn.gamma, bn.beta, bn.rmean, bn.rvar, training,
                          training && update);
}

Tensor GroupedNetwork::run_block(Tape* tape, Block& blk, const Tensor& x, bool training,
                                 bool update) const {
  ops::Conv2dAttrs first{blk.stride, ops::Padding::same};
  Tensor a = ops::relu(tape, run_bn(tape, blk.bn1, x, training, update));
  Tensor h = ops::conv2d(tape, a, blk.conv1, first);
  if (spec_.block == BlockKind::plain_conv) return h;
  h = ops::conv2d(tape, ops::relu(tape, run_bn(tape, blk.bn2, h, training, update)), blk.conv2);
  Tensor skip = blk.skip ? ops::conv2d(tape, a, *blk.skip, first) : x;
  return ops::add(tape, h, skip);
}

Tensor GroupedNetwork::run_group(Tape* tape, int gi, const Tensor& x, bool training,
                                 bool update, TapMode mode, std::vector<Tensor>* taps) {
  Tensor h = x;
  auto& blocks = groups_[static_cast<size_t>(gi)].blocks;
  for (size_t bi = 0; bi < blocks.size(); ++bi) {
    h = run_block(tape, blocks[bi], h, training, update);
    const bool want = mode == TapMode::all || (mode == TapMode::last && bi + 1 == blocks.size());
    if (want && taps) taps->push_back(ops::clamp_min(tape, h, kTapFloor));
  }
  return h;
}

Tensor GroupedNetwork::run_head(Tape* tape, const Tensor& x, bool training, bool update) {
  Tensor a = ops::relu(tape, run_bn(tape, head_bn_, x, training, update));
  Tensor pooled = ops::avgpool(tape, a);
  return ops::add_bias(tape, ops::matmul(tape, pooled, fc_w_), fc_b_);
}

Tensor GroupedNetwork::stem(Tape* tape, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) != spec_.input_channels || x.dim(2) != spec_.input_size ||
      x.dim(3) != spec_.input_size)
    shape_fail("network", "input " + shape_str(x.shape()) + " does not match stem (" +
                              std::to_string(spec_.input_channels) + "," +
                              std::to_string(spec_.input_size) + "," +
                              std::to_string(spec_.input_size) + ")");
  return ops::conv2d(tape, x, stem_w_);
}

GroupedNetwork::Forward GroupedNetwork::forward_with_taps(Tape* tape, const Tensor& x,
                                                          bool training) {
  return forward_with_taps(tape, x, training, training, TapMode::all);
}

GroupedNetwork::Forward GroupedNetwork::forward_with_taps(Tape* tape, const Tensor& x,
                                                          bool training, bool update_stats,
                                                          TapMode mode) {
  Partial part = forward_groups(tape, x, num_groups(), training, update_stats, mode);
  Forward fwd;
  fwd.taps = std::move(part.taps);
  fwd.logits = run_head(tape, part.output, training, update_stats);
  return fwd;
}

GroupedNetwork::Partial GroupedNetwork::forward_groups(Tape* tape, const Tensor& x, int upto,
                                                       bool training, bool update_stats,
                                                       TapMode mode) {
  Partial part;
  Tensor h = stem(tape, x);
  for (int gi = 0; gi < upto; ++gi) {
    std::vector<Tensor> taps;
    h = run_group(tape, gi, h, training, update_stats, mode, &taps);
    part.taps.push_back(std::move(taps));
  }
  part.output = h;
  return part;
}

Tensor GroupedNetwork::forward_from_group(Tape* tape, const Tensor& injected, int start_group,
                                          bool training, bool update_stats) {
  const int G = num_groups();
  if (start_group < 1 || start_group > G + 1)
    shape_fail("forward_from_group", "start_group " + std::to_string(start_group) +
                                         " out of range [1," + std::to_string(G + 1) + "]");
  const int prev = start_group - 1;
  const int64_t want_ch = prev == 0 ? spec_.stem_out() : group_channels(prev);
  const int64_t want_sp = group_spatial(prev);
  if (injected.ndim() != 4 || injected.dim(1) != want_ch || injected.dim(2) != want_sp ||
      injected.dim(3) != want_sp)
    shape_fail("forward_from_group",
               "injected " + shape_str(injected.shape()) + " does not match group " +
                   std::to_string(start_group) + " input (" + std::to_string(want_ch) + "," +
                   std::to_string(want_sp) + "," + std::to_string(want_sp) + ")");
  Tensor h = injected;
  for (int gi = start_group - 1; gi < G; ++gi)
    h = run_group(tape, gi, h, training, update_stats, TapMode::none, nullptr);
  return run_head(tape, h, training, update_stats);
}

ParamList GroupedNetwork::params() {
  ParamList out;
  out.push_back({"stem.w", stem_w_});
  for (size_t gi = 0; gi < groups_.size(); ++gi) {
    for (size_t bi = 0; bi < groups_[gi].blocks.size(); ++bi) {
      auto& blk = groups_[gi].blocks[bi];
      const std::string p = "g" + std::to_string(gi + 1) + ".b" + std::to_string(bi) + ".";
      out.push_back({p + "bn1.gamma", blk.bn1.gamma});
      out.push_back({p + "bn1.beta", blk.bn1.beta});
      out.push_back({p + "conv1.w", blk.conv1});
      if (spec_.block == BlockKind::basic_residual) {
        out.push_back({p + "bn2.gamma", blk.bn2.gamma});
        out.push_back({p + "bn2.beta", blk.bn2.beta});
        out.push_back({p + "conv2.w", blk.conv2});
        if (blk.skip) out.push_back({p + "skip.w", *blk.skip});
      }
    }
  }
  out.push_back({"head.bn.gamma", head_bn_.gamma});
  out.push_back({"head.bn.beta", head_bn_.beta});
  out.push_back({"head.fc.w", fc_w_});
  out.push_back({"head.fc.b", fc_b_});
  return out;
}

ParamList GroupedNetwork::state() {
  ParamList out;
  auto push_bn = [&](const std::string& p, BnLayer& bn) {
    out.push_back({p + ".rmean", bn.rmean});
    out.push_back({p + ".rvar", bn.rvar});
  };
  for (size_t gi = 0; gi < groups_.size(); ++gi)
    for (size_t bi = 0; bi < groups_[gi].blocks.size(); ++bi) {
      auto& blk = groups_[gi].blocks[bi];
      const std::string p = "g" + std::to_string(gi + 1) + ".b" + std::to_string(bi);
      push_bn(p + ".bn1", blk.bn1);
      if (spec_.block == BlockKind::basic_residual) push_bn(p + ".bn2", blk.bn2);
    }
  push_bn("head.bn", head_bn_);
  return out;
}

void GroupedNetwork::set_requires_grad(bool v) {
  for (auto& p : params()) p.tensor.set_requires_grad(v);
}

int64_t GroupedNetwork::param_count() {
  int64_t n = 0;
  for (auto& p : params()) n += p.tensor.numel();
  return n;
}

uint64_t GroupedNetwork::params_checksum() {
  uint64_t h = kFnvOffset;
  for (auto& p : params()) h = fnv1a64(p.tensor.raw_bytes(), h);
  return h;
}

uint64_t GroupedNetwork::stats_checksum() {
  uint64_t h = kFnvOffset;
  for (auto& p : state()) h = fnv1a64(p.tensor.raw_bytes(), h);
  return h;
}

void check_group_alignment(const GroupedNetwork& teacher, const GroupedNetwork& student) {
  if (teacher.num_groups() != student.num_groups())
    throw ConfigError("teacher and student must have the same number of layer groups (" +
                      std::to_string(teacher.num_groups()) + " vs " +
                      std::to_string(student.num_groups()) + ")");
  for (int g = 1; g <= teacher.num_groups(); ++g)
    if (teacher.group_spatial(g) != student.group_spatial(g))
      throw ConfigError("group " + std::to_string(g) + " spatial size differs: teacher " +
                        std::to_string(teacher.group_spatial(g)) + " vs student " +
                        std::to_string(student.group_spatial(g)));
}

// ---------------------------------------------------------------------------
// connectors
// ---------------------------------------------------------------------------
Connector make_connector(ConnectorDirection dir, int group_index, int in_channels,
                         int out_channels, DType dt, Rng& rng) {
  Connector c;
  c.direction = dir;
  c.group_index = group_index;
  c.weight = he_conv(rng, out_channels, in_channels, 1, 1, dt);
  return c;
}

Connector identity_connector(ConnectorDirection dir, int group_index, int channels, DType dt) {
  Connector c;
  c.direction = dir;
  c.group_index = group_index;
  c.weight = Tensor::zeros({channels, channels, 1, 1}, dt);
  for (int64_t i = 0; i < channels; ++i) c.weight.set_value_at(i * channels + i, 1.0);
  return c;
}

Tensor apply_connector(Tape* tape, const Connector& conn, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) != conn.weight.dim(1))
    shape_fail("connector", "channel mismatch: input " + shape_str(x.shape()) +
                                " vs connector expecting " +
                                std::to_string(conn.weight.dim(1)) + " channels");
  return ops::conv2d(tape, x, conn.weight);
}

std::string connector_param_name(const Connector& conn) {
  const char* d = conn.direction == ConnectorDirection::student_to_teacher ? "st" : "ts";
  return std::string("conn.") + d + std::to_string(conn.group_index) + ".w";
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------
namespace {

json spec_to_json(const NetworkSpec& s) {
  json groups = json::array();
  for (const auto& g : s.groups) groups.push_back({{"layers", g.num_layers}, {"channels", g.channels}});
  return {{"groups", groups},
          {"block", block_kind_name(s.block)},
          {"classes", s.classes},
          {"input_channels", s.input_channels},
          {"input_size", s.input_size},
          {"stem_channels", s.stem_channels},
          {"dtype", dtype_name(s.dtype)}};
}

NetworkSpec spec_from_json(const json& j) {
  NetworkSpec s;
  for (const auto& g : j.at("groups"))
    s.groups.push_back({g.at("layers").get<int>(), g.at("channels").get<int>()});
  s.block = block_kind_from_name(j.at("block").get<std::string>());
  s.classes = j.at("classes").get<int>();
  s.input_channels = j.at("input_channels").get<int>();
  s.input_size = j.at("input_size").get<int>();
  s.stem_channels = j.value("stem_channels", 0);
  s.dtype = dtype_from_name(j.at("dtype").get<std::string>());
  return s;
}

constexpr char kCkptMagic[9] = "DFACKPT1";

}  // namespace

void save_checkpoint(GroupedNetwork& net, const std::string& path, uint64_t seed,
                     int64_t training_step) {
  ParamList tensors = net.params();
  for (auto& s : net.state()) tensors.push_back(s);

  json manifest;
  manifest["schema_version"] = 1;
  manifest["seed"] = seed;
  manifest["training_step"] = training_step;
  manifest["spec"] = spec_to_json(net.spec());
  json list = json::array();
  uint64_t offset = 0;
  for (auto& t : tensors) {
    json e;
    e["name"] = t.name;
    e["dtype"] = dtype_name(t.tensor.dtype());
    e["shape"] = t.tensor.shape();
    e["offset"] = offset;
    e["bytes"] = t.tensor.raw_bytes().size();
    offset += t.tensor.raw_bytes().size();
    list.push_back(std::move(e));
  }
  manifest["tensors"] = std::move(list);

  const std::string m = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCkptMagic, 8);
  const uint64_t mlen = m.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (auto& t : tensors) {
    auto bytes = t.tensor.raw_bytes();
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw IoError("short write to checkpoint: " + path);
}

GroupedNetwork load_checkpoint(const std::string& path, CheckpointMeta* meta,
                               std::optional<DType> override_dtype) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string_view(magic, 8) != std::string_view(kCkptMagic, 8))
    throw IoError("not a checkpoint file: " + path);
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string m(mlen, '\0');
  in.read(m.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw IoError("truncated checkpoint manifest: " + path);
  json manifest = json::parse(m);

  NetworkSpec spec = spec_from_json(manifest.at("spec"));
  const DType stored_dtype = spec.dtype;
  if (override_dtype) spec.dtype = *override_dtype;
  GroupedNetwork net(spec, /*seed=*/0);
  if (meta) {
    meta->schema_version = manifest.at("schema_version").get<int>();
    meta->seed = manifest.at("seed").get<uint64_t>();
    meta->training_step = manifest.at("training_step").get<int64_t>();
    meta->spec = spec;
  }

  ParamList tensors = net.params();
  for (auto& s : net.state()) tensors.push_back(s);
  size_t idx = 0;
  for (const auto& e : manifest.at("tensors")) {
    if (idx >= tensors.size()) throw IoError("checkpoint lists more tensors than the network has");
    auto& dst = tensors[idx].tensor;
    if (e.at("name").get<std::string>() != tensors[idx].name)
      throw IoError("checkpoint tensor order mismatch at '" + tensors[idx].name + "'");
    const uint64_t nbytes = e.at("bytes").get<uint64_t>();
    if (!override_dtype || *override_dtype == stored_dtype) {
      if (nbytes != dst.raw_bytes().size())
        throw IoError("checkpoint tensor size mismatch at '" + tensors[idx].name + "'");
      in.read(reinterpret_cast<char*>(dst.raw_bytes_mut().data()),
              static_cast<std::streamsize>(nbytes));
    } else {
      const int64_t n = dst.numel();
      Buffer tmp(n, stored_dtype);
      if (nbytes != tmp.bytes().size())
        throw IoError("checkpoint tensor size mismatch at '" + tensors[idx].name + "'");
      in.read(reinterpret_cast<char*>(tmp.bytes().data()),
              static_cast<std::streamsize>(nbytes));
      for (int64_t i = 0; i < n; ++i) {
        const double v = stored_dtype == DType::f32 ? double(tmp.data<float>()[i])
                                                    : tmp.data<double>()[i];
        dst.set_value_at(i, v);
      }
    }
    ++idx;
  }
  if (!in) throw IoError("truncated checkpoint blobs: " + path);
  if (idx != tensors.size()) throw IoError("checkpoint is missing tensors");
  return net;
}

}  // namespace dfa
