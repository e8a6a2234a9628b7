#include "dfa/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace dfa {

using nlohmann::json;

namespace {

void expect_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key()))
      throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
}

std::vector<GroupSpec> groups_from_json(const json& j) {
  std::vector<GroupSpec> out;
  for (const auto& g : j) {
    expect_keys(g, "group", {"layers", "channels"});
    out.push_back({g.at("layers").get<int>(), g.at("channels").get<int>()});
  }
  if (out.empty()) throw ConfigError("network needs at least one group");
  return out;
}

json groups_to_json(const std::vector<GroupSpec>& groups) {
  json out = json::array();
  for (const auto& g : groups)
    out.push_back({{"layers", g.num_layers}, {"channels", g.channels}});
  return out;
}

NetworkConfig network_from_json(const json& j, std::string* checkpoint) {
  expect_keys(j, "network", {"groups", "block", "stem_channels", "checkpoint"});
  NetworkConfig n;
  n.groups = groups_from_json(j.at("groups"));
  n.block = block_kind_from_name(j.value("block", "basic-residual"));
  n.stem_channels = j.value("stem_channels", 0);
  if (checkpoint) *checkpoint = j.value("checkpoint", "");
  return n;
}

json network_to_json(const NetworkConfig& n, const std::string& checkpoint) {
  json j;
  j["groups"] = groups_to_json(n.groups);
  j["block"] = block_kind_name(n.block);
  j["stem_channels"] = n.stem_channels;
  if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
  return j;
}

DatasetDescriptor dataset_from_json(const json& j) {
  DatasetDescriptor d;
  const std::string kind = j.value("kind", "synthetic");
  if (kind == "synthetic") {
    expect_keys(j, "dataset",
                {"kind", "classes", "image_size", "per_class", "test_per_class", "noise", "seed"});
    d.kind = DatasetDescriptor::Kind::synthetic;
    auto& s = d.synthetic;
    s.classes = j.value("classes", s.classes);
    s.image_size = j.value("image_size", s.image_size);
    s.per_class = j.value("per_class", s.per_class);
    s.test_per_class = j.value("test_per_class", s.test_per_class);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
  } else if (kind == "archive") {
    expect_keys(j, "dataset", {"kind", "train_path", "test_path", "classes", "image_size"});
    d.kind = DatasetDescriptor::Kind::archive;
    auto& a = d.archive;
    a.train_path = j.at("train_path").get<std::string>();
    a.test_path = j.at("test_path").get<std::string>();
    a.classes = j.value("classes", a.classes);
    a.image_size = j.value("image_size", a.image_size);
  } else {
    throw ConfigError("dataset.kind must be 'synthetic' or 'archive', got '" + kind + "'");
  }
  return d;
}

json dataset_to_json(const DatasetDescriptor& d) {
  json j;
  if (d.kind == DatasetDescriptor::Kind::synthetic) {
    j["kind"] = "synthetic";
    j["classes"] = d.synthetic.classes;
    j["image_size"] = d.synthetic.image_size;
    j["per_class"] = d.synthetic.per_class;
    j["test_per_class"] = d.synthetic.test_per_class;
    j["noise"] = d.synthetic.noise;
    j["seed"] = d.synthetic.seed;
  } else {
    j["kind"] = "archive";
    j["train_path"] = d.archive.train_path;
    j["test_path"] = d.archive.test_path;
    j["classes"] = d.archive.classes;
    j["image_size"] = d.archive.image_size;
  }
  return j;
}

TrainSchedule train_from_json(const json& j, TrainSchedule defaults) {
  expect_keys(j, "schedule",
              {"epochs", "batch_size", "lr", "milestones", "lr_gamma", "momentum",
               "weight_decay", "augment"});
  TrainSchedule t = defaults;
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  if (j.contains("milestones")) t.milestones = j.at("milestones").get<std::vector<int>>();
  t.lr_gamma = j.value("lr_gamma", t.lr_gamma);
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.augment = j.value("augment", t.augment);
  if (t.epochs < 1 || t.batch_size < 1) throw ConfigError("schedule counts must be positive");
  return t;
}

json train_to_json(const TrainSchedule& t) {
  return {{"epochs", t.epochs},         {"batch_size", t.batch_size},
          {"lr", t.lr},                 {"milestones", t.milestones},
          {"lr_gamma", t.lr_gamma},     {"momentum", t.momentum},
          {"weight_decay", t.weight_decay}, {"augment", t.augment}};
}

SearchSchedule search_from_json(const json& j) {
  expect_keys(j, "search",
              {"epochs_per_group", "arch_steps_per_weight_step", "batch_size", "last_bias",
               "arch_lr", "arch_beta1", "arch_beta2", "arch_weight_decay",
               "arch_decoupled_wd", "w_lr", "w_momentum", "w_weight_decay"});
  SearchSchedule s;
  s.epochs_per_group = j.value("epochs_per_group", s.epochs_per_group);
  s.arch_steps_per_weight_step =
      j.value("arch_steps_per_weight_step", s.arch_steps_per_weight_step);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.last_bias = j.value("last_bias", s.last_bias);
  s.arch.lr = j.value("arch_lr", s.arch.lr);
  s.arch.beta1 = j.value("arch_beta1", s.arch.beta1);
  s.arch.beta2 = j.value("arch_beta2", s.arch.beta2);
  s.arch.weight_decay = j.value("arch_weight_decay", s.arch.weight_decay);
  s.arch.decoupled_weight_decay = j.value("arch_decoupled_wd", s.arch.decoupled_weight_decay);
  s.w.lr = j.value("w_lr", s.w.lr);
  s.w.momentum = j.value("w_momentum", s.w.momentum);
  s.w.weight_decay = j.value("w_weight_decay", s.w.weight_decay);
  if (s.epochs_per_group < 1 || s.arch_steps_per_weight_step < 1 || s.batch_size < 1)
    throw ConfigError("search schedule counts must be positive");
  return s;
}

json search_to_json(const SearchSchedule& s) {
  return {{"epochs_per_group", s.epochs_per_group},
          {"arch_steps_per_weight_step", s.arch_steps_per_weight_step},
          {"batch_size", s.batch_size},
          {"last_bias", s.last_bias},
          {"arch_lr", s.arch.lr},
          {"arch_beta1", s.arch.beta1},
          {"arch_beta2", s.arch.beta2},
          {"arch_weight_decay", s.arch.weight_decay},
          {"arch_decoupled_wd", s.arch.decoupled_weight_decay},
          {"w_lr", s.w.lr},
          {"w_momentum", s.w.momentum},
          {"w_weight_decay", s.w.weight_decay}};
}

LossWeights loss_from_json(const json& j) {
  expect_keys(j, "loss", {"gamma_fd", "gamma_st", "gamma_ts", "lambda"});
  LossWeights w;
  w.gamma_fd = j.value("gamma_fd", w.gamma_fd);
  w.gamma_st = j.value("gamma_st", w.gamma_st);
  w.gamma_ts = j.value("gamma_ts", w.gamma_ts);
  w.lambda_reg = j.value("lambda", w.lambda_reg);
  for (double v : {w.gamma_fd, w.gamma_st, w.gamma_ts, w.lambda_reg})
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ConfigError("loss weights must be finite and nonnegative");
  return w;
}

json loss_to_json(const LossWeights& w) {
  return {{"gamma_fd", w.gamma_fd},
          {"gamma_st", w.gamma_st},
          {"gamma_ts", w.gamma_ts},
          {"lambda", w.lambda_reg}};
}

ExperimentConfig config_from_json(const json& j) {
  expect_keys(j, "config",
              {"run_id", "precision", "seed", "seeds", "output_dir", "dataset", "split",
               "teacher", "student", "search", "distill", "teacher_train", "loss",
               "reuse_search_student"});
  ExperimentConfig c;
  c.run_id = j.value("run_id", "");
  c.precision = dtype_from_name(j.value("precision", "f64"));
  c.seed = j.value("seed", c.seed);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
  if (j.contains("split")) {
    expect_keys(j.at("split"), "split", {"train_fraction"});
    c.train_fraction = j.at("split").value("train_fraction", c.train_fraction);
  }
  if (!j.contains("teacher") || !j.contains("student"))
    throw ConfigError("config requires 'teacher' and 'student' network sections");
  c.teacher = network_from_json(j.at("teacher"), &c.teacher_checkpoint);
  c.student = network_from_json(j.at("student"), nullptr);
  if (j.contains("search")) c.search = search_from_json(j.at("search"));
  if (j.contains("distill")) c.distill = train_from_json(j.at("distill"), TrainSchedule{});
  if (j.contains("teacher_train")) {
    TrainSchedule d;
    d.epochs = 30;
    c.teacher_train = train_from_json(j.at("teacher_train"), d);
  } else {
    c.teacher_train.epochs = 30;
  }
  if (j.contains("loss")) c.loss = loss_from_json(j.at("loss"));
  c.reuse_search_student = j.value("reuse_search_student", false);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  if (!c.run_id.empty()) j["run_id"] = c.run_id;
  j["precision"] = dtype_name(c.precision);
  j["seed"] = c.seed;
  if (!c.seeds.empty()) j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["dataset"] = dataset_to_json(c.dataset);
  j["split"] = {{"train_fraction", c.train_fraction}};
  j["teacher"] = network_to_json(c.teacher, c.teacher_checkpoint);
  j["student"] = network_to_json(c.student, "");
  j["search"] = search_to_json(c.search);
  j["distill"] = train_to_json(c.distill);
  j["teacher_train"] = train_to_json(c.teacher_train);
  j["loss"] = loss_to_json(c.loss);
  j["reuse_search_student"] = c.reuse_search_student;
  return j;
}

}  // namespace

NetworkSpec ExperimentConfig::teacher_spec() const {
  NetworkSpec s;
  s.groups = teacher.groups;
  s.block = teacher.block;
  s.stem_channels = teacher.stem_channels;
  s.classes = dataset.kind == DatasetDescriptor::Kind::synthetic ? dataset.synthetic.classes
                                                                 : dataset.archive.classes;
  s.input_size = dataset.kind == DatasetDescriptor::Kind::synthetic
                     ? dataset.synthetic.image_size
                     : dataset.archive.image_size;
  s.dtype = precision;
  return s;
}

NetworkSpec ExperimentConfig::student_spec() const {
  NetworkSpec s = teacher_spec();
  s.groups = student.groups;
  s.block = student.block;
  s.stem_channels = student.stem_channels;
  return s;
}

std::vector<uint64_t> ExperimentConfig::seed_list() const {
  return seeds.empty() ? std::vector<uint64_t>{seed} : seeds;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

std::string config_to_text(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

uint64_t config_hash(const ExperimentConfig& cfg) {
  // nlohmann objects are key-sorted, so dump() is canonical.
  return fnv1a64(config_to_json(cfg).dump());
}

}  // namespace dfa
