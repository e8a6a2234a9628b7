#pragma once

// Declarative experiment description. A config file fully determines a run:
// networks, dataset, schedules, loss weights and seeds. Configs round-trip
// losslessly through their JSON text form, and semantically identical configs
// hash identically (canonical serialization, key order independent).

#include <string>
#include <vector>

#include "dfa/dataset.hpp"
#include "dfa/losses.hpp"
#include "dfa/network.hpp"
#include "dfa/optim.hpp"

namespace dfa {

struct SearchSchedule {
  int epochs_per_group = 4;
  int arch_steps_per_weight_step = 1;
  int batch_size = 64;
  double last_bias = 6.9;  // beta init: alpha_last ~ 0.998 for 3-layer groups
  Adam::Config arch;       // lr 1e-3, betas (0.5, 0.999), wd 1e-3
  Sgd::Config w{0.05, 0.9, 5e-4};
};

struct TrainSchedule {
  int epochs = 20;
  int batch_size = 64;
  double lr = 0.1;
  std::vector<int> milestones = {12, 16, 18};  // epochs at which lr *= lr_gamma
  double lr_gamma = 0.2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = true;
};

struct NetworkConfig {
  std::vector<GroupSpec> groups;
  BlockKind block = BlockKind::basic_residual;
  int stem_channels = 0;
};

struct ExperimentConfig {
  std::string run_id;  // derived from subcommand+seed when empty
  DType precision = DType::f64;
  uint64_t seed = 1;
  std::vector<uint64_t> seeds;  // multi-seed suites; defaults to {seed}
  std::string output_dir = "runs";
  DatasetDescriptor dataset;
  double train_fraction = 0.7;
  NetworkConfig teacher;
  std::string teacher_checkpoint;
  NetworkConfig student;
  SearchSchedule search;
  TrainSchedule distill;
  TrainSchedule teacher_train;
  LossWeights loss;
  bool reuse_search_student = false;  // stage 2 starts from a fresh student

  NetworkSpec teacher_spec() const;
  NetworkSpec student_spec() const;
  std::vector<uint64_t> seed_list() const;
};

ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text);
std::string config_to_text(const ExperimentConfig& cfg);  // canonical JSON
uint64_t config_hash(const ExperimentConfig& cfg);

}  // namespace dfa
