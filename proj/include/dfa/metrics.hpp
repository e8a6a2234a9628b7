#pragma once

// Append-only metrics CSV, one file per run. Each row is one
// (stage, epoch, group) cell. Lines are written whole and flushed, so a
// crashed run never leaves a partial final line; the reader skips an
// incomplete tail defensively anyway.

#include <fstream>
#include <string>
#include <vector>

#include "dfa/common.hpp"

namespace dfa {

struct MetricsRow {
  std::string run_id;
  std::string stage;  // teacher | search | distill | eval
  int epoch = 0;
  int group = 0;  // group being searched; 0 when not applicable
  double l_ce = 0, l_fd = 0, l_st = 0, l_ts = 0, r_beta = 0;
  double test_acc = 0;
  std::string alpha;  // "g1:w|w|w;g2:..."
  double wall_ms = 0;
};

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void append(const MetricsRow& row);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

std::vector<MetricsRow> read_metrics(const std::string& path);

std::string format_alpha(const std::vector<std::vector<double>>& alpha);
std::vector<std::vector<double>> parse_alpha(const std::string& field);

}  // namespace dfa
