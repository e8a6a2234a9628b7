#include "dfa/metrics.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <sstream>

namespace dfa {

namespace {

constexpr const char* kHeader =
    "run_id,stage,epoch,group,l_ce,l_fd,l_st,l_ts,r_beta,test_acc,alpha,wall_ms";

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

MetricsWriter::MetricsWriter(const std::string& path) : path_(path) {
  namespace fs = std::filesystem;
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open metrics file: " + path);
  if (fresh) {
    out_ << kHeader << '\n';
    out_.flush();
  }
}

void MetricsWriter::append(const MetricsRow& r) {
  std::ostringstream line;
  line << r.run_id << ',' << r.stage << ',' << r.epoch << ',' << r.group << ','
       << fmt_double(r.l_ce) << ',' << fmt_double(r.l_fd) << ',' << fmt_double(r.l_st)
       << ',' << fmt_double(r.l_ts) << ',' << fmt_double(r.r_beta) << ','
       << fmt_double(r.test_acc) << ',' << r.alpha << ',' << fmt_double(r.wall_ms) << '\n';
  out_ << line.str();
  out_.flush();
  if (!out_) throw IoError("failed writing metrics row to " + path_);
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file: " + path);
  std::vector<MetricsRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      if (line != kHeader) throw IoError("unexpected metrics header in " + path);
      continue;
    }
    auto f = split(line, ',');
    if (f.size() != 12) continue;  // incomplete tail from a crashed writer
    MetricsRow r;
    r.run_id = f[0];
    r.stage = f[1];
    r.epoch = std::stoi(f[2]);
    r.group = std::stoi(f[3]);
    r.l_ce = std::stod(f[4]);
    r.l_fd = std::stod(f[5]);
    r.l_st = std::stod(f[6]);
    r.l_ts = std::stod(f[7]);
    r.r_beta = std::stod(f[8]);
    r.test_acc = std::stod(f[9]);
    r.alpha = f[10];
    r.wall_ms = std::stod(f[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string format_alpha(const std::vector<std::vector<double>>& alpha) {
  std::ostringstream os;
  for (size_t g = 0; g < alpha.size(); ++g) {
    if (g) os << ';';
    os << 'g' << (g + 1) << ':';
    for (size_t j = 0; j < alpha[g].size(); ++j) {
      if (j) os << '|';
      os << fmt_double(alpha[g][j]);
    }
  }
  return os.str();
}

std::vector<std::vector<double>> parse_alpha(const std::string& field) {
  std::vector<std::vector<double>> out;
  if (field.empty()) return out;
  for (const auto& grp : split(field, ';')) {
    const auto colon = grp.find(':');
    if (colon == std::string::npos) throw IoError("malformed alpha field: " + field);
    std::vector<double> w;
    for (const auto& v : split(grp.substr(colon + 1), '|')) w.push_back(std::stod(v));
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace dfa
