#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

namespace p300::report {

struct AccuracyRow {
  std::string model;
  int subject = -1;  // -1 = pooled / all subjects
  std::string condition;
  int fold = -1;
  double accuracy = 0.0;
};

struct TrainingLog {
  std::string model;
  int subject = -1;
  int fold = -1;
  std::string condition;
  std::vector<double> loss;
};

struct NoiseCell {
  std::string model;
  int level_ms = 0;
  std::vector<double> fold_accuracy;
};

struct TTestRow {
  int level_ms = 0;
  std::string model_a, model_b;
  double t = 0.0, p = 1.0, df = 0.0;
};

struct SaliencyMap {
  std::string model;
  Eigen::MatrixXd map;      // [channels x samples], non-negative
  double band_lo_ms = 0.0;  // reporting band
  double band_hi_ms = 0.0;
  double band_mass = 0.0;   // fraction of total mass inside the band
  double uniform_share = 0.0;
  double window_lo_ms = -200.0;
  double window_hi_ms = 800.0;
};

struct CheckpointEntry {
  std::string model;
  int subject = -1;
  int fold = -1;
  std::string path;  // relative to the output directory
};

// Everything an experiment emits. Serialization is deterministic: a rerun
// with the same config and seed writes byte-identical files.
struct ExperimentReport {
  std::string experiment;
  std::string config_json;  // canonical config echo
  std::map<std::string, int64_t> param_counts;
  std::map<std::string, std::string> param_count_notes;
  std::vector<AccuracyRow> rows;
  std::vector<TrainingLog> logs;
  std::vector<NoiseCell> noise;
  std::vector<TTestRow> ttests;
  std::vector<SaliencyMap> saliency;
  std::vector<CheckpointEntry> checkpoints;
  std::vector<std::string> warnings;

  // Mean accuracy per (model, condition), ordered.
  std::vector<std::tuple<std::string, std::string, double, int>> mean_accuracy()
      const;
};

// Writes <out>/report.json, <out>/tables/*.csv and <out>/saliency/*.
void write_report(const ExperimentReport& report, const std::string& out_dir,
                  bool render_svg);

// Printable per-model summary table.
std::string headline(const ExperimentReport& report);

// Shortest round-trip decimal representation (stable across reruns).
std::string format_double(double v);

}  // namespace p300::report
