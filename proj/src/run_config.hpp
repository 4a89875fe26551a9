#pragma once

#include <optional>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "models.hpp"

namespace p300::config {

// Fully resolved run description for one CLI subcommand. Parsed from a
// strict JSON document (unknown keys rejected) with every default
// filled in, so render_config() echoes the complete effective schema.
struct RunConfig {
  std::string subcommand;  // gen | train | eval | xsubject | noise | saliency
  uint64_t seed = 0;
  int jobs = 1;

  // dataset source: exactly one of the two
  std::optional<data::SyntheticConfig> synthetic;
  std::vector<std::string> containers;
  int downsample_factor = 8;

  // train
  std::string experiment = "within_subject";  // or "pooled"
  std::vector<models::ModelKind> model_kinds;
  int folds = 10;
  int repetitions = 10;
  models::TrainSchedule schedule;
  bool standardize = false;
  bool save_checkpoints = true;

  // xsubject
  bool fine_tune = false;
  double calibration_fraction = 0.75;
  models::TrainSchedule fine_tune_sched = models::fine_tune_schedule();
  std::vector<int> held_out_subjects;  // empty selects every subject

  // noise
  std::vector<int> noise_levels_ms{-120, -80, -40, 40, 80, 120};

  // saliency
  double band_lo_ms = 200.0;
  double band_hi_ms = 500.0;
  bool render_svg = true;

  // eval
  struct CheckpointRef {
    std::string path;
    std::string model;  // reporting label; inferred from the file when empty
    int subject = -1;   // -1 = pooled / all subjects
    int fold = -1;      // -1 = decode every trial
  };
  std::vector<CheckpointRef> checkpoints;
};

// Parse + validate. `json_text` empty selects all defaults;
// `overrides_json` is a flat object with optional keys
// seed/jobs/models/fine_tune.
RunConfig parse_config(const std::string& subcommand, const std::string& json_text,
                       const std::string& overrides_json = "");

// Canonical fully populated JSON (sorted keys, stable float formatting).
std::string render_config(const RunConfig& cfg);

}  // namespace p300::config
