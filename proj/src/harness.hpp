#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "models.hpp"
#include "report_io.hpp"
#include "run_config.hpp"

namespace p300::harness {

struct RunResult {
  report::ExperimentReport report;
  std::string summary;
};

// Executes one subcommand end to end. When out_dir is non-empty the
// report files (and containers/checkpoints) are written there.
RunResult run(const config::RunConfig& cfg, const std::string& out_dir);

// ---- building blocks (exposed for tests) -------------------------------

// Pooled preprocessed epochs plus per-subject index lists. Raw recordings
// are retained only for synthetic sources when requested (noise sweep).
struct Dataset {
  data::EpochSet all;
  std::vector<uint16_t> subjects;
  std::map<uint16_t, std::vector<size_t>> by_subject;
  std::vector<data::RawRecording> raws;
};

Dataset load_dataset(const config::RunConfig& cfg, bool keep_raw);

// One decodable trial: a complete repetitions x characters grid of epoch
// indices. Characters are ordered by char_id; true_char is a position in
// that order.
struct TrialGrid {
  data::TrialKey key = 0;
  int true_char = -1;
  int repetitions = 0;
  int chars = 0;
  std::vector<size_t> cells;  // [rep * chars + char_pos] -> epoch index
};

// Groups epochs into complete trial grids; incomplete or inconsistent
// trials are dropped with a warning.
std::vector<TrialGrid> build_grids(const data::EpochSet& epochs,
                                   const std::vector<size_t>& indices,
                                   int expected_repetitions,
                                   std::vector<std::string>* warnings);

// Speller accuracy of the scorer over the given grids.
double decode_accuracy(const models::Scorer& scorer,
                       const data::EpochSet& epochs,
                       const std::vector<TrialGrid>& grids);

// Mean absolute input gradient over the selected (target) epochs.
report::SaliencyMap saliency_map(const models::Scorer& scorer,
                                 const data::EpochSet& epochs,
                                 const std::vector<size_t>& target_indices,
                                 double band_lo_ms, double band_hi_ms);

// Per-feature train-set standardization (optional preprocessing flag).
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd inv_std;

  static Standardizer fit(const data::EpochSet& epochs,
                          const std::vector<size_t>& indices);
  data::EpochSet apply(const data::EpochSet& epochs,
                       const std::vector<size_t>& indices) const;
};

// Index-sharded worker pool; deterministic result placement is the
// caller's job (results slotted by index).
void parallel_for(int jobs, size_t count, const std::function<void(size_t)>& fn);

}  // namespace p300::harness
