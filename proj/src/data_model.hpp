#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace p300::data {

// One stimulus presentation. A *trial* is one decoding unit: the target
// character is presented together with every other character for
// n_repetitions passes through the alphabet, so a trial contributes
// n_repetitions * n_chars events of which n_repetitions are targets.
// Repetition order is recoverable from onset order within (trial, char).
struct StimulusEvent {
  int64_t onset_sample = 0;
  uint16_t char_id = 0;
  uint32_t trial_id = 0;
  bool is_target = false;
};

// Continuous multichannel signal plus stimulus markers. Signal samples are
// stored as f32 (recordings are large); all arithmetic on them is f64.
struct RawRecording {
  int n_channels = 0;
  int64_t n_samples = 0;
  double sampling_rate = 0.0;
  std::vector<float> signal;  // [channel][sample]
  std::vector<StimulusEvent> events;
  std::string subject_id;
  uint16_t subject_index = 0;

  double at(int ch, int64_t s) const {
    return signal[size_t(ch) * size_t(n_samples) + size_t(s)];
  }
};

// Labeled fixed-length epochs with per-epoch metadata.
struct EpochSet {
  int n_channels = 0;
  int n_samples = 0;
  double sampling_rate = 0.0;
  std::vector<double> data;  // [epoch][channel][sample]
  std::vector<uint8_t> labels;
  std::vector<uint16_t> char_ids;
  std::vector<uint32_t> trial_ids;
  std::vector<uint16_t> subject_indices;
  std::vector<int64_t> onset_samples;

  size_t n_epochs() const { return labels.size(); }
  size_t n_features() const { return size_t(n_channels) * size_t(n_samples); }
  const double* epoch(size_t i) const { return data.data() + i * n_features(); }
  double* epoch(size_t i) { return data.data() + i * n_features(); }

  // Append all epochs of `other` (shapes must match).
  void append(const EpochSet& other);
  // New set containing the selected epochs, in the given order.
  EpochSet select(const std::vector<size_t>& indices) const;
};

struct SyntheticConfig {
  int n_subjects = 11;
  int n_channels = 55;
  int n_chars = 30;
  int n_trials_per_subject = 60;
  int n_repetitions = 10;
  double sampling_rate = 200.0;
  double soa_ms = 116.0;
  struct P300Shape {
    double latency_ms = 300.0;
    double width_ms = 200.0;
    double amplitude = 4.0;
  } p300;
  // Channels carrying the target deflection; empty selects the middle third.
  std::vector<int> bump_channels;
  struct Noise {
    double ar_coeff = 0.95;
    double std = 1.0;  // innovation standard deviation
  } noise;
  struct SubjectVariation {
    double latency_jitter_std_ms = 0.0;
    double amplitude_scale_std = 0.0;
  } subject_variation;
  uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  std::vector<int> effective_bump_channels() const;
};

struct WindowMs {
  double start = -200.0;
  double stop = 800.0;
};

// Trials are keyed by (subject, trial) so pooled splits stay well defined
// when per-subject trial ids collide.
using TrialKey = uint64_t;
inline TrialKey trial_key(uint16_t subject_index, uint32_t trial_id) {
  return (TrialKey(subject_index) << 32) | TrialKey(trial_id);
}
inline TrialKey trial_key_of(const EpochSet& e, size_t i) {
  return trial_key(e.subject_indices[i], e.trial_ids[i]);
}

struct FoldAssignment {
  int k = 0;
  std::map<TrialKey, int> fold_of_trial;
};

// One recording per subject; deterministic in cfg.seed.
std::vector<RawRecording> generate_synthetic(const SyntheticConfig& cfg);
// Single-subject unit (safe to run concurrently across subjects).
RawRecording generate_subject(const SyntheticConfig& cfg, int subject);

// Cut one epoch per event at onset + jitter. jitter must be an integer
// number of samples at rec.sampling_rate.
EpochSet extract_epochs(const RawRecording& rec, WindowMs window = {},
                        int jitter_ms = 0);

// Block-mean decimation by an integer factor.
EpochSet downsample(const EpochSet& epochs, int factor);

// Shuffle trials with `seed`, deal round-robin into k folds.
FoldAssignment split_folds(const EpochSet& epochs, int k, uint64_t seed);
// Same dealing over an explicit (sorted, distinct) trial-key set.
FoldAssignment split_fold_keys(std::vector<TrialKey> keys, int k, uint64_t seed);

// Binary epoch container (magic "P3EP"). Writes are atomic.
void save_epochs(const EpochSet& epochs, const std::string& path);
EpochSet load_epochs(const std::string& path);

// CSV import for tiny fixtures: header then one epoch per row,
// label,char_id,trial_id,subject_index,onset_sample,f0..f{C*T-1}.
EpochSet load_epochs_csv(const std::string& path, int n_channels,
                         int n_samples, double sampling_rate);

}  // namespace p300::data
