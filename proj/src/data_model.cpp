#include "data_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "errors.hpp"
#include "rng.hpp"

namespace p300::data {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// EpochSet helpers
// ---------------------------------------------------------------------------

void EpochSet::append(const EpochSet& other) {
  if (n_epochs() == 0) {
    *this = other;
    return;
  }
  if (other.n_channels != n_channels || other.n_samples != n_samples)
    throw DataError("EpochSet::append: shape mismatch");
  if (other.sampling_rate != sampling_rate)
    throw DataError("EpochSet::append: sampling rate mismatch");
  data.insert(data.end(), other.data.begin(), other.data.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  char_ids.insert(char_ids.end(), other.char_ids.begin(), other.char_ids.end());
  trial_ids.insert(trial_ids.end(), other.trial_ids.begin(),
                   other.trial_ids.end());
  subject_indices.insert(subject_indices.end(), other.subject_indices.begin(),
                         other.subject_indices.end());
  onset_samples.insert(onset_samples.end(), other.onset_samples.begin(),
                       other.onset_samples.end());
}

EpochSet EpochSet::select(const std::vector<size_t>& indices) const {
  EpochSet out;
  out.n_channels = n_channels;
  out.n_samples = n_samples;
  out.sampling_rate = sampling_rate;
  const size_t f = n_features();
  out.data.reserve(indices.size() * f);
  out.labels.reserve(indices.size());
  for (const size_t i : indices) {
    if (i >= n_epochs()) throw DataError("EpochSet::select: index out of range");
    out.data.insert(out.data.end(), epoch(i), epoch(i) + f);
    out.labels.push_back(labels[i]);
    out.char_ids.push_back(char_ids[i]);
    out.trial_ids.push_back(trial_ids[i]);
    out.subject_indices.push_back(subject_indices[i]);
    out.onset_samples.push_back(onset_samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

void SyntheticConfig::validate() const {
  if (n_subjects < 1) throw ConfigError("synthetic: n_subjects must be >= 1");
  if (n_channels < 1) throw ConfigError("synthetic: n_channels must be >= 1");
  if (n_chars < 2) throw ConfigError("synthetic: n_chars must be >= 2");
  if (n_trials_per_subject < 1)
    throw ConfigError("synthetic: n_trials_per_subject must be >= 1");
  if (n_repetitions < 1)
    throw ConfigError("synthetic: n_repetitions must be >= 1");
  if (sampling_rate <= 0) throw ConfigError("synthetic: sampling_rate must be > 0");
  if (soa_ms <= 0) throw ConfigError("synthetic: soa_ms must be > 0");
  if (p300.amplitude < 0) throw ConfigError("synthetic: p300.amplitude must be >= 0");
  if (p300.width_ms <= 0) throw ConfigError("synthetic: p300.width_ms must be > 0");
  if (noise.std <= 0) throw ConfigError("synthetic: noise.std must be > 0");
  if (noise.ar_coeff < 0 || noise.ar_coeff >= 1)
    throw ConfigError("synthetic: noise.ar_coeff must be in [0,1)");
  for (const int c : bump_channels)
    if (c < 0 || c >= n_channels)
      throw ConfigError("synthetic: bump channel index out of range");
}

std::vector<int> SyntheticConfig::effective_bump_channels() const {
  if (!bump_channels.empty()) return bump_channels;
  std::vector<int> mid;
  for (int c = n_channels / 3; c < (2 * n_channels) / 3; ++c) mid.push_back(c);
  if (mid.empty()) mid.push_back(0);
  return mid;
}

namespace {

int64_t ms_to_samples(double ms, double fs) {
  return int64_t(std::llround(ms * fs / 1000.0));
}

}  // namespace

RawRecording generate_subject(const SyntheticConfig& cfg, int subject) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "synth-subject", uint64_t(subject)));

  const double fs = cfg.sampling_rate;
  // Per-subject perturbations, drawn once.
  const double latency_shift_ms =
      rng.normal() * cfg.subject_variation.latency_jitter_std_ms;
  const double amp_scale =
      std::max(0.0, 1.0 + rng.normal() * cfg.subject_variation.amplitude_scale_std);

  // Event timeline. Leave margin for the decoding window plus the largest
  // temporal-noise level used downstream (+-120 ms).
  const int64_t lead_in = ms_to_samples(400.0, fs);
  const int64_t lead_out = ms_to_samples(1000.0, fs);
  const int n_events =
      cfg.n_trials_per_subject * cfg.n_repetitions * cfg.n_chars;

  RawRecording rec;
  rec.subject_index = uint16_t(subject);
  {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%02d", subject);
    rec.subject_id = buf;
  }
  rec.n_channels = cfg.n_channels;
  rec.sampling_rate = fs;
  rec.events.reserve(size_t(n_events));

  std::vector<uint16_t> order(size_t(cfg.n_chars));
  int event_index = 0;
  for (int trial = 0; trial < cfg.n_trials_per_subject; ++trial) {
    const auto target = uint16_t(rng.below(uint64_t(cfg.n_chars)));
    for (int rep = 0; rep < cfg.n_repetitions; ++rep) {
      for (int c = 0; c < cfg.n_chars; ++c) order[size_t(c)] = uint16_t(c);
      rng.shuffle(order);
      for (const uint16_t ch : order) {
        StimulusEvent ev;
        ev.onset_sample = lead_in + ms_to_samples(event_index * cfg.soa_ms, fs);
        ev.char_id = ch;
        ev.trial_id = uint32_t(trial);
        ev.is_target = (ch == target);
        rec.events.push_back(ev);
        ++event_index;
      }
    }
  }

  rec.n_samples = rec.events.back().onset_sample + lead_out;
  rec.signal.assign(size_t(rec.n_channels) * size_t(rec.n_samples), 0.0f);

  // AR(1) background, channel by channel.
  const double phi = cfg.noise.ar_coeff;
  for (int ch = 0; ch < rec.n_channels; ++ch) {
    float* row = rec.signal.data() + size_t(ch) * size_t(rec.n_samples);
    double x = 0.0;
    for (int64_t s = 0; s < rec.n_samples; ++s) {
      x = phi * x + cfg.noise.std * rng.normal();
      row[s] = float(x);
    }
  }

  // Raised-cosine deflection on target events.
  const auto bump_ch = cfg.effective_bump_channels();
  const double latency_ms = cfg.p300.latency_ms + latency_shift_ms;
  const double half_width = cfg.p300.width_ms / 2.0;
  const int64_t half_samples = ms_to_samples(half_width, fs);
  const double amplitude = amp_scale * cfg.p300.amplitude;
  for (const auto& ev : rec.events) {
    if (!ev.is_target) continue;
    const int64_t center = ev.onset_sample + ms_to_samples(latency_ms, fs);
    const int64_t lo = std::max<int64_t>(0, center - half_samples);
    const int64_t hi = std::min<int64_t>(rec.n_samples - 1, center + half_samples);
    for (const int ch : bump_ch) {
      float* row = rec.signal.data() + size_t(ch) * size_t(rec.n_samples);
      for (int64_t s = lo; s <= hi; ++s) {
        const double dt_ms = (double(s - center) / fs) * 1000.0;
        const double v =
            0.5 * (1.0 + std::cos(std::numbers::pi * dt_ms / half_width));
        row[s] += float(amplitude * v);
      }
    }
  }

  // Every event must admit the full decoding window.
  const int64_t w_lo = ms_to_samples(-200.0, fs);
  const int64_t w_len = ms_to_samples(1000.0, fs);
  for (const auto& ev : rec.events) {
    const int64_t s0 = ev.onset_sample + w_lo;
    if (s0 < 0 || s0 + w_len > rec.n_samples)
      throw DataError("synthetic: event window overflows the recording");
  }
  return rec;
}

std::vector<RawRecording> generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::vector<RawRecording> out;
  out.reserve(size_t(cfg.n_subjects));
  for (int s = 0; s < cfg.n_subjects; ++s) out.push_back(generate_subject(cfg, s));
  return out;
}

// ---------------------------------------------------------------------------
// Epoch extraction / downsampling / folds
// ---------------------------------------------------------------------------

EpochSet extract_epochs(const RawRecording& rec, WindowMs window, int jitter_ms) {
  const double fs = rec.sampling_rate;
  const double jitter_samples_f = jitter_ms * fs / 1000.0;
  const auto jitter_samples = int64_t(std::llround(jitter_samples_f));
  if (std::abs(jitter_samples_f - double(jitter_samples)) > 1e-9)
    throw ConfigError("extract_epochs: jitter of " + std::to_string(jitter_ms) +
                      " ms is not an integer number of samples at " +
                      std::to_string(fs) + " Hz");

  const int64_t start_offset = ms_to_samples(window.start, fs);
  const auto len = int64_t(std::llround((window.stop - window.start) * fs / 1000.0));
  if (len <= 0) throw ConfigError("extract_epochs: empty window");

  // Collect all offending events before failing.
  std::vector<size_t> bad;
  for (size_t i = 0; i < rec.events.size(); ++i) {
    const int64_t s0 = rec.events[i].onset_sample + start_offset + jitter_samples;
    if (s0 < 0 || s0 + len > rec.n_samples) bad.push_back(i);
  }
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "extract_epochs: " << bad.size()
        << " event(s) fall outside the recording after jitter " << jitter_ms
        << " ms; first offenders (event index @ onset):";
    for (size_t i = 0; i < std::min<size_t>(bad.size(), 5); ++i)
      msg << " #" << bad[i] << "@" << rec.events[bad[i]].onset_sample;
    throw DataError(msg.str());
  }

  EpochSet out;
  out.n_channels = rec.n_channels;
  out.n_samples = int(len);
  out.sampling_rate = fs;
  out.data.resize(rec.events.size() * out.n_features());
  out.labels.reserve(rec.events.size());
  for (size_t i = 0; i < rec.events.size(); ++i) {
    const auto& ev = rec.events[i];
    const int64_t s0 = ev.onset_sample + start_offset + jitter_samples;
    double* dst = out.data.data() + i * out.n_features();
    for (int ch = 0; ch < rec.n_channels; ++ch) {
      const float* src =
          rec.signal.data() + size_t(ch) * size_t(rec.n_samples) + size_t(s0);
      for (int64_t s = 0; s < len; ++s) dst[size_t(ch) * size_t(len) + size_t(s)] = src[s];
    }
    out.labels.push_back(ev.is_target ? 1 : 0);
    out.char_ids.push_back(ev.char_id);
    out.trial_ids.push_back(ev.trial_id);
    out.subject_indices.push_back(rec.subject_index);
    out.onset_samples.push_back(ev.onset_sample);
  }
  return out;
}

EpochSet downsample(const EpochSet& epochs, int factor) {
  if (factor < 1) throw ConfigError("downsample: factor must be >= 1");
  if (epochs.n_samples % factor != 0)
    throw DataError("downsample: " + std::to_string(epochs.n_samples) +
                    " samples not divisible by factor " + std::to_string(factor));
  EpochSet out;
  out.n_channels = epochs.n_channels;
  out.n_samples = epochs.n_samples / factor;
  out.sampling_rate = epochs.sampling_rate / factor;
  out.labels = epochs.labels;
  out.char_ids = epochs.char_ids;
  out.trial_ids = epochs.trial_ids;
  out.subject_indices = epochs.subject_indices;
  out.onset_samples = epochs.onset_samples;
  out.data.resize(epochs.n_epochs() * out.n_features());
  const double inv = 1.0 / factor;
  for (size_t e = 0; e < epochs.n_epochs(); ++e) {
    const double* src = epochs.epoch(e);
    double* dst = out.data.data() + e * out.n_features();
    for (int ch = 0; ch < epochs.n_channels; ++ch) {
      const double* srow = src + size_t(ch) * size_t(epochs.n_samples);
      double* drow = dst + size_t(ch) * size_t(out.n_samples);
      for (int t = 0; t < out.n_samples; ++t) {
        double acc = 0.0;
        for (int j = 0; j < factor; ++j) acc += srow[t * factor + j];
        drow[t] = acc * inv;
      }
    }
  }
  return out;
}

FoldAssignment split_fold_keys(std::vector<TrialKey> keys, int k, uint64_t seed) {
  if (k < 2) throw ConfigError("split_folds: k must be >= 2");
  if (size_t(k) > keys.size())
    throw ConfigError("split_folds: k = " + std::to_string(k) + " exceeds " +
                      std::to_string(keys.size()) + " trials");
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  Rng rng(seed);
  rng.shuffle(keys);
  FoldAssignment fa;
  fa.k = k;
  for (size_t i = 0; i < keys.size(); ++i) fa.fold_of_trial[keys[i]] = int(i % size_t(k));
  return fa;
}

FoldAssignment split_folds(const EpochSet& epochs, int k, uint64_t seed) {
  std::set<TrialKey> keys;
  for (size_t i = 0; i < epochs.n_epochs(); ++i) keys.insert(trial_key_of(epochs, i));
  return split_fold_keys({keys.begin(), keys.end()}, k, seed);
}

// ---------------------------------------------------------------------------
// Container IO
//
// Layout: "P3EP", u32 version, u32 n_epochs, u32 n_channels, u32 n_samples,
// f32 sampling_rate, n_epochs records of (u8 label, u16 char_id,
// u32 trial_id, u16 subject_index, i64 onset_sample), then the payload as
// little-endian f32, epoch-major then channel-major then sample.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', '3', 'E', 'P'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));  // little-endian host assumed (x86/arm64)
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size())
      throw DataError("load_epochs: truncated container: " + path_);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace

void save_epochs(const EpochSet& epochs, const std::string& path) {
  if (epochs.n_epochs() != epochs.labels.size() ||
      epochs.char_ids.size() != epochs.labels.size() ||
      epochs.trial_ids.size() != epochs.labels.size() ||
      epochs.subject_indices.size() != epochs.labels.size() ||
      epochs.onset_samples.size() != epochs.labels.size() ||
      epochs.data.size() != epochs.n_epochs() * epochs.n_features())
    throw DataError("save_epochs: inconsistent EpochSet");

  std::string buf;
  buf.reserve(24 + epochs.n_epochs() * 17 + epochs.data.size() * 4);
  buf.append(kMagic, 4);
  put<uint32_t>(buf, kVersion);
  put<uint32_t>(buf, uint32_t(epochs.n_epochs()));
  put<uint32_t>(buf, uint32_t(epochs.n_channels));
  put<uint32_t>(buf, uint32_t(epochs.n_samples));
  put<float>(buf, float(epochs.sampling_rate));
  for (size_t i = 0; i < epochs.n_epochs(); ++i) {
    put<uint8_t>(buf, epochs.labels[i]);
    put<uint16_t>(buf, epochs.char_ids[i]);
    put<uint32_t>(buf, epochs.trial_ids[i]);
    put<uint16_t>(buf, epochs.subject_indices[i]);
    put<int64_t>(buf, epochs.onset_samples[i]);
  }
  for (const double v : epochs.data) put<float>(buf, float(v));

  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("save_epochs: cannot open " + tmp.string());
    f.write(buf.data(), std::streamsize(buf.size()));
    if (!f) throw DataError("save_epochs: write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

EpochSet load_epochs(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_epochs: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  Reader r(bytes, path);

  char magic[4];
  for (auto& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("load_epochs: bad magic in " + path);
  const auto version = r.get<uint32_t>();
  if (version != kVersion)
    throw DataError("load_epochs: unsupported container version " +
                    std::to_string(version) + " in " + path);

  EpochSet out;
  const auto n_epochs = r.get<uint32_t>();
  out.n_channels = int(r.get<uint32_t>());
  out.n_samples = int(r.get<uint32_t>());
  out.sampling_rate = double(r.get<float>());
  out.labels.reserve(n_epochs);
  for (uint32_t i = 0; i < n_epochs; ++i) {
    out.labels.push_back(r.get<uint8_t>());
    out.char_ids.push_back(r.get<uint16_t>());
    out.trial_ids.push_back(r.get<uint32_t>());
    out.subject_indices.push_back(r.get<uint16_t>());
    out.onset_samples.push_back(r.get<int64_t>());
  }
  const size_t n_values = size_t(n_epochs) * out.n_features();
  if (r.remaining() != n_values * 4)
    throw DataError("load_epochs: truncated container: " + path);
  out.data.reserve(n_values);
  for (size_t i = 0; i < n_values; ++i) out.data.push_back(double(r.get<float>()));
  for (const auto l : out.labels)
    if (l > 1) throw DataError("load_epochs: label out of range in " + path);
  return out;
}

EpochSet load_epochs_csv(const std::string& path, int n_channels, int n_samples,
                         double sampling_rate) {
  std::ifstream f(path);
  if (!f) throw DataError("load_epochs_csv: cannot open " + path);
  EpochSet out;
  out.n_channels = n_channels;
  out.n_samples = n_samples;
  out.sampling_rate = sampling_rate;
  const size_t n_features = out.n_features();

  std::string line;
  if (!std::getline(f, line))
    throw DataError("load_epochs_csv: empty file: " + path);
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    cells.reserve(5 + n_features);
    while (std::getline(ss, cell, ',')) {
      try {
        cells.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError("load_epochs_csv: bad number at line " +
                        std::to_string(lineno) + " in " + path);
      }
    }
    if (cells.size() != 5 + n_features)
      throw DataError("load_epochs_csv: expected " +
                      std::to_string(5 + n_features) + " columns, got " +
                      std::to_string(cells.size()) + " at line " +
                      std::to_string(lineno));
    const double label = cells[0];
    if (label != 0.0 && label != 1.0)
      throw DataError("load_epochs_csv: label must be 0/1 at line " +
                      std::to_string(lineno));
    out.labels.push_back(uint8_t(label));
    out.char_ids.push_back(uint16_t(cells[1]));
    out.trial_ids.push_back(uint32_t(cells[2]));
    out.subject_indices.push_back(uint16_t(cells[3]));
    out.onset_samples.push_back(int64_t(cells[4]));
    out.data.insert(out.data.end(), cells.begin() + 5, cells.end());
  }
  return out;
}

}  // namespace p300::data
