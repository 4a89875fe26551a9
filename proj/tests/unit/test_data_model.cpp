#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "data_model.hpp"
#include "errors.hpp"

using namespace p300;
using namespace p300::data;

namespace {

SyntheticConfig small_config() {
  SyntheticConfig cfg;
  cfg.n_subjects = 1;
  cfg.n_channels = 8;
  cfg.n_chars = 6;
  cfg.n_trials_per_subject = 4;
  cfg.n_repetitions = 3;
  cfg.bump_channels = {2, 3};
  cfg.p300.amplitude = 5.0;
  cfg.noise.std = 0.5;
  cfg.seed = 42;
  return cfg;
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

// Minimal hand-built set: values chosen f32-exact so container IO is lossless.
EpochSet tiny_epochs(uint32_t n_epochs = 2, int n_channels = 3, int n_samples = 4) {
  EpochSet e;
  e.n_channels = n_channels;
  e.n_samples = n_samples;
  e.sampling_rate = 25.0;
  for (uint32_t i = 0; i < n_epochs; ++i) {
    e.labels.push_back(i % 2);
    e.char_ids.push_back(uint16_t(i));
    e.trial_ids.push_back(i / 2);
    e.subject_indices.push_back(0);
    e.onset_samples.push_back(int64_t(100 * i));
    for (size_t j = 0; j < size_t(n_channels) * size_t(n_samples); ++j)
      e.data.push_back(double(i) + 0.5 * double(j));
  }
  return e;
}

}  // namespace

TEST_CASE("generator: event bookkeeping matches trials*repetitions*chars") {
  SyntheticConfig cfg = small_config();
  cfg.n_chars = 30;
  cfg.n_trials_per_subject = 60;
  cfg.n_repetitions = 10;
  const RawRecording rec = generate_subject(cfg, 0);

  CHECK(rec.events.size() == 60u * 10u * 30u);  // 18,000
  size_t targets = 0;
  for (const auto& ev : rec.events) targets += ev.is_target ? 1 : 0;
  CHECK(targets * 30 == rec.events.size());  // exactly 1/30

  // Each trial is a complete R x C grid with a single target character.
  std::map<uint32_t, std::map<uint16_t, int>> counts;
  std::map<uint32_t, std::set<uint16_t>> target_chars;
  for (const auto& ev : rec.events) {
    counts[ev.trial_id][ev.char_id]++;
    if (ev.is_target) target_chars[ev.trial_id].insert(ev.char_id);
  }
  CHECK(counts.size() == 60u);
  for (const auto& [trial, per_char] : counts) {
    CHECK(per_char.size() == 30u);
    for (const auto& [ch, n] : per_char) CHECK(n == 10);
    CHECK(target_chars[trial].size() == 1u);
  }
}

TEST_CASE("generator: deterministic given the seed") {
  const SyntheticConfig cfg = small_config();
  const RawRecording a = generate_subject(cfg, 0);
  const RawRecording b = generate_subject(cfg, 0);
  REQUIRE(a.signal.size() == b.signal.size());
  CHECK(std::memcmp(a.signal.data(), b.signal.data(),
                    a.signal.size() * sizeof(float)) == 0);
  REQUIRE(a.events.size() == b.events.size());
  for (size_t i = 0; i < a.events.size(); ++i) {
    CHECK(a.events[i].onset_sample == b.events[i].onset_sample);
    CHECK(a.events[i].char_id == b.events[i].char_id);
    CHECK(a.events[i].is_target == b.events[i].is_target);
  }

  SyntheticConfig other = cfg;
  other.seed = 43;
  const RawRecording c = generate_subject(other, 0);
  CHECK(std::memcmp(a.signal.data(), c.signal.data(),
                    a.signal.size() * sizeof(float)) != 0);
}

TEST_CASE("generator: grand-average difference peaks inside the bump window") {
  SyntheticConfig cfg = small_config();
  cfg.n_trials_per_subject = 12;
  const RawRecording rec = generate_subject(cfg, 0);

  // Independent averaging straight off the raw arrays.
  const double fs = rec.sampling_rate;
  const auto w_lo = int64_t(-200.0 * fs / 1000.0);
  const auto w_len = int64_t(1000.0 * fs / 1000.0);
  const int bump_channel = 2;
  std::vector<double> avg_t(size_t(w_len), 0.0), avg_n(size_t(w_len), 0.0);
  size_t n_t = 0, n_n = 0;
  for (const auto& ev : rec.events) {
    auto& acc = ev.is_target ? avg_t : avg_n;
    (ev.is_target ? n_t : n_n)++;
    for (int64_t s = 0; s < w_len; ++s)
      acc[size_t(s)] += rec.at(bump_channel, ev.onset_sample + w_lo + s);
  }
  for (auto& v : avg_t) v /= double(n_t);
  for (auto& v : avg_n) v /= double(n_n);

  int64_t peak = 0;
  double best = -1e300;
  for (int64_t s = 0; s < w_len; ++s)
    if (avg_t[size_t(s)] - avg_n[size_t(s)] > best) {
      best = avg_t[size_t(s)] - avg_n[size_t(s)];
      peak = s;
    }
  const double peak_ms = (double(peak + w_lo)) / fs * 1000.0;
  CHECK(peak_ms >= cfg.p300.latency_ms - cfg.p300.width_ms / 2);
  CHECK(peak_ms <= cfg.p300.latency_ms + cfg.p300.width_ms / 2);
}

TEST_CASE("generator: rejects invalid configs") {
  SyntheticConfig cfg = small_config();
  cfg.n_chars = 1;
  CHECK_THROWS_AS((void)generate_subject(cfg, 0), ConfigError);
  cfg = small_config();
  cfg.noise.std = 0.0;
  CHECK_THROWS_AS((void)generate_subject(cfg, 0), ConfigError);
  cfg = small_config();
  cfg.bump_channels = {99};
  CHECK_THROWS_AS((void)generate_subject(cfg, 0), ConfigError);
}

TEST_CASE("extract: window arithmetic and jitter") {
  const SyntheticConfig cfg = small_config();
  const RawRecording rec = generate_subject(cfg, 0);

  const EpochSet base = extract_epochs(rec);
  CHECK(base.n_epochs() == rec.events.size());
  CHECK(base.n_samples == 200);  // 1 s at 200 Hz
  CHECK(base.n_channels == cfg.n_channels);

  SUBCASE("zero jitter equals the plain extraction") {
    const EpochSet again = extract_epochs(rec, {}, 0);
    CHECK(again.data == base.data);
  }

  SUBCASE("+40 ms shifts the window by exactly 8 samples") {
    const EpochSet shifted = extract_epochs(rec, {}, 40);
    // Index-arithmetic oracle against the raw signal.
    const auto& ev = rec.events[5];
    for (int t = 0; t < 200; ++t) {
      const double expect = rec.at(1, ev.onset_sample - 40 + 8 + t);
      CHECK(shifted.epoch(5)[1 * 200 + t] == expect);
    }
  }

  SUBCASE("every downstream jitter level is an integer sample count") {
    for (const int j : {-120, -80, -40, 40, 80, 120})
      CHECK_NOTHROW((void)extract_epochs(rec, {}, j));
    CHECK_THROWS_AS((void)extract_epochs(rec, {}, 1), ConfigError);  // 0.2 samples
  }

  SUBCASE("out-of-bounds windows are reported per event") {
    RawRecording bad = rec;
    bad.events[0].onset_sample = 2;  // window starts before the recording
    bad.events[3].onset_sample = 3;
    try {
      (void)extract_epochs(bad);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2 event(s)") != std::string::npos);
      CHECK(msg.find("#0") != std::string::npos);
      CHECK(msg.find("#3") != std::string::npos);
    }
  }
}

TEST_CASE("downsample: block means") {
  EpochSet e;
  e.n_channels = 1;
  e.n_samples = 200;
  e.sampling_rate = 200.0;
  e.labels = {0};
  e.char_ids = {0};
  e.trial_ids = {0};
  e.subject_indices = {0};
  e.onset_samples = {0};

  SUBCASE("constant signal is preserved") {
    e.data.assign(200, 5.0);
    const EpochSet d = downsample(e, 8);
    CHECK(d.n_samples == 25);
    CHECK(d.sampling_rate == doctest::Approx(25.0));
    for (int t = 0; t < 25; ++t) CHECK(d.epoch(0)[t] == doctest::Approx(5.0));
  }

  SUBCASE("first block 0..7 averages to 3.5") {
    for (int t = 0; t < 200; ++t) e.data.push_back(double(t));
    const EpochSet d = downsample(e, 8);
    CHECK(d.epoch(0)[0] == doctest::Approx(3.5));
    CHECK(d.epoch(0)[1] == doctest::Approx(11.5));
  }

  SUBCASE("non-divisible length is an error") {
    e.n_samples = 199;
    e.data.assign(199, 0.0);
    CHECK_THROWS_AS((void)downsample(e, 8), DataError);
  }

  SUBCASE("composition: downsample(a) then (b) equals downsample(a*b)") {
    for (int t = 0; t < 200; ++t) e.data.push_back(0.25 * t * t - 3.0 * t);
    const EpochSet two_step = downsample(downsample(e, 2), 4);
    const EpochSet one_step = downsample(e, 8);
    REQUIRE(two_step.data.size() == one_step.data.size());
    for (size_t i = 0; i < one_step.data.size(); ++i)
      CHECK(two_step.data[i] == doctest::Approx(one_step.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("downsample: reference shape gives 55*25 = 1375 features") {
  const size_t n_features = 55 * 200;
  EpochSet e;
  e.n_channels = 55;
  e.n_samples = 200;
  e.sampling_rate = 200.0;
  e.labels = {1};
  e.char_ids = {0};
  e.trial_ids = {0};
  e.subject_indices = {0};
  e.onset_samples = {0};
  e.data.assign(n_features, 1.0);
  const EpochSet d = downsample(e, 8);
  CHECK(d.n_features() == 1375u);
  CHECK(d.sampling_rate == doctest::Approx(25.0));
}

TEST_CASE("split_folds: partition and round-robin sizes") {
  auto with_trials = [](int n) {
    EpochSet e;
    e.n_channels = 1;
    e.n_samples = 1;
    e.sampling_rate = 1.0;
    for (int t = 0; t < n; ++t)
      for (int rep = 0; rep < 2; ++rep) {
        e.labels.push_back(0);
        e.char_ids.push_back(0);
        e.trial_ids.push_back(uint32_t(t));
        e.subject_indices.push_back(0);
        e.onset_samples.push_back(0);
        e.data.push_back(0.0);
      }
    return e;
  };

  SUBCASE("10 trials into 10 folds: one each") {
    const FoldAssignment fa = split_folds(with_trials(10), 10, 1);
    std::map<int, int> sizes;
    for (const auto& [key, fold] : fa.fold_of_trial) sizes[fold]++;
    CHECK(sizes.size() == 10u);
    for (const auto& [fold, n] : sizes) CHECK(n == 1);
  }

  SUBCASE("folds cover every trial exactly once") {
    const EpochSet e = with_trials(17);
    const FoldAssignment fa = split_folds(e, 5, 9);
    CHECK(fa.fold_of_trial.size() == 17u);
    for (size_t i = 0; i < e.n_epochs(); ++i)
      CHECK(fa.fold_of_trial.count(trial_key_of(e, i)) == 1u);
  }

  SUBCASE("23 trials into 10 folds: sizes 3 and 2 only") {
    const FoldAssignment fa = split_folds(with_trials(23), 10, 7);
    std::map<int, int> sizes;
    for (const auto& [key, fold] : fa.fold_of_trial) sizes[fold]++;
    int threes = 0, twos = 0;
    for (const auto& [fold, n] : sizes) {
      CHECK((n == 2 || n == 3));
      (n == 3 ? threes : twos)++;
    }
    CHECK(threes == 3);
    CHECK(twos == 7);
  }

  SUBCASE("deterministic in the seed alone") {
    const EpochSet e = with_trials(12);
    CHECK(split_folds(e, 4, 5).fold_of_trial == split_folds(e, 4, 5).fold_of_trial);
    CHECK(split_folds(e, 4, 5).fold_of_trial != split_folds(e, 4, 6).fold_of_trial);
  }

  SUBCASE("bad k") {
    CHECK_THROWS_AS((void)split_folds(with_trials(5), 1, 0), ConfigError);
    CHECK_THROWS_AS((void)split_folds(with_trials(5), 6, 0), ConfigError);
  }
}

TEST_CASE("container: round-trip and byte layout") {
  const EpochSet e = tiny_epochs();
  const auto path = temp_file("p300_roundtrip.p3ep");
  save_epochs(e, path.string());

  SUBCASE("field-for-field round-trip") {
    const EpochSet r = load_epochs(path.string());
    CHECK(r.n_channels == e.n_channels);
    CHECK(r.n_samples == e.n_samples);
    CHECK(r.sampling_rate == e.sampling_rate);
    CHECK(r.labels == e.labels);
    CHECK(r.char_ids == e.char_ids);
    CHECK(r.trial_ids == e.trial_ids);
    CHECK(r.subject_indices == e.subject_indices);
    CHECK(r.onset_samples == e.onset_samples);
    CHECK(r.data == e.data);

    // A second save of the loaded set is byte-identical.
    const auto path2 = temp_file("p300_roundtrip2.p3ep");
    save_epochs(r, path2.string());
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), {});
    const std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
  }

  SUBCASE("byte-count oracle: 2 epochs x 3 ch x 4 samples") {
    // header 24 + 2 records x 17 + payload 2*3*4*4 = 154 bytes
    CHECK(std::filesystem::file_size(path) == 24u + 2u * 17u + 96u);

    // Independent reader: parse the documented layout directly.
    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), {});
    CHECK(bytes.substr(0, 4) == "P3EP");
    uint32_t version = 0, n_epochs = 0, n_ch = 0, n_s = 0;
    float rate = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&n_epochs, bytes.data() + 8, 4);
    std::memcpy(&n_ch, bytes.data() + 12, 4);
    std::memcpy(&n_s, bytes.data() + 16, 4);
    std::memcpy(&rate, bytes.data() + 20, 4);
    CHECK(version == 1u);
    CHECK(n_epochs == 2u);
    CHECK(n_ch == 3u);
    CHECK(n_s == 4u);
    CHECK(rate == doctest::Approx(25.0f));
    // First record: label, char, trial, subject, onset.
    CHECK(uint8_t(bytes[24]) == 0);
    uint16_t char_id = 0;
    std::memcpy(&char_id, bytes.data() + 25, 2);
    CHECK(char_id == 0);
    // First payload float: epoch 0, channel 0, sample 0 == 0.0f.
    float v0 = -1;
    std::memcpy(&v0, bytes.data() + 24 + 34, 4);
    CHECK(v0 == 0.0f);
  }

  SUBCASE("corruption is detected distinctly") {
    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), {});

    auto write_variant = [&](const std::string& b, const char* name) {
      const auto p = temp_file(name);
      std::ofstream out(p, std::ios::binary | std::ios::trunc);
      out.write(b.data(), std::streamsize(b.size()));
      return p;
    };

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
      (void)load_epochs(write_variant(bad_magic, "bad_magic.p3ep").string());
      FAIL("expected DataError");
    } catch (const DataError& err) {
      CHECK(std::string(err.what()).find("bad magic") != std::string::npos);
    }

    std::string bad_version = bytes;
    bad_version[4] = 9;
    try {
      (void)load_epochs(write_variant(bad_version, "bad_version.p3ep").string());
      FAIL("expected DataError");
    } catch (const DataError& err) {
      CHECK(std::string(err.what()).find("version") != std::string::npos);
    }

    const std::string truncated = bytes.substr(0, bytes.size() - 10);
    try {
      (void)load_epochs(write_variant(truncated, "truncated.p3ep").string());
      FAIL("expected DataError");
    } catch (const DataError& err) {
      CHECK(std::string(err.what()).find("truncated") != std::string::npos);
    }
  }
}

TEST_CASE("container: csv import for tiny fixtures") {
  const auto path = temp_file("p300_fixture.csv");
  {
    std::ofstream f(path, std::ios::trunc);
    f << "label,char_id,trial_id,subject_index,onset_sample,f0,f1,f2,f3,f4,f5\n";
    f << "1,2,3,0,400,0.5,1.5,2.5,3.5,4.5,5.5\n";
    f << "0,1,3,0,500,-1,-2,-3,-4,-5,-6\n";
  }
  const EpochSet e = load_epochs_csv(path.string(), 2, 3, 25.0);
  CHECK(e.n_epochs() == 2u);
  CHECK(e.labels[0] == 1);
  CHECK(e.char_ids[0] == 2);
  CHECK(e.trial_ids[1] == 3u);
  CHECK(e.onset_samples[1] == 500);
  CHECK(e.epoch(1)[5] == doctest::Approx(-6.0));

  {
    std::ofstream f(path, std::ios::trunc);
    f << "label,char_id,trial_id,subject_index,onset_sample,f0\n";
    f << "1,0,0,0,0,1.0,2.0\n";  // too many columns
  }
  CHECK_THROWS_AS((void)load_epochs_csv(path.string(), 1, 1, 25.0), DataError);
}

TEST_CASE("epoch metadata: select and append keep rows aligned") {
  const EpochSet e = tiny_epochs(4);
  const EpochSet s = e.select({3, 1});
  CHECK(s.n_epochs() == 2u);
  CHECK(s.char_ids[0] == 3);
  CHECK(s.char_ids[1] == 1);
  CHECK(s.epoch(0)[0] == e.epoch(3)[0]);

  EpochSet a = tiny_epochs(2);
  a.append(tiny_epochs(3));
  CHECK(a.n_epochs() == 5u);
  CHECK(a.data.size() == 5u * a.n_features());
}
