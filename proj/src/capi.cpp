#include "p300bci.h"

#include <cstring>
#include <filesystem>
#include <json.hpp>
#include <numeric>
#include <string>

#include "data_model.hpp"
#include "errors.hpp"
#include "harness.hpp"
#include "models.hpp"
#include "run_config.hpp"

namespace {

thread_local std::string g_last_error;

char* copy_out(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Every entry point funnels through here so exceptions map to one status
// taxonomy and the per-thread message stays coherent.
template <typename Fn>
p3_status guarded(Fn&& fn) {
  try {
    fn();
    return P3_OK;
  } catch (const p300::ConfigError& e) {
    g_last_error = e.what();
    return P3_CONFIG_ERROR;
  } catch (const p300::DataError& e) {
    g_last_error = e.what();
    return P3_DATA_ERROR;
  } catch (const p300::NumericError& e) {
    g_last_error = e.what();
    return P3_NUMERIC_ERROR;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return P3_ERROR;
  } catch (...) {
    g_last_error = "unknown error";
    return P3_ERROR;
  }
}

}  // namespace

struct p3_dataset {
  p300::harness::Dataset ds;
};

struct p3_scorer {
  p300::models::Scorer scorer;
};

extern "C" {

const char* p3_version(void) { return "1.0.0"; }

const char* p3_last_error(void) { return g_last_error.c_str(); }

void p3_string_free(char* s) { std::free(s); }

p3_status p3_config_render(const char* subcommand, const char* config_json,
                           const char* overrides_json, char** out_json) {
  return guarded([&] {
    if (!subcommand || !out_json)
      throw p300::ConfigError("p3_config_render: NULL argument");
    const auto cfg = p300::config::parse_config(
        subcommand, config_json ? config_json : "",
        overrides_json ? overrides_json : "");
    *out_json = copy_out(p300::config::render_config(cfg));
  });
}

p3_status p3_run(const char* subcommand, const char* config_json,
                 const char* out_dir, char** out_summary) {
  return guarded([&] {
    if (!subcommand || !out_dir)
      throw p300::ConfigError("p3_run: NULL argument");
    const auto cfg = p300::config::parse_config(subcommand,
                                                config_json ? config_json : "");
    const auto result = p300::harness::run(cfg, out_dir);
    if (out_summary) *out_summary = copy_out(result.summary);
  });
}

p3_status p3_dataset_generate(const char* synthetic_config_json,
                              p3_dataset** out) {
  return guarded([&] {
    if (!out) throw p300::ConfigError("p3_dataset_generate: NULL output");
    const auto cfg = p300::config::parse_config(
        "gen", synthetic_config_json ? synthetic_config_json : "");
    auto handle = std::make_unique<p3_dataset>();
    handle->ds = p300::harness::load_dataset(cfg, false);
    *out = handle.release();
  });
}

p3_status p3_dataset_open(const char* const* container_paths, size_t n_paths,
                          p3_dataset** out) {
  return guarded([&] {
    if (!out || !container_paths || n_paths == 0)
      throw p300::ConfigError("p3_dataset_open: no containers given");
    p300::config::RunConfig cfg;
    cfg.subcommand = "eval";
    for (size_t i = 0; i < n_paths; ++i) cfg.containers.emplace_back(container_paths[i]);
    auto handle = std::make_unique<p3_dataset>();
    handle->ds = p300::harness::load_dataset(cfg, false);
    *out = handle.release();
  });
}

p3_status p3_dataset_save(const p3_dataset* ds, const char* directory) {
  return guarded([&] {
    if (!ds || !directory) throw p300::ConfigError("p3_dataset_save: NULL argument");
    namespace fs = std::filesystem;
    fs::create_directories(directory);
    for (const auto subject : ds->ds.subjects) {
      const auto subset = ds->ds.all.select(ds->ds.by_subject.at(subject));
      char name[32];
      std::snprintf(name, sizeof name, "subject_%02d.p3ep", int(subject));
      p300::data::save_epochs(subset, (fs::path(directory) / name).string());
    }
  });
}

p3_status p3_dataset_info(const p3_dataset* ds, char** out_json) {
  return guarded([&] {
    if (!ds || !out_json) throw p300::ConfigError("p3_dataset_info: NULL argument");
    nlohmann::json doc;
    doc["n_epochs"] = ds->ds.all.n_epochs();
    doc["n_channels"] = ds->ds.all.n_channels;
    doc["n_samples"] = ds->ds.all.n_samples;
    doc["sampling_rate"] = ds->ds.all.sampling_rate;
    doc["subjects"] = ds->ds.subjects;
    size_t targets = 0;
    for (const auto l : ds->ds.all.labels) targets += l;
    doc["n_targets"] = targets;
    *out_json = copy_out(doc.dump(2) + "\n");
  });
}

void p3_dataset_free(p3_dataset* ds) { delete ds; }

p3_status p3_scorer_build(const char* kind, uint64_t seed, p3_scorer** out) {
  return guarded([&] {
    if (!kind || !out) throw p300::ConfigError("p3_scorer_build: NULL argument");
    auto handle = std::make_unique<p3_scorer>();
    handle->scorer = p300::models::Scorer::build(
        p300::models::model_kind_from_string(kind), seed);
    *out = handle.release();
  });
}

p3_status p3_scorer_param_count(const p3_scorer* s, uint64_t* out_count) {
  return guarded([&] {
    if (!s || !out_count)
      throw p300::ConfigError("p3_scorer_param_count: NULL argument");
    *out_count = uint64_t(s->scorer.param_count());
  });
}

p3_status p3_scorer_train(p3_scorer* s, const p3_dataset* ds,
                          const char* schedule_json) {
  return guarded([&] {
    if (!s || !ds) throw p300::ConfigError("p3_scorer_train: NULL argument");
    p300::models::TrainSchedule schedule;
    if (schedule_json && *schedule_json) {
      // Reuse the config-schema parser for the schedule block.
      const std::string wrapped = std::string(R"({"dataset":{"containers":["x"]},"schedule":)") +
                                  schedule_json + "}";
      schedule = p300::config::parse_config("train", wrapped).schedule;
    }
    std::vector<size_t> idx(ds->ds.all.n_epochs());
    std::iota(idx.begin(), idx.end(), size_t(0));
    p300::models::fit(s->scorer, ds->ds.all, idx, schedule);
  });
}

p3_status p3_scorer_fine_tune(p3_scorer* s, const p3_dataset* calibration) {
  return guarded([&] {
    if (!s || !calibration)
      throw p300::ConfigError("p3_scorer_fine_tune: NULL argument");
    std::vector<size_t> idx(calibration->ds.all.n_epochs());
    std::iota(idx.begin(), idx.end(), size_t(0));
    p300::models::fine_tune(s->scorer, calibration->ds.all, idx, 0);
  });
}

p3_status p3_scorer_score(const p3_scorer* s, const double* epoch, size_t len,
                          double* out_score) {
  return guarded([&] {
    if (!s || !epoch || !out_score)
      throw p300::ConfigError("p3_scorer_score: NULL argument");
    constexpr size_t kChannels = 55, kSamples = 25;
    if (len != kChannels * kSamples)
      throw p300::DataError("p3_scorer_score: expected " +
                            std::to_string(kChannels * kSamples) +
                            " doubles, got " + std::to_string(len));
    *out_score = s->scorer.score(epoch, int(kChannels), int(kSamples));
  });
}

p3_status p3_scorer_save(const p3_scorer* s, const char* path) {
  return guarded([&] {
    if (!s || !path) throw p300::ConfigError("p3_scorer_save: NULL argument");
    s->scorer.save(path);
  });
}

p3_status p3_scorer_open(const char* path, p3_scorer** out) {
  return guarded([&] {
    if (!path || !out) throw p300::ConfigError("p3_scorer_open: NULL argument");
    auto handle = std::make_unique<p3_scorer>();
    handle->scorer = p300::models::Scorer::load(path);
    *out = handle.release();
  });
}

void p3_scorer_free(p3_scorer* s) { delete s; }

}  // extern "C"
