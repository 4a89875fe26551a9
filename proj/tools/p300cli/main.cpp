// p300cli — command-line front end for the p300bci shared library.
//
// Every subcommand reads one JSON config document (--config), applies the
// flag overrides, and runs through the C API. Exit codes: 0 ok,
// 2 configuration error, 3 data error, 4 numeric failure, 1 otherwise.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "p300bci.h"

namespace {

struct Options {
  std::string config_path;
  std::string out_dir;
  std::string models;  // comma-separated
  uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 0;
  bool fine_tune = false;
  bool fine_tune_set = false;
  bool dump_config = false;
  int verbosity = 0;
};

const char* kModelNames =
    "lda, cnn, lstm_small, lstm_large, lstm_cnn_small, lstm_cnn_large";

// Config keys accepted per subcommand (the JSON schema; unknown keys are
// rejected). Shown in --help so the schema is discoverable from the CLI.
std::string config_help(const std::string& sub) {
  const std::string synthetic =
      "  synthetic: {n_subjects, n_channels, n_chars, n_trials_per_subject,\n"
      "              n_repetitions, sampling_rate, soa_ms,\n"
      "              p300: {latency_ms, width_ms, amplitude}, bump_channels,\n"
      "              noise: {ar_coeff, std},\n"
      "              subject_variation: {latency_jitter_std_ms, amplitude_scale_std}}\n";
  const std::string dataset =
      "  dataset: exactly one of\n"
      "    {\"synthetic\": {...}}  (see gen --help for the synthetic keys)\n"
      "    {\"containers\": [\"subject_00.p3ep\", ...]}\n";
  const std::string schedule =
      "  schedule: {phases: [[epochs, lr], ...], batch_size, rho, epsilon,\n"
      "             pos_weight}\n";
  std::string h = "Config file keys (JSON):\n  seed, jobs\n";
  if (sub == "gen") return h + synthetic + "  downsample_factor\n";
  if (sub == "eval")
    return h + dataset +
           "  folds, repetitions, downsample_factor,\n"
           "  checkpoints: [{path, model, subject, fold}, ...]\n";
  h += dataset;
  h += std::string("  models: [") + kModelNames + "]\n";
  h += "  repetitions, downsample_factor, standardize\n";
  h += schedule;
  if (sub == "train") return h + "  experiment: within_subject | pooled\n  folds, save_checkpoints\n";
  if (sub == "xsubject")
    return h +
           "  fine_tune, calibration_fraction, fine_tune_schedule,\n"
           "  held_out_subjects: [subject indices], save_checkpoints\n";
  if (sub == "noise") return h + "  folds, noise_levels_ms: [nonzero ms offsets]\n";
  if (sub == "saliency") return h + "  folds, saliency_band_ms: [lo, hi], render_svg\n";
  return h;
}

int fail(const std::string& stage, p3_status status) {
  std::fprintf(stderr, "p300cli: %s failed: %s\n", stage.c_str(), p3_last_error());
  return int(status);
}

int run_subcommand(const std::string& sub, const Options& opt) {
  std::string config_text;
  if (!opt.config_path.empty()) {
    std::ifstream f(opt.config_path);
    if (!f) {
      std::fprintf(stderr, "p300cli: cannot read config file %s\n",
                   opt.config_path.c_str());
      return int(P3_CONFIG_ERROR);
    }
    std::stringstream ss;
    ss << f.rdbuf();
    config_text = ss.str();
  }

  nlohmann::json overrides = nlohmann::json::object();
  if (opt.seed_set) overrides["seed"] = opt.seed;
  if (opt.jobs > 0) overrides["jobs"] = opt.jobs;
  if (!opt.models.empty()) {
    nlohmann::json names = nlohmann::json::array();
    std::stringstream ss(opt.models);
    std::string name;
    while (std::getline(ss, name, ','))
      if (!name.empty()) names.push_back(name);
    overrides["models"] = names;
  }
  if (opt.fine_tune_set) overrides["fine_tune"] = opt.fine_tune;

  char* canonical = nullptr;
  const p3_status rendered = p3_config_render(
      sub.c_str(), config_text.empty() ? nullptr : config_text.c_str(),
      overrides.empty() ? nullptr : overrides.dump().c_str(), &canonical);
  if (rendered != P3_OK) return fail("config", rendered);
  const std::string config_json = canonical;
  p3_string_free(canonical);

  if (opt.dump_config) {
    std::fputs(config_json.c_str(), stdout);
    return 0;
  }
  if (opt.verbosity > 0) {
    std::fprintf(stderr, "-- effective config --\n%s----\n", config_json.c_str());
  }

  if (opt.out_dir.empty()) {
    std::fprintf(stderr,
                 "p300cli: --out is required (or use --dump-config)\n");
    return int(P3_CONFIG_ERROR);
  }

  char* summary = nullptr;
  const p3_status status =
      p3_run(sub.c_str(), config_json.c_str(), opt.out_dir.c_str(), &summary);
  if (status != P3_OK) return fail(sub, status);
  if (summary) {
    std::fputs(summary, stdout);
    p3_string_free(summary);
  }
  std::printf("artifacts written to %s\n", opt.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("p300bci ") + p3_version() +
               " — RSVP P300 speller decoding experiments"};
  app.require_subcommand(1);

  Options opt;
  const std::pair<const char*, const char*> subs[] = {
      {"gen", "Generate a synthetic dataset and write epoch containers"},
      {"train", "Within-subject or pooled k-fold training + decoding"},
      {"eval", "Decode saved checkpoints against a dataset"},
      {"xsubject", "Leave-one-subject-out transfer, optional fine-tuning"},
      {"noise", "Stimulus-onset noise sweep with per-level t-tests"},
      {"saliency", "Input-gradient saliency maps of trained models"},
  };
  for (const auto& [name, desc] : subs) {
    CLI::App* cmd = app.add_subcommand(name, desc);
    cmd->add_option("--config", opt.config_path, "JSON config file");
    cmd->add_option("--out", opt.out_dir, "output directory");
    cmd->add_option("--seed", opt.seed, "root seed override")
        ->trigger_on_parse()
        ->each([&](const std::string&) { opt.seed_set = true; });
    cmd->add_option("--jobs", opt.jobs, "worker threads (default 1)");
    if (std::string(name) != "gen" && std::string(name) != "eval")
      cmd->add_option("--models", opt.models,
                      std::string("comma list of: ") + kModelNames);
    if (std::string(name) == "xsubject")
      cmd->add_flag("--fine-tune", opt.fine_tune,
                    "calibrate on 3/4 of the held-out subject")
          ->trigger_on_parse()
          ->each([&](const std::string&) { opt.fine_tune_set = true; });
    cmd->add_flag("--dump-config", opt.dump_config,
                  "print the effective config and exit");
    cmd->add_flag("-v,--verbose", opt.verbosity, "print progress detail");
    cmd->footer(config_help(name));
  }

  CLI11_PARSE(app, argc, argv);
  const std::string sub = app.get_subcommands().front()->get_name();
  return run_subcommand(sub, opt);
}
