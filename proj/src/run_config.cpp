#include "run_config.hpp"

#include <json.hpp>
#include <set>

#include "errors.hpp"
#include "rng.hpp"

namespace p300::config {

using nlohmann::json;

namespace {

const std::set<std::string> kSubcommands{"gen",      "train", "eval",
                                         "xsubject", "noise", "saliency"};

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
  if (!obj.is_object())
    throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback,
         const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

data::SyntheticConfig parse_synthetic(const json& obj, uint64_t root_seed,
                                      const std::string& where) {
  require_keys(obj,
               {"n_subjects", "n_channels", "n_chars", "n_trials_per_subject",
                "n_repetitions", "sampling_rate", "soa_ms", "p300",
                "bump_channels", "noise", "subject_variation"},
               where);
  data::SyntheticConfig s;
  s.n_subjects = get_or(obj, "n_subjects", s.n_subjects, where);
  s.n_channels = get_or(obj, "n_channels", s.n_channels, where);
  s.n_chars = get_or(obj, "n_chars", s.n_chars, where);
  s.n_trials_per_subject =
      get_or(obj, "n_trials_per_subject", s.n_trials_per_subject, where);
  s.n_repetitions = get_or(obj, "n_repetitions", s.n_repetitions, where);
  s.sampling_rate = get_or(obj, "sampling_rate", s.sampling_rate, where);
  s.soa_ms = get_or(obj, "soa_ms", s.soa_ms, where);
  if (obj.contains("p300")) {
    const json& p = obj.at("p300");
    require_keys(p, {"latency_ms", "width_ms", "amplitude"}, where + ".p300");
    s.p300.latency_ms = get_or(p, "latency_ms", s.p300.latency_ms, where);
    s.p300.width_ms = get_or(p, "width_ms", s.p300.width_ms, where);
    s.p300.amplitude = get_or(p, "amplitude", s.p300.amplitude, where);
  }
  s.bump_channels =
      get_or(obj, "bump_channels", s.bump_channels, where);
  if (obj.contains("noise")) {
    const json& n = obj.at("noise");
    require_keys(n, {"ar_coeff", "std"}, where + ".noise");
    s.noise.ar_coeff = get_or(n, "ar_coeff", s.noise.ar_coeff, where);
    s.noise.std = get_or(n, "std", s.noise.std, where);
  }
  if (obj.contains("subject_variation")) {
    const json& v = obj.at("subject_variation");
    require_keys(v, {"latency_jitter_std_ms", "amplitude_scale_std"},
                 where + ".subject_variation");
    s.subject_variation.latency_jitter_std_ms = get_or(
        v, "latency_jitter_std_ms", s.subject_variation.latency_jitter_std_ms,
        where);
    s.subject_variation.amplitude_scale_std = get_or(
        v, "amplitude_scale_std", s.subject_variation.amplitude_scale_std,
        where);
  }
  s.seed = derive_seed(root_seed, "data");
  s.validate();
  return s;
}

json render_synthetic(const data::SyntheticConfig& s) {
  json p300{{"latency_ms", s.p300.latency_ms},
            {"width_ms", s.p300.width_ms},
            {"amplitude", s.p300.amplitude}};
  json noise{{"ar_coeff", s.noise.ar_coeff}, {"std", s.noise.std}};
  json var{{"latency_jitter_std_ms", s.subject_variation.latency_jitter_std_ms},
           {"amplitude_scale_std", s.subject_variation.amplitude_scale_std}};
  return json{{"n_subjects", s.n_subjects},
              {"n_channels", s.n_channels},
              {"n_chars", s.n_chars},
              {"n_trials_per_subject", s.n_trials_per_subject},
              {"n_repetitions", s.n_repetitions},
              {"sampling_rate", s.sampling_rate},
              {"soa_ms", s.soa_ms},
              {"p300", p300},
              {"bump_channels", s.bump_channels},
              {"noise", noise},
              {"subject_variation", var}};
}

models::TrainSchedule parse_schedule(const json& obj,
                                     const models::TrainSchedule& defaults,
                                     const std::string& where) {
  require_keys(obj, {"phases", "batch_size", "rho", "epsilon", "pos_weight"},
               where);
  models::TrainSchedule s = defaults;
  if (obj.contains("phases")) {
    s.phases.clear();
    const json& phases = obj.at("phases");
    if (!phases.is_array())
      throw ConfigError(where + ".phases: expected an array of [epochs, lr]");
    for (const auto& ph : phases) {
      if (!ph.is_array() || ph.size() != 2)
        throw ConfigError(where + ".phases: each phase is [epochs, lr]");
      s.phases.push_back({ph.at(0).get<int>(), ph.at(1).get<double>()});
    }
  }
  s.batch_size = get_or(obj, "batch_size", s.batch_size, where);
  s.rho = get_or(obj, "rho", s.rho, where);
  s.epsilon = get_or(obj, "epsilon", s.epsilon, where);
  s.pos_weight = get_or(obj, "pos_weight", s.pos_weight, where);
  s.validate();
  return s;
}

json render_schedule(const models::TrainSchedule& s) {
  json phases = json::array();
  for (const auto& ph : s.phases) phases.push_back({ph.epochs, ph.learning_rate});
  return json{{"phases", phases},
              {"batch_size", s.batch_size},
              {"rho", s.rho},
              {"epsilon", s.epsilon},
              {"pos_weight", s.pos_weight}};
}

std::vector<models::ModelKind> parse_models(const json& arr,
                                            const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + ": expected an array of names");
  std::vector<models::ModelKind> kinds;
  for (const auto& name : arr) {
    if (!name.is_string()) throw ConfigError(where + ": model names are strings");
    kinds.push_back(models::model_kind_from_string(name.get<std::string>()));
  }
  if (kinds.empty()) throw ConfigError(where + ": at least one model");
  return kinds;
}

void parse_dataset(const json& obj, RunConfig& cfg, const std::string& where) {
  require_keys(obj, {"synthetic", "containers"}, where);
  const bool has_synth = obj.contains("synthetic");
  const bool has_files = obj.contains("containers");
  if (has_synth == has_files)
    throw ConfigError(where + ": exactly one of 'synthetic' or 'containers'");
  if (has_synth) {
    cfg.synthetic =
        parse_synthetic(obj.at("synthetic"), cfg.seed, where + ".synthetic");
  } else {
    cfg.containers = obj.at("containers").get<std::vector<std::string>>();
    if (cfg.containers.empty())
      throw ConfigError(where + ".containers: at least one path");
  }
}

}  // namespace

RunConfig parse_config(const std::string& subcommand, const std::string& json_text,
                       const std::string& overrides_json) {
  if (!kSubcommands.count(subcommand))
    throw ConfigError("unknown subcommand '" + subcommand + "'");

  json doc = json::object();
  if (!json_text.empty()) {
    try {
      doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");

  // Flag overrides land before validation so the canonical echo matches.
  if (!overrides_json.empty()) {
    json ov;
    try {
      ov = json::parse(overrides_json);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("overrides: ") + e.what());
    }
    require_keys(ov, {"seed", "jobs", "models", "fine_tune"}, "overrides");
    if (ov.contains("seed")) doc["seed"] = ov.at("seed");
    if (ov.contains("jobs")) doc["jobs"] = ov.at("jobs");
    if (ov.contains("models")) doc["models"] = ov.at("models");
    if (ov.contains("fine_tune")) {
      if (subcommand != "xsubject")
        throw ConfigError("overrides: fine_tune only applies to xsubject");
      doc["fine_tune"] = ov.at("fine_tune");
    }
  }

  RunConfig cfg;
  cfg.subcommand = subcommand;
  cfg.seed = get_or<uint64_t>(doc, "seed", 0, subcommand);
  cfg.jobs = get_or(doc, "jobs", 1, subcommand);
  if (cfg.jobs < 1) throw ConfigError("jobs must be >= 1");

  std::set<std::string> allowed{"seed", "jobs"};

  if (subcommand == "gen") {
    allowed.insert({"synthetic", "downsample_factor"});
    require_keys(doc, allowed, "gen");
    cfg.synthetic = doc.contains("synthetic")
                        ? parse_synthetic(doc.at("synthetic"), cfg.seed, "synthetic")
                        : [&] {
                            data::SyntheticConfig s;
                            s.seed = derive_seed(cfg.seed, "data");
                            return s;
                          }();
    cfg.downsample_factor = get_or(doc, "downsample_factor", 8, "gen");
  } else if (subcommand == "eval") {
    allowed.insert(
        {"dataset", "folds", "repetitions", "checkpoints", "downsample_factor"});
    require_keys(doc, allowed, "eval");
    if (!doc.contains("dataset")) throw ConfigError("eval: 'dataset' is required");
    parse_dataset(doc.at("dataset"), cfg, "dataset");
    cfg.folds = get_or(doc, "folds", cfg.folds, "eval");
    cfg.repetitions = get_or(doc, "repetitions", cfg.repetitions, "eval");
    cfg.downsample_factor = get_or(doc, "downsample_factor", 8, "eval");
    if (!doc.contains("checkpoints") || doc.at("checkpoints").empty())
      throw ConfigError("eval: 'checkpoints' is required");
    for (const auto& c : doc.at("checkpoints")) {
      require_keys(c, {"path", "model", "subject", "fold"}, "checkpoints[]");
      RunConfig::CheckpointRef ref;
      if (!c.contains("path")) throw ConfigError("checkpoints[].path is required");
      ref.path = c.at("path").get<std::string>();
      ref.model = get_or<std::string>(c, "model", "", "checkpoints[]");
      ref.subject = get_or(c, "subject", -1, "checkpoints[]");
      ref.fold = get_or(c, "fold", -1, "checkpoints[]");
      cfg.checkpoints.push_back(std::move(ref));
    }
  } else {
    // train / xsubject / noise / saliency share the training surface.
    allowed.insert({"models", "dataset", "repetitions", "schedule",
                    "standardize", "downsample_factor"});
    if (subcommand == "train")
      allowed.insert({"experiment", "folds", "save_checkpoints"});
    if (subcommand == "xsubject")
      allowed.insert({"fine_tune", "calibration_fraction", "fine_tune_schedule",
                      "held_out_subjects", "save_checkpoints"});
    if (subcommand == "noise") allowed.insert({"folds", "noise_levels_ms"});
    if (subcommand == "saliency")
      allowed.insert({"folds", "saliency_band_ms", "render_svg"});
    require_keys(doc, allowed, subcommand);

    if (!doc.contains("dataset"))
      throw ConfigError(subcommand + ": 'dataset' is required");
    parse_dataset(doc.at("dataset"), cfg, "dataset");

    cfg.model_kinds = doc.contains("models")
                          ? parse_models(doc.at("models"), "models")
                          : models::all_model_kinds();
    cfg.repetitions = get_or(doc, "repetitions", cfg.repetitions, subcommand);
    if (cfg.repetitions < 1) throw ConfigError("repetitions must be >= 1");
    if (doc.contains("schedule"))
      cfg.schedule = parse_schedule(doc.at("schedule"), cfg.schedule, "schedule");
    cfg.standardize = get_or(doc, "standardize", false, subcommand);
    cfg.downsample_factor = get_or(doc, "downsample_factor", 8, subcommand);
    cfg.folds = get_or(doc, "folds", cfg.folds, subcommand);
    if (cfg.folds < 2) throw ConfigError("folds must be >= 2");

    if (subcommand == "train") {
      cfg.experiment = get_or<std::string>(doc, "experiment", "within_subject",
                                           "train");
      if (cfg.experiment != "within_subject" && cfg.experiment != "pooled")
        throw ConfigError("train.experiment must be within_subject or pooled");
      cfg.save_checkpoints = get_or(doc, "save_checkpoints", true, "train");
    }
    if (subcommand == "xsubject") {
      cfg.experiment = "loso";
      cfg.fine_tune = get_or(doc, "fine_tune", false, "xsubject");
      cfg.calibration_fraction =
          get_or(doc, "calibration_fraction", 0.75, "xsubject");
      if (cfg.calibration_fraction <= 0.0 || cfg.calibration_fraction >= 1.0)
        throw ConfigError("calibration_fraction must be in (0,1)");
      if (doc.contains("fine_tune_schedule"))
        cfg.fine_tune_sched = parse_schedule(doc.at("fine_tune_schedule"),
                                             cfg.fine_tune_sched,
                                             "fine_tune_schedule");
      cfg.held_out_subjects = get_or(doc, "held_out_subjects",
                                     cfg.held_out_subjects, "xsubject");
      cfg.save_checkpoints = get_or(doc, "save_checkpoints", true, "xsubject");
    }
    if (subcommand == "noise") {
      cfg.experiment = "noise_sweep";
      cfg.noise_levels_ms =
          get_or(doc, "noise_levels_ms", cfg.noise_levels_ms, "noise");
      if (cfg.noise_levels_ms.empty())
        throw ConfigError("noise_levels_ms: at least one level");
      for (const int level : cfg.noise_levels_ms)
        if (level == 0)
          throw ConfigError("noise_levels_ms lists the nonzero levels; the "
                            "baseline is always included");
      cfg.save_checkpoints = false;
    }
    if (subcommand == "saliency") {
      cfg.experiment = "saliency";
      if (doc.contains("saliency_band_ms")) {
        const auto band = doc.at("saliency_band_ms").get<std::vector<double>>();
        if (band.size() != 2 || band[0] >= band[1])
          throw ConfigError("saliency_band_ms must be [lo, hi] with lo < hi");
        cfg.band_lo_ms = band[0];
        cfg.band_hi_ms = band[1];
      }
      cfg.render_svg = get_or(doc, "render_svg", true, "saliency");
      cfg.save_checkpoints = false;
      for (const auto kind : cfg.model_kinds)
        if (kind == models::ModelKind::lda && doc.contains("models"))
          throw ConfigError(
              "saliency: lda has no input gradient; pick network models");
      if (!doc.contains("models")) {
        cfg.model_kinds.clear();
        for (const auto kind : models::all_model_kinds())
          if (kind != models::ModelKind::lda) cfg.model_kinds.push_back(kind);
      }
    }
  }
  return cfg;
}

std::string render_config(const RunConfig& cfg) {
  json doc{{"seed", cfg.seed}, {"jobs", cfg.jobs}};

  auto dataset_json = [&] {
    json d = json::object();
    if (cfg.synthetic)
      d["synthetic"] = render_synthetic(*cfg.synthetic);
    else
      d["containers"] = cfg.containers;
    return d;
  };
  auto model_names = [&] {
    std::vector<std::string> names;
    for (const auto k : cfg.model_kinds) names.emplace_back(models::to_string(k));
    return names;
  };

  if (cfg.subcommand == "gen") {
    doc["synthetic"] = render_synthetic(*cfg.synthetic);
    doc["downsample_factor"] = cfg.downsample_factor;
  } else if (cfg.subcommand == "eval") {
    doc["dataset"] = dataset_json();
    doc["folds"] = cfg.folds;
    doc["repetitions"] = cfg.repetitions;
    doc["downsample_factor"] = cfg.downsample_factor;
    json arr = json::array();
    for (const auto& c : cfg.checkpoints)
      arr.push_back({{"path", c.path},
                     {"model", c.model},
                     {"subject", c.subject},
                     {"fold", c.fold}});
    doc["checkpoints"] = arr;
  } else {
    doc["dataset"] = dataset_json();
    doc["models"] = model_names();
    doc["repetitions"] = cfg.repetitions;
    doc["schedule"] = render_schedule(cfg.schedule);
    doc["standardize"] = cfg.standardize;
    doc["downsample_factor"] = cfg.downsample_factor;
    doc["folds"] = cfg.folds;
    if (cfg.subcommand == "train") {
      doc["experiment"] = cfg.experiment;
      doc["save_checkpoints"] = cfg.save_checkpoints;
    }
    if (cfg.subcommand == "xsubject") {
      doc.erase("folds");
      doc["fine_tune"] = cfg.fine_tune;
      doc["calibration_fraction"] = cfg.calibration_fraction;
      doc["fine_tune_schedule"] = render_schedule(cfg.fine_tune_sched);
      doc["held_out_subjects"] = cfg.held_out_subjects;
      doc["save_checkpoints"] = cfg.save_checkpoints;
    }
    if (cfg.subcommand == "noise") doc["noise_levels_ms"] = cfg.noise_levels_ms;
    if (cfg.subcommand == "saliency") {
      doc["saliency_band_ms"] = {cfg.band_lo_ms, cfg.band_hi_ms};
      doc["render_svg"] = cfg.render_svg;
    }
  }
  return doc.dump(2) + "\n";
}

}  // namespace p300::config
