#include "harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "errors.hpp"
#include "rng.hpp"
#include "speller.hpp"
#include "stats.hpp"

namespace p300::harness {

namespace fs = std::filesystem;
using config::RunConfig;
using data::EpochSet;
using data::TrialKey;
using models::ModelKind;
using models::Scorer;

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

void parallel_for(int jobs, size_t count, const std::function<void(size_t)>& fn) {
  jobs = int(std::min<size_t>(size_t(std::max(jobs, 1)), count));
  if (jobs <= 1) {
    for (size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::atomic<bool> stop{false};
  auto worker = [&] {
    for (;;) {
      if (stop.load(std::memory_order_relaxed)) return;
      const size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::scoped_lock lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        stop.store(true, std::memory_order_relaxed);
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(size_t(jobs));
  for (int j = 0; j < jobs; ++j) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

namespace {

EpochSet preprocess_recording(const data::RawRecording& rec, int factor,
                              int jitter_ms) {
  return data::downsample(data::extract_epochs(rec, {}, jitter_ms), factor);
}

void index_dataset(Dataset& ds) {
  ds.subjects.clear();
  ds.by_subject.clear();
  for (size_t i = 0; i < ds.all.n_epochs(); ++i)
    ds.by_subject[ds.all.subject_indices[i]].push_back(i);
  for (const auto& [subject, idx] : ds.by_subject) ds.subjects.push_back(subject);
}

std::vector<TrialKey> trial_keys_of(const EpochSet& epochs,
                                    const std::vector<size_t>& indices) {
  std::set<TrialKey> keys;
  for (const size_t i : indices) keys.insert(data::trial_key_of(epochs, i));
  return {keys.begin(), keys.end()};
}

}  // namespace

Dataset load_dataset(const RunConfig& cfg, bool keep_raw) {
  Dataset ds;
  if (cfg.synthetic) {
    const auto& synth = *cfg.synthetic;
    std::vector<EpochSet> per_subject(size_t(synth.n_subjects));
    std::vector<data::RawRecording> raws(size_t(synth.n_subjects));
    parallel_for(cfg.jobs, size_t(synth.n_subjects), [&](size_t s) {
      data::RawRecording rec = data::generate_subject(synth, int(s));
      per_subject[s] = preprocess_recording(rec, cfg.downsample_factor, 0);
      if (keep_raw) raws[s] = std::move(rec);
    });
    for (auto& e : per_subject) ds.all.append(e);
    if (keep_raw) ds.raws = std::move(raws);
  } else {
    for (const auto& path : cfg.containers)
      ds.all.append(data::load_epochs(path));
  }
  if (ds.all.n_epochs() == 0) throw DataError("dataset: no epochs");
  index_dataset(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Trial grids and decoding
// ---------------------------------------------------------------------------

std::vector<TrialGrid> build_grids(const EpochSet& epochs,
                                   const std::vector<size_t>& indices,
                                   int expected_repetitions,
                                   std::vector<std::string>* warnings) {
  std::map<TrialKey, std::vector<size_t>> by_trial;
  for (const size_t i : indices) by_trial[data::trial_key_of(epochs, i)].push_back(i);

  auto warn = [&](TrialKey key, const std::string& why) {
    if (warnings)
      warnings->push_back("trial " + std::to_string(key & 0xffffffffu) +
                          " of subject " + std::to_string(key >> 32) +
                          " skipped: " + why);
  };

  std::vector<TrialGrid> grids;
  for (auto& [key, trial_idx] : by_trial) {
    std::map<uint16_t, std::vector<size_t>> by_char;
    for (const size_t i : trial_idx) by_char[epochs.char_ids[i]].push_back(i);
    if (by_char.size() < 2) {
      warn(key, "fewer than 2 characters");
      continue;
    }
    const int chars = int(by_char.size());
    const int reps = expected_repetitions;
    bool complete = true;
    for (auto& [ch, cells] : by_char) {
      if (int(cells.size()) != reps) {
        complete = false;
        break;
      }
      // Repetition order follows stimulus onset.
      std::sort(cells.begin(), cells.end(), [&](size_t a, size_t b) {
        return std::pair(epochs.onset_samples[a], a) <
               std::pair(epochs.onset_samples[b], b);
      });
    }
    if (!complete) {
      warn(key, "incomplete repetitions");
      continue;
    }

    // Exactly one character carries the target label across every repetition.
    int target_pos = -1, pos = 0;
    bool label_ok = true;
    for (const auto& [ch, cells] : by_char) {
      size_t labeled = 0;
      for (const size_t i : cells) labeled += epochs.labels[i];
      if (labeled == size_t(reps)) {
        if (target_pos >= 0) label_ok = false;
        target_pos = pos;
      } else if (labeled != 0) {
        label_ok = false;
      }
      ++pos;
    }
    if (!label_ok || target_pos < 0) {
      warn(key, "inconsistent target labels");
      continue;
    }

    TrialGrid grid;
    grid.key = key;
    grid.true_char = target_pos;
    grid.repetitions = reps;
    grid.chars = chars;
    grid.cells.resize(size_t(reps) * size_t(chars));
    pos = 0;
    for (const auto& [ch, cells] : by_char) {
      for (int r = 0; r < reps; ++r)
        grid.cells[size_t(r) * size_t(chars) + size_t(pos)] = cells[size_t(r)];
      ++pos;
    }
    grids.push_back(std::move(grid));
  }
  return grids;
}

double decode_accuracy(const Scorer& scorer, const EpochSet& epochs,
                       const std::vector<TrialGrid>& grids) {
  if (grids.empty()) throw DataError("decode: no complete trials");
  std::vector<size_t> flat;
  for (const auto& g : grids) flat.insert(flat.end(), g.cells.begin(), g.cells.end());
  const Eigen::VectorXd scores = scorer.score_epochs(epochs, flat);

  size_t offset = 0, correct = 0;
  for (const auto& g : grids) {
    speller::TrialScores trial;
    trial.true_char = g.true_char;
    trial.scores.resize(g.repetitions, g.chars);
    for (int r = 0; r < g.repetitions; ++r)
      for (int c = 0; c < g.chars; ++c)
        trial.scores(r, c) =
            scores(Eigen::Index(offset + size_t(r) * size_t(g.chars) + size_t(c)));
    offset += g.cells.size();
    if (speller::decode_repetitions(trial) == g.true_char) ++correct;
  }
  return double(correct) / double(grids.size());
}

// ---------------------------------------------------------------------------
// Saliency
// ---------------------------------------------------------------------------

report::SaliencyMap saliency_map(const Scorer& scorer, const EpochSet& epochs,
                                 const std::vector<size_t>& target_indices,
                                 double band_lo_ms, double band_hi_ms) {
  if (target_indices.empty()) throw DataError("saliency: empty target set");
  if (!scorer.is_network())
    throw ConfigError("saliency: scorer has no input gradient");

  const int C = epochs.n_channels, T = epochs.n_samples;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(C, T);
  constexpr size_t kChunk = 128;
  std::vector<double> block;
  const size_t f = epochs.n_features();
  for (size_t start = 0; start < target_indices.size(); start += kChunk) {
    const size_t n = std::min(kChunk, target_indices.size() - start);
    block.resize(n * f);
    for (size_t i = 0; i < n; ++i)
      std::memcpy(block.data() + i * f, epochs.epoch(target_indices[start + i]),
                  f * sizeof(double));
    const nn::BatchView view{block.data(), int(n), C, T};
    const Eigen::MatrixXd grad = nn::input_gradient(scorer.network(), view);
    for (size_t i = 0; i < n; ++i)
      for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t)
          sum(c, t) += std::abs(grad(Eigen::Index(i), Eigen::Index(c) * T + t));
  }

  report::SaliencyMap out;
  out.map = sum / double(target_indices.size());
  out.band_lo_ms = band_lo_ms;
  out.band_hi_ms = band_hi_ms;

  const double dt = (out.window_hi_ms - out.window_lo_ms) / T;
  double band = 0.0;
  int band_cols = 0;
  for (int t = 0; t < T; ++t) {
    const double center = out.window_lo_ms + (t + 0.5) * dt;
    if (center >= band_lo_ms && center <= band_hi_ms) {
      band += out.map.col(t).sum();
      ++band_cols;
    }
  }
  const double total = out.map.sum();
  out.band_mass = total > 0.0 ? band / total : 0.0;
  out.uniform_share = double(band_cols) / double(T);
  return out;
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const EpochSet& epochs,
                               const std::vector<size_t>& indices) {
  if (indices.empty()) throw DataError("standardize: empty fit set");
  const auto f = Eigen::Index(epochs.n_features());
  Standardizer st;
  st.mean = Eigen::VectorXd::Zero(f);
  for (const size_t i : indices)
    st.mean += Eigen::Map<const Eigen::VectorXd>(epochs.epoch(i), f);
  st.mean /= double(indices.size());
  Eigen::VectorXd var = Eigen::VectorXd::Zero(f);
  for (const size_t i : indices) {
    const auto x = Eigen::Map<const Eigen::VectorXd>(epochs.epoch(i), f);
    var += (x - st.mean).cwiseAbs2();
  }
  var /= double(indices.size());
  st.inv_std = (var.array().sqrt() + 1e-12).inverse().matrix();
  return st;
}

EpochSet Standardizer::apply(const EpochSet& epochs,
                             const std::vector<size_t>& indices) const {
  EpochSet out = epochs.select(indices);
  const auto f = Eigen::Index(out.n_features());
  for (size_t i = 0; i < out.n_epochs(); ++i) {
    Eigen::Map<Eigen::VectorXd> x(out.epoch(i), f);
    x = (x - mean).cwiseProduct(inv_std);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared experiment plumbing
// ---------------------------------------------------------------------------

namespace {

// Stable per-model stream id (independent of the requested model list).
uint64_t model_ordinal(ModelKind kind) { return uint64_t(kind); }

uint64_t fold_seed(const RunConfig& cfg, int subject) {
  return subject >= 0 ? derive_seed(cfg.seed, "folds", uint64_t(subject))
                      : derive_seed(cfg.seed, "folds-pooled");
}

struct UnitSetup {
  const RunConfig& cfg;
  const Dataset& ds;
};

models::TrainSchedule schedule_for(const RunConfig& cfg, ModelKind kind,
                                   uint64_t unit_tag) {
  models::TrainSchedule s = cfg.schedule;
  s.shuffle_seed = derive_seed(cfg.seed, "shuffle", model_ordinal(kind), unit_tag);
  return s;
}

Scorer make_scorer(const RunConfig& cfg, ModelKind kind, uint64_t unit_tag) {
  return Scorer::build(kind,
                       derive_seed(cfg.seed, "init", model_ordinal(kind), unit_tag));
}

// Fits on train_idx and returns the training log; handles the optional
// standardizer (fit on the training set only).
std::vector<double> fit_unit(Scorer& scorer, const RunConfig& cfg,
                             const EpochSet& all,
                             const std::vector<size_t>& train_idx,
                             const models::TrainSchedule& sched,
                             std::optional<Standardizer>& st_out) {
  if (cfg.standardize) {
    st_out = Standardizer::fit(all, train_idx);
    const EpochSet owned = st_out->apply(all, train_idx);
    std::vector<size_t> iota(owned.n_epochs());
    std::iota(iota.begin(), iota.end(), size_t(0));
    return models::fit(scorer, owned, iota, sched);
  }
  return models::fit(scorer, all, train_idx, sched);
}

double evaluate_unit(const Scorer& scorer, const EpochSet& all,
                     const std::vector<size_t>& test_idx, int repetitions,
                     const std::optional<Standardizer>& st,
                     std::vector<std::string>* warnings) {
  if (st) {
    const EpochSet owned = st->apply(all, test_idx);
    std::vector<size_t> iota(owned.n_epochs());
    std::iota(iota.begin(), iota.end(), size_t(0));
    const auto grids = build_grids(owned, iota, repetitions, warnings);
    return decode_accuracy(scorer, owned, grids);
  }
  const auto grids = build_grids(all, test_idx, repetitions, warnings);
  return decode_accuracy(scorer, all, grids);
}

std::string checkpoint_extension(const Scorer& scorer) {
  return scorer.is_network() ? ".p3wt" : ".p3ld";
}

void add_param_counts(report::ExperimentReport& rep,
                      const std::vector<ModelKind>& kinds) {
  for (const ModelKind kind : kinds) {
    const Scorer probe = Scorer::build(kind, 0);
    rep.param_counts[models::to_string(kind)] = probe.param_count();
    if (kind == ModelKind::cnn)
      rep.param_count_notes["cnn"] =
          std::to_string(probe.param_count()) +
          " trainable parameters; the reference total 7924 is not reachable "
          "from the described layer shapes (head widths are configurable)";
    if (kind == ModelKind::lstm_cnn_large)
      rep.param_count_notes["lstm_cnn_large"] =
          std::to_string(probe.param_count()) +
          " trainable parameters; the reference total 49041 is not reachable "
          "from the described layer shapes";
  }
}

void merge_warnings(report::ExperimentReport& rep,
                    std::vector<std::vector<std::string>>& per_unit) {
  for (auto& w : per_unit)
    rep.warnings.insert(rep.warnings.end(), w.begin(), w.end());
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

RunResult run_gen(const RunConfig& cfg, const std::string& out_dir) {
  const auto& synth = *cfg.synthetic;
  std::vector<EpochSet> per_subject(size_t(synth.n_subjects));
  std::vector<std::string> files(size_t(synth.n_subjects));
  parallel_for(cfg.jobs, size_t(synth.n_subjects), [&](size_t s) {
    const data::RawRecording rec = data::generate_subject(synth, int(s));
    per_subject[s] = preprocess_recording(rec, cfg.downsample_factor, 0);
    if (!out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "subject_%02d.p3ep", int(s));
      const fs::path path = fs::path(out_dir) / name;
      data::save_epochs(per_subject[s], path.string());
      files[s] = name;
    }
  });

  size_t total = 0, targets = 0;
  for (const auto& e : per_subject) {
    total += e.n_epochs();
    for (const auto l : e.labels) targets += l;
  }
  std::ostringstream out;
  out << "generated " << synth.n_subjects << " subject(s), "
      << per_subject.front().n_epochs() << " epochs each ("
      << per_subject.front().n_channels << " channels x "
      << per_subject.front().n_samples << " samples at "
      << per_subject.front().sampling_rate << " Hz)\n";
  out << "target fraction: " << targets << "/" << total << " = "
      << report::format_double(double(targets) / double(total)) << " (1/"
      << synth.n_chars << " = "
      << report::format_double(1.0 / synth.n_chars) << ")\n";
  if (!out_dir.empty()) {
    out << "containers:";
    for (const auto& f : files) out << " " << f;
    out << "\n";
  }

  RunResult result;
  result.report.experiment = "gen";
  result.report.config_json = config::render_config(cfg);
  result.summary = out.str();
  return result;
}

// ---------------------------------------------------------------------------
// train (within_subject | pooled)
// ---------------------------------------------------------------------------

RunResult run_train(const RunConfig& cfg, const std::string& out_dir) {
  const Dataset ds = load_dataset(cfg, false);
  const bool within = cfg.experiment == "within_subject";

  report::ExperimentReport rep;
  rep.experiment = cfg.experiment;
  rep.config_json = config::render_config(cfg);
  add_param_counts(rep, cfg.model_kinds);

  // Fold assignments per scope (subject or pooled).
  struct Scope {
    int subject;  // -1 = pooled
    std::vector<size_t> indices;
    data::FoldAssignment folds;
  };
  std::vector<Scope> scopes;
  if (within) {
    for (const auto subject : ds.subjects) {
      const auto& idx = ds.by_subject.at(subject);
      const auto keys = trial_keys_of(ds.all, idx);
      if (int(keys.size()) < cfg.folds) {
        rep.warnings.push_back("subject " + std::to_string(subject) +
                               " skipped: " + std::to_string(keys.size()) +
                               " trials < " + std::to_string(cfg.folds) +
                               " folds");
        continue;
      }
      scopes.push_back({int(subject), idx,
                        data::split_fold_keys(keys, cfg.folds,
                                              fold_seed(cfg, int(subject)))});
    }
    if (scopes.empty()) throw DataError("within_subject: no usable subjects");
  } else {
    std::vector<size_t> idx(ds.all.n_epochs());
    std::iota(idx.begin(), idx.end(), size_t(0));
    scopes.push_back({-1, idx,
                      data::split_fold_keys(trial_keys_of(ds.all, idx), cfg.folds,
                                            fold_seed(cfg, -1))});
  }

  struct Unit {
    ModelKind model;
    size_t scope;
    int fold;
  };
  std::vector<Unit> units;
  for (size_t sc = 0; sc < scopes.size(); ++sc)
    for (int f = 0; f < cfg.folds; ++f)
      for (const ModelKind m : cfg.model_kinds) units.push_back({m, sc, f});

  struct UnitOut {
    report::AccuracyRow row;
    report::TrainingLog log;
    std::optional<report::CheckpointEntry> checkpoint;
    std::vector<std::string> warnings;
  };
  std::vector<UnitOut> outs(units.size());

  if (!out_dir.empty() && cfg.save_checkpoints)
    fs::create_directories(fs::path(out_dir) / "checkpoints");

  parallel_for(cfg.jobs, units.size(), [&](size_t i) {
    const Unit& u = units[i];
    const Scope& scope = scopes[u.scope];
    std::vector<size_t> train_idx, test_idx;
    for (const size_t e : scope.indices) {
      const int fold = scope.folds.fold_of_trial.at(data::trial_key_of(ds.all, e));
      (fold == u.fold ? test_idx : train_idx).push_back(e);
    }
    const uint64_t tag = uint64_t(scope.subject + 1) * 100003 + uint64_t(u.fold);
    Scorer scorer = make_scorer(cfg, u.model, tag);
    std::optional<Standardizer> st;
    auto log = fit_unit(scorer, cfg, ds.all, train_idx,
                        schedule_for(cfg, u.model, tag), st);
    const double acc = evaluate_unit(scorer, ds.all, test_idx, cfg.repetitions,
                                     st, &outs[i].warnings);

    outs[i].row = {models::to_string(u.model), scope.subject, cfg.experiment,
                   u.fold, acc};
    outs[i].log = {models::to_string(u.model), scope.subject, u.fold,
                   cfg.experiment, std::move(log)};
    if (!out_dir.empty() && cfg.save_checkpoints) {
      char name[96];
      std::snprintf(name, sizeof name, "%s__%s__s%d__f%d%s",
                    cfg.experiment.c_str(), models::to_string(u.model),
                    scope.subject, u.fold, checkpoint_extension(scorer).c_str());
      const fs::path rel = fs::path("checkpoints") / name;
      scorer.save((fs::path(out_dir) / rel).string());
      outs[i].checkpoint = {models::to_string(u.model), scope.subject, u.fold,
                            rel.string()};
    }
  });

  std::vector<std::vector<std::string>> warning_lists;
  for (auto& o : outs) {
    rep.rows.push_back(std::move(o.row));
    rep.logs.push_back(std::move(o.log));
    if (o.checkpoint) rep.checkpoints.push_back(std::move(*o.checkpoint));
    warning_lists.push_back(std::move(o.warnings));
  }
  merge_warnings(rep, warning_lists);

  return {std::move(rep), ""};
}

// ---------------------------------------------------------------------------
// xsubject (leave-one-subject-out, optional fine-tuning)
// ---------------------------------------------------------------------------

RunResult run_loso(const RunConfig& cfg, const std::string& out_dir) {
  const Dataset ds = load_dataset(cfg, false);
  if (ds.subjects.size() < 2)
    throw ConfigError("xsubject needs at least 2 subjects");

  std::vector<uint16_t> held;
  if (cfg.held_out_subjects.empty()) {
    held = ds.subjects;
  } else {
    for (const int s : cfg.held_out_subjects) {
      if (!ds.by_subject.count(uint16_t(s)))
        throw ConfigError("held_out_subjects: subject " + std::to_string(s) +
                          " not in the dataset");
      held.push_back(uint16_t(s));
    }
  }

  report::ExperimentReport rep;
  rep.experiment = "loso";
  rep.config_json = config::render_config(cfg);
  add_param_counts(rep, cfg.model_kinds);

  struct Unit {
    ModelKind model;
    uint16_t held;
  };
  std::vector<Unit> units;
  for (const auto h : held)
    for (const ModelKind m : cfg.model_kinds) units.push_back({m, h});

  struct UnitOut {
    std::vector<report::AccuracyRow> rows;
    std::vector<report::TrainingLog> logs;
    std::vector<report::CheckpointEntry> checkpoints;
    std::vector<std::string> warnings;
  };
  std::vector<UnitOut> outs(units.size());

  if (!out_dir.empty() && cfg.save_checkpoints)
    fs::create_directories(fs::path(out_dir) / "checkpoints");

  parallel_for(cfg.jobs, units.size(), [&](size_t i) {
    const Unit& u = units[i];
    UnitOut& out = outs[i];
    const std::string model = models::to_string(u.model);

    std::vector<size_t> train_idx;
    for (size_t e = 0; e < ds.all.n_epochs(); ++e)
      if (ds.all.subject_indices[e] != u.held) train_idx.push_back(e);
    const auto& held_idx = ds.by_subject.at(u.held);

    const uint64_t tag = 2000003 + uint64_t(u.held);
    Scorer scorer = make_scorer(cfg, u.model, tag);
    std::optional<Standardizer> st;
    auto log = fit_unit(scorer, cfg, ds.all, train_idx,
                        schedule_for(cfg, u.model, tag), st);
    out.logs.push_back({model, int(u.held), -1, "loso", std::move(log)});

    const double acc_all = evaluate_unit(scorer, ds.all, held_idx,
                                         cfg.repetitions, st, &out.warnings);
    out.rows.push_back({model, int(u.held), "loso", -1, acc_all});

    auto save = [&](const Scorer& s, const char* condition) {
      if (out_dir.empty() || !cfg.save_checkpoints) return;
      char name[96];
      std::snprintf(name, sizeof name, "%s__%s__h%d%s", condition, model.c_str(),
                    int(u.held), checkpoint_extension(s).c_str());
      const fs::path rel = fs::path("checkpoints") / name;
      s.save((fs::path(out_dir) / rel).string());
      out.checkpoints.push_back({model, int(u.held), -1, rel.string()});
    };
    save(scorer, "loso");

    if (!cfg.fine_tune) return;
    if (!scorer.is_network()) {
      out.warnings.push_back("lda: fine-tuning is not applicable; evaluated "
                             "cross-subject only");
      return;
    }

    // Trial-level calibration/evaluation split of the held-out subject.
    std::vector<TrialKey> keys = trial_keys_of(ds.all, held_idx);
    Rng rng(derive_seed(cfg.seed, "calib", uint64_t(u.held)));
    rng.shuffle(keys);
    const auto n_cal = std::clamp<size_t>(
        size_t(std::llround(cfg.calibration_fraction * double(keys.size()))), 1,
        keys.size() - 1);
    const std::set<TrialKey> calib_keys(keys.begin(), keys.begin() + long(n_cal));
    std::vector<size_t> calib_idx, eval_idx;
    for (const size_t e : held_idx)
      (calib_keys.count(data::trial_key_of(ds.all, e)) ? calib_idx : eval_idx)
          .push_back(e);
    if (eval_idx.empty() || calib_idx.empty()) {
      out.warnings.push_back("subject " + std::to_string(u.held) +
                             ": not enough trials for a calibration split");
      return;
    }

    const double acc_pre = evaluate_unit(scorer, ds.all, eval_idx,
                                         cfg.repetitions, st, &out.warnings);
    out.rows.push_back({model, int(u.held), "loso_pre_ft", -1, acc_pre});

    models::TrainSchedule ft = cfg.fine_tune_sched;
    ft.shuffle_seed =
        derive_seed(cfg.seed, "ft-shuffle", model_ordinal(u.model), tag);
    std::vector<double> ft_log;
    if (st) {
      const EpochSet owned = st->apply(ds.all, calib_idx);
      std::vector<size_t> iota(owned.n_epochs());
      std::iota(iota.begin(), iota.end(), size_t(0));
      ft_log = models::train(scorer, owned, iota, ft);
    } else {
      ft_log = models::train(scorer, ds.all, calib_idx, ft);
    }
    out.logs.push_back({model, int(u.held), -1, "loso_ft", std::move(ft_log)});

    const double acc_post = evaluate_unit(scorer, ds.all, eval_idx,
                                          cfg.repetitions, st, &out.warnings);
    out.rows.push_back({model, int(u.held), "loso_ft", -1, acc_post});
    save(scorer, "loso_ft");
  });

  std::vector<std::vector<std::string>> warning_lists;
  for (auto& o : outs) {
    rep.rows.insert(rep.rows.end(), o.rows.begin(), o.rows.end());
    rep.logs.insert(rep.logs.end(), std::make_move_iterator(o.logs.begin()),
                    std::make_move_iterator(o.logs.end()));
    rep.checkpoints.insert(rep.checkpoints.end(), o.checkpoints.begin(),
                           o.checkpoints.end());
    warning_lists.push_back(std::move(o.warnings));
  }
  merge_warnings(rep, warning_lists);
  return {std::move(rep), ""};
}

// ---------------------------------------------------------------------------
// noise sweep
// ---------------------------------------------------------------------------

RunResult run_noise(const RunConfig& cfg, const std::string&) {
  if (!cfg.synthetic)
    throw ConfigError(
        "noise: a synthetic dataset source is required (containers hold "
        "preprocessed epochs; jitter re-extraction needs raw recordings)");
  const Dataset ds = load_dataset(cfg, true);

  report::ExperimentReport rep;
  rep.experiment = "noise_sweep";
  rep.config_json = config::render_config(cfg);
  add_param_counts(rep, cfg.model_kinds);

  std::vector<size_t> all_idx(ds.all.n_epochs());
  std::iota(all_idx.begin(), all_idx.end(), size_t(0));
  const auto folds = data::split_fold_keys(trial_keys_of(ds.all, all_idx),
                                           cfg.folds, fold_seed(cfg, -1));

  std::vector<std::vector<size_t>> fold_test(size_t(cfg.folds));
  std::vector<std::vector<size_t>> fold_train(size_t(cfg.folds));
  for (size_t e = 0; e < ds.all.n_epochs(); ++e) {
    const int f = folds.fold_of_trial.at(data::trial_key_of(ds.all, e));
    for (int g = 0; g < cfg.folds; ++g)
      (g == f ? fold_test : fold_train)[size_t(g)].push_back(e);
  }

  // Phase 1: train every (model, fold) at noise level 0.
  struct Trained {
    Scorer scorer = Scorer::build(ModelKind::lda, 0);
    std::optional<Standardizer> st;
    report::TrainingLog log;
    double baseline_acc = 0.0;
    std::vector<std::string> warnings;
  };
  struct Unit {
    ModelKind model;
    int fold;
  };
  std::vector<Unit> units;
  for (int f = 0; f < cfg.folds; ++f)
    for (const ModelKind m : cfg.model_kinds) units.push_back({m, f});
  std::vector<Trained> trained(units.size());

  parallel_for(cfg.jobs, units.size(), [&](size_t i) {
    const Unit& u = units[i];
    Trained& t = trained[i];
    const uint64_t tag = 3000017 + uint64_t(u.fold);
    t.scorer = make_scorer(cfg, u.model, tag);
    auto log = fit_unit(t.scorer, cfg, ds.all, fold_train[size_t(u.fold)],
                        schedule_for(cfg, u.model, tag), t.st);
    t.log = {models::to_string(u.model), -1, u.fold, "noise_baseline",
             std::move(log)};
    t.baseline_acc = evaluate_unit(t.scorer, ds.all, fold_test[size_t(u.fold)],
                                   cfg.repetitions, t.st, &t.warnings);
  });

  for (size_t i = 0; i < units.size(); ++i) {
    rep.rows.push_back({models::to_string(units[i].model), -1, "noise_baseline",
                        units[i].fold, trained[i].baseline_acc});
    rep.logs.push_back(std::move(trained[i].log));
  }

  // Phase 2: decode each fold's trials at every onset-noise level.
  std::vector<int> levels = cfg.noise_levels_ms;
  levels.push_back(0);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

  std::map<std::pair<std::string, int>, report::NoiseCell> cells;
  for (const int level : levels) {
    EpochSet shifted;
    for (const auto& raw : ds.raws)
      shifted.append(preprocess_recording(raw, cfg.downsample_factor, level));

    std::vector<double> accs(units.size());
    std::vector<std::vector<std::string>> warnings(units.size());
    parallel_for(cfg.jobs, units.size(), [&](size_t i) {
      const Unit& u = units[i];
      accs[i] = evaluate_unit(trained[i].scorer, shifted,
                              fold_test[size_t(u.fold)], cfg.repetitions,
                              trained[i].st, &warnings[i]);
    });
    for (size_t i = 0; i < units.size(); ++i) {
      const std::string model = models::to_string(units[i].model);
      rep.rows.push_back(
          {model, -1, "noise_" + std::to_string(level), units[i].fold, accs[i]});
      auto& cell = cells[{model, level}];
      cell.model = model;
      cell.level_ms = level;
      cell.fold_accuracy.resize(size_t(cfg.folds));
      cell.fold_accuracy[size_t(units[i].fold)] = accs[i];
    }
    merge_warnings(rep, warnings);
  }
  for (auto& [key, cell] : cells) rep.noise.push_back(std::move(cell));

  // Pairwise Welch tests over per-fold accuracies, per level.
  if (cfg.folds >= 2) {
    for (const int level : levels) {
      for (size_t a = 0; a < cfg.model_kinds.size(); ++a) {
        for (size_t b = a + 1; b < cfg.model_kinds.size(); ++b) {
          const std::string ma = models::to_string(cfg.model_kinds[a]);
          const std::string mb = models::to_string(cfg.model_kinds[b]);
          const auto& fa = cells.at({ma, level}).fold_accuracy;
          const auto& fb = cells.at({mb, level}).fold_accuracy;
          try {
            const auto t = stats::welch_t_test(fa, fb);
            rep.ttests.push_back({level, ma, mb, t.t, t.p, t.df});
          } catch (const NumericError&) {
            rep.warnings.push_back("t-test skipped at level " +
                                   std::to_string(level) + " for " + ma + " vs " +
                                   mb + ": degenerate fold accuracies");
          }
        }
      }
    }
  }
  for (size_t i = 0; i < units.size(); ++i) {
    std::vector<std::vector<std::string>> w{std::move(trained[i].warnings)};
    merge_warnings(rep, w);
  }
  return {std::move(rep), ""};
}

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

RunResult run_saliency(const RunConfig& cfg, const std::string&) {
  const Dataset ds = load_dataset(cfg, false);

  report::ExperimentReport rep;
  rep.experiment = "saliency";
  rep.config_json = config::render_config(cfg);
  add_param_counts(rep, cfg.model_kinds);

  std::vector<size_t> all_idx(ds.all.n_epochs());
  std::iota(all_idx.begin(), all_idx.end(), size_t(0));
  const auto folds = data::split_fold_keys(trial_keys_of(ds.all, all_idx),
                                           cfg.folds, fold_seed(cfg, -1));
  std::vector<size_t> train_idx, test_idx;
  for (size_t e = 0; e < ds.all.n_epochs(); ++e) {
    const int f = folds.fold_of_trial.at(data::trial_key_of(ds.all, e));
    (f == 0 ? test_idx : train_idx).push_back(e);
  }

  struct UnitOut {
    report::AccuracyRow row;
    report::TrainingLog log;
    report::SaliencyMap map;
    std::vector<std::string> warnings;
  };
  std::vector<UnitOut> outs(cfg.model_kinds.size());

  parallel_for(cfg.jobs, cfg.model_kinds.size(), [&](size_t i) {
    const ModelKind kind = cfg.model_kinds[i];
    const std::string model = models::to_string(kind);
    Scorer scorer = make_scorer(cfg, kind, 0);
    std::optional<Standardizer> st;
    auto log = fit_unit(scorer, cfg, ds.all, train_idx,
                        schedule_for(cfg, kind, 0), st);
    outs[i].log = {model, -1, 0, "saliency", std::move(log)};
    outs[i].row = {model, -1, "saliency", 0,
                   evaluate_unit(scorer, ds.all, test_idx, cfg.repetitions, st,
                                 &outs[i].warnings)};

    if (st) {
      const EpochSet owned = st->apply(ds.all, test_idx);
      std::vector<size_t> targets;
      for (size_t e = 0; e < owned.n_epochs(); ++e)
        if (owned.labels[e]) targets.push_back(e);
      outs[i].map =
          saliency_map(scorer, owned, targets, cfg.band_lo_ms, cfg.band_hi_ms);
    } else {
      std::vector<size_t> targets;
      for (const size_t e : test_idx)
        if (ds.all.labels[e]) targets.push_back(e);
      outs[i].map =
          saliency_map(scorer, ds.all, targets, cfg.band_lo_ms, cfg.band_hi_ms);
    }
    outs[i].map.model = model;
  });

  std::vector<std::vector<std::string>> warning_lists;
  for (auto& o : outs) {
    rep.rows.push_back(std::move(o.row));
    rep.logs.push_back(std::move(o.log));
    rep.saliency.push_back(std::move(o.map));
    warning_lists.push_back(std::move(o.warnings));
  }
  merge_warnings(rep, warning_lists);
  return {std::move(rep), ""};
}

// ---------------------------------------------------------------------------
// eval (decode saved checkpoints)
// ---------------------------------------------------------------------------

RunResult run_eval(const RunConfig& cfg, const std::string&) {
  const Dataset ds = load_dataset(cfg, false);

  report::ExperimentReport rep;
  rep.experiment = "eval";
  rep.config_json = config::render_config(cfg);

  struct UnitOut {
    report::AccuracyRow row;
    std::pair<std::string, int64_t> params;
    std::vector<std::string> warnings;
  };
  std::vector<UnitOut> outs(cfg.checkpoints.size());

  parallel_for(cfg.jobs, cfg.checkpoints.size(), [&](size_t i) {
    const auto& ref = cfg.checkpoints[i];
    const Scorer scorer = Scorer::load(ref.path);
    const std::string label =
        ref.model.empty() ? models::to_string(scorer.kind()) : ref.model;

    std::vector<size_t> scope;
    if (ref.subject >= 0) {
      const auto it = ds.by_subject.find(uint16_t(ref.subject));
      if (it == ds.by_subject.end())
        throw DataError("eval: subject " + std::to_string(ref.subject) +
                        " not present in the dataset");
      scope = it->second;
    } else {
      scope.resize(ds.all.n_epochs());
      std::iota(scope.begin(), scope.end(), size_t(0));
    }
    if (ref.fold >= 0) {
      if (ref.fold >= cfg.folds)
        throw ConfigError("eval: fold " + std::to_string(ref.fold) +
                          " out of range for k = " + std::to_string(cfg.folds));
      const auto folds = data::split_fold_keys(trial_keys_of(ds.all, scope),
                                               cfg.folds,
                                               fold_seed(cfg, ref.subject));
      std::vector<size_t> filtered;
      for (const size_t e : scope)
        if (folds.fold_of_trial.at(data::trial_key_of(ds.all, e)) == ref.fold)
          filtered.push_back(e);
      scope = std::move(filtered);
    }

    const auto grids =
        build_grids(ds.all, scope, cfg.repetitions, &outs[i].warnings);
    outs[i].row = {label, ref.subject, "eval", ref.fold,
                   decode_accuracy(scorer, ds.all, grids)};
    outs[i].params = {label, scorer.param_count()};
  });

  std::vector<std::vector<std::string>> warning_lists;
  for (auto& o : outs) {
    rep.rows.push_back(std::move(o.row));
    rep.param_counts[o.params.first] = o.params.second;
    warning_lists.push_back(std::move(o.warnings));
  }
  merge_warnings(rep, warning_lists);
  return {std::move(rep), ""};
}

}  // namespace

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

RunResult run(const RunConfig& cfg, const std::string& out_dir) {
  RunResult result;
  if (cfg.subcommand == "gen") {
    result = run_gen(cfg, out_dir);
    return result;
  }
  if (cfg.subcommand == "train")
    result = run_train(cfg, out_dir);
  else if (cfg.subcommand == "xsubject")
    result = run_loso(cfg, out_dir);
  else if (cfg.subcommand == "noise")
    result = run_noise(cfg, out_dir);
  else if (cfg.subcommand == "saliency")
    result = run_saliency(cfg, out_dir);
  else if (cfg.subcommand == "eval")
    result = run_eval(cfg, out_dir);
  else
    throw ConfigError("unknown subcommand '" + cfg.subcommand + "'");

  if (!out_dir.empty())
    report::write_report(result.report, out_dir, cfg.render_svg);
  result.summary = report::headline(result.report);
  return result;
}

}  // namespace p300::harness
