#include "report_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "errors.hpp"

namespace p300::report {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::tuple<std::string, std::string, double, int>>
ExperimentReport::mean_accuracy() const {
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
  for (const auto& row : rows) {
    auto& slot = acc[{row.model, row.condition}];
    slot.first += row.accuracy;
    slot.second += 1;
  }
  std::vector<std::tuple<std::string, std::string, double, int>> out;
  for (const auto& [key, value] : acc)
    out.emplace_back(key.first, key.second, value.first / value.second,
                     value.second);
  return out;
}

namespace {

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(content.data(), std::streamsize(content.size()));
  if (!f) throw DataError("write failed: " + path.string());
}

std::string accuracy_csv(const ExperimentReport& r) {
  std::string out = "model,subject,condition,fold,accuracy\n";
  for (const auto& row : r.rows) {
    out += row.model;
    out += ',';
    out += std::to_string(row.subject);
    out += ',';
    out += row.condition;
    out += ',';
    out += std::to_string(row.fold);
    out += ',';
    out += format_double(row.accuracy);
    out += '\n';
  }
  return out;
}

std::string noise_csv(const ExperimentReport& r) {
  std::string out = "model,level_ms,mean_accuracy,std_accuracy,n_folds\n";
  for (const auto& cell : r.noise) {
    double mean = 0.0;
    for (const double a : cell.fold_accuracy) mean += a;
    mean /= double(cell.fold_accuracy.size());
    double var = 0.0;
    for (const double a : cell.fold_accuracy) var += (a - mean) * (a - mean);
    const double sd = cell.fold_accuracy.size() > 1
                          ? std::sqrt(var / double(cell.fold_accuracy.size() - 1))
                          : 0.0;
    out += cell.model;
    out += ',';
    out += std::to_string(cell.level_ms);
    out += ',';
    out += format_double(mean);
    out += ',';
    out += format_double(sd);
    out += ',';
    out += std::to_string(cell.fold_accuracy.size());
    out += '\n';
  }
  return out;
}

std::string ttest_csv(const ExperimentReport& r) {
  std::string out = "level_ms,model_a,model_b,t,p,df\n";
  for (const auto& row : r.ttests) {
    out += std::to_string(row.level_ms);
    out += ',';
    out += row.model_a;
    out += ',';
    out += row.model_b;
    out += ',';
    out += format_double(row.t);
    out += ',';
    out += format_double(row.p);
    out += ',';
    out += format_double(row.df);
    out += '\n';
  }
  return out;
}

std::string saliency_csv(const SaliencyMap& s) {
  const auto T = int(s.map.cols());
  const double dt = (s.window_hi_ms - s.window_lo_ms) / T;
  std::string out;
  for (int t = 0; t < T; ++t) {
    out += format_double(s.window_lo_ms + t * dt);  // column left edge, ms
    out += (t + 1 < T) ? "," : "\n";
  }
  for (Eigen::Index c = 0; c < s.map.rows(); ++c) {
    for (Eigen::Index t = 0; t < s.map.cols(); ++t) {
      out += format_double(s.map(c, t));
      out += (t + 1 < s.map.cols()) ? "," : "\n";
    }
  }
  return out;
}

// Minimal heatmap: one rect per cell, white -> red linear in value.
std::string saliency_svg(const SaliencyMap& s) {
  const int cell = 12;
  const auto rows = int(s.map.rows()), cols = int(s.map.cols());
  const double lo = s.map.minCoeff();
  const double hi = std::max(s.map.maxCoeff(), lo + 1e-300);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cols * cell
      << "\" height=\"" << rows * cell << "\">\n";
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double v = (s.map(r, c) - lo) / (hi - lo);
      const int other = int(std::lround(255.0 * (1.0 - v)));
      svg << "<rect x=\"" << c * cell << "\" y=\"" << r * cell << "\" width=\""
          << cell << "\" height=\"" << cell << "\" fill=\"rgb(255," << other
          << "," << other << ")\"/>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

json report_json(const ExperimentReport& r) {
  json doc;
  doc["schema_version"] = 1;
  doc["experiment"] = r.experiment;
  doc["config"] = json::parse(r.config_json);
  doc["param_counts"] = r.param_counts;
  if (!r.param_count_notes.empty()) doc["param_count_notes"] = r.param_count_notes;

  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"model", row.model},
                    {"subject", row.subject},
                    {"condition", row.condition},
                    {"fold", row.fold},
                    {"accuracy", row.accuracy}});
  doc["accuracy"] = rows;

  json means = json::array();
  for (const auto& [model, condition, mean, n] : r.mean_accuracy())
    means.push_back({{"model", model},
                     {"condition", condition},
                     {"mean_accuracy", mean},
                     {"n", n}});
  doc["mean_accuracy"] = means;

  json logs = json::array();
  for (const auto& log : r.logs)
    logs.push_back({{"model", log.model},
                    {"subject", log.subject},
                    {"fold", log.fold},
                    {"condition", log.condition},
                    {"loss", log.loss}});
  doc["training_logs"] = logs;

  if (!r.noise.empty()) {
    json noise = json::array();
    for (const auto& cell : r.noise)
      noise.push_back({{"model", cell.model},
                       {"level_ms", cell.level_ms},
                       {"fold_accuracy", cell.fold_accuracy}});
    doc["noise"] = noise;
  }
  if (!r.ttests.empty()) {
    json ttests = json::array();
    for (const auto& row : r.ttests)
      ttests.push_back({{"level_ms", row.level_ms},
                        {"model_a", row.model_a},
                        {"model_b", row.model_b},
                        {"t", row.t},
                        {"p", row.p},
                        {"df", row.df}});
    doc["t_tests"] = ttests;
  }
  if (!r.saliency.empty()) {
    json maps = json::array();
    for (const auto& s : r.saliency) {
      std::vector<std::vector<double>> matrix(size_t(s.map.rows()));
      for (Eigen::Index c = 0; c < s.map.rows(); ++c)
        for (Eigen::Index t = 0; t < s.map.cols(); ++t)
          matrix[size_t(c)].push_back(s.map(c, t));
      maps.push_back({{"model", s.model},
                      {"band_ms", {s.band_lo_ms, s.band_hi_ms}},
                      {"band_mass", s.band_mass},
                      {"uniform_share", s.uniform_share},
                      {"matrix", matrix}});
    }
    doc["saliency"] = maps;
  }
  if (!r.checkpoints.empty()) {
    json cps = json::array();
    for (const auto& c : r.checkpoints)
      cps.push_back({{"model", c.model},
                     {"subject", c.subject},
                     {"fold", c.fold},
                     {"path", c.path}});
    doc["checkpoints"] = cps;
  }
  doc["warnings"] = r.warnings;
  return doc;
}

}  // namespace

void write_report(const ExperimentReport& report, const std::string& out_dir,
                  bool render_svg) {
  const fs::path out(out_dir);
  fs::create_directories(out);
  write_file(out / "report.json", report_json(report).dump(2) + "\n");
  write_file(out / "tables" / "accuracy.csv", accuracy_csv(report));
  if (!report.noise.empty())
    write_file(out / "tables" / "noise.csv", noise_csv(report));
  if (!report.ttests.empty())
    write_file(out / "tables" / "ttests.csv", ttest_csv(report));
  for (const auto& s : report.saliency) {
    write_file(out / "saliency" / (s.model + ".csv"), saliency_csv(s));
    if (render_svg)
      write_file(out / "saliency" / (s.model + ".svg"), saliency_svg(s));
  }
}

std::string headline(const ExperimentReport& report) {
  std::ostringstream out;
  out << "experiment: " << report.experiment << "\n";
  if (!report.param_counts.empty()) {
    out << "parameters:";
    for (const auto& [model, count] : report.param_counts)
      out << "  " << model << "=" << count;
    out << "\n";
    for (const auto& [model, note] : report.param_count_notes)
      out << "  note: " << model << ": " << note << "\n";
  }
  const auto means = report.mean_accuracy();
  if (!means.empty()) {
    out << "\n  model            condition         mean acc   n\n";
    for (const auto& [model, condition, mean, n] : means) {
      char line[128];
      std::snprintf(line, sizeof line, "  %-16s %-16s %8.4f  %3d\n",
                    model.c_str(), condition.c_str(), mean, n);
      out << line;
    }
  }
  for (const auto& s : report.saliency) {
    char line[160];
    std::snprintf(line, sizeof line,
                  "  saliency %-16s mass in [%g, %g] ms: %.4f (uniform %.4f)\n",
                  s.model.c_str(), s.band_lo_ms, s.band_hi_ms, s.band_mass,
                  s.uniform_share);
    out << line;
  }
  for (const auto& w : report.warnings) out << "  warning: " << w << "\n";
  return out.str();
}

}  // namespace p300::report
