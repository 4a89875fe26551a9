#include "models.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "errors.hpp"
#include "rng.hpp"

namespace p300::models {

using nn::LayerSpec;

const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::lda: return "lda";
    case ModelKind::cnn: return "cnn";
    case ModelKind::lstm_large: return "lstm_large";
    case ModelKind::lstm_small: return "lstm_small";
    case ModelKind::lstm_cnn_large: return "lstm_cnn_large";
    case ModelKind::lstm_cnn_small: return "lstm_cnn_small";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& name) {
  for (const ModelKind k : all_model_kinds())
    if (name == to_string(k)) return k;
  throw ConfigError("unknown model kind '" + name + "'");
}

std::vector<ModelKind> all_model_kinds() {
  return {ModelKind::lda,        ModelKind::cnn,
          ModelKind::lstm_large, ModelKind::lstm_small,
          ModelKind::lstm_cnn_large, ModelKind::lstm_cnn_small};
}

void TrainSchedule::validate() const {
  for (const auto& ph : phases) {
    if (ph.epochs < 0) throw ConfigError("schedule: epochs must be >= 0");
    if (ph.learning_rate <= 0) throw ConfigError("schedule: learning rate must be > 0");
  }
  if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
  if (rho <= 0 || rho >= 1) throw ConfigError("schedule: rho must be in (0,1)");
  if (epsilon <= 0) throw ConfigError("schedule: epsilon must be > 0");
  if (pos_weight <= 0) throw ConfigError("schedule: pos_weight must be > 0");
}

TrainSchedule fine_tune_schedule() {
  TrainSchedule s;
  s.phases = {{30, 1e-4}};
  return s;
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

namespace {

constexpr int kChannels = 55;
constexpr int kSamples = 25;
constexpr int kSpatialMaps = 10;
constexpr int kTemporalFilters = 13;
constexpr int kTemporalKernel = 5;

std::vector<LayerSpec> layers_for(ModelKind kind, const CnnWidths& widths) {
  using A = nn::Activation;
  switch (kind) {
    case ModelKind::lda:
      throw ConfigError("lda has no layer stack");
    case ModelKind::cnn: {
      const int conv_out =
          kTemporalFilters * ((kSamples - kTemporalKernel) / kTemporalKernel + 1);
      return {LayerSpec::spatial_conv(kChannels, kSpatialMaps),
              LayerSpec::temporal_conv(kSpatialMaps, kTemporalFilters,
                                       kTemporalKernel, kTemporalKernel, A::relu),
              LayerSpec::fully_connected(conv_out, widths.fc1, A::relu),
              LayerSpec::fully_connected(widths.fc1, widths.fc2, A::relu),
              LayerSpec::sigmoid_unit(widths.fc2)};
    }
    case ModelKind::lstm_large:
      return {LayerSpec::lstm(kChannels, 100), LayerSpec::sigmoid_unit(100)};
    case ModelKind::lstm_small:
      return {LayerSpec::lstm(kChannels, 30), LayerSpec::sigmoid_unit(30)};
    case ModelKind::lstm_cnn_large:
      return {LayerSpec::spatial_conv(kChannels, kSpatialMaps),
              LayerSpec::lstm(kSpatialMaps, 100), LayerSpec::sigmoid_unit(100)};
    case ModelKind::lstm_cnn_small:
      return {LayerSpec::spatial_conv(kChannels, kSpatialMaps),
              LayerSpec::lstm(kSpatialMaps, 30), LayerSpec::sigmoid_unit(30)};
  }
  throw ConfigError("unknown model kind");
}

}  // namespace

Scorer Scorer::build(ModelKind kind, uint64_t seed, const CnnWidths& widths) {
  Scorer s;
  s.kind_ = kind;
  if (kind == ModelKind::lda) {
    LdaModel m;
    m.w = Eigen::VectorXd::Zero(kChannels * kSamples);
    s.lda_ = std::move(m);
  } else {
    s.net_ = nn::build_network(layers_for(kind, widths), seed);
  }
  return s;
}

int64_t Scorer::param_count() const {
  if (net_) return net_->param_count();
  return lda_->w.size();
}

const nn::Network& Scorer::network() const {
  if (!net_) throw DataError("scorer has no network");
  return *net_;
}
nn::Network& Scorer::network() {
  if (!net_) throw DataError("scorer has no network");
  return *net_;
}
const LdaModel& Scorer::lda() const {
  if (!lda_) throw DataError("scorer has no LDA model");
  return *lda_;
}
LdaModel& Scorer::lda() {
  if (!lda_) throw DataError("scorer has no LDA model");
  return *lda_;
}

double Scorer::score(const double* epoch, int n_channels, int n_samples) const {
  if (net_) {
    const nn::BatchView view{epoch, 1, n_channels, n_samples};
    return nn::forward(*net_, view)(0);
  }
  const auto n = Eigen::Index(n_channels) * n_samples;
  if (!lda_->fitted) throw DataError("LDA scorer is not fitted");
  if (n != lda_->w.size()) throw DataError("LDA scorer: feature size mismatch");
  return lda_->w.dot(Eigen::Map<const Eigen::VectorXd>(epoch, n)) + lda_->bias;
}

Eigen::VectorXd Scorer::score_epochs(const data::EpochSet& epochs,
                                     std::span<const size_t> indices) const {
  Eigen::VectorXd out(Eigen::Index(indices.size()));
  if (net_) {
    // Batched forward in chunks; samples are independent.
    constexpr size_t kChunk = 256;
    std::vector<double> block;
    const size_t f = epochs.n_features();
    for (size_t start = 0; start < indices.size(); start += kChunk) {
      const size_t n = std::min(kChunk, indices.size() - start);
      block.resize(n * f);
      for (size_t i = 0; i < n; ++i)
        std::memcpy(block.data() + i * f, epochs.epoch(indices[start + i]),
                    f * sizeof(double));
      const nn::BatchView view{block.data(), int(n), epochs.n_channels,
                               epochs.n_samples};
      out.segment(Eigen::Index(start), Eigen::Index(n)) = nn::forward(*net_, view);
    }
    return out;
  }
  for (size_t i = 0; i < indices.size(); ++i)
    out(Eigen::Index(i)) =
        score(epochs.epoch(indices[i]), epochs.n_channels, epochs.n_samples);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::vector<double> train(Scorer& scorer, const data::EpochSet& epochs,
                          std::span<const size_t> indices,
                          const TrainSchedule& schedule) {
  if (!scorer.is_network())
    throw ConfigError("train: scorer is not a network (use lda_fit)");
  schedule.validate();
  if (indices.empty()) throw DataError("train: empty training set");

  nn::Network& net = scorer.network();
  const size_t f = epochs.n_features();
  std::vector<size_t> order(indices.begin(), indices.end());
  Rng shuffle_rng(derive_seed(schedule.shuffle_seed, "train-shuffle"));

  std::vector<double> log;
  std::vector<double> block;
  std::vector<double> labels;
  for (const auto& phase : schedule.phases) {
    for (int ep = 0; ep < phase.epochs; ++ep) {
      shuffle_rng.shuffle(order);
      double loss_sum = 0.0;
      for (size_t start = 0; start < order.size();
           start += size_t(schedule.batch_size)) {
        const size_t n =
            std::min(size_t(schedule.batch_size), order.size() - start);
        block.resize(n * f);
        labels.resize(n);
        for (size_t i = 0; i < n; ++i) {
          std::memcpy(block.data() + i * f, epochs.epoch(order[start + i]),
                      f * sizeof(double));
          labels[i] = double(epochs.labels[order[start + i]]);
        }
        const nn::BatchView view{block.data(), int(n), epochs.n_channels,
                                 epochs.n_samples};
        const double loss =
            nn::backward(net, view, labels, schedule.pos_weight);
        nn::rmsprop_step(net, phase.learning_rate, schedule.rho,
                         schedule.epsilon);
        loss_sum += loss * double(n);
      }
      log.push_back(loss_sum / double(order.size()));
    }
  }
  return log;
}

std::vector<double> fine_tune(Scorer& scorer, const data::EpochSet& calibration,
                              std::span<const size_t> indices,
                              uint64_t shuffle_seed) {
  if (indices.empty()) throw DataError("fine_tune: empty calibration set");
  TrainSchedule s = fine_tune_schedule();
  s.shuffle_seed = shuffle_seed;
  return train(scorer, calibration, indices, s);
}

// ---------------------------------------------------------------------------
// LDA
// ---------------------------------------------------------------------------

void lda_fit(LdaModel& model, const data::EpochSet& epochs,
             std::span<const size_t> indices) {
  std::vector<size_t> targets, nontargets;
  for (const size_t i : indices)
    (epochs.labels[i] ? targets : nontargets).push_back(i);
  if (targets.empty() || nontargets.empty())
    throw DataError("lda_fit: both classes must be present");

  const auto d = Eigen::Index(epochs.n_features());
  auto class_stats = [&](const std::vector<size_t>& idx, Eigen::VectorXd& mean,
                         Eigen::MatrixXd& scatter) {
    Eigen::MatrixXd x(Eigen::Index(idx.size()), d);
    for (size_t i = 0; i < idx.size(); ++i)
      x.row(Eigen::Index(i)) = Eigen::Map<const Eigen::VectorXd>(
          epochs.epoch(idx[i]), d);
    mean = x.colwise().mean();
    x.rowwise() -= mean.transpose();
    scatter.noalias() = x.transpose() * x;
  };

  Eigen::VectorXd mu_t, mu_n;
  Eigen::MatrixXd s_t, s_n;
  class_stats(targets, mu_t, s_t);
  class_stats(nontargets, mu_n, s_n);

  const auto n_total = double(targets.size() + nontargets.size());
  const Eigen::MatrixXd cov = (s_t + s_n) / std::max(1.0, n_total - 2.0);

  // Pseudo-inverse through the eigendecomposition of the symmetric
  // covariance; small eigenvalues are treated as null directions.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success)
    throw NumericError("lda_fit: eigendecomposition failed");
  const Eigen::VectorXd& evals = eig.eigenvalues();
  const double lambda_max = evals.cwiseAbs().maxCoeff();
  const double cutoff = 1e-10 * lambda_max;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < d; ++i)
    if (evals(i) > cutoff) inv(i) = 1.0 / evals(i);

  const Eigen::VectorXd delta = mu_t - mu_n;
  model.w = eig.eigenvectors() *
            (inv.asDiagonal() * (eig.eigenvectors().transpose() * delta));
  model.bias = -model.w.dot((mu_t + mu_n) / 2.0);
  if (!model.w.allFinite() || !std::isfinite(model.bias))
    throw NumericError("lda_fit: non-finite solution");
  model.fitted = true;
}

std::vector<double> fit(Scorer& scorer, const data::EpochSet& epochs,
                        std::span<const size_t> indices,
                        const TrainSchedule& schedule) {
  if (scorer.is_network()) return train(scorer, epochs, indices, schedule);
  lda_fit(scorer.lda(), epochs, indices);
  return {};
}

// ---------------------------------------------------------------------------
// Persistence. Networks use the "P3WT" checkpoint; LDA uses "P3LD":
// magic, u32 version, 1375 f64 weights, f64 bias.
// ---------------------------------------------------------------------------

namespace {

constexpr char kLdaMagic[4] = {'P', '3', 'L', 'D'};
constexpr uint32_t kLdaVersion = 1;
constexpr Eigen::Index kLdaFeatures = kChannels * kSamples;

}  // namespace

void Scorer::save(const std::string& path) const {
  if (net_) {
    nn::save_network(*net_, path);
    return;
  }
  if (!lda_->fitted) throw DataError("save: LDA scorer is not fitted");
  if (lda_->w.size() != kLdaFeatures)
    throw DataError("save: the LDA container holds exactly " +
                    std::to_string(kLdaFeatures) + " weights");
  std::string buf;
  buf.append(kLdaMagic, 4);
  char raw[8];
  const uint32_t version = kLdaVersion;
  std::memcpy(raw, &version, 4);
  buf.append(raw, 4);
  for (Eigen::Index i = 0; i < lda_->w.size(); ++i) {
    const double v = lda_->w(i);
    std::memcpy(raw, &v, 8);
    buf.append(raw, 8);
  }
  std::memcpy(raw, &lda_->bias, 8);
  buf.append(raw, 8);

  const std::filesystem::path target(path);
  if (target.has_parent_path())
    std::filesystem::create_directories(target.parent_path());
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("save: cannot open " + tmp.string());
    f.write(buf.data(), std::streamsize(buf.size()));
    if (!f) throw DataError("save: write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

Scorer Scorer::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f) throw DataError("load: truncated file: " + path);

  if (std::memcmp(magic, kLdaMagic, 4) == 0) {
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (!f || version != kLdaVersion)
      throw DataError("load: unsupported LDA container version in " + path);
    Scorer s;
    s.kind_ = ModelKind::lda;
    LdaModel m;
    m.w.resize(kLdaFeatures);
    f.read(reinterpret_cast<char*>(m.w.data()), kLdaFeatures * 8);
    f.read(reinterpret_cast<char*>(&m.bias), 8);
    if (!f) throw DataError("load: truncated LDA container: " + path);
    m.fitted = true;
    s.lda_ = std::move(m);
    return s;
  }

  nn::Network net = nn::load_network(path);
  // Identify the architecture family for reporting.
  const LayerSpec* lstm = nullptr;
  bool has_spatial = false;
  for (const auto& l : net.layers) {
    if (l.kind == LayerSpec::Kind::lstm && !lstm) lstm = &l;
    if (l.kind == LayerSpec::Kind::spatial_conv) has_spatial = true;
  }
  Scorer s;
  if (lstm) {
    const bool large = lstm->out >= 100;
    s.kind_ = has_spatial
                  ? (large ? ModelKind::lstm_cnn_large : ModelKind::lstm_cnn_small)
                  : (large ? ModelKind::lstm_large : ModelKind::lstm_small);
  } else {
    s.kind_ = ModelKind::cnn;
  }
  s.net_ = std::move(net);
  return s;
}

}  // namespace p300::models
