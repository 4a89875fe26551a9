#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "nn_core.hpp"

namespace p300::models {

enum class ModelKind {
  lda,
  cnn,
  lstm_large,
  lstm_small,
  lstm_cnn_large,
  lstm_cnn_small,
};

const char* to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);
std::vector<ModelKind> all_model_kinds();

// Non-shrinkage LDA over the flattened 55x25 feature vector.
struct LdaModel {
  Eigen::VectorXd w;
  double bias = 0.0;
  bool fitted = false;
};

// Hidden widths of the CNN classifier head. The published parameter total
// for this model is not reachable from its stated layer shapes, so the
// widths stay configurable; these defaults give 5,564 parameters.
struct CnnWidths {
  int fc1 = 50;
  int fc2 = 20;
};

struct TrainSchedule {
  struct Phase {
    int epochs = 0;
    double learning_rate = 0.0;
  };
  std::vector<Phase> phases{{30, 1e-3}, {30, 1e-5}};
  int batch_size = 64;
  double rho = 0.9;
  double epsilon = 1e-8;
  uint64_t shuffle_seed = 0;
  double pos_weight = 1.0;

  void validate() const;
};

TrainSchedule fine_tune_schedule();  // one phase: 30 epochs at 1e-4

// Uniform scoring interface over the six classifiers. Higher score means
// more P300-like; networks emit a probability, LDA an affine projection.
class Scorer {
 public:
  static Scorer build(ModelKind kind, uint64_t seed, const CnnWidths& widths = {});

  ModelKind kind() const { return kind_; }
  bool is_network() const { return net_.has_value(); }
  int64_t param_count() const;

  const nn::Network& network() const;
  nn::Network& network();
  const LdaModel& lda() const;
  LdaModel& lda();

  double score(const double* epoch, int n_channels, int n_samples) const;
  // Scores for the selected epochs, in order.
  Eigen::VectorXd score_epochs(const data::EpochSet& epochs,
                               std::span<const size_t> indices) const;

  void save(const std::string& path) const;
  static Scorer load(const std::string& path);

  Scorer() = default;  // empty; fill via build()/load()

 private:
  ModelKind kind_ = ModelKind::lda;
  std::optional<nn::Network> net_;
  std::optional<LdaModel> lda_;
};

// Mini-batch RMSProp training of a network scorer over the selected
// epochs; returns the per-epoch mean loss (one entry per training epoch).
std::vector<double> train(Scorer& scorer, const data::EpochSet& epochs,
                          std::span<const size_t> indices,
                          const TrainSchedule& schedule);

// Continued training at the fine-tune schedule.
std::vector<double> fine_tune(Scorer& scorer, const data::EpochSet& calibration,
                              std::span<const size_t> indices,
                              uint64_t shuffle_seed);

// Pooled-covariance LDA fit (pseudo-inverse, eigenvalue cutoff at
// 1e-10 * lambda_max).
void lda_fit(LdaModel& model, const data::EpochSet& epochs,
             std::span<const size_t> indices);

// Dispatches to train() or lda_fit() based on the scorer kind.
std::vector<double> fit(Scorer& scorer, const data::EpochSet& epochs,
                        std::span<const size_t> indices,
                        const TrainSchedule& schedule);

}  // namespace p300::models
