#include "speller.hpp"

#include <cmath>

#include "errors.hpp"

namespace p300::speller {

namespace {

int argmax_lowest_tie(const Eigen::VectorXd& v) {
  int best = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isnan(v(i))) throw NumericError("decode: NaN score");
    if (v(i) > v(best)) best = int(i);
  }
  return best;
}

}  // namespace

int decode_single_trial(std::span<const double> scores) {
  if (scores.size() < 2) throw DataError("decode: need at least 2 characters");
  Eigen::VectorXd v =
      Eigen::Map<const Eigen::VectorXd>(scores.data(), Eigen::Index(scores.size()));
  return argmax_lowest_tie(v);
}

int decode_repetitions(const TrialScores& trial) {
  if (trial.scores.cols() < 2) throw DataError("decode: need at least 2 characters");
  if (trial.scores.rows() < 1) throw DataError("decode: need at least 1 repetition");
  const Eigen::VectorXd means =
      trial.scores.colwise().sum() / double(trial.scores.rows());
  return argmax_lowest_tie(means);
}

double speller_accuracy(std::span<const TrialScores> trials) {
  if (trials.empty()) throw DataError("speller_accuracy: no trials");
  size_t correct = 0;
  for (const auto& t : trials)
    if (decode_repetitions(t) == t.true_char) ++correct;
  return double(correct) / double(trials.size());
}

}  // namespace p300::speller
