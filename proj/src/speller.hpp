#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace p300::speller {

// Per-trial score grid: one row per repetition, one column per character.
struct TrialScores {
  Eigen::MatrixXd scores;  // [R x C]
  int true_char = -1;
};

// Argmax over one repetition's scores; ties go to the lowest index.
int decode_single_trial(std::span<const double> scores);

// Argmax over per-character means across repetitions.
int decode_repetitions(const TrialScores& trial);

// Fraction of trials whose decoded character equals true_char.
double speller_accuracy(std::span<const TrialScores> trials);

}  // namespace p300::speller
