#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "errors.hpp"
#include "rng.hpp"
#include "speller.hpp"

using namespace p300;
using namespace p300::speller;

TEST_CASE("decode_single_trial") {
  CHECK(decode_single_trial(std::vector<double>{0.1, 0.9, 0.3}) == 1);
  CHECK(decode_single_trial(std::vector<double>{0.4, 0.4, 0.4}) == 0);  // tie rule
  CHECK_THROWS_AS((void)decode_single_trial(std::vector<double>{1.0}), DataError);
  CHECK_THROWS_AS(
      (void)decode_single_trial(std::vector<double>{0.1, std::nan(""), 0.2}),
      NumericError);

  SUBCASE("permuting characters permutes the prediction") {
    Rng rng(4);
    std::vector<double> scores(7);
    for (auto& s : scores) s = rng.uniform();
    const int base = decode_single_trial(scores);
    std::vector<size_t> perm{3, 0, 6, 1, 5, 2, 4};
    std::vector<double> permuted(7);
    for (size_t i = 0; i < 7; ++i) permuted[i] = scores[perm[i]];
    const int moved = decode_single_trial(permuted);
    CHECK(perm[size_t(moved)] == size_t(base));
  }
}

TEST_CASE("decode_repetitions") {
  SUBCASE("R = 1 reduces to the single-trial rule") {
    TrialScores t;
    t.scores.resize(1, 3);
    t.scores << 0.1, 0.9, 0.3;
    CHECK(decode_repetitions(t) ==
          decode_single_trial(std::vector<double>{0.1, 0.9, 0.3}));
  }

  SUBCASE("hand-computed means: [[0.9,0.1],[0.1,0.8]] -> char 0") {
    TrialScores t;
    t.scores.resize(2, 2);
    t.scores << 0.9, 0.1, 0.1, 0.8;  // means 0.5 vs 0.45
    CHECK(decode_repetitions(t) == 0);
  }

  SUBCASE("positive affine transforms keep the decision") {
    Rng rng(9);
    TrialScores t;
    t.scores.resize(5, 8);
    for (Eigen::Index r = 0; r < 5; ++r)
      for (Eigen::Index c = 0; c < 8; ++c) t.scores(r, c) = rng.normal();
    const int base = decode_repetitions(t);
    TrialScores scaled = t;
    scaled.scores = (2.5 * scaled.scores).array() - 0.75;
    CHECK(decode_repetitions(scaled) == base);
  }

  SUBCASE("repetition order does not matter") {
    Rng rng(10);
    TrialScores t;
    t.scores.resize(4, 6);
    for (Eigen::Index r = 0; r < 4; ++r)
      for (Eigen::Index c = 0; c < 6; ++c) t.scores(r, c) = rng.normal();
    const int base = decode_repetitions(t);
    TrialScores shuffled = t;
    shuffled.scores.row(0).swap(shuffled.scores.row(3));
    shuffled.scores.row(1).swap(shuffled.scores.row(2));
    CHECK(decode_repetitions(shuffled) == base);
  }

  SUBCASE("duplicating every repetition keeps the decision") {
    Rng rng(11);
    TrialScores t;
    t.scores.resize(3, 5);
    for (Eigen::Index r = 0; r < 3; ++r)
      for (Eigen::Index c = 0; c < 5; ++c) t.scores(r, c) = rng.normal();
    TrialScores doubled;
    doubled.scores.resize(6, 5);
    doubled.scores << t.scores, t.scores;
    CHECK(decode_repetitions(doubled) == decode_repetitions(t));
  }
}

TEST_CASE("speller_accuracy") {
  auto make_trial = [](int c_star, int c_decoded) {
    TrialScores t;
    t.scores = Eigen::MatrixXd::Zero(2, 4);
    t.scores(0, c_decoded) = 1.0;
    t.scores(1, c_decoded) = 1.0;
    t.true_char = c_star;
    return t;
  };

  SUBCASE("counting") {
    std::vector<TrialScores> trials{make_trial(1, 1), make_trial(2, 2),
                                    make_trial(3, 3), make_trial(0, 2)};
    CHECK(speller_accuracy(trials) == doctest::Approx(0.75));
    std::vector<TrialScores> all{make_trial(1, 1), make_trial(0, 0)};
    CHECK(speller_accuracy(all) == doctest::Approx(1.0));
  }

  SUBCASE("empty list is an error") {
    CHECK_THROWS_AS((void)speller_accuracy(std::vector<TrialScores>{}), DataError);
  }

  SUBCASE("random scores sit at chance level 1/30") {
    Rng rng(123);
    const int n_trials = 3000;
    std::vector<TrialScores> trials;
    trials.reserve(n_trials);
    for (int i = 0; i < n_trials; ++i) {
      TrialScores t;
      t.scores.resize(10, 30);
      for (Eigen::Index r = 0; r < 10; ++r)
        for (Eigen::Index c = 0; c < 30; ++c) t.scores(r, c) = rng.normal();
      t.true_char = int(rng.below(30));
      trials.push_back(std::move(t));
    }
    const double acc = speller_accuracy(trials);
    const double p = 1.0 / 30.0;
    const double sigma = std::sqrt(p * (1 - p) / n_trials);
    CHECK(acc > p - 3 * sigma);
    CHECK(acc < p + 3 * sigma);
  }
}

TEST_CASE("decode_repetitions agrees with brute-force enumeration") {
  Rng rng(77);
  for (int it = 0; it < 200; ++it) {
    const int R = 1 + int(rng.below(6));
    const int C = 2 + int(rng.below(12));
    TrialScores t;
    t.scores.resize(R, C);
    for (Eigen::Index r = 0; r < R; ++r)
      for (Eigen::Index c = 0; c < C; ++c) t.scores(r, c) = rng.normal();

    int best = 0;
    double best_mean = -1e300;
    for (int c = 0; c < C; ++c) {
      double mean = 0.0;
      for (int r = 0; r < R; ++r) mean += t.scores(r, c);
      mean /= R;
      if (mean > best_mean) {
        best_mean = mean;
        best = c;
      }
    }
    CHECK(decode_repetitions(t) == best);
  }
}
