#pragma once

#include <span>

namespace p300::stats {

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of
// freedom; p is two-sided.
TTestResult welch_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace p300::stats
