#include "stats.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>

#include "errors.hpp"

namespace p300::stats {

namespace {

struct SampleStats {
  double mean = 0.0;
  double var = 0.0;  // unbiased
  double n = 0.0;
};

SampleStats summarize(std::span<const double> x) {
  if (x.size() < 2) throw DataError("welch_t_test: each sample needs >= 2 values");
  SampleStats s;
  s.n = double(x.size());
  for (const double v : x) {
    if (!std::isfinite(v)) throw NumericError("welch_t_test: non-finite input");
    s.mean += v;
  }
  s.mean /= s.n;
  for (const double v : x) s.var += (v - s.mean) * (v - s.mean);
  s.var /= (s.n - 1.0);
  return s;
}

}  // namespace

TTestResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  const SampleStats sa = summarize(a);
  const SampleStats sb = summarize(b);
  const double va = sa.var / sa.n;
  const double vb = sb.var / sb.n;
  const double se2 = va + vb;
  if (se2 <= 0.0)
    throw NumericError("welch_t_test: zero variance in both samples");

  TTestResult r;
  r.t = (sa.mean - sb.mean) / std::sqrt(se2);
  r.df = se2 * se2 /
         (va * va / (sa.n - 1.0) + vb * vb / (sb.n - 1.0));
  const boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(dist, -std::abs(r.t));
  return r;
}

}  // namespace p300::stats
