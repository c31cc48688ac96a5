#include "uniso/ynorm.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <numeric>

#include "uniso/error.hpp"

namespace uniso::ynorm {

ZScoreFit zscore_fit_apply(std::span<const double> ys) {
  if (ys.size() < 2) throw DomainError("zscore: need at least two scores");
  const double n = static_cast<double>(ys.size());
  const double mean = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double ss = 0.0;
  for (double y : ys) ss += (y - mean) * (y - mean);
  const double std = std::sqrt(ss / n);
  if (!(std > 1e-12)) throw DomainError("zscore: constant scores, task is degenerate");
  ZScoreFit fit{mean, std, {}};
  fit.values.reserve(ys.size());
  for (double y : ys) fit.values.push_back((y - mean) / std);
  return fit;
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

RobustFit robust_refit(std::span<const double> ys) {
  RobustFit fit{0.0, 1.0, false, std::vector<double>(ys.begin(), ys.end())};
  if (ys.size() < 4) return fit;
  const double med = median_of(fit.values);
  std::vector<double> below;
  for (double y : ys) {
    if (y < med) below.push_back(y);
  }
  if (below.size() < 2) return fit;
  std::sort(below.begin(), below.end());
  const boost::math::normal_distribution<double> unit;
  const double m = static_cast<double>(below.size());
  double sz = 0.0, sy = 0.0, szz = 0.0, szy = 0.0;
  for (std::size_t r = 0; r < below.size(); ++r) {
    const double p = (static_cast<double>(r) + 0.5) / m;
    const double z = boost::math::quantile(unit, p / 2.0);
    sz += z;
    sy += below[r];
    szz += z * z;
    szy += z * below[r];
  }
  const double denom = m * szz - sz * sz;
  if (!(denom > 0.0)) return fit;
  const double slope = (m * szy - sz * sy) / denom;
  const double intercept = (sy - slope * sz) / m;
  fit.robust_mean = intercept;
  fit.robust_std = std::max(slope, 1e-6);
  fit.applied = true;
  for (double& y : fit.values) y = (y - fit.robust_mean) / fit.robust_std;
  return fit;
}

std::vector<double> minmax_log(std::span<const double> ys, double eps) {
  if (ys.empty()) throw DomainError("minmax_log: no scores");
  if (!(eps > 0.0)) throw DomainError("minmax_log: eps must be positive");
  const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
  if (!(*hi > *lo)) throw DomainError("minmax_log: max equals min");
  std::vector<double> out;
  out.reserve(ys.size());
  for (double y : ys) out.push_back(std::log((y - *lo) / (*hi - *lo) + eps));
  return out;
}

Normalized normalize_task(std::span<const double> ys, const NormalizeOptions& opts) {
  Normalized out;
  auto z = zscore_fit_apply(ys);
  out.stats.mean = z.mean;
  out.stats.std = z.std;
  std::vector<double> mid = std::move(z.values);
  if (opts.robust_step) {
    auto r = robust_refit(mid);
    out.stats.robust_mean = r.robust_mean;
    out.stats.robust_std = r.robust_std;
    out.stats.robust_applied = r.applied;
    mid = std::move(r.values);
  }
  const auto [lo, hi] = std::minmax_element(mid.begin(), mid.end());
  out.stats.post_min = *lo;
  out.stats.post_max = *hi;
  out.stats.log_eps = opts.log_eps;
  out.values = minmax_log(mid, opts.log_eps);
  return out;
}

double apply(const TaskScoreStats& s, double y) {
  double v = (y - s.mean) / s.std;
  if (s.robust_applied) v = (v - s.robust_mean) / s.robust_std;
  v = std::clamp(v, s.post_min, s.post_max);
  return std::log((v - s.post_min) / (s.post_max - s.post_min) + s.log_eps);
}

}  // namespace uniso::ynorm
