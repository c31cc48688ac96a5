#pragma once

#include <span>
#include <vector>

namespace uniso::ynorm {

/// Everything needed to push a new raw score of a task through the same
/// monotone pipeline that was fitted on its offline data.
struct TaskScoreStats {
  double mean = 0.0;
  double std = 1.0;
  double robust_mean = 0.0;
  double robust_std = 1.0;
  bool robust_applied = false;
  double post_min = 0.0;
  double post_max = 1.0;
  double log_eps = 1e-3;

  friend bool operator==(const TaskScoreStats&, const TaskScoreStats&) = default;
};

struct ZScoreFit {
  double mean;
  double std;
  std::vector<double> values;
};

struct RobustFit {
  double robust_mean;
  double robust_std;
  bool applied;
  std::vector<double> values;
};

struct NormalizeOptions {
  bool robust_step = true;
  double log_eps = 1e-3;
};

/// Population z-score. Throws DomainError for fewer than two or constant scores.
ZScoreFit zscore_fit_apply(std::span<const double> ys);

/// Fits y ~ a + b * Phi^-1(p/2) by least squares over the below-median
/// scores, p being the within-subset empirical percentile, then maps every
/// score through (y - a) / b. Identity (applied = false) when fewer than two
/// scores fall below the median.
RobustFit robust_refit(std::span<const double> ys);

/// (y - min) / (max - min) followed by log(. + eps).
std::vector<double> minmax_log(std::span<const double> ys, double eps = 1e-3);

struct Normalized {
  TaskScoreStats stats;
  std::vector<double> values;
};

Normalized normalize_task(std::span<const double> ys, const NormalizeOptions& opts = {});

/// Pushes an unseen raw score through fitted stats, clamping into the
/// fitted range before the log.
double apply(const TaskScoreStats& stats, double y);

}  // namespace uniso::ynorm
