#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "uniso/textcodec.hpp"

namespace uniso::search {

using text::Design;
using text::DesignSpace;

/// Model score of a design; larger is better.
using Scorer = std::function<double(const Design&)>;

struct SearchBudget {
  std::size_t max_evals = 1000;
  std::size_t final_count = 128;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Offline designs with their recorded scores.
struct Seeds {
  std::vector<Design> designs;
  std::vector<double> scores;

  std::size_t size() const noexcept { return designs.size(); }
  /// Indices sorted by score, best first; ties keep dataset order.
  std::vector<std::size_t> ranked() const;
};

struct Candidate {
  std::size_t id = 0;
  Design design;
  double model_score = 0.0;
  std::size_t eval_index = 0;
};

struct SearchResult {
  std::vector<Candidate> candidates;
  std::size_t evaluations = 0;
  /// Best model score after each scorer call.
  std::vector<double> incumbent;
};

void write_jsonl(std::ostream& os, const SearchResult& r);
SearchResult read_jsonl(std::istream& is);

/// Wraps a scorer, counts calls, and refuses to go past the budget.
class Evaluator {
 public:
  /// `canonical` maps a proposal to the design actually scored (e.g. rounded
  /// to printed precision). Identity when empty.
  Evaluator(Scorer scorer, const SearchBudget& budget, std::function<Design(const Design&)> canonical = {});

  std::size_t remaining() const noexcept { return budget_.max_evals - log_.size(); }
  std::size_t calls() const noexcept { return log_.size(); }
  double best() const;

  /// Scores one design; throws Error when the budget is spent.
  double operator()(const Design& x);
  Design canonical(const Design& x) const { return canonical_ ? canonical_(x) : x; }

  /// Top `final_count` distinct designs by score, earlier evaluation first
  /// on ties.
  SearchResult result() const;

 private:
  Scorer scorer_;
  SearchBudget budget_;
  std::function<Design(const Design&)> canonical_;
  std::vector<Candidate> log_;
  std::vector<double> incumbent_;
};

// ---------------------------------------------------------------- operators

/// Children of an SBX pairing with spread factor `beta`.
std::pair<double, double> sbx_children(double a, double b, double beta);
/// Spread factor for uniform draw `u` and distribution index `eta`.
double sbx_beta(double u, double eta);
/// Polynomial mutation of x in [lo, hi], result clamped.
double polynomial_mutation(double x, double lo, double hi, double eta, std::mt19937_64& rng);

/// Unit-box coordinates of the continuous space.
Design to_unit(const DesignSpace& space, const Design& x);
Design from_unit(const DesignSpace& space, const Design& u);

struct EaConfig {
  std::size_t population = 10;
  double eta_c = 15.0;
  double eta_m = 20.0;
  double crossover_prob = 0.9;
};

SearchResult ea_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                       const SearchBudget& budget, const EaConfig& cfg = {},
                       std::function<Design(const Design&)> canonical = {});

struct CmaesConfig {
  double sigma0 = 0.5;
  std::size_t max_iterations = 0;  // 0: until the budget runs out
  /// Called with the covariance after every update.
  std::function<void(const Eigen::MatrixXd&)> on_covariance;
};

/// Starts from the best dataset design, or the box centre if none.
SearchResult cmaes_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                          const SearchBudget& budget, const CmaesConfig& cfg = {},
                          std::function<Design(const Design&)> canonical = {});

// ----------------------------------------------------------------------- GP

enum class KernelKind { SquaredExponential, Overlap };

double se_kernel(const Design& a, const Design& b, const std::vector<double>& lengthscales);
/// exp(mean_i theta_i [a_i == b_i]).
double overlap_kernel(const Design& a, const Design& b, const std::vector<double>& theta);

struct GPModel {
  KernelKind kind = KernelKind::SquaredExponential;
  std::vector<Design> inputs;
  Eigen::VectorXd targets;
  std::vector<double> scales;
  double noise = 0.01;
  double jitter = 0.0;
  Eigen::MatrixXd chol;  // lower factor of K + (noise + jitter) I
  Eigen::VectorXd alpha;

  double kernel(const Design& a, const Design& b) const;
};

/// Zero prior mean. Throws DomainError when the factorization fails even
/// with the largest jitter.
GPModel gp_fit(KernelKind kind, std::vector<Design> inputs, const std::vector<double>& targets,
               std::vector<double> scales, double noise = 0.01);

struct Posterior {
  std::vector<double> mean;
  std::vector<double> variance;
};
Posterior gp_posterior(const GPModel& gp, const std::vector<Design>& queries);

struct JointPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};
JointPosterior gp_joint(const GPModel& gp, const std::vector<Design>& queries);

/// Monte-Carlo qEI: mean over samples of max(0, max_j f_j - best).
double qei_acquisition(const GPModel& gp, const std::vector<Design>& batch, double best, std::size_t mc_samples,
                       std::uint64_t seed);
/// Also reports the standard error of the estimate.
std::pair<double, double> qei_with_error(const GPModel& gp, const std::vector<Design>& batch, double best,
                                         std::size_t mc_samples, std::uint64_t seed);

struct BoConfig {
  std::size_t warm_start = 500;
  std::size_t q = 10;
  std::size_t mc_samples = 128;
  std::size_t initial_candidates = 128;
  std::size_t restarts = 10;
  std::size_t refine_steps = 200;
  double noise = 0.01;
  /// Largest number of points the GP is conditioned on; best-scored kept.
  std::size_t max_gp_points = 300;
  // categorical
  double ucb_beta = 0.2;
  std::size_t ea_population = 32;
  std::size_t ea_generations = 200;
};

SearchResult bo_qei_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                           const SearchBudget& budget, const BoConfig& cfg = {},
                           std::function<Design(const Design&)> canonical = {});

/// mu + beta * sigma at each candidate.
std::vector<double> ucb(const GPModel& gp, const std::vector<Design>& candidates, double beta);

/// Maximizes mu + beta * sigma over `space` with a categorical EA on the GP.
/// Exposed for tests; returns the population sorted by acquisition.
std::vector<Design> maximize_ucb(const GPModel& gp, const DesignSpace& space, double beta, std::size_t population,
                                 std::size_t generations, std::mt19937_64& rng,
                                 const std::vector<Design>& seeds = {});

SearchResult bo_categorical_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                                   const SearchBudget& budget, const BoConfig& cfg = {});

}  // namespace uniso::search
