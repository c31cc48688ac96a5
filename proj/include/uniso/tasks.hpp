#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "uniso/textcodec.hpp"
#include "uniso/ynorm.hpp"

namespace uniso::tasks {

using text::Design;

/// y = scale * f(x - shift). An empty shift means zero.
struct Transform {
  double scale = 1.0;
  std::vector<double> shift;

  bool identity() const;
  friend bool operator==(const Transform&, const Transform&) = default;
};

enum class Protocol { Middle50, Uniform };
std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& s);

/// Known base functions: sphere, rastrigin, levy, ackley, griewank,
/// styblinski_tang (continuous, negated so larger is better), onemax and
/// seqmatch (categorical match counts).
struct TaskSpec {
  std::string id;
  std::string function;
  text::DesignSpace space;
  text::Metadata meta;
  Transform transform;
  std::vector<double> planted;  // seqmatch target sequence
  std::size_t dataset_size = 2000;
  Protocol protocol = Protocol::Middle50;
  std::uint64_t seed = 0;
  double y_min = 0.0;  // from a uniform probe, for normalized reporting
  double y_max = 1.0;

  void validate() const;
  /// Raw ground-truth score; throws DomainError for invalid designs.
  double oracle(const Design& x) const;
  /// Best attainable score (unreachable upper bound if the shift moves the
  /// optimum out of the box).
  double optimum() const;
};

/// Six training tasks: Sphere8, Rastrigin5, Levy10, OneMax12, SeqMatch8,
/// SphereShift8. Probe ranges are filled in.
std::vector<TaskSpec> builtin_suite();

/// Held-out tasks: transformed Ackley6, Griewank6 and StyblinskiTang5.
std::vector<TaskSpec> heldout_suite();

/// New task computing s * f(x - t) with a fresh id and metadata derived from
/// `seed`. Throws DomainError if s <= 0 or some |t_i| exceeds half the
/// width of variable i, or if t is non-zero on a categorical variable.
TaskSpec transform_task(const TaskSpec& base, double s, const std::vector<double>& t, std::uint64_t seed);

/// Scale in [0.5, 2] and shift within a quarter of each width, drawn from `seed`.
TaskSpec random_transform(const TaskSpec& base, std::uint64_t seed);

/// Min and max oracle score over n uniform designs.
std::pair<double, double> probe_range(const TaskSpec& task, std::size_t n, std::uint64_t seed);

/// Uniform design from the space.
Design sample_design(const text::DesignSpace& space, std::mt19937_64& rng);

struct OfflineDataset {
  std::string task_id;
  std::vector<Design> designs;
  std::vector<double> scores;
  ynorm::TaskScoreStats stats;
  std::uint64_t seed = 0;
  Protocol protocol = Protocol::Middle50;

  std::size_t size() const noexcept { return designs.size(); }
  /// D(best): the largest raw score.
  double best() const;
  std::vector<double> normalized() const;
  /// The `k` lowest-scoring pairs, in dataset order.
  OfflineDataset poorest(std::size_t k) const;
};

/// Pool indices (in pool order) whose score rank lies in (P25, P75] of a
/// pool of 4n scores: ranks n+1 .. 3n, ties broken by pool order.
std::vector<std::size_t> middle50_band(const std::vector<double>& pool_scores);

/// middle50: score 4n uniform designs, keep ranks in (P25, P75], sample n
/// of them. Designs are rounded to `sig_digits` before scoring, so the
/// stored score is the score of the printed design.
OfflineDataset gen_offline_dataset(const TaskSpec& task, std::size_t n, Protocol protocol, std::uint64_t seed,
                                   int sig_digits = 4);

void write_dataset(std::ostream& os, const OfflineDataset& d);
OfflineDataset read_dataset(std::istream& is);

struct SuiteConfig {
  std::uint64_t seed = 0;
  int sig_digits = 4;
  std::vector<TaskSpec> tasks;
  std::vector<TaskSpec> heldout;
};

void to_json(nlohmann::json& j, const TaskSpec& t);
void from_json(const nlohmann::json& j, TaskSpec& t);
void to_json(nlohmann::json& j, const SuiteConfig& s);
void from_json(const nlohmann::json& j, SuiteConfig& s);

SuiteConfig default_suite_config();
SuiteConfig load_suite(const std::string& path);
void save_suite(const SuiteConfig& s, const std::string& path);

}  // namespace uniso::tasks
