#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "uniso/models.hpp"
#include "uniso/search.hpp"
#include "uniso/tasks.hpp"

namespace uniso::harness {

using text::Design;

enum class Optimizer { Ea, Cmaes, Bo };
std::string to_string(Optimizer o);
Optimizer parse_optimizer(const std::string& s);

struct RunConfig {
  model::Variant variant = model::Variant::T;
  model::Mode mode = model::Mode::Improved;
  std::string suite_path;  // empty: built-in suite
  Optimizer optimizer = Optimizer::Ea;
  std::size_t budget = 1000;
  std::size_t final_count = 128;
  std::vector<std::uint64_t> seeds = {0};
  std::string out_dir = "uniso-out";
  std::size_t dataset_size = 0;  // 0: per-task size from the suite
  int sig_digits = 4;            // overrides the suite value when > 0
  bool multi_task = true;
  std::vector<std::string> task_filter;  // empty: every training task
  model::ModelConfig model;
  model::TrainConfig train;
  model::DecodeConfig decode;
  search::EaConfig ea;
  search::CmaesConfig cmaes;
  search::BoConfig bo;

  /// Throws DomainError for empty seeds, zero budget or a missing suite file.
  void validate() const;
};

/// Paper-style defaults scaled to a desk CPU (2 layers, 50 epochs, batch 64).
RunConfig default_run_config();
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::string& path);

/// The suite named by the config, with the config's sig_digits applied.
tasks::SuiteConfig resolve_suite(const RunConfig& cfg);

/// Text the model reads for one design.
text::TokenSequence input_tokens(const tasks::TaskSpec& task, const Design& x, int sig_digits);

/// Training examples for the given tasks. P10 targets carry raw scores;
/// y_norm uses each dataset's stored statistics.
model::TrainData build_train_data(const std::vector<tasks::TaskSpec>& tasks,
                                  const std::vector<tasks::OfflineDataset>& datasets, const model::ModelConfig& mc,
                                  int sig_digits);

/// Score a malformed UniSO-T decode receives: dataset min - range - 1.
double decode_failure_score(const tasks::OfflineDataset& d);

/// Model scorer for one task: decoded raw score (T) or regressor output (N).
search::Scorer make_scorer(const model::ModelState& s, const tasks::TaskSpec& task, const tasks::OfflineDataset& d,
                           int sig_digits, const model::DecodeConfig& decode = {});

/// Runs the configured optimizer on the model scorer. CMA-ES and
/// continuous BO fall back to EA and categorical BO on categorical tasks.
search::SearchResult run_search(const model::ModelState& s, const tasks::TaskSpec& task,
                                const tasks::OfflineDataset& d, const RunConfig& cfg, std::uint64_t seed);

struct TaskMetrics {
  std::string task;
  double dataset_best = 0.0;
  double best = 0.0;
  double median = 0.0;
  double normalized_best = 0.0;
  double normalized_median = 0.0;
  bool exceeds = false;
  std::size_t candidates = 0;
};

/// Oracle scores of final candidates against D(best); normalisation uses
/// (y - y_min) / (y_max - y_min).
TaskMetrics evaluate_candidates(const tasks::TaskSpec& task, const std::vector<Design>& candidates,
                                double dataset_best, double y_min, double y_max);

struct EvalReport {
  std::string method;
  std::vector<TaskMetrics> tasks;
};

void write_report_table(std::ostream& os, const EvalReport& r);
void write_report_jsonl(std::ostream& os, const EvalReport& r);
EvalReport read_report_jsonl(std::istream& is);

struct RankTable {
  std::vector<std::string> methods;
  std::vector<std::string> tasks;
  std::vector<std::vector<double>> ranks;  // [method][task]
  std::vector<double> mean;
  std::vector<double> stddev;  // population std across tasks
};

/// Ranks by best oracle score per task (1 = best, ties share the mean rank).
RankTable report_ranks(const std::map<std::string, EvalReport>& reports);
void write_rank_table(std::ostream& os, const RankTable& t);

/// Mean ranks of `v` (1-based, ties averaged).
std::vector<double> average_ranks(const std::vector<double>& v);
/// Pearson correlation of the average ranks. 0 when either side is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct OodResult {
  double rho = 0.0;
  std::size_t points = 0;
};

/// Spearman correlation between model and oracle scores on fresh designs
/// whose oracle score exceeds the dataset's P75 and which are not in the
/// dataset. Collects up to `n` points from at most `max_draws` uniform
/// draws; throws DomainError when fewer than 20 are found.
OodResult spearman_ood(const model::ModelState& s, const tasks::TaskSpec& task, const tasks::OfflineDataset& d,
                       int sig_digits, std::size_t n = 200, std::uint64_t seed = 0,
                       std::size_t max_draws = 200000);

/// Rows: task id, normalised y, pooled embedding (d_model), projected z.
void export_embeddings(std::ostream& os, const model::ModelState& s, const std::vector<tasks::TaskSpec>& tasks,
                       const std::vector<tasks::OfflineDataset>& datasets, int sig_digits);

struct AttentionRow {
  std::string task;
  std::size_t inputs = 0;
  std::array<double, model::kTokenCategories> shares{};
  std::array<std::size_t, model::kTokenCategories> counts{};
};

/// Mean per-category encoder attention shares over the first
/// `max_per_task` designs of each dataset.
std::vector<AttentionRow> attention_rows(const model::ModelState& s, const std::vector<tasks::TaskSpec>& tasks,
                                         const std::vector<tasks::OfflineDataset>& datasets, int sig_digits,
                                         std::size_t max_per_task = 64);
void export_attention(std::ostream& os, const std::vector<AttentionRow>& rows);

/// Fraction of pairwise ratios |dy| / ||dz|| on `eval` rows above `threshold`.
double fraction_above(const ad::Tensor& z, const std::vector<double>& y, double threshold);

/// Zero-shot: search the trained model on an unseen task, seeded with `d`.
/// Few-shot: fine-tune on `d` first, then search.
struct TransferResult {
  TaskMetrics zero_shot;
  TaskMetrics few_shot;
  double dataset_best = 0.0;
};
TransferResult run_transfer(const model::ModelState& s, const tasks::TaskSpec& task, const tasks::OfflineDataset& d,
                            const RunConfig& cfg, std::uint64_t seed, std::size_t finetune_epochs = 5,
                            double finetune_lr = 2e-5);

struct SeedArtifacts {
  std::uint64_t seed = 0;
  std::string dir;
  EvalReport report;
  std::vector<search::SearchResult> searches;
  std::vector<tasks::OfflineDataset> datasets;
};

// ------------------------------------------------------------- stages

/// Training tasks of the suite after applying task_filter.
std::vector<tasks::TaskSpec> selected_tasks(const RunConfig& cfg, const tasks::SuiteConfig& suite);
std::string seed_dir(const RunConfig& cfg, std::uint64_t seed);
std::uint64_t dataset_seed(const tasks::TaskSpec& task, std::uint64_t run_seed);

/// Generates each task's dataset and writes dir/data/<id>.jsonl.
std::vector<tasks::OfflineDataset> stage_gen_data(const RunConfig& cfg, std::uint64_t seed,
                                                  const std::vector<tasks::TaskSpec>& tasks, int sig_digits,
                                                  const std::string& dir);
std::vector<tasks::OfflineDataset> load_datasets(const std::vector<tasks::TaskSpec>& tasks, const std::string& dir);

/// One multi-task model (dir/model.ckpt) or one model per task
/// (dir/model-<id>.ckpt).
std::vector<model::ModelState> stage_train(const RunConfig& cfg, std::uint64_t seed,
                                           const std::vector<tasks::TaskSpec>& tasks,
                                           const std::vector<tasks::OfflineDataset>& datasets, int sig_digits,
                                           const std::string& dir, std::ostream* log = nullptr);
std::vector<model::ModelState> load_models(const RunConfig& cfg, const std::vector<tasks::TaskSpec>& tasks,
                                           const std::string& dir);

/// Searches every task and writes dir/candidates/<id>.jsonl.
std::vector<search::SearchResult> stage_search(const RunConfig& cfg, std::uint64_t seed,
                                               const std::vector<model::ModelState>& models,
                                               const std::vector<tasks::TaskSpec>& tasks,
                                               const std::vector<tasks::OfflineDataset>& datasets, int sig_digits,
                                               const std::string& dir);
std::vector<search::SearchResult> load_searches(const std::vector<tasks::TaskSpec>& tasks, const std::string& dir);

/// Evaluates candidates and writes dir/report.txt and dir/report.jsonl.
EvalReport stage_eval(const RunConfig& cfg, const std::vector<tasks::TaskSpec>& tasks,
                      const std::vector<tasks::OfflineDataset>& datasets,
                      const std::vector<search::SearchResult>& searches, const std::string& dir);

/// Generate data, train, search each task, evaluate, and write artifacts
/// under out_dir/seed-<s>/. A failing stage raises Error naming the stage;
/// artifacts written before it remain on disk.
std::vector<SeedArtifacts> run_pipeline(const RunConfig& cfg, std::ostream* log = nullptr);

/// Method label used in reports, e.g. "UniSO-T/improved/ea".
std::string method_name(const RunConfig& cfg);

}  // namespace uniso::harness
