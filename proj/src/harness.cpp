#include "uniso/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "uniso/error.hpp"
#include "uniso/regularizers.hpp"
#include "uniso/ynorm.hpp"

namespace uniso::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using tasks::OfflineDataset;
using tasks::TaskSpec;

namespace {

std::string fmt(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return is;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

template <class F>
auto run_stage(const std::string& name, std::ostream* log, std::uint64_t seed, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  if (log) *log << json{{"stage", name}, {"seed", seed}, {"event", "start"}}.dump() << '\n';
  try {
    auto r = f();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) *log << json{{"stage", name}, {"seed", seed}, {"event", "done"}, {"seconds", secs}}.dump() << std::endl;
    return r;
  } catch (const std::exception& e) {
    if (log) *log << json{{"stage", name}, {"seed", seed}, {"event", "failed"}, {"error", e.what()}}.dump() << std::endl;
    throw Error("stage " + name + " failed: " + e.what());
  }
}

const model::ModelState& model_for(const std::vector<model::ModelState>& models, std::size_t i) {
  return models.size() == 1 ? models.front() : models.at(i);
}

}  // namespace

// ------------------------------------------------------------------ config

std::string to_string(Optimizer o) {
  switch (o) {
    case Optimizer::Ea: return "ea";
    case Optimizer::Cmaes: return "cmaes";
    case Optimizer::Bo: return "bo";
  }
  return "?";
}

Optimizer parse_optimizer(const std::string& s) {
  if (s == "ea") return Optimizer::Ea;
  if (s == "cmaes") return Optimizer::Cmaes;
  if (s == "bo") return Optimizer::Bo;
  throw DomainError("unknown optimizer '" + s + "' (expected ea, cmaes or bo)");
}

void RunConfig::validate() const {
  if (seeds.empty()) throw DomainError("run config: no seeds");
  if (budget == 0) throw DomainError("run config: budget must be positive");
  if (final_count == 0) throw DomainError("run config: final_count must be positive");
  if (!suite_path.empty() && !fs::exists(suite_path)) throw DomainError("run config: suite file " + suite_path + " not found");
  if (sig_digits < 0 || sig_digits > 15) throw DomainError("run config: sig_digits out of range");
  if (dataset_size != 0 && dataset_size < 100) throw DomainError("run config: dataset_size must be >= 100");
  model.validate();
}

RunConfig default_run_config() {
  RunConfig c;
  c.model.vocab = static_cast<std::size_t>(text::Vocabulary(c.model.e_max).size());
  return c;
}

void to_json(json& j, const RunConfig& c) {
  j = {{"variant", model::to_string(c.variant)},
       {"mode", model::to_string(c.mode)},
       {"suite", c.suite_path},
       {"optimizer", to_string(c.optimizer)},
       {"budget", c.budget},
       {"final_count", c.final_count},
       {"seeds", c.seeds},
       {"out", c.out_dir},
       {"dataset_size", c.dataset_size},
       {"sig_digits", c.sig_digits},
       {"multi_task", c.multi_task},
       {"tasks", c.task_filter},
       {"model", c.model},
       {"train", c.train},
       {"decode",
        {{"greedy", c.decode.greedy},
         {"temperature", c.decode.temperature},
         {"top_k", c.decode.top_k},
         {"top_p", c.decode.top_p},
         {"n_samples", c.decode.n_samples}}},
       {"ea",
        {{"population", c.ea.population},
         {"eta_c", c.ea.eta_c},
         {"eta_m", c.ea.eta_m},
         {"crossover_prob", c.ea.crossover_prob}}},
       {"cmaes", {{"sigma0", c.cmaes.sigma0}, {"max_iterations", c.cmaes.max_iterations}}},
       {"bo",
        {{"warm_start", c.bo.warm_start},
         {"q", c.bo.q},
         {"mc_samples", c.bo.mc_samples},
         {"initial_candidates", c.bo.initial_candidates},
         {"restarts", c.bo.restarts},
         {"refine_steps", c.bo.refine_steps},
         {"noise", c.bo.noise},
         {"max_gp_points", c.bo.max_gp_points},
         {"ucb_beta", c.bo.ucb_beta},
         {"ea_population", c.bo.ea_population},
         {"ea_generations", c.bo.ea_generations}}}};
}

void from_json(const json& j, RunConfig& c) {
  c = default_run_config();
  if (j.contains("variant")) c.variant = model::parse_variant(j["variant"]);
  if (j.contains("mode")) c.mode = model::parse_mode(j["mode"]);
  c.suite_path = j.value("suite", c.suite_path);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j["optimizer"]);
  c.budget = j.value("budget", c.budget);
  c.final_count = j.value("final_count", c.final_count);
  c.seeds = j.value("seeds", c.seeds);
  c.out_dir = j.value("out", c.out_dir);
  c.dataset_size = j.value("dataset_size", c.dataset_size);
  c.sig_digits = j.value("sig_digits", c.sig_digits);
  c.multi_task = j.value("multi_task", c.multi_task);
  c.task_filter = j.value("tasks", c.task_filter);
  if (j.contains("model")) {
    json m = c.model;
    m.update(j["model"]);
    c.model = m.get<model::ModelConfig>();
  }
  if (j.contains("train")) {
    json t = c.train;
    t.update(j["train"]);
    c.train = t.get<model::TrainConfig>();
  }
  if (j.contains("decode")) {
    const json& d = j["decode"];
    c.decode.greedy = d.value("greedy", c.decode.greedy);
    c.decode.temperature = d.value("temperature", c.decode.temperature);
    c.decode.top_k = d.value("top_k", c.decode.top_k);
    c.decode.top_p = d.value("top_p", c.decode.top_p);
    c.decode.n_samples = d.value("n_samples", c.decode.n_samples);
  }
  if (j.contains("ea")) {
    const json& e = j["ea"];
    c.ea.population = e.value("population", c.ea.population);
    c.ea.eta_c = e.value("eta_c", c.ea.eta_c);
    c.ea.eta_m = e.value("eta_m", c.ea.eta_m);
    c.ea.crossover_prob = e.value("crossover_prob", c.ea.crossover_prob);
  }
  if (j.contains("cmaes")) {
    c.cmaes.sigma0 = j["cmaes"].value("sigma0", c.cmaes.sigma0);
    c.cmaes.max_iterations = j["cmaes"].value("max_iterations", c.cmaes.max_iterations);
  }
  if (j.contains("bo")) {
    const json& b = j["bo"];
    c.bo.warm_start = b.value("warm_start", c.bo.warm_start);
    c.bo.q = b.value("q", c.bo.q);
    c.bo.mc_samples = b.value("mc_samples", c.bo.mc_samples);
    c.bo.initial_candidates = b.value("initial_candidates", c.bo.initial_candidates);
    c.bo.restarts = b.value("restarts", c.bo.restarts);
    c.bo.refine_steps = b.value("refine_steps", c.bo.refine_steps);
    c.bo.noise = b.value("noise", c.bo.noise);
    c.bo.max_gp_points = b.value("max_gp_points", c.bo.max_gp_points);
    c.bo.ucb_beta = b.value("ucb_beta", c.bo.ucb_beta);
    c.bo.ea_population = b.value("ea_population", c.bo.ea_population);
    c.bo.ea_generations = b.value("ea_generations", c.bo.ea_generations);
  }
}

RunConfig load_run_config(const std::string& path) {
  auto is = open_in(path);
  try {
    return json::parse(is).get<RunConfig>();
  } catch (const json::exception& e) {
    throw FormatError("run config " + path + ": " + e.what());
  }
}

tasks::SuiteConfig resolve_suite(const RunConfig& cfg) {
  tasks::SuiteConfig s = cfg.suite_path.empty() ? tasks::default_suite_config() : tasks::load_suite(cfg.suite_path);
  if (cfg.sig_digits > 0) s.sig_digits = cfg.sig_digits;
  return s;
}

// -------------------------------------------------------------- model glue

text::TokenSequence input_tokens(const TaskSpec& task, const Design& x, int sig_digits) {
  return text::tokenize(text::compose_input(task.meta, text::serialize_design(task.space, x, sig_digits)));
}

model::TrainData build_train_data(const std::vector<TaskSpec>& tasks, const std::vector<OfflineDataset>& datasets,
                                  const model::ModelConfig& mc, int sig_digits) {
  if (tasks.size() != datasets.size()) throw ShapeError("build_train_data: tasks and datasets differ in number");
  const text::Vocabulary vocab(mc.e_max);
  model::TrainData data;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const auto& d = datasets[k];
    if (d.task_id != tasks[k].id) throw DomainError("build_train_data: dataset " + d.task_id + " paired with " + tasks[k].id);
    data.tasks.push_back({tasks[k].id, reg::metadata_embed(tasks[k].meta), static_cast<double>(d.size())});
    for (std::size_t i = 0; i < d.size(); ++i) {
      model::Example ex;
      ex.input = input_tokens(tasks[k], d.designs[i], sig_digits);
      if (mc.variant == model::Variant::T) ex.target = text::p10_encode(d.scores[i], mc.mantissa_len, vocab);
      ex.y_norm = ynorm::apply(d.stats, d.scores[i]);
      ex.task = k;
      data.examples.push_back(std::move(ex));
    }
  }
  return data;
}

double decode_failure_score(const OfflineDataset& d) {
  const auto [lo, hi] = std::minmax_element(d.scores.begin(), d.scores.end());
  if (lo == d.scores.end()) throw DomainError("decode_failure_score: empty dataset");
  return *lo - (*hi - *lo) - 1.0;
}

search::Scorer make_scorer(const model::ModelState& s, const TaskSpec& task, const OfflineDataset& d, int sig_digits,
                           const model::DecodeConfig& decode) {
  if (s.config.variant == model::Variant::T) {
    const double fail = decode_failure_score(d);
    return [&s, &task, sig_digits, decode, fail](const Design& x) {
      const auto y = model::predict_t(s, input_tokens(task, x, sig_digits), decode);
      return y ? *y : fail;
    };
  }
  return [&s, &task, sig_digits](const Design& x) { return model::predict_n(s, input_tokens(task, x, sig_digits)); };
}

search::SearchResult run_search(const model::ModelState& s, const TaskSpec& task, const OfflineDataset& d,
                                const RunConfig& cfg, std::uint64_t seed) {
  const search::Scorer scorer = make_scorer(s, task, d, cfg.sig_digits, cfg.decode);
  const search::Seeds seeds{d.designs, d.scores};
  const search::SearchBudget budget{cfg.budget, cfg.final_count, seed};
  const int sig = cfg.sig_digits;
  const auto canonical = [&task, sig](const Design& x) { return text::snap_design(task.space, x, sig); };
  const bool categorical = task.space.all_categorical();
  switch (cfg.optimizer) {
    case Optimizer::Ea: return search::ea_search(scorer, task.space, seeds, budget, cfg.ea, canonical);
    case Optimizer::Cmaes:
      if (categorical) return search::ea_search(scorer, task.space, seeds, budget, cfg.ea, canonical);
      return search::cmaes_search(scorer, task.space, seeds, budget, cfg.cmaes, canonical);
    case Optimizer::Bo:
      if (categorical) return search::bo_categorical_search(scorer, task.space, seeds, budget, cfg.bo);
      return search::bo_qei_search(scorer, task.space, seeds, budget, cfg.bo, canonical);
  }
  throw DomainError("run_search: unknown optimizer");
}

// ---------------------------------------------------------------- metrics

TaskMetrics evaluate_candidates(const TaskSpec& task, const std::vector<Design>& candidates, double dataset_best,
                                double y_min, double y_max) {
  if (candidates.empty()) throw DomainError("evaluate_candidates: no candidates for " + task.id);
  if (!(y_max > y_min)) throw DomainError("evaluate_candidates: y_max must exceed y_min");
  std::vector<double> ys;
  ys.reserve(candidates.size());
  for (const auto& x : candidates) ys.push_back(task.oracle(x));
  TaskMetrics m;
  m.task = task.id;
  m.dataset_best = dataset_best;
  m.best = *std::max_element(ys.begin(), ys.end());
  m.median = reg::median(ys);
  m.normalized_best = (m.best - y_min) / (y_max - y_min);
  m.normalized_median = (m.median - y_min) / (y_max - y_min);
  m.exceeds = m.best > dataset_best;
  m.candidates = ys.size();
  return m;
}

void write_report_table(std::ostream& os, const EvalReport& r) {
  char line[256];
  os << "method: " << r.method << '\n';
  std::snprintf(line, sizeof line, "%-22s %12s %12s %12s %10s %10s %7s\n", "task", "D(best)", "best", "median",
                "norm.best", "norm.med", "exceed");
  os << line;
  for (const auto& m : r.tasks) {
    std::snprintf(line, sizeof line, "%-22s %12.6g %12.6g %12.6g %10.4f %10.4f %7s\n", m.task.c_str(), m.dataset_best,
                  m.best, m.median, m.normalized_best, m.normalized_median, m.exceeds ? "yes" : "no");
    os << line;
  }
  const auto n = std::count_if(r.tasks.begin(), r.tasks.end(), [](const TaskMetrics& m) { return m.exceeds; });
  os << "exceeds D(best) on " << n << " of " << r.tasks.size() << " tasks\n";
}

void write_report_jsonl(std::ostream& os, const EvalReport& r) {
  for (const auto& m : r.tasks) {
    os << json{{"method", r.method},
               {"task", m.task},
               {"dataset_best", m.dataset_best},
               {"best", m.best},
               {"median", m.median},
               {"normalized_best", m.normalized_best},
               {"normalized_median", m.normalized_median},
               {"exceeds", m.exceeds},
               {"candidates", m.candidates}}
              .dump()
       << '\n';
  }
}

EvalReport read_report_jsonl(std::istream& is) {
  EvalReport r;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const std::string method = j.at("method");
      if (!r.tasks.empty() && method != r.method) throw FormatError("report: mixed methods");
      r.method = method;
      TaskMetrics m;
      m.task = j.at("task");
      m.dataset_best = j.at("dataset_best");
      m.best = j.at("best");
      m.median = j.at("median");
      m.normalized_best = j.at("normalized_best");
      m.normalized_median = j.at("normalized_median");
      m.exceeds = j.at("exceeds");
      m.candidates = j.at("candidates");
      r.tasks.push_back(std::move(m));
    } catch (const json::exception& e) {
      throw FormatError("report line " + std::to_string(n) + ": " + e.what());
    }
  }
  return r;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
    const double mean = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) r[idx[k]] = mean;
    i = j;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman: lengths differ");
  if (a.size() < 2) throw DomainError("spearman: need at least two points");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

RankTable report_ranks(const std::map<std::string, EvalReport>& reports) {
  if (reports.empty()) throw DomainError("report_ranks: no reports");
  RankTable t;
  const EvalReport& first = reports.begin()->second;
  for (const auto& m : first.tasks) t.tasks.push_back(m.task);
  const std::set<std::string> ref(t.tasks.begin(), t.tasks.end());
  if (ref.size() != t.tasks.size()) throw DomainError("report_ranks: duplicate task in " + reports.begin()->first);
  std::vector<std::map<std::string, double>> best;
  for (const auto& [name, r] : reports) {
    std::map<std::string, double> b;
    for (const auto& m : r.tasks) b[m.task] = m.best;
    std::set<std::string> got;
    for (const auto& [k, v] : b) got.insert(k);
    if (got != ref || r.tasks.size() != ref.size()) throw DomainError("report_ranks: " + name + " covers a different task set");
    t.methods.push_back(name);
    best.push_back(std::move(b));
  }
  t.ranks.assign(t.methods.size(), std::vector<double>(t.tasks.size()));
  for (std::size_t k = 0; k < t.tasks.size(); ++k) {
    std::vector<double> neg;
    for (const auto& b : best) neg.push_back(-b.at(t.tasks[k]));
    const auto r = average_ranks(neg);
    for (std::size_t m = 0; m < t.methods.size(); ++m) t.ranks[m][k] = r[m];
  }
  for (const auto& row : t.ranks) {
    const double n = static_cast<double>(row.size());
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    t.mean.push_back(mean);
    t.stddev.push_back(std::sqrt(var / n));
  }
  return t;
}

void write_rank_table(std::ostream& os, const RankTable& t) {
  char cell[64];
  std::snprintf(cell, sizeof cell, "%-28s", "method");
  os << cell;
  for (const auto& task : t.tasks) {
    std::snprintf(cell, sizeof cell, " %14s", task.c_str());
    os << cell;
  }
  os << "   avg. rank\n";
  for (std::size_t m = 0; m < t.methods.size(); ++m) {
    std::snprintf(cell, sizeof cell, "%-28s", t.methods[m].c_str());
    os << cell;
    for (double r : t.ranks[m]) {
      std::snprintf(cell, sizeof cell, " %14.1f", r);
      os << cell;
    }
    std::snprintf(cell, sizeof cell, "   %.2f +- %.2f\n", t.mean[m], t.stddev[m]);
    os << cell;
  }
}

OodResult spearman_ood(const model::ModelState& s, const TaskSpec& task, const OfflineDataset& d, int sig_digits,
                       std::size_t n, std::uint64_t seed, std::size_t max_draws) {
  if (d.size() == 0) throw DomainError("spearman_ood: empty dataset");
  const double p75 = quantile(d.scores, 0.75);
  std::set<Design> seen(d.designs.begin(), d.designs.end());
  std::mt19937_64 rng(seed);
  std::vector<Design> region;
  std::vector<double> truth;
  for (std::size_t k = 0; k < max_draws && region.size() < n; ++k) {
    Design x = text::snap_design(task.space, tasks::sample_design(task.space, rng), sig_digits);
    const double y = task.oracle(x);
    if (!(y > p75) || !seen.insert(x).second) continue;
    region.push_back(std::move(x));
    truth.push_back(y);
  }
  if (region.size() < 20) {
    throw DomainError("spearman_ood: only " + std::to_string(region.size()) + " region points for " + task.id);
  }
  const auto scorer = make_scorer(s, task, d, sig_digits);
  std::vector<double> pred;
  pred.reserve(region.size());
  for (const auto& x : region) pred.push_back(scorer(x));
  return {spearman(pred, truth), region.size()};
}

void export_embeddings(std::ostream& os, const model::ModelState& s, const std::vector<TaskSpec>& tasks,
                       const std::vector<OfflineDataset>& datasets, int sig_digits) {
  if (tasks.size() != datasets.size()) throw ShapeError("export_embeddings: tasks and datasets differ in number");
  constexpr std::size_t kChunk = 64;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const auto& d = datasets[k];
    for (std::size_t start = 0; start < d.size(); start += kChunk) {
      const std::size_t end = std::min(d.size(), start + kChunk);
      std::vector<text::TokenSequence> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(input_tokens(tasks[k], d.designs[i], sig_digits));
      const ad::Tensor e = model::embed(s, batch);
      const ad::Tensor z = model::project(s, e);
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t r = i - start;
        os << tasks[k].id << '\t' << fmt(ynorm::apply(d.stats, d.scores[i]));
        for (std::size_t c = 0; c < e.cols(); ++c) os << '\t' << fmt(e.at(r, c));
        for (std::size_t c = 0; c < z.cols(); ++c) os << '\t' << fmt(z.at(r, c));
        os << '\n';
      }
    }
  }
}

std::vector<AttentionRow> attention_rows(const model::ModelState& s, const std::vector<TaskSpec>& tasks,
                                         const std::vector<OfflineDataset>& datasets, int sig_digits,
                                         std::size_t max_per_task) {
  if (tasks.size() != datasets.size()) throw ShapeError("attention_rows: tasks and datasets differ in number");
  std::vector<AttentionRow> rows;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    AttentionRow row;
    row.task = tasks[k].id;
    const std::size_t prefix = text::metadata_prefix(tasks[k].meta).size();
    const std::size_t n = std::min(max_per_task, datasets[k].size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto tokens = input_tokens(tasks[k], datasets[k].designs[i], sig_digits);
      const auto cats = model::categorize_tokens(tokens, prefix);
      const auto shares = model::attention_profile(s, tokens, cats);
      for (std::size_t c = 0; c < model::kTokenCategories; ++c) row.shares[c] += shares[c];
      for (auto c : cats) ++row.counts[static_cast<std::size_t>(c)];
    }
    row.inputs = n;
    if (n > 0)
      for (double& v : row.shares) v /= static_cast<double>(n);
    rows.push_back(row);
  }
  return rows;
}

void export_attention(std::ostream& os, const std::vector<AttentionRow>& rows) {
  os << "task\tinputs";
  for (std::size_t c = 0; c < model::kTokenCategories; ++c) os << "\tshare_" << model::to_string(model::TokenCategory(c));
  for (std::size_t c = 0; c < model::kTokenCategories; ++c) os << "\tcount_" << model::to_string(model::TokenCategory(c));
  os << '\n';
  for (const auto& r : rows) {
    os << r.task << '\t' << r.inputs;
    for (double v : r.shares) os << '\t' << fmt(v);
    for (std::size_t v : r.counts) os << '\t' << v;
    os << '\n';
  }
}

double fraction_above(const ad::Tensor& z, const std::vector<double>& y, double threshold) {
  const auto r = reg::pairwise_ratios(z, y);
  if (r.empty()) throw DomainError("fraction_above: need at least two rows");
  const auto n = std::count_if(r.begin(), r.end(), [&](double v) { return v > threshold; });
  return static_cast<double>(n) / static_cast<double>(r.size());
}

TransferResult run_transfer(const model::ModelState& s, const TaskSpec& task, const OfflineDataset& d,
                            const RunConfig& cfg, std::uint64_t seed, std::size_t finetune_epochs, double finetune_lr) {
  TransferResult r;
  r.dataset_best = d.best();
  const auto zero = run_search(s, task, d, cfg, seed);
  std::vector<Design> xs;
  for (const auto& c : zero.candidates) xs.push_back(c.design);
  r.zero_shot = evaluate_candidates(task, xs, r.dataset_best, task.y_min, task.y_max);

  const auto data = build_train_data({task}, {d}, s.config, cfg.sig_digits);
  const auto tuned = model::finetune_few_shot(s, data, finetune_epochs, finetune_lr, 16, seed);
  const auto few = run_search(tuned, task, d, cfg, seed);
  xs.clear();
  for (const auto& c : few.candidates) xs.push_back(c.design);
  r.few_shot = evaluate_candidates(task, xs, r.dataset_best, task.y_min, task.y_max);
  return r;
}

// ----------------------------------------------------------------- stages

std::vector<TaskSpec> selected_tasks(const RunConfig& cfg, const tasks::SuiteConfig& suite) {
  if (cfg.task_filter.empty()) return suite.tasks;
  std::vector<TaskSpec> out;
  for (const auto& id : cfg.task_filter) {
    const auto it = std::find_if(suite.tasks.begin(), suite.tasks.end(), [&](const TaskSpec& t) { return t.id == id; });
    if (it == suite.tasks.end()) throw DomainError("run config: unknown task " + id);
    out.push_back(*it);
  }
  return out;
}

std::string seed_dir(const RunConfig& cfg, std::uint64_t seed) {
  return (fs::path(cfg.out_dir) / ("seed-" + std::to_string(seed))).string();
}

std::uint64_t dataset_seed(const TaskSpec& task, std::uint64_t run_seed) {
  return task.seed * 0x9E3779B97F4A7C15ULL + run_seed * 1000003ULL + 17;
}

std::vector<OfflineDataset> stage_gen_data(const RunConfig& cfg, std::uint64_t seed, const std::vector<TaskSpec>& tasks,
                                           int sig_digits, const std::string& dir) {
  std::vector<OfflineDataset> out;
  for (const auto& t : tasks) {
    const std::size_t n = cfg.dataset_size ? cfg.dataset_size : t.dataset_size;
    out.push_back(tasks::gen_offline_dataset(t, n, t.protocol, dataset_seed(t, seed), sig_digits));
    auto os = open_out((fs::path(dir) / "data" / (t.id + ".jsonl")).string());
    tasks::write_dataset(os, out.back());
  }
  return out;
}

std::vector<OfflineDataset> load_datasets(const std::vector<TaskSpec>& tasks, const std::string& dir) {
  std::vector<OfflineDataset> out;
  for (const auto& t : tasks) {
    auto is = open_in((fs::path(dir) / "data" / (t.id + ".jsonl")).string());
    out.push_back(tasks::read_dataset(is));
    if (out.back().task_id != t.id) throw FormatError("dataset file for " + t.id + " names " + out.back().task_id);
  }
  return out;
}

namespace {

std::string checkpoint_path(const std::string& dir, const std::string& task) {
  return (fs::path(dir) / (task.empty() ? "model.ckpt" : "model-" + task + ".ckpt")).string();
}

model::ModelState train_one(const RunConfig& cfg, std::uint64_t seed, const model::TrainData& data, std::ostream* log) {
  model::ModelConfig mc = cfg.model;
  mc.variant = cfg.variant;
  model::ModelState s = model::init_model(mc, seed);
  model::TrainConfig tc = cfg.train;
  tc.mode = cfg.mode;
  tc.seed = seed;
  std::vector<model::StepLosses> hist = cfg.variant == model::Variant::T ? model::train_t(s, data, tc)
                                                                          : model::train_n(s, data, tc);
  if (log) {
    for (std::size_t e = 0; e < hist.size(); ++e) {
      *log << json{{"stage", "train"}, {"seed", seed},           {"epoch", e},
                   {"main", hist[e].main}, {"contrastive", hist[e].contrastive}, {"lipschitz", hist[e].lipschitz}}
                  .dump()
           << '\n';
    }
  }
  return s;
}

}  // namespace

std::vector<model::ModelState> stage_train(const RunConfig& cfg, std::uint64_t seed, const std::vector<TaskSpec>& tasks,
                                           const std::vector<OfflineDataset>& datasets, int sig_digits,
                                           const std::string& dir, std::ostream* log) {
  model::ModelConfig mc = cfg.model;
  mc.variant = cfg.variant;
  std::vector<model::ModelState> out;
  if (cfg.multi_task) {
    out.push_back(train_one(cfg, seed, build_train_data(tasks, datasets, mc, sig_digits), log));
    fs::create_directories(dir);
    model::save_checkpoint(out.back(), checkpoint_path(dir, ""));
    return out;
  }
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    out.push_back(train_one(cfg, seed, build_train_data({tasks[k]}, {datasets[k]}, mc, sig_digits), log));
    fs::create_directories(dir);
    model::save_checkpoint(out.back(), checkpoint_path(dir, tasks[k].id));
  }
  return out;
}

std::vector<model::ModelState> load_models(const RunConfig& cfg, const std::vector<TaskSpec>& tasks,
                                           const std::string& dir) {
  std::vector<model::ModelState> out;
  if (cfg.multi_task) {
    out.push_back(model::load_checkpoint(checkpoint_path(dir, "")));
  } else {
    for (const auto& t : tasks) out.push_back(model::load_checkpoint(checkpoint_path(dir, t.id)));
  }
  return out;
}

std::vector<search::SearchResult> stage_search(const RunConfig& cfg, std::uint64_t seed,
                                               const std::vector<model::ModelState>& models,
                                               const std::vector<TaskSpec>& tasks,
                                               const std::vector<OfflineDataset>& datasets, int sig_digits,
                                               const std::string& dir) {
  RunConfig c = cfg;
  c.sig_digits = sig_digits;
  std::vector<search::SearchResult> out;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    out.push_back(run_search(model_for(models, k), tasks[k], datasets[k], c, seed * 7919ULL + k));
    auto os = open_out((fs::path(dir) / "candidates" / (tasks[k].id + ".jsonl")).string());
    search::write_jsonl(os, out.back());
  }
  return out;
}

std::vector<search::SearchResult> load_searches(const std::vector<TaskSpec>& tasks, const std::string& dir) {
  std::vector<search::SearchResult> out;
  for (const auto& t : tasks) {
    auto is = open_in((fs::path(dir) / "candidates" / (t.id + ".jsonl")).string());
    out.push_back(search::read_jsonl(is));
  }
  return out;
}

EvalReport stage_eval(const RunConfig& cfg, const std::vector<TaskSpec>& tasks,
                      const std::vector<OfflineDataset>& datasets, const std::vector<search::SearchResult>& searches,
                      const std::string& dir) {
  EvalReport r;
  r.method = method_name(cfg);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    std::vector<Design> xs;
    for (const auto& c : searches.at(k).candidates) xs.push_back(c.design);
    r.tasks.push_back(evaluate_candidates(tasks[k], xs, datasets.at(k).best(), tasks[k].y_min, tasks[k].y_max));
  }
  {
    auto os = open_out((fs::path(dir) / "report.txt").string());
    write_report_table(os, r);
  }
  auto os = open_out((fs::path(dir) / "report.jsonl").string());
  write_report_jsonl(os, r);
  return r;
}

std::string method_name(const RunConfig& cfg) {
  return std::string("UniSO-") + (cfg.variant == model::Variant::T ? "T" : "N") + "/" + model::to_string(cfg.mode) +
         "/" + to_string(cfg.optimizer) + (cfg.multi_task ? "" : "/single");
}

std::vector<SeedArtifacts> run_pipeline(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  const auto suite = resolve_suite(cfg);
  const auto tasks = selected_tasks(cfg, suite);
  RunConfig c = cfg;
  c.sig_digits = suite.sig_digits;
  std::vector<SeedArtifacts> out;
  for (std::uint64_t seed : cfg.seeds) {
    SeedArtifacts a;
    a.seed = seed;
    a.dir = seed_dir(cfg, seed);
    fs::create_directories(a.dir);
    {
      auto os = open_out((fs::path(a.dir) / "config.json").string());
      os << json(c).dump(2) << '\n';
    }
    a.datasets = run_stage("gen-data", log, seed, [&] { return stage_gen_data(c, seed, tasks, c.sig_digits, a.dir); });
    const auto models =
        run_stage("train", log, seed, [&] { return stage_train(c, seed, tasks, a.datasets, c.sig_digits, a.dir, log); });
    a.searches = run_stage("search", log, seed,
                           [&] { return stage_search(c, seed, models, tasks, a.datasets, c.sig_digits, a.dir); });
    a.report = run_stage("eval", log, seed, [&] { return stage_eval(c, tasks, a.datasets, a.searches, a.dir); });
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace uniso::harness
