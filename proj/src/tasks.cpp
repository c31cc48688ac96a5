#include "uniso/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>

#include "uniso/error.hpp"

namespace uniso::tasks {

using text::VarKind;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kStyblinskiArgmin = -2.903534027771178;

struct FunctionInfo {
  const char* name;
  bool categorical;
};

constexpr FunctionInfo kFunctions[] = {{"sphere", false},   {"rastrigin", false},       {"levy", false},
                                       {"ackley", false},   {"griewank", false},        {"styblinski_tang", false},
                                       {"onemax", true},    {"seqmatch", true}};

const FunctionInfo& function_info(const std::string& name) {
  for (const auto& f : kFunctions)
    if (name == f.name) return f;
  throw DomainError("task: unknown function '" + name + "'");
}

// Value to minimize for continuous functions.
double continuous_value(const std::string& f, const std::vector<double>& x) {
  const double d = static_cast<double>(x.size());
  if (f == "sphere") {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
  }
  if (f == "rastrigin") {
    double s = 10.0 * d;
    for (double v : x) s += v * v - 10.0 * std::cos(2.0 * kPi * v);
    return s;
  }
  if (f == "levy") {
    auto w = [&](std::size_t i) { return 1.0 + (x[i] - 1.0) / 4.0; };
    const std::size_t n = x.size();
    double s = std::pow(std::sin(kPi * w(0)), 2.0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const double wi = w(i);
      s += (wi - 1.0) * (wi - 1.0) * (1.0 + 10.0 * std::pow(std::sin(kPi * wi + 1.0), 2.0));
    }
    const double wn = w(n - 1);
    s += (wn - 1.0) * (wn - 1.0) * (1.0 + std::pow(std::sin(2.0 * kPi * wn), 2.0));
    return s;
  }
  if (f == "ackley") {
    double sq = 0.0, cs = 0.0;
    for (double v : x) {
      sq += v * v;
      cs += std::cos(2.0 * kPi * v);
    }
    return -20.0 * std::exp(-0.2 * std::sqrt(sq / d)) - std::exp(cs / d) + 20.0 + std::numbers::e;
  }
  if (f == "griewank") {
    double s = 0.0, p = 1.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += x[i] * x[i] / 4000.0;
      p *= std::cos(x[i] / std::sqrt(static_cast<double>(i + 1)));
    }
    return s - p + 1.0;
  }
  if (f == "styblinski_tang") {
    double s = 0.0;
    for (double v : x) s += v * v * v * v - 16.0 * v * v + 5.0 * v;
    return 0.5 * s;
  }
  throw DomainError("task: '" + f + "' is not a continuous function");
}

double base_optimum(const TaskSpec& t) {
  const double d = static_cast<double>(t.space.dim());
  if (t.function == "onemax" || t.function == "seqmatch") return d;
  if (t.function == "styblinski_tang") return -continuous_value(t.function, std::vector<double>(t.space.dim(), kStyblinskiArgmin));
  return 0.0;
}

text::DesignSpace make_space(bool categorical, std::size_t dim, double lo, double hi, int k) {
  std::vector<text::Variable> v;
  for (std::size_t i = 0; i < dim; ++i) {
    const std::string name = "x" + std::to_string(i);
    v.push_back(categorical ? text::Variable::categorical(name, k) : text::Variable::continuous(name, lo, hi));
  }
  return text::DesignSpace(std::move(v));
}

TaskSpec make_task(std::string id, std::string function, std::size_t dim, double lo, double hi, int k,
                   std::string description, std::uint64_t seed) {
  TaskSpec t;
  t.id = id;
  t.function = std::move(function);
  t.space = make_space(function_info(t.function).categorical, dim, lo, hi, k);
  t.meta = {std::move(id), std::move(description), "max"};
  t.seed = seed;
  if (t.function == "seqmatch") {
    std::mt19937_64 rng(seed ^ 0x5EEDULL);
    for (std::size_t i = 0; i < dim; ++i) t.planted.push_back(std::uniform_int_distribution<int>(0, k - 1)(rng));
  }
  return t;
}

void fill_probe(TaskSpec& t) {
  const auto [lo, hi] = probe_range(t, 100000, t.seed + 77);
  t.y_min = lo;
  t.y_max = hi;
}

}  // namespace

bool Transform::identity() const {
  return scale == 1.0 && std::all_of(shift.begin(), shift.end(), [](double v) { return v == 0.0; });
}

std::string to_string(Protocol p) { return p == Protocol::Middle50 ? "middle50" : "uniform"; }

Protocol parse_protocol(const std::string& s) {
  if (s == "middle50") return Protocol::Middle50;
  if (s == "uniform") return Protocol::Uniform;
  throw DomainError("unknown dataset protocol '" + s + "'");
}

void TaskSpec::validate() const {
  if (id.empty()) throw DomainError("task: empty id");
  const auto& info = function_info(function);
  if (space.dim() == 0) throw DomainError("task " + id + ": empty design space");
  if (info.categorical ? !space.all_categorical() : !space.all_continuous()) {
    throw DomainError("task " + id + ": space kind does not match function " + function);
  }
  meta.validate();
  if (!(transform.scale > 0.0)) throw DomainError("task " + id + ": transform scale must be positive");
  if (!transform.shift.empty() && transform.shift.size() != space.dim()) {
    throw DomainError("task " + id + ": transform dimension does not match the space");
  }
  if (function == "seqmatch" && planted.size() != space.dim()) throw DomainError("task " + id + ": planted sequence arity");
}

double TaskSpec::oracle(const Design& x) const {
  text::validate_design(space, x);
  const double s = transform.scale;
  if (function == "onemax" || function == "seqmatch") {
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) m += function == "onemax" ? (x[i] == 1.0) : (x[i] == planted[i]);
    return s * m;
  }
  std::vector<double> z = x;
  if (!transform.shift.empty())
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= transform.shift[i];
  return s * -continuous_value(function, z);
}

double TaskSpec::optimum() const { return transform.scale * base_optimum(*this); }

std::pair<double, double> probe_range(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DomainError("probe_range: need at least one sample");
  std::mt19937_64 rng(seed);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t k = 0; k < n; ++k) {
    const double y = task.oracle(sample_design(task.space, rng));
    lo = std::min(lo, y);
    hi = std::max(hi, y);
  }
  return {lo, hi};
}

Design sample_design(const text::DesignSpace& space, std::mt19937_64& rng) {
  Design x(space.dim());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& v = space.variables()[i];
    x[i] = v.kind == VarKind::Continuous ? std::uniform_real_distribution<double>(v.lo, v.hi)(rng)
                                         : static_cast<double>(std::uniform_int_distribution<int>(0, v.categories - 1)(rng));
  }
  return x;
}

std::vector<TaskSpec> builtin_suite() {
  std::vector<TaskSpec> s;
  s.push_back(make_task("Sphere8", "sphere", 8, -5.0, 5.0, 0, "sphere, 8 real", 1));
  s.push_back(make_task("Rastrigin5", "rastrigin", 5, -5.12, 5.12, 0, "rastrigin, 5 real", 2));
  s.push_back(make_task("Levy10", "levy", 10, -10.0, 10.0, 0, "levy, 10 real", 3));
  s.push_back(make_task("OneMax12", "onemax", 12, 0, 0, 2, "count ones, 12 bits", 4));
  s.push_back(make_task("SeqMatch8", "seqmatch", 8, 0, 0, 4, "match hidden word, 8 of 4", 5));
  TaskSpec shift = make_task("SphereShift8", "sphere", 8, -5.0, 5.0, 0, "sphere shifted, 8 real", 6);
  shift.transform.shift.assign(8, 0.3);
  s.push_back(std::move(shift));
  for (auto& t : s) fill_probe(t);
  return s;
}

std::vector<TaskSpec> heldout_suite() {
  std::vector<TaskSpec> s;
  s.push_back(random_transform(make_task("Ackley6", "ackley", 6, -5.0, 5.0, 0, "ackley, 6 real", 11), 101));
  s.push_back(random_transform(make_task("Griewank6", "griewank", 6, -10.0, 10.0, 0, "griewank, 6 real", 12), 102));
  s.push_back(random_transform(
      make_task("StyblinskiTang5", "styblinski_tang", 5, -5.0, 5.0, 0, "styblinski-tang, 5 real", 13),
      103));
  for (auto& t : s) fill_probe(t);
  return s;
}

TaskSpec transform_task(const TaskSpec& base, double s, const std::vector<double>& t, std::uint64_t seed) {
  if (!(s > 0.0)) throw DomainError("transform_task: scale must be positive");
  if (!t.empty() && t.size() != base.space.dim()) {
    throw DomainError("transform_task: shift has " + std::to_string(t.size()) + " entries for " +
                      std::to_string(base.space.dim()) + " variables");
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto& v = base.space.variables()[i];
    const double half = v.kind == VarKind::Continuous ? 0.5 * (v.hi - v.lo) : 0.0;
    if (std::abs(t[i]) > half) {
      throw DomainError("transform_task: shift " + std::to_string(t[i]) + " of " + v.name + " is out of range");
    }
  }
  TaskSpec out = base;
  out.transform.scale = base.transform.scale * s;
  if (!t.empty()) {
    if (out.transform.shift.empty()) out.transform.shift.assign(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) out.transform.shift[i] += t[i];
  }
  out.id = base.id + "-T" + std::to_string(seed);
  out.meta.name = out.id;
  char buf[64];
  std::snprintf(buf, sizeof buf, ", scaled %.3g, shifted", s);
  out.meta.description = base.meta.description + buf;
  out.seed = base.seed * 1000003ULL + seed;
  return out;
}

TaskSpec random_transform(const TaskSpec& base, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double s = std::exp(std::uniform_real_distribution<double>(std::log(0.5), std::log(2.0))(rng));
  std::vector<double> t;
  for (const auto& v : base.space.variables()) {
    const double q = v.kind == VarKind::Continuous ? 0.25 * (v.hi - v.lo) : 0.0;
    const double r = std::uniform_real_distribution<double>(-q, q)(rng);
    t.push_back(std::round(r * 1000.0) / 1000.0);
  }
  return transform_task(base, std::round(s * 1000.0) / 1000.0, t, seed);
}

double OfflineDataset::best() const {
  if (scores.empty()) throw DomainError("dataset " + task_id + ": empty");
  return *std::max_element(scores.begin(), scores.end());
}

std::vector<double> OfflineDataset::normalized() const {
  std::vector<double> out;
  out.reserve(scores.size());
  for (double y : scores) out.push_back(ynorm::apply(stats, y));
  return out;
}

OfflineDataset OfflineDataset::poorest(std::size_t k) const {
  if (k == 0 || k > size()) throw DomainError("dataset " + task_id + ": cannot take the poorest " + std::to_string(k));
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  OfflineDataset out;
  out.task_id = task_id;
  out.seed = seed;
  out.protocol = protocol;
  for (std::size_t i : idx) {
    out.designs.push_back(designs[i]);
    out.scores.push_back(scores[i]);
  }
  out.stats = ynorm::normalize_task(out.scores).stats;
  return out;
}

std::vector<std::size_t> middle50_band(const std::vector<double>& pool_scores) {
  const std::size_t m = pool_scores.size();
  if (m < 4 || m % 4 != 0) throw DomainError("middle50_band: pool size must be a positive multiple of 4");
  const std::size_t n = m / 4;
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pool_scores[a] < pool_scores[b]; });
  std::vector<std::size_t> keep(order.begin() + static_cast<std::ptrdiff_t>(n),
                                order.begin() + static_cast<std::ptrdiff_t>(3 * n));
  std::sort(keep.begin(), keep.end());
  return keep;
}

OfflineDataset gen_offline_dataset(const TaskSpec& task, std::size_t n, Protocol protocol, std::uint64_t seed,
                                   int sig_digits) {
  if (n < 100) throw DomainError("gen_offline_dataset: need n >= 100, got " + std::to_string(n));
  task.validate();
  std::mt19937_64 rng(seed);
  const std::size_t pool_size = protocol == Protocol::Middle50 ? 4 * n : n;
  std::vector<Design> pool;
  std::vector<double> ys;
  pool.reserve(pool_size);
  for (std::size_t k = 0; k < pool_size; ++k) {
    Design x = text::snap_design(task.space, sample_design(task.space, rng), sig_digits);
    ys.push_back(task.oracle(x));
    pool.push_back(std::move(x));
  }
  const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
  if (*lo == *hi) throw DomainError("gen_offline_dataset: oracle of " + task.id + " is constant on the sample");

  std::vector<std::size_t> keep(pool_size);
  std::iota(keep.begin(), keep.end(), 0);
  if (protocol == Protocol::Middle50) {
    keep = middle50_band(ys);
    std::shuffle(keep.begin(), keep.end(), rng);
    keep.resize(n);
  }
  OfflineDataset d;
  d.task_id = task.id;
  d.seed = seed;
  d.protocol = protocol;
  for (std::size_t i : keep) {
    d.designs.push_back(pool[i]);
    d.scores.push_back(ys[i]);
  }
  d.stats = ynorm::normalize_task(d.scores).stats;
  return d;
}

namespace {

nlohmann::json stats_json(const ynorm::TaskScoreStats& s) {
  return {{"mean", s.mean},         {"std", s.std},           {"robust_mean", s.robust_mean},
          {"robust_std", s.robust_std}, {"robust_applied", s.robust_applied}, {"post_min", s.post_min},
          {"post_max", s.post_max}, {"log_eps", s.log_eps}};
}

ynorm::TaskScoreStats stats_from(const nlohmann::json& j) {
  ynorm::TaskScoreStats s;
  s.mean = j.at("mean");
  s.std = j.at("std");
  s.robust_mean = j.at("robust_mean");
  s.robust_std = j.at("robust_std");
  s.robust_applied = j.at("robust_applied");
  s.post_min = j.at("post_min");
  s.post_max = j.at("post_max");
  s.log_eps = j.at("log_eps");
  return s;
}

}  // namespace

void write_dataset(std::ostream& os, const OfflineDataset& d) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << nlohmann::json{{"task", d.task_id}, {"x", d.designs[i]}, {"y", d.scores[i]}}.dump() << '\n';
  }
  nlohmann::json trailer{{"trailer", true},
                         {"task", d.task_id},
                         {"size", d.size()},
                         {"seed", d.seed},
                         {"protocol", to_string(d.protocol)},
                         {"stats", stats_json(d.stats)}};
  os << trailer.dump() << '\n';
}

OfflineDataset read_dataset(std::istream& is) {
  OfflineDataset d;
  std::string line;
  bool trailer = false;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    if (trailer) throw FormatError("dataset line " + std::to_string(n) + ": records after the stats trailer");
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("trailer")) {
        trailer = true;
        if (j.at("task").get<std::string>() != d.task_id && !d.designs.empty()) {
          throw FormatError("dataset: trailer names task " + j.at("task").get<std::string>());
        }
        d.task_id = j.at("task");
        if (j.at("size").get<std::size_t>() != d.size()) throw FormatError("dataset: trailer size does not match");
        d.seed = j.at("seed");
        d.protocol = parse_protocol(j.at("protocol"));
        d.stats = stats_from(j.at("stats"));
        continue;
      }
      const std::string task = j.at("task");
      if (!d.designs.empty() && task != d.task_id) throw FormatError("dataset: mixed task ids");
      d.task_id = task;
      d.designs.push_back(j.at("x").get<Design>());
      d.scores.push_back(j.at("y").get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset line " + std::to_string(n) + ": " + e.what());
    }
  }
  if (!trailer) throw FormatError("dataset: missing stats trailer");
  return d;
}

void to_json(nlohmann::json& j, const TaskSpec& t) {
  const auto& v0 = t.space.variables().front();
  const bool cat = v0.kind == VarKind::Categorical;
  j = {{"id", t.id},
       {"function", t.function},
       {"kind", cat ? "categorical" : "continuous"},
       {"dim", t.space.dim()},
       {"metadata", {{"name", t.meta.name}, {"description", t.meta.description}, {"objective", t.meta.objective}}},
       {"transform", {{"scale", t.transform.scale}, {"shift", t.transform.shift}}},
       {"dataset_size", t.dataset_size},
       {"protocol", to_string(t.protocol)},
       {"seed", t.seed},
       {"y_min", t.y_min},
       {"y_max", t.y_max}};
  if (cat) {
    j["categories"] = v0.categories;
  } else {
    j["lo"] = v0.lo;
    j["hi"] = v0.hi;
  }
  if (!t.planted.empty()) j["planted"] = t.planted;
}

void from_json(const nlohmann::json& j, TaskSpec& t) {
  t.id = j.at("id");
  t.function = j.at("function");
  const std::string kind = j.at("kind");
  if (kind != "continuous" && kind != "categorical") throw FormatError("task " + t.id + ": unknown kind " + kind);
  const bool cat = kind == "categorical";
  t.space = make_space(cat, j.at("dim").get<std::size_t>(), cat ? 0.0 : j.at("lo").get<double>(),
                       cat ? 0.0 : j.at("hi").get<double>(), cat ? j.at("categories").get<int>() : 0);
  const auto& m = j.at("metadata");
  t.meta = {m.at("name"), m.at("description"), m.at("objective")};
  if (j.contains("transform")) {
    t.transform.scale = j["transform"].value("scale", 1.0);
    t.transform.shift = j["transform"].value("shift", std::vector<double>{});
  }
  t.planted = j.value("planted", std::vector<double>{});
  t.dataset_size = j.value("dataset_size", std::size_t{2000});
  t.protocol = parse_protocol(j.value("protocol", std::string("middle50")));
  t.seed = j.value("seed", std::uint64_t{0});
  t.y_min = j.at("y_min");
  t.y_max = j.at("y_max");
  t.validate();
}

void to_json(nlohmann::json& j, const SuiteConfig& s) {
  j = {{"seed", s.seed}, {"sig_digits", s.sig_digits}, {"tasks", s.tasks}, {"heldout", s.heldout}};
}

void from_json(const nlohmann::json& j, SuiteConfig& s) {
  s.seed = j.value("seed", std::uint64_t{0});
  s.sig_digits = j.value("sig_digits", 4);
  s.tasks = j.at("tasks").get<std::vector<TaskSpec>>();
  s.heldout = j.value("heldout", std::vector<TaskSpec>{});
  if (s.tasks.empty()) throw FormatError("suite: no tasks");
}

SuiteConfig default_suite_config() {
  SuiteConfig s;
  s.tasks = builtin_suite();
  s.heldout = heldout_suite();
  return s;
}

SuiteConfig load_suite(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("suite: cannot open " + path);
  try {
    return nlohmann::json::parse(is).get<SuiteConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("suite " + path + ": " + e.what());
  }
}

void save_suite(const SuiteConfig& s, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("suite: cannot write " + path);
  os << nlohmann::json(s).dump(2) << '\n';
}

}  // namespace uniso::tasks
