// Acceptance run: one PASS/FAIL line per criterion. Exit status is non-zero
// only when a criterion cannot be evaluated at all (or with --strict, when
// any criterion fails).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "model_fixtures.hpp"
#include "uniso/error.hpp"
#include "uniso/harness.hpp"
#include "uniso/regularizers.hpp"
#include "uniso/search.hpp"

using namespace uniso;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

double median_of(std::vector<double> v) { return reg::median(std::move(v)); }

ad::Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  ad::Tensor t({r, c});
  for (double& v : t.storage()) v = n01(rng);
  return t;
}

// ------------------------------------------------------------ criterion 1

Outcome codec_exactness() {
  const auto t0 = Clock::now();
  const text::Vocabulary v(16);
  const text::TokenSequence want = {text::Vocabulary::kPlus, v.digit(1), v.digit(3), v.digit(1), v.exponent(-2)};
  const bool exact = text::p10_encode(1.31, 3, v) == want;
  std::mt19937_64 rng(1);
  double worst = 0.0;  // error in units of half a mantissa ULP
  for (int i = 0; i < 10000; ++i) {
    const double mant = std::uniform_real_distribution<double>(1.0, 10.0)(rng);
    const int e = std::uniform_int_distribution<int>(-12, 12)(rng);
    const double y = (rng() & 1 ? -1.0 : 1.0) * mant * std::pow(10.0, e);
    const double back = text::p10_decode(text::p10_encode(y, 3, v), v);
    const double half_ulp = 0.5 * std::pow(10.0, std::floor(std::log10(std::abs(y))) - 2);
    worst = std::max(worst, std::abs(back - y) / half_ulp);
  }
  const double secs = seconds_since(t0);
  return {exact && worst <= 1.0 + 1e-9 && secs < 1.0,
          std::string("1.31 -> <+><1><3><1><E-2> ") + (exact ? "exact" : "WRONG") + ", worst round-trip " + fmt(worst) +
              " half-ULP, " + fmt(secs, 3) + " s"};
}

// ------------------------------------------------------------ criterion 2

// Moves a fresh init off its zero biases, where ReLUs sit exactly on a kink.
void jitter(ad::ParamStore& p, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.05);
  for (const auto& name : p.names())
    for (double& v : p.entry(name).value.storage()) v += n(rng);
  p.round_to_float();
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  std::map<std::string, double> worst, coarse;
  auto note = [&](const std::string& k, double e) { worst[k] = std::max(worst[k], e); };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    {
      ad::ParamStore ps;
      const std::size_t n = 3 + seed % 6;
      ps.add("zx", random_tensor(n, 4, rng));
      ps.add("zm", random_tensor(n, 4, rng));
      auto loss = [](ad::Tape& t, const ad::ParamStore& p) {
        return reg::contrastive_loss(t, t.param(p, "zx"), t.param(p, "zm"), {0.5, 1e-12});
      };
      note("contrastive", ad::grad_check(loss, ps, 1e-4));
    }
    {
      ad::ParamStore ps;
      ps.add("a", random_tensor(3 + seed % 5, 3, rng));
      ps.add("b", random_tensor(4, 3, rng));
      std::vector<double> ya(ps.value("a").rows()), yb(4);
      for (double& y : ya) y = std::normal_distribution<double>()(rng);
      for (double& y : yb) y = std::normal_distribution<double>()(rng);
      auto loss = [&](ad::Tape& t, const ad::ParamStore& p) {
        return reg::lipschitz_loss(t, {{t.param(p, "a"), ya, 10.0}, {t.param(p, "b"), yb, 30.0}});
      };
      note("lipschitz", ad::grad_check(loss, ps, 1e-4));
    }
    {
      ad::ParamStore ps;
      ps.add("logits", random_tensor(4, 7, rng));
      std::vector<int> target(4);
      for (int& v : target) v = std::uniform_int_distribution<int>(0, 6)(rng);
      auto loss = [&](ad::Tape& t, const ad::ParamStore& p) { return ad::cross_entropy(t, t.param(p, "logits"), target); };
      note("cross-entropy", ad::grad_check(loss, ps, 1e-4));
    }
    {
      ad::ParamStore ps;
      ps.add("pred", random_tensor(6, 1, rng));
      const ad::Tensor target = random_tensor(6, 1, rng);
      auto loss = [&](ad::Tape& t, const ad::ParamStore& p) { return ad::squared_error(t, t.param(p, "pred"), target); };
      note("squared error", ad::grad_check(loss, ps, 1e-4));
    }
    // Composed losses on 4-example, two-task batches. Balancing coefficients
    // are frozen at their values for the point, as in training.
    const auto data = fixtures::toy_data(2, 4, 700 + seed);
    const std::vector<std::size_t> batch = {0, 4, 1, 5}, lip = {0, 1, 2, 3, 4, 5, 6, 7};
    model::TrainConfig cfg;
    cfg.temperature = 0.5;
    auto small = [](model::Variant v) {
      auto c = fixtures::tiny_config(v);
      c.proj_hidden = 16;  // 8 ReLU units can zero a projected row at init
      return c;
    };
    {
      auto s = model::init_model(small(model::Variant::T), seed);
      jitter(s.params, rng);
      ad::Tape t(false);
      const auto coef = model::build_loss_t(t, s.config, s.params, data, batch, lip, cfg).coef;
      auto loss = [&](ad::Tape& tp, const ad::ParamStore& p) {
        return model::build_loss_t(tp, s.config, p, data, batch, lip, cfg, &coef).total;
      };
      note("UniSO-T total", ad::grad_check(loss, s.params, 1e-6, 300, seed));
      coarse["UniSO-T total"] = std::max(coarse["UniSO-T total"], ad::grad_check(loss, s.params, 1e-4, 100, seed));
    }
    {
      auto s = model::init_model(small(model::Variant::N), seed);
      jitter(s.params, rng);
      ad::Tape t(false);
      const auto coef = model::build_loss_n_stage1(t, s.config, s.params, data, batch, lip, cfg).coef;
      auto loss = [&](ad::Tape& tp, const ad::ParamStore& p) {
        return model::build_loss_n_stage1(tp, s.config, p, data, batch, lip, cfg, &coef).total;
      };
      note("UniSO-N stage 1", ad::grad_check(loss, s.params, 1e-6, 300, seed));
      coarse["UniSO-N stage 1"] = std::max(coarse["UniSO-N stage 1"], ad::grad_check(loss, s.params, 1e-4, 100, seed));
      std::vector<text::TokenSequence> in;
      std::vector<double> y;
      for (const auto& e : data.examples) {
        in.push_back(e.input);
        y.push_back(e.y_norm);
      }
      const ad::Tensor emb = model::embed(s, in);
      auto stage2 = [&](ad::Tape& tp, const ad::ParamStore& p) { return model::build_loss_n_stage2(tp, s.config, p, emb, y); };
      note("UniSO-N stage 2", ad::grad_check(stage2, s.params, 1e-4, 300, seed));
    }
  }
  const double secs = seconds_since(t0);
  double max_err = 0.0;
  std::string detail;
  for (const auto& [k, e] : worst) {
    max_err = std::max(max_err, e);
    detail += k + " " + fmt(e, 2) + "; ";
  }
  detail += "composed at eps 1e-6; at eps 1e-4 (kink crossings):";
  for (const auto& [k, e] : coarse) detail += " " + k + " " + fmt(e, 2);
  return {max_err <= 1e-4 && secs < 120.0, detail + "; " + fmt(secs, 3) + " s"};
}

// ------------------------------------------------------------ criterion 3

double cosine(const ad::Tensor& a, std::size_t i, std::size_t j) {
  double dot = 0, ni = 0, nj = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    dot += a.at(i, k) * a.at(j, k);
    ni += a.at(i, k) * a.at(i, k);
    nj += a.at(j, k) * a.at(j, k);
  }
  return dot / std::sqrt(ni * nj);
}

double contrastive_direct(const ad::Tensor& zx, const ad::Tensor& zm, double tau) {
  const std::size_t n = zx.rows();
  double lo = 1e300, hi = -1e300;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      lo = std::min(lo, cosine(zm, i, j));
      hi = std::max(hi, cosine(zm, i, j));
    }
  if (hi - lo < 1e-12) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double den = 0;
      for (std::size_t k = 0; k < n; ++k)
        if (k != i) den += std::exp(cosine(zx, i, k) / tau);
      s += (cosine(zm, i, j) - lo) / (hi - lo) * std::log(std::exp(cosine(zx, i, j) / tau) / den);
    }
  return -s / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double lipschitz_direct(const ad::Tensor& z, const std::vector<double>& y) {
  std::vector<double> r;
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = i + 1; j < z.rows(); ++j) {
      double ss = 0;
      for (std::size_t k = 0; k < z.cols(); ++k) ss += (z.at(i, k) - z.at(j, k)) * (z.at(i, k) - z.at(j, k));
      r.push_back(std::abs(y[i] - y[j]) / std::sqrt(ss));
    }
  std::vector<double> s = r;
  std::sort(s.begin(), s.end());
  const double med = s.size() % 2 ? s[s.size() / 2] : 0.5 * (s[s.size() / 2 - 1] + s[s.size() / 2]);
  double loss = 0;
  for (double v : r) loss += std::max(0.0, v - med);
  return loss;
}

Outcome loss_oracles() {
  double worst_c = 0.0, worst_l = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(900 + seed);
    const std::size_t n = 3 + seed % 14;  // 3..16
    const ad::Tensor zx = random_tensor(n, 6, rng), zm = random_tensor(n, 6, rng);
    ad::Tape t(false);
    const double lib = t.value(reg::contrastive_loss(t, t.constant(zx), t.constant(zm), {0.1, 1e-12})).item();
    const double ref = contrastive_direct(zx, zm, 0.1);
    worst_c = std::max(worst_c, std::abs(lib - ref) / std::max(std::abs(ref), 1e-300));

    const std::size_t m = 2 + seed % 15;  // 2..16
    const ad::Tensor z = random_tensor(m, 5, rng);
    std::vector<double> y(m);
    for (double& v : y) v = std::normal_distribution<double>()(rng);
    const double lip = t.value(reg::lipschitz_loss(t, {{t.constant(z), y, static_cast<double>(m)}})).item();
    const double lref = lipschitz_direct(z, y);
    worst_l = std::max(worst_l, lref == 0.0 ? std::abs(lip) : std::abs(lip - lref) / lref);
  }
  std::mt19937_64 rng(3);
  ad::Tape t(false);
  const double two =
      t.value(reg::contrastive_loss(t, t.constant(random_tensor(2, 6, rng)), t.constant(random_tensor(2, 6, rng)))).item();
  return {worst_c <= 1e-10 && worst_l <= 1e-10 && two == 0.0,
          "contrastive rel " + fmt(worst_c, 2) + ", lipschitz rel " + fmt(worst_l, 2) + ", N=2 contrastive = " + fmt(two)};
}

// ------------------------------------------------------------ criterion 4

Outcome balancing() {
  const auto c = reg::balance_coefficients(2.0, 1.0, 4.0);
  const bool hand = std::abs(c.contrastive - 2.0) <= 1e-9 && std::abs(c.lipschitz - 0.5) <= 1e-9;
  bool finite = true;
  for (double a : {0.0, 1.0})
    for (double b : {0.0, 1.0})
      for (double d : {0.0, 1.0}) {
        const auto k = reg::balance_coefficients(a, b, d);
        finite = finite && std::isfinite(k.contrastive) && std::isfinite(k.lipschitz);
      }
  const auto z = reg::balance_coefficients(1.0, 0.0, 0.0);
  finite = finite && std::abs(z.contrastive - 1e10) <= 1e-9 * 1e10;
  return {hand && finite, "(2,1,4) -> (" + fmt(c.contrastive, 10) + ", " + fmt(c.lipschitz, 10) +
                              "); zero losses finite: " + (finite ? "yes" : "no")};
}

// ------------------------------------------------------------ criterion 5

text::DesignSpace box(std::size_t d) {
  std::vector<text::Variable> v;
  for (std::size_t i = 0; i < d; ++i) v.push_back(text::Variable::continuous("x" + std::to_string(i), -1.0, 1.0));
  return text::DesignSpace(v);
}

text::DesignSpace cats(std::size_t d, int k) {
  std::vector<text::Variable> v;
  for (std::size_t i = 0; i < d; ++i) v.push_back(text::Variable::categorical("c" + std::to_string(i), k));
  return text::DesignSpace(v);
}

search::Seeds seeds_for(const text::DesignSpace& space, std::size_t n, const search::Scorer& f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  search::Seeds s;
  for (std::size_t k = 0; k < n; ++k) {
    s.designs.push_back(tasks::sample_design(space, rng));
    s.scores.push_back(f(s.designs.back()));
  }
  return s;
}

Outcome searcher_soundness() {
  const auto t0 = Clock::now();
  bool budgets = true;
  auto counted = [](search::Scorer f, std::size_t& calls) {
    return [f, &calls](const text::Design& x) {
      ++calls;
      return f(x);
    };
  };
  auto sphere_at = [](text::Design opt) {
    return [opt](const text::Design& x) {
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - opt[i]) * (x[i] - opt[i]);
      return -s;
    };
  };

  std::size_t calls = 0;
  const auto sp5 = box(5);
  const auto f_ea = sphere_at(text::Design(5, 0.0));
  const auto ea = search::ea_search(counted(f_ea, calls), sp5, seeds_for(sp5, 100, f_ea, 3), {1000, 128, 7});
  budgets = budgets && calls == 1000 && ea.evaluations == 1000;
  const double ea_gap = -ea.candidates.front().model_score;

  calls = 0;
  const auto f_cma = sphere_at({0.1, -0.2, 0.3, 0.0, 0.5});
  const auto cma = search::cmaes_search(counted(f_cma, calls), sp5, seeds_for(sp5, 50, f_cma, 4), {1000, 128, 2});
  budgets = budgets && calls == 1000 && cma.evaluations == 1000;
  const double cma_gap = -cma.candidates.front().model_score;

  calls = 0;
  const auto sp3 = box(3);
  const auto f_bo = sphere_at({0.3, -0.4, 0.1});
  search::BoConfig bo_cfg;
  bo_cfg.refine_steps = 100;
  const auto bo = search::bo_qei_search(counted(f_bo, calls), sp3, seeds_for(sp3, 200, f_bo, 11), {400, 128, 3}, bo_cfg);
  budgets = budgets && calls == 400 && bo.evaluations == 400;
  const double bo_gap = -bo.candidates.front().model_score;

  const auto sc = cats(8, 4);
  int found = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    text::Design planted(8);
    for (double& v : planted) v = std::uniform_int_distribution<int>(0, 3)(rng);
    auto f = [planted](const text::Design& x) {
      double m = 0;
      for (std::size_t i = 0; i < x.size(); ++i) m += x[i] == planted[i];
      return m;
    };
    calls = 0;
    const auto r = search::bo_categorical_search(counted(f, calls), sc, seeds_for(sc, 300, f, seed), {1000, 128, seed});
    budgets = budgets && calls == 1000 && r.evaluations == 1000;
    found += r.candidates.front().design == planted;
  }
  const double secs = seconds_since(t0);
  const bool pass = ea_gap < 1e-2 && cma_gap < 1e-3 && bo_gap < 1e-2 && found >= 4 && budgets && secs < 600.0;
  return {pass, "EA gap " + fmt(ea_gap, 2) + ", CMA-ES gap " + fmt(cma_gap, 2) + ", BO-qEI gap " + fmt(bo_gap, 2) +
                    ", categorical BO " + std::to_string(found) + "/5, budgets " + (budgets ? "exact" : "WRONG") + ", " +
                    fmt(secs, 3) + " s"};
}

// ------------------------------------------------- shared desk-scale runs

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<tasks::OfflineDataset> datasets;
  model::ModelState improved_t, vanilla_t, improved_n;
  harness::EvalReport report;
  double improved_seconds = 0.0;
};

struct Desk {
  harness::RunConfig cfg;
  std::vector<tasks::TaskSpec> tasks;
  tasks::SuiteConfig suite;
  std::vector<SeedRun> runs;
};

harness::RunConfig acceptance_profile(const fs::path& out) {
  harness::RunConfig cfg = harness::load_run_config(UNISO_SOURCE_DIR "/configs/acceptance.json");
  cfg.out_dir = out.string();
  cfg.seeds = {0, 1, 2};
  return cfg;
}

Desk desk_runs(const fs::path& out) {
  Desk d;
  d.cfg = acceptance_profile(out);
  d.suite = harness::resolve_suite(d.cfg);
  d.cfg.sig_digits = d.suite.sig_digits;
  d.tasks = harness::selected_tasks(d.cfg, d.suite);
  const int sig = d.cfg.sig_digits;
  for (std::uint64_t seed : d.cfg.seeds) {
    SeedRun r;
    r.seed = seed;
    const auto t0 = Clock::now();
    harness::RunConfig c = d.cfg;
    c.variant = model::Variant::T;
    c.mode = model::Mode::Improved;
    const std::string dir = harness::seed_dir(c, seed);
    r.datasets = harness::stage_gen_data(c, seed, d.tasks, sig, dir);
    r.improved_t = harness::stage_train(c, seed, d.tasks, r.datasets, sig, dir).front();
    const auto searches = harness::stage_search(c, seed, {r.improved_t}, d.tasks, r.datasets, sig, dir);
    r.report = harness::stage_eval(c, d.tasks, r.datasets, searches, dir);
    r.improved_seconds = seconds_since(t0);
    std::cerr << "  seed " << seed << ": UniSO-T improved pipeline " << fmt(r.improved_seconds, 3) << " s\n";

    c.mode = model::Mode::Vanilla;
    auto t1 = Clock::now();
    r.vanilla_t = harness::stage_train(c, seed, d.tasks, r.datasets, sig, (fs::path(dir) / "vanilla-t").string()).front();
    std::cerr << "  seed " << seed << ": UniSO-T vanilla training " << fmt(seconds_since(t1), 3) << " s\n";

    c.variant = model::Variant::N;
    c.mode = model::Mode::Improved;
    t1 = Clock::now();
    r.improved_n = harness::stage_train(c, seed, d.tasks, r.datasets, sig, (fs::path(dir) / "improved-n").string()).front();
    std::cerr << "  seed " << seed << ": UniSO-N improved training " << fmt(seconds_since(t1), 3) << " s\n";
    d.runs.push_back(std::move(r));
  }
  return d;
}

// ------------------------------------------------------------ criterion 6

Outcome desk_trend(const Desk& d) {
  std::vector<double> counts;
  double secs = 0.0;
  std::string per_seed;
  for (const auto& r : d.runs) {
    const auto n = std::count_if(r.report.tasks.begin(), r.report.tasks.end(), [](const auto& m) { return m.exceeds; });
    counts.push_back(static_cast<double>(n));
    secs += r.improved_seconds;
    per_seed += std::to_string(n) + "/" + std::to_string(r.report.tasks.size()) + " ";
  }
  const double med = median_of(counts);
  return {med >= 4.0 && secs < 45 * 60.0,
          "tasks exceeding D(best) per seed: " + per_seed + "(median " + fmt(med) + "), " + fmt(secs, 4) + " s"};
}

// ------------------------------------------------------------ criterion 7

std::vector<std::vector<std::size_t>> rows_by_task(const std::vector<std::size_t>& labels, std::size_t k) {
  std::vector<std::vector<std::size_t>> g(k);
  for (std::size_t i = 0; i < labels.size(); ++i) g[labels[i]].push_back(i);
  return g;
}

double cos_dist(const ad::Tensor& a, std::size_t i, std::size_t j) { return 1.0 - cosine(a, i, j); }

// Silhouette with cosine distance.
double silhouette(const ad::Tensor& z, const std::vector<std::size_t>& labels, std::size_t k) {
  const auto groups = rows_by_task(labels, k);
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    std::vector<double> mean(k, 0.0);
    for (std::size_t g = 0; g < k; ++g) {
      for (std::size_t j : groups[g])
        if (j != i) mean[g] += cos_dist(z, i, j);
      const std::size_t n = groups[g].size() - (labels[i] == g ? 1 : 0);
      mean[g] = n ? mean[g] / static_cast<double>(n) : 0.0;
    }
    const double a = mean[labels[i]];
    double b = 1e300;
    for (std::size_t g = 0; g < k; ++g)
      if (g != labels[i]) b = std::min(b, mean[g]);
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(z.rows());
}

struct Embedded {
  ad::Tensor pooled, z;
  std::vector<std::size_t> labels;
};

Embedded embed_training(const Desk& d, const SeedRun& r, const model::ModelState& s, std::size_t per_task) {
  std::vector<text::TokenSequence> in;
  Embedded e;
  for (std::size_t k = 0; k < d.tasks.size(); ++k)
    for (std::size_t i = 0; i < std::min(per_task, r.datasets[k].size()); ++i) {
      in.push_back(harness::input_tokens(d.tasks[k], r.datasets[k].designs[i], d.cfg.sig_digits));
      e.labels.push_back(k);
    }
  e.pooled = model::embed(s, in);
  e.z = model::project(s, e.pooled);
  return e;
}

Outcome embedding_structure(const Desk& d) {
  int ok = 0;
  std::string detail;
  for (const auto& r : d.runs) {
    const auto imp = embed_training(d, r, r.improved_t, 100);
    const auto van = embed_training(d, r, r.vanilla_t, 100);
    const std::size_t k = d.tasks.size();
    const auto groups = rows_by_task(imp.labels, k);
    // Centroids of the pooled embeddings.
    ad::Tensor cent({k, imp.pooled.cols()});
    for (std::size_t g = 0; g < k; ++g)
      for (std::size_t i : groups[g])
        for (std::size_t c = 0; c < imp.pooled.cols(); ++c)
          cent.at(g, c) += imp.pooled.at(i, c) / static_cast<double>(groups[g].size());
    double inter = 0.0, intra = 0.0;
    std::size_t n_inter = 0, n_intra = 0;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b, ++n_inter) inter += cos_dist(cent, a, b);
    for (const auto& g : groups)
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = i + 1; j < g.size(); ++j, ++n_intra) intra += cos_dist(imp.pooled, g[i], g[j]);
    inter /= static_cast<double>(n_inter);
    intra /= static_cast<double>(n_intra);
    const double s_imp = silhouette(imp.z, imp.labels, k), s_van = silhouette(van.z, van.labels, k);
    const bool pass = inter > intra && s_imp > s_van;
    ok += pass;
    detail += "seed " + std::to_string(r.seed) + ": inter " + fmt(inter, 3) + " vs intra " + fmt(intra, 3) +
              ", silhouette " + fmt(s_imp, 3) + " vs " + fmt(s_van, 3) + "; ";
  }
  return {ok >= 2, detail + std::to_string(ok) + "/3 seeds"};
}

// ------------------------------------------------------------ criterion 8

// Mean over tasks of the fraction of held-out pairwise ratios above the
// median ratio of the same task's training rows.
double smoothness_fraction(const Desk& d, const SeedRun& r, const model::ModelState& s) {
  constexpr std::size_t kBatch = 64;
  double total = 0.0;
  for (std::size_t k = 0; k < d.tasks.size(); ++k) {
    const auto& task = d.tasks[k];
    const auto& train = r.datasets[k];
    const auto held = tasks::gen_offline_dataset(task, std::max<std::size_t>(kBatch, 100), task.protocol,
                                                 harness::dataset_seed(task, r.seed) ^ 0xA11CE, d.cfg.sig_digits);
    auto zy = [&](const tasks::OfflineDataset& ds) {
      std::vector<text::TokenSequence> in;
      std::vector<double> y;
      for (std::size_t i = 0; i < kBatch; ++i) {
        in.push_back(harness::input_tokens(task, ds.designs[i], d.cfg.sig_digits));
        y.push_back(ynorm::apply(train.stats, ds.scores[i]));
      }
      return std::pair{model::project(s, model::embed(s, in)), y};
    };
    const auto [zt, yt] = zy(train);
    const double L = reg::median(reg::pairwise_ratios(zt, yt));
    const auto [zh, yh] = zy(held);
    total += harness::fraction_above(zh, yh, L);
  }
  return total / static_cast<double>(d.tasks.size());
}

Outcome smoothness(const Desk& d) {
  int ok = 0;
  std::string detail;
  for (const auto& r : d.runs) {
    const double fi = smoothness_fraction(d, r, r.improved_t), fv = smoothness_fraction(d, r, r.vanilla_t);
    ok += fi < fv;
    detail += "seed " + std::to_string(r.seed) + ": improved " + fmt(fi, 3) + " vs vanilla " + fmt(fv, 3) + "; ";
  }
  return {ok >= 2, detail + std::to_string(ok) + "/3 seeds"};
}

// ------------------------------------------------------------ criterion 9

Outcome transfer(const Desk& d) {
  const auto& task = d.suite.heldout.front();
  std::vector<double> zero, few, dbest;
  for (const auto& r : d.runs) {
    const auto full = tasks::gen_offline_dataset(task, d.cfg.dataset_size ? d.cfg.dataset_size : 200, task.protocol,
                                                 harness::dataset_seed(task, r.seed), d.cfg.sig_digits);
    const auto poorest = full.poorest(100);
    const auto t = harness::run_transfer(r.improved_t, task, poorest, d.cfg, r.seed);
    zero.push_back(t.zero_shot.best);
    few.push_back(t.few_shot.best);
    dbest.push_back(t.dataset_best);
  }
  const double z = median_of(zero), f = median_of(few), b = median_of(dbest);
  return {f >= z && z > b, task.id + ": few-shot " + fmt(f, 5) + ", zero-shot " + fmt(z, 5) + ", poorest-100 D(best) " +
                               fmt(b, 5) + " (medians of 3 seeds)"};
}

// ----------------------------------------------------------- criterion 10

Outcome ood(const Desk& d) {
  const std::size_t k = d.tasks.size();
  std::vector<std::vector<double>> trained(k), untrained(k);
  for (const auto& r : d.runs) {
    model::ModelConfig mc = d.cfg.model;
    mc.variant = model::Variant::N;
    const auto blank = model::init_model(mc, r.seed);
    for (std::size_t t = 0; t < k; ++t) {
      trained[t].push_back(harness::spearman_ood(r.improved_n, d.tasks[t], r.datasets[t], d.cfg.sig_digits, 200, r.seed).rho);
      untrained[t].push_back(harness::spearman_ood(blank, d.tasks[t], r.datasets[t], d.cfg.sig_digits, 200, r.seed).rho);
    }
  }
  int above = 0;
  bool beats = true;
  std::string detail;
  for (std::size_t t = 0; t < k; ++t) {
    const double a = median_of(trained[t]), b = median_of(untrained[t]);
    above += a > 0.3;
    beats = beats && a > b;
    detail += d.tasks[t].id + " " + fmt(a, 2) + " (untrained " + fmt(b, 2) + "); ";
  }
  return {above >= 4 && beats, detail + std::to_string(above) + "/" + std::to_string(k) + " above 0.3"};
}

// ----------------------------------------------------------- criterion 11

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism(const Desk& d, const fs::path& out) {
  harness::RunConfig c = acceptance_profile(out / "det-a");
  c.seeds = {5};
  c.train.epochs = 1;
  c.budget = 100;
  c.final_count = 16;
  c.task_filter = {"Rastrigin5", "SeqMatch8"};
  harness::run_pipeline(c);
  c.out_dir = (out / "det-b").string();
  harness::run_pipeline(c);
  bool same = true;
  for (const char* f : {"report.jsonl", "report.txt", "model.ckpt", "candidates/Rastrigin5.jsonl"}) {
    const std::string a = slurp(out / "det-a" / "seed-5" / f), b = slurp(out / "det-b" / "seed-5" / f);
    same = same && !a.empty() && a == b;
  }

  bool exact = true;
  const auto& r = d.runs.front();
  for (const model::ModelState* s : {&r.improved_t, &r.improved_n}) {
    const std::string path = (out / "reload.ckpt").string();
    model::save_checkpoint(*s, path);
    const auto back = model::load_checkpoint(path);
    exact = exact && back.params == s->params;
    for (std::size_t i = 0; i < 20; ++i) {
      const auto in = harness::input_tokens(d.tasks[i % d.tasks.size()], r.datasets[i % d.tasks.size()].designs[i],
                                            d.cfg.sig_digits);
      if (s->config.variant == model::Variant::T) {
        exact = exact && model::decode_tokens(*s, in, {}) == model::decode_tokens(back, in, {});
      } else {
        const double a = model::predict_n(*s, in), b = model::predict_n(back, in);
        exact = exact && std::memcmp(&a, &b, sizeof a) == 0;
      }
      const auto ea = model::embed(*s, {in}), eb = model::embed(back, {in});
      exact = exact && std::equal(ea.storage().begin(), ea.storage().end(), eb.storage().begin());
    }
  }
  return {same && exact, std::string("repeat run ") + (same ? "byte-identical" : "DIFFERS") + ", checkpoint reload " +
                             (exact ? "bit-exact" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  bool strict = false;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--strict") == 0) {
      strict = true;
    } else {
      only.insert(std::atoi(argv[i]));
    }
  }
  const fs::path out = fs::temp_directory_path() / "uniso-acceptance";
  fs::remove_all(out);
  fs::create_directories(out);

  const char* names[] = {"",
                         "codec exactness",
                         "gradient fidelity",
                         "loss oracles",
                         "balancing arithmetic",
                         "searcher soundness",
                         "desk-scale trend",
                         "embedding structure",
                         "smoothness effect",
                         "transfer trend",
                         "OOD diagnostic",
                         "determinism & persistence"};
  std::map<int, Outcome> results;
  bool broken = false;
  auto run = [&](int id, const std::function<Outcome()>& f) {
    if (!only.empty() && !only.count(id)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      broken = true;
    }
    results[id] = o;
    std::cout << "criterion " << id << " (" << names[id] << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << " [" << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  };

  run(1, codec_exactness);
  run(2, gradient_fidelity);
  run(3, loss_oracles);
  run(4, balancing);
  run(5, searcher_soundness);

  bool need_desk = only.empty();
  for (int id : only) need_desk = need_desk || id >= 6;
  if (need_desk) {
    std::unique_ptr<Desk> desk;
    const auto t0 = Clock::now();
    try {
      std::cerr << "training desk-scale models (3 seeds)\n";
      desk = std::make_unique<Desk>(desk_runs(out / "desk"));
      std::cerr << "desk runs: " << fmt(seconds_since(t0), 4) << " s\n";
    } catch (const std::exception& e) {
      std::cerr << "desk runs failed: " << e.what() << '\n';
      broken = true;
    }
    auto with_desk = [&](int id, std::function<Outcome(const Desk&)> f) {
      run(id, [&]() -> Outcome {
        if (!desk) throw Error("desk-scale runs unavailable");
        return f(*desk);
      });
    };
    with_desk(6, desk_trend);
    with_desk(7, embedding_structure);
    with_desk(8, smoothness);
    with_desk(9, transfer);
    with_desk(10, ood);
    with_desk(11, [&](const Desk& d) { return determinism(d, out); });
  }

  const auto passed = std::count_if(results.begin(), results.end(), [](const auto& kv) { return kv.second.pass; });
  std::cout << "acceptance: " << passed << " of " << results.size() << " criteria passed" << std::endl;
  fs::remove_all(out);
  if (broken) return 2;
  return strict && passed != static_cast<long>(results.size()) ? 1 : 0;
}
