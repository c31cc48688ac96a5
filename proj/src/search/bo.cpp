#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "uniso/error.hpp"
#include "uniso/search.hpp"

namespace uniso::search {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Observations {
  std::vector<Design> x;  // unit coordinates (continuous) or category ids
  std::vector<double> y;
};

// Standardized GP over the best `cap` observations, scale picked from
// `grid` by log marginal likelihood.
struct Surrogate {
  GPModel gp;
  double best = 0.0;
};

double log_marginal(const GPModel& gp) {
  return -0.5 * gp.targets.dot(gp.alpha) - gp.chol.diagonal().array().log().sum();
}

Surrogate fit_surrogate(const Observations& obs, KernelKind kind, const std::vector<double>& grid, double noise,
                        std::size_t cap) {
  std::vector<std::size_t> idx(obs.y.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return obs.y[a] > obs.y[b]; });
  if (idx.size() > cap) idx.resize(cap);
  std::vector<Design> xs;
  std::vector<double> ys;
  for (std::size_t i : idx) {
    xs.push_back(obs.x[i]);
    ys.push_back(obs.y[i]);
  }
  const double mean = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
  double var = 0.0;
  for (double v : ys) var += (v - mean) * (v - mean);
  const double sd = ys.size() > 1 && var > 1e-24 ? std::sqrt(var / static_cast<double>(ys.size())) : 1.0;
  for (double& v : ys) v = (v - mean) / sd;

  Surrogate s;
  double best_lml = -std::numeric_limits<double>::infinity();
  for (double g : grid) {
    GPModel gp = gp_fit(kind, xs, ys, {g}, noise);
    const double lml = log_marginal(gp);
    if (lml > best_lml) {
      best_lml = lml;
      s.gp = std::move(gp);
    }
  }
  s.best = *std::max_element(ys.begin(), ys.end());
  return s;
}

Observations warm_start(Evaluator& eval, const DesignSpace& space, const Seeds& dataset, std::size_t warm,
                        std::mt19937_64& rng) {
  Observations obs;
  const std::size_t n0 = std::min({warm, dataset.size(), eval.remaining()});
  for (std::size_t i = 0; i < n0; ++i) {
    const Design x = eval.canonical(dataset.designs[i]);
    obs.y.push_back(eval(x));
    obs.x.push_back(to_unit(space, x));
  }
  // Without offline data the first points are uniform draws.
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (obs.x.size() < 2 && eval.remaining() > 0) {
    Design r(space.dim());
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto& v = space.variables()[i];
      r[i] = v.kind == text::VarKind::Continuous ? u(rng)
                                                 : static_cast<double>(std::uniform_int_distribution<int>(
                                                       0, v.categories - 1)(rng));
    }
    const Design x = eval.canonical(from_unit(space, r));
    obs.y.push_back(eval(x));
    obs.x.push_back(to_unit(space, x));
  }
  return obs;
}

}  // namespace

SearchResult bo_qei_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                           const SearchBudget& budget, const BoConfig& cfg,
                           std::function<Design(const Design&)> canonical) {
  if (!space.all_continuous()) throw DomainError("bo_qei_search: needs a continuous design space");
  if (cfg.q == 0 || cfg.restarts == 0 || cfg.initial_candidates < cfg.restarts) {
    throw DomainError("bo_qei_search: invalid acquisition settings");
  }
  Evaluator eval(scorer, budget, std::move(canonical));
  std::mt19937_64 rng(budget.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Observations obs = warm_start(eval, space, dataset, cfg.warm_start, rng);
  const std::size_t d = space.dim();
  const double root_d = std::sqrt(static_cast<double>(d));
  std::vector<double> grid;
  for (double g : {0.05, 0.1, 0.2, 0.4, 0.8}) grid.push_back(g * root_d);

  for (std::uint64_t iter = 0; eval.remaining() > 0; ++iter) {
    const Surrogate sur = fit_surrogate(obs, KernelKind::SquaredExponential, grid, cfg.noise, cfg.max_gp_points);
    const std::size_t q = std::min(cfg.q, eval.remaining());
    const std::uint64_t acq_seed = budget.seed * 1000003ULL + iter;
    auto acq = [&](const std::vector<Design>& b) { return qei_acquisition(sur.gp, b, sur.best, cfg.mc_samples, acq_seed); };

    std::vector<std::pair<double, std::vector<Design>>> starts;
    for (std::size_t k = 0; k < cfg.initial_candidates; ++k) {
      std::vector<Design> b(q, Design(d));
      for (auto& x : b)
        for (double& v : x) v = unif(rng);
      const double a = acq(b);
      starts.emplace_back(a, std::move(b));
    }
    std::stable_sort(starts.begin(), starts.end(), [](const auto& l, const auto& r) { return l.first > r.first; });
    starts.resize(cfg.restarts);

    std::size_t best_start = 0;
    for (std::size_t r = 0; r < starts.size(); ++r) {
      auto& [value, batch] = starts[r];
      double h = 0.1;
      std::size_t fails = 0;
      for (std::size_t step = 0; step < cfg.refine_steps; ++step) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, q - 1)(rng);
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, d - 1)(rng);
        const double orig = batch[j][i];
        bool moved = false;
        for (double sign : {1.0, -1.0}) {
          batch[j][i] = std::clamp(orig + sign * h, 0.0, 1.0);
          const double a = acq(batch);
          if (a > value) {
            value = a;
            moved = true;
            break;
          }
        }
        if (!moved) {
          batch[j][i] = orig;
          if (++fails >= q * d) {
            h *= 0.5;
            fails = 0;
          }
        }
      }
      if (value > starts[best_start].first) best_start = r;
    }
    for (const Design& u : starts[best_start].second) {
      const Design x = eval.canonical(from_unit(space, u));
      obs.y.push_back(eval(x));
      obs.x.push_back(to_unit(space, x));
    }
  }
  return eval.result();
}

std::vector<Design> maximize_ucb(const GPModel& gp, const DesignSpace& space, double beta, std::size_t population,
                                 std::size_t generations, std::mt19937_64& rng, const std::vector<Design>& seeds) {
  if (!space.all_categorical()) throw DomainError("maximize_ucb: needs a categorical design space");
  if (population < 2) throw DomainError("maximize_ucb: population must be at least 2");
  const auto& vars = space.variables();
  const std::size_t d = space.dim();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto random_design = [&] {
    Design x(d);
    for (std::size_t i = 0; i < d; ++i)
      x[i] = static_cast<double>(std::uniform_int_distribution<int>(0, vars[i].categories - 1)(rng));
    return x;
  };

  std::vector<Design> pop;
  std::set<Design> seen;
  for (const Design& s : seeds) {
    if (pop.size() == population) break;
    if (seen.insert(s).second) pop.push_back(s);
  }
  for (std::size_t tries = 0; pop.size() < population && tries < 100 * population; ++tries) {
    Design x = random_design();
    if (seen.insert(x).second) pop.push_back(std::move(x));
  }
  std::vector<double> fit = ucb(gp, pop, beta);

  auto sort_pop = [&] {
    std::vector<std::size_t> idx(pop.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return fit[a] > fit[b]; });
    std::vector<Design> p;
    std::vector<double> f;
    for (std::size_t k = 0; k < std::min(population, idx.size()); ++k) {
      p.push_back(std::move(pop[idx[k]]));
      f.push_back(fit[idx[k]]);
    }
    pop = std::move(p);
    fit = std::move(f);
  };
  sort_pop();

  const double rate = 1.0 / static_cast<double>(d);
  std::size_t stale = 0;
  for (std::size_t g = 0; g < generations && stale < 20; ++g) {
    std::vector<Design> kids;
    for (std::size_t tries = 0; kids.size() < population && tries < 20 * population; ++tries) {
      auto pick = [&] {
        std::uniform_int_distribution<std::size_t> p(0, pop.size() - 1);
        const std::size_t a = p(rng), b = p(rng);
        return fit[a] >= fit[b] ? a : b;
      };
      Design c = pop[pick()];
      const Design& o = pop[pick()];
      for (std::size_t i = 0; i < d; ++i) {
        if (unif(rng) < 0.5) c[i] = o[i];
        if (unif(rng) < rate) c[i] = static_cast<double>(std::uniform_int_distribution<int>(0, vars[i].categories - 1)(rng));
      }
      if (seen.insert(c).second) kids.push_back(std::move(c));
    }
    if (kids.empty()) break;
    const double before = fit.front();
    const std::vector<double> kf = ucb(gp, kids, beta);
    for (std::size_t k = 0; k < kids.size(); ++k) {
      pop.push_back(std::move(kids[k]));
      fit.push_back(kf[k]);
    }
    sort_pop();
    stale = fit.front() > before ? 0 : stale + 1;
  }
  return pop;
}

SearchResult bo_categorical_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                                   const SearchBudget& budget, const BoConfig& cfg) {
  if (!space.all_categorical()) throw DomainError("bo_categorical_search: needs a categorical design space");
  Evaluator eval(scorer, budget);
  std::mt19937_64 rng(budget.seed);
  Observations obs = warm_start(eval, space, dataset, cfg.warm_start, rng);
  std::set<Design> evaluated(obs.x.begin(), obs.x.end());
  const std::vector<double> grid = {0.5, 1.0, 2.0, 4.0, 8.0};

  while (eval.remaining() > 0) {
    const Surrogate sur = fit_surrogate(obs, KernelKind::Overlap, grid, cfg.noise, cfg.max_gp_points);
    std::vector<Design> seeds;
    for (std::size_t i : Seeds{obs.x, obs.y}.ranked()) {
      if (seeds.size() == cfg.ea_population / 2) break;
      seeds.push_back(obs.x[i]);
    }
    const auto cands = maximize_ucb(sur.gp, space, cfg.ucb_beta, cfg.ea_population, cfg.ea_generations, rng, seeds);
    const std::size_t q = std::min(cfg.q, eval.remaining());
    std::vector<Design> batch;
    for (const Design& c : cands) {
      if (batch.size() == q) break;
      if (!evaluated.count(c)) batch.push_back(c);
    }
    // Top up with unseen one-gene neighbours of the best proposals, then
    // uniform draws.
    const auto& vars = space.variables();
    for (std::size_t tries = 0; batch.size() < q && tries < 50 * q; ++tries) {
      Design x = cands[tries % cands.size()];
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, x.size() - 1)(rng);
      x[i] = static_cast<double>(std::uniform_int_distribution<int>(0, vars[i].categories - 1)(rng));
      if (!evaluated.count(x) && std::find(batch.begin(), batch.end(), x) == batch.end()) batch.push_back(std::move(x));
    }
    for (std::size_t tries = 0; batch.size() < q; ++tries) {
      Design x(space.dim());
      for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = static_cast<double>(std::uniform_int_distribution<int>(0, vars[i].categories - 1)(rng));
      // Small spaces may be exhausted; then repeats are allowed.
      if (tries >= 100 * q || (!evaluated.count(x) && std::find(batch.begin(), batch.end(), x) == batch.end())) {
        batch.push_back(std::move(x));
      }
    }
    for (const Design& x : batch) {
      obs.y.push_back(eval(x));
      obs.x.push_back(x);
      evaluated.insert(x);
    }
  }
  return eval.result();
}

}  // namespace uniso::search
