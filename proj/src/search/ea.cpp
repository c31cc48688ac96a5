#include <algorithm>
#include <numeric>

#include "uniso/error.hpp"
#include "uniso/search.hpp"

namespace uniso::search {

namespace {

struct Member {
  Design unit;  // continuous genes in [0,1], categorical genes as ids
  double score;
  std::size_t order;
};

std::size_t tournament(const std::vector<Member>& pop, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, pop.size() - 1);
  const std::size_t a = pick(rng), b = pick(rng);
  return pop[a].score >= pop[b].score ? a : b;
}

}  // namespace

SearchResult ea_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                       const SearchBudget& budget, const EaConfig& cfg, std::function<Design(const Design&)> canonical) {
  budget.validate();
  if (cfg.population < 2) throw DomainError("ea_search: population must be at least 2");
  if (budget.max_evals < cfg.population) {
    throw DomainError("ea_search: budget " + std::to_string(budget.max_evals) + " is below one generation of " +
                      std::to_string(cfg.population));
  }
  if (dataset.size() < cfg.population) {
    throw DomainError("ea_search: dataset has " + std::to_string(dataset.size()) + " designs, need " +
                      std::to_string(cfg.population));
  }
  Evaluator eval(scorer, budget, std::move(canonical));
  std::mt19937_64 rng(budget.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto& vars = space.variables();
  const std::size_t d = space.dim();
  const double rate = 1.0 / static_cast<double>(d);

  std::vector<Member> pop;
  std::size_t order = 0;
  const auto ranked = dataset.ranked();
  for (std::size_t k = 0; k < cfg.population; ++k) {
    const Design x = eval.canonical(dataset.designs[ranked[k]]);
    pop.push_back({to_unit(space, x), eval(x), order++});
  }

  while (eval.remaining() > 0) {
    const std::size_t n_children = std::min(cfg.population, eval.remaining());
    std::vector<Design> children;
    while (children.size() < n_children) {
      Design a = pop[tournament(pop, rng)].unit;
      Design b = pop[tournament(pop, rng)].unit;
      if (unif(rng) < cfg.crossover_prob) {
        for (std::size_t i = 0; i < d; ++i) {
          if (vars[i].kind == text::VarKind::Continuous) {
            if (unif(rng) < 0.5) {
              const auto [c1, c2] = sbx_children(a[i], b[i], sbx_beta(unif(rng), cfg.eta_c));
              a[i] = std::clamp(c1, 0.0, 1.0);
              b[i] = std::clamp(c2, 0.0, 1.0);
            }
          } else if (unif(rng) < 0.5) {
            std::swap(a[i], b[i]);
          }
        }
      }
      for (Design* c : {&a, &b}) {
        for (std::size_t i = 0; i < d; ++i) {
          if (unif(rng) >= rate) continue;
          if (vars[i].kind == text::VarKind::Continuous) {
            (*c)[i] = polynomial_mutation((*c)[i], 0.0, 1.0, cfg.eta_m, rng);
          } else {
            (*c)[i] = static_cast<double>(std::uniform_int_distribution<int>(0, vars[i].categories - 1)(rng));
          }
        }
      }
      children.push_back(std::move(a));
      if (children.size() < n_children) children.push_back(std::move(b));
    }
    for (auto& c : children) {
      const Design x = eval.canonical(from_unit(space, c));
      pop.push_back({to_unit(space, x), eval(x), order++});
    }
    std::stable_sort(pop.begin(), pop.end(), [](const Member& l, const Member& r) {
      return l.score != r.score ? l.score > r.score : l.order < r.order;
    });
    pop.resize(cfg.population);
  }
  return eval.result();
}

}  // namespace uniso::search
