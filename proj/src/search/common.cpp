#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>

#include "json.hpp"
#include "uniso/error.hpp"
#include "uniso/search.hpp"

namespace uniso::search {

void SearchBudget::validate() const {
  if (max_evals == 0) throw DomainError("search budget: max_evals must be positive");
  if (final_count == 0 || final_count > max_evals) {
    throw DomainError("search budget: final count " + std::to_string(final_count) + " exceeds max evaluations " +
                      std::to_string(max_evals));
  }
}

std::vector<std::size_t> Seeds::ranked() const {
  if (scores.size() != designs.size()) throw ShapeError("seeds: designs and scores differ in length");
  std::vector<std::size_t> idx(designs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

Evaluator::Evaluator(Scorer scorer, const SearchBudget& budget, std::function<Design(const Design&)> canonical)
    : scorer_(std::move(scorer)), budget_(budget), canonical_(std::move(canonical)) {
  budget_.validate();
  log_.reserve(budget_.max_evals);
}

double Evaluator::best() const {
  if (incumbent_.empty()) throw Error("search: no evaluations yet");
  return incumbent_.back();
}

double Evaluator::operator()(const Design& x) {
  if (remaining() == 0) throw Error("search: evaluation budget of " + std::to_string(budget_.max_evals) + " spent");
  Candidate c;
  c.design = canonical(x);
  c.model_score = scorer_(c.design);
  if (!std::isfinite(c.model_score)) throw NonFiniteError("search: scorer returned a non-finite value");
  c.eval_index = log_.size();
  incumbent_.push_back(incumbent_.empty() ? c.model_score : std::max(incumbent_.back(), c.model_score));
  log_.push_back(std::move(c));
  return log_.back().model_score;
}

SearchResult Evaluator::result() const {
  std::vector<std::size_t> order(log_.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return log_[a].model_score > log_[b].model_score; });
  SearchResult r;
  r.evaluations = log_.size();
  r.incumbent = incumbent_;
  std::set<Design> seen;
  for (std::size_t i : order) {
    if (r.candidates.size() == budget_.final_count) break;
    if (!seen.insert(log_[i].design).second) continue;
    Candidate c = log_[i];
    c.id = r.candidates.size();
    r.candidates.push_back(std::move(c));
  }
  return r;
}

void write_jsonl(std::ostream& os, const SearchResult& r) {
  for (const auto& c : r.candidates) {
    nlohmann::json j{{"id", c.id}, {"design", c.design}, {"model_score", c.model_score}, {"eval_index", c.eval_index}};
    os << j.dump() << '\n';
  }
}

SearchResult read_jsonl(std::istream& is) {
  SearchResult r;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Candidate c;
      c.id = j.at("id").get<std::size_t>();
      c.design = j.at("design").get<Design>();
      c.model_score = j.at("model_score").get<double>();
      c.eval_index = j.at("eval_index").get<std::size_t>();
      r.evaluations = std::max(r.evaluations, c.eval_index + 1);
      r.candidates.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("search result line " + std::to_string(n) + ": " + e.what());
    }
  }
  return r;
}

std::pair<double, double> sbx_children(double a, double b, double beta) {
  return {0.5 * ((1.0 + beta) * a + (1.0 - beta) * b), 0.5 * ((1.0 - beta) * a + (1.0 + beta) * b)};
}

double sbx_beta(double u, double eta) {
  if (u <= 0.5) return std::pow(2.0 * u, 1.0 / (eta + 1.0));
  return std::pow(1.0 / (2.0 * (1.0 - u)), 1.0 / (eta + 1.0));
}

double polynomial_mutation(double x, double lo, double hi, double eta, std::mt19937_64& rng) {
  const double span = hi - lo;
  const double d1 = (x - lo) / span, d2 = (hi - x) / span;
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const double p = 1.0 / (eta + 1.0);
  double dq;
  if (u < 0.5) {
    const double v = 2.0 * u + (1.0 - 2.0 * u) * std::pow(1.0 - d1, eta + 1.0);
    dq = std::pow(v, p) - 1.0;
  } else {
    const double v = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * std::pow(1.0 - d2, eta + 1.0);
    dq = 1.0 - std::pow(v, p);
  }
  return std::clamp(x + dq * span, lo, hi);
}

Design to_unit(const DesignSpace& space, const Design& x) {
  Design u(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& v = space.variables().at(i);
    u[i] = v.kind == text::VarKind::Continuous ? (x[i] - v.lo) / (v.hi - v.lo) : x[i];
  }
  return u;
}

Design from_unit(const DesignSpace& space, const Design& u) {
  Design x(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    const auto& v = space.variables().at(i);
    x[i] = v.kind == text::VarKind::Continuous ? v.lo + std::clamp(u[i], 0.0, 1.0) * (v.hi - v.lo) : u[i];
  }
  return x;
}

}  // namespace uniso::search
