#include <algorithm>
#include <cmath>
#include <numeric>

#include "uniso/error.hpp"
#include "uniso/search.hpp"

namespace uniso::search {

using Eigen::MatrixXd;
using Eigen::VectorXd;

SearchResult cmaes_search(const Scorer& scorer, const DesignSpace& space, const Seeds& dataset,
                          const SearchBudget& budget, const CmaesConfig& cfg,
                          std::function<Design(const Design&)> canonical) {
  if (!space.all_continuous()) throw DomainError("cmaes_search: CMA-ES needs a continuous design space");
  budget.validate();
  Evaluator eval(scorer, budget, std::move(canonical));
  const auto n = static_cast<Eigen::Index>(space.dim());
  const double dn = static_cast<double>(n);

  const std::size_t lambda = 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(dn)));
  const std::size_t mu = lambda / 2;
  VectorXd w(static_cast<Eigen::Index>(mu));
  for (std::size_t i = 0; i < mu; ++i) w[static_cast<Eigen::Index>(i)] = std::log((lambda + 1) / 2.0) - std::log(i + 1.0);
  w /= w.sum();
  const double mueff = 1.0 / w.squaredNorm();
  const double cc = (4.0 + mueff / dn) / (dn + 4.0 + 2.0 * mueff / dn);
  const double cs = (mueff + 2.0) / (dn + mueff + 5.0);
  const double c1 = 2.0 / ((dn + 1.3) * (dn + 1.3) + mueff);
  const double cmu = std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((dn + 2.0) * (dn + 2.0) + mueff));
  const double damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (dn + 1.0)) - 1.0) + cs;
  const double chi_n = std::sqrt(dn) * (1.0 - 1.0 / (4.0 * dn) + 1.0 / (21.0 * dn * dn));

  VectorXd mean = VectorXd::Constant(n, 0.5);
  if (dataset.size() > 0) {
    const Design u = to_unit(space, dataset.designs[dataset.ranked().front()]);
    for (Eigen::Index i = 0; i < n; ++i) mean[i] = u[static_cast<std::size_t>(i)];
  }
  double sigma = cfg.sigma0;
  MatrixXd C = MatrixXd::Identity(n, n), B = C;
  VectorXd D = VectorXd::Ones(n), pc = VectorXd::Zero(n), ps = VectorXd::Zero(n);
  std::mt19937_64 rng(budget.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  for (std::size_t iter = 0; eval.remaining() > 0; ++iter) {
    if (cfg.max_iterations && iter >= cfg.max_iterations) break;
    const std::size_t m = std::min(lambda, eval.remaining());
    std::vector<VectorXd> xs(m);
    std::vector<double> f(m);
    for (std::size_t k = 0; k < m; ++k) {
      VectorXd z(n);
      for (Eigen::Index i = 0; i < n; ++i) z[i] = normal(rng);
      VectorXd x = mean + sigma * (B * D.asDiagonal() * z);
      x = x.cwiseMax(0.0).cwiseMin(1.0);
      Design u(x.data(), x.data() + n);
      const Design design = eval.canonical(from_unit(space, u));
      f[k] = eval(design);
      const Design back = to_unit(space, design);
      for (Eigen::Index i = 0; i < n; ++i) x[i] = back[static_cast<std::size_t>(i)];
      xs[k] = x;
    }
    if (m < lambda) break;

    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
    const VectorXd old = mean;
    mean.setZero();
    for (std::size_t i = 0; i < mu; ++i) mean += w[static_cast<Eigen::Index>(i)] * xs[idx[i]];

    const VectorXd step = (mean - old) / sigma;
    const MatrixXd inv_sqrt = B * D.cwiseInverse().asDiagonal() * B.transpose();
    ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * (inv_sqrt * step);
    const double gen = static_cast<double>(eval.calls()) / static_cast<double>(lambda);
    const bool hsig =
        ps.norm() / std::sqrt(1.0 - std::pow(1.0 - cs, 2.0 * (gen + 1.0))) / chi_n < 1.4 + 2.0 / (dn + 1.0);
    pc = (1.0 - cc) * pc + (hsig ? std::sqrt(cc * (2.0 - cc) * mueff) : 0.0) * step;

    MatrixXd rank_mu = MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < mu; ++i) {
      const VectorXd y = (xs[idx[i]] - old) / sigma;
      rank_mu += w[static_cast<Eigen::Index>(i)] * y * y.transpose();
    }
    const double dh = hsig ? 0.0 : cc * (2.0 - cc);
    C = (1.0 - c1 - cmu) * C + c1 * (pc * pc.transpose() + dh * C) + cmu * rank_mu;
    C = (0.5 * (C + C.transpose())).eval();
    sigma *= std::exp((cs / damps) * (ps.norm() / chi_n - 1.0));
    sigma = std::min(sigma, 1.0);

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(C);
    VectorXd ev = es.eigenvalues().cwiseMax(1e-20);
    if (ev.maxCoeff() > 1e14 * ev.minCoeff()) {
      ev = ev.cwiseMax(ev.maxCoeff() * 1e-14);
      C = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
      C = (0.5 * (C + C.transpose())).eval();
    }
    B = es.eigenvectors();
    D = ev.cwiseSqrt();
    if (cfg.on_covariance) cfg.on_covariance(C);
  }
  return eval.result();
}

}  // namespace uniso::search
