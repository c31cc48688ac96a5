#include <algorithm>
#include <cmath>

#include "uniso/error.hpp"
#include "uniso/search.hpp"

namespace uniso::search {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double scale_at(const std::vector<double>& s, std::size_t i) { return s.size() == 1 ? s[0] : s[i]; }

void check_arity(const Design& a, const Design& b, const std::vector<double>& s, const char* who) {
  if (a.size() != b.size() || (s.size() != 1 && s.size() != a.size())) {
    throw ShapeError(std::string(who) + ": arity " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                     " with " + std::to_string(s.size()) + " scales");
  }
}

// Kernel without argument checks, for the inner loops.
double raw_kernel(KernelKind kind, const double* a, const double* b, std::size_t d, const std::vector<double>& s) {
  double acc = 0.0;
  if (kind == KernelKind::SquaredExponential) {
    for (std::size_t i = 0; i < d; ++i) {
      const double z = (a[i] - b[i]) / scale_at(s, i);
      acc += z * z;
    }
    return std::exp(-0.5 * acc);
  }
  for (std::size_t i = 0; i < d; ++i)
    if (a[i] == b[i]) acc += scale_at(s, i);
  return std::exp(acc / static_cast<double>(d));
}

void check_queries(const GPModel& gp, const std::vector<Design>& q) {
  const std::size_t d = gp.inputs.front().size();
  for (const Design& x : q) {
    if (x.size() != d) throw ShapeError("gp: query arity " + std::to_string(x.size()) + ", expected " + std::to_string(d));
  }
}

MatrixXd cross_kernel(const GPModel& gp, const std::vector<Design>& q) {
  check_queries(gp, q);
  const std::size_t d = gp.inputs.front().size();
  MatrixXd k(static_cast<Eigen::Index>(gp.inputs.size()), static_cast<Eigen::Index>(q.size()));
  if (gp.kind == KernelKind::Overlap && gp.scales.size() == 1) {
    // Uniform scales: the kernel depends only on the match count.
    std::vector<double> table(d + 1);
    for (std::size_t m = 0; m <= d; ++m) table[m] = std::exp(gp.scales[0] * static_cast<double>(m) / static_cast<double>(d));
    for (std::size_t j = 0; j < q.size(); ++j) {
      const double* b = q[j].data();
      for (std::size_t i = 0; i < gp.inputs.size(); ++i) {
        const double* a = gp.inputs[i].data();
        std::size_t m = 0;
        for (std::size_t t = 0; t < d; ++t) m += a[t] == b[t];
        k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = table[m];
      }
    }
    return k;
  }
  for (std::size_t j = 0; j < q.size(); ++j)
    for (std::size_t i = 0; i < gp.inputs.size(); ++i)
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          raw_kernel(gp.kind, gp.inputs[i].data(), q[j].data(), d, gp.scales);
  return k;
}

}  // namespace

double se_kernel(const Design& a, const Design& b, const std::vector<double>& lengthscales) {
  check_arity(a, b, lengthscales, "se_kernel");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double z = (a[i] - b[i]) / scale_at(lengthscales, i);
    s += z * z;
  }
  return std::exp(-0.5 * s);
}

double overlap_kernel(const Design& a, const Design& b, const std::vector<double>& theta) {
  check_arity(a, b, theta, "overlap_kernel");
  if (a.empty()) throw ShapeError("overlap_kernel: empty designs");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = scale_at(theta, i);
    if (t < 0.0) throw DomainError("overlap_kernel: negative scale");
    if (a[i] == b[i]) s += t;
  }
  return std::exp(s / static_cast<double>(a.size()));
}

double GPModel::kernel(const Design& a, const Design& b) const {
  return kind == KernelKind::SquaredExponential ? se_kernel(a, b, scales) : overlap_kernel(a, b, scales);
}

GPModel gp_fit(KernelKind kind, std::vector<Design> inputs, const std::vector<double>& targets,
               std::vector<double> scales, double noise) {
  if (inputs.empty() || inputs.size() != targets.size()) throw ShapeError("gp_fit: inputs and targets differ");
  if (!(noise > 0.0)) throw DomainError("gp_fit: noise variance must be positive");
  GPModel gp;
  gp.kind = kind;
  gp.inputs = std::move(inputs);
  gp.targets = Eigen::Map<const VectorXd>(targets.data(), static_cast<Eigen::Index>(targets.size()));
  gp.scales = std::move(scales);
  gp.noise = noise;
  const auto n = static_cast<Eigen::Index>(gp.inputs.size());
  const std::size_t d = gp.inputs.front().size();
  (void)gp.kernel(gp.inputs.front(), gp.inputs.front());  // validates scales
  check_queries(gp, gp.inputs);
  MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      K(i, j) = K(j, i) = raw_kernel(kind, gp.inputs[static_cast<std::size_t>(i)].data(),
                                     gp.inputs[static_cast<std::size_t>(j)].data(), d, gp.scales);
    }
  }
  for (double jitter : {0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2}) {
    MatrixXd A = K;
    A.diagonal().array() += noise + jitter;
    Eigen::LLT<MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) continue;
    MatrixXd L = llt.matrixL();
    const double residual = (L * L.transpose() - A).cwiseAbs().maxCoeff() / A.cwiseAbs().maxCoeff();
    if (residual > 1e-8) continue;
    gp.jitter = jitter;
    gp.chol = std::move(L);
    gp.alpha = llt.solve(gp.targets);
    return gp;
  }
  throw DomainError("gp_fit: covariance is not positive definite after maximum jitter");
}

Posterior gp_posterior(const GPModel& gp, const std::vector<Design>& queries) {
  const MatrixXd ks = cross_kernel(gp, queries);
  const MatrixXd v = gp.chol.triangularView<Eigen::Lower>().solve(ks);
  Posterior p;
  p.mean.resize(queries.size());
  p.variance.resize(queries.size());
  for (std::size_t j = 0; j < queries.size(); ++j) {
    const auto c = static_cast<Eigen::Index>(j);
    p.mean[j] = ks.col(c).dot(gp.alpha);
    const double prior = raw_kernel(gp.kind, queries[j].data(), queries[j].data(), queries[j].size(), gp.scales);
    p.variance[j] = std::max(0.0, prior - v.col(c).squaredNorm());
  }
  return p;
}

JointPosterior gp_joint(const GPModel& gp, const std::vector<Design>& queries) {
  const MatrixXd ks = cross_kernel(gp, queries);
  const MatrixXd v = gp.chol.triangularView<Eigen::Lower>().solve(ks);
  const auto q = static_cast<Eigen::Index>(queries.size());
  JointPosterior j;
  j.mean = ks.transpose() * gp.alpha;
  j.cov.resize(q, q);
  for (Eigen::Index a = 0; a < q; ++a)
    for (Eigen::Index b = 0; b <= a; ++b)
      j.cov(a, b) = j.cov(b, a) = raw_kernel(gp.kind, queries[static_cast<std::size_t>(a)].data(),
                                             queries[static_cast<std::size_t>(b)].data(), queries.front().size(),
                                             gp.scales);
  j.cov -= v.transpose() * v;
  j.cov = (0.5 * (j.cov + j.cov.transpose())).eval();
  return j;
}

std::pair<double, double> qei_with_error(const GPModel& gp, const std::vector<Design>& batch, double best,
                                         std::size_t mc_samples, std::uint64_t seed) {
  if (batch.empty()) throw DomainError("qei: empty batch");
  if (mc_samples == 0) throw DomainError("qei: need at least one sample");
  const JointPosterior jp = gp_joint(gp, batch);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(jp.cov);
  const MatrixXd root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto q = static_cast<Eigen::Index>(batch.size());
  VectorXd z(q);
  double sum = 0.0, sq = 0.0;
  for (std::size_t s = 0; s < mc_samples; ++s) {
    for (Eigen::Index i = 0; i < q; ++i) z[i] = normal(rng);
    const double top = (jp.mean + root * z).maxCoeff();
    const double imp = std::max(0.0, top - best);
    sum += imp;
    sq += imp * imp;
  }
  const double n = static_cast<double>(mc_samples);
  const double mean = sum / n;
  const double var = std::max(0.0, sq / n - mean * mean);
  return {mean, std::sqrt(var / n)};
}

double qei_acquisition(const GPModel& gp, const std::vector<Design>& batch, double best, std::size_t mc_samples,
                       std::uint64_t seed) {
  return qei_with_error(gp, batch, best, mc_samples, seed).first;
}

std::vector<double> ucb(const GPModel& gp, const std::vector<Design>& candidates, double beta) {
  const Posterior p = gp_posterior(gp, candidates);
  std::vector<double> out(candidates.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p.mean[i] + beta * std::sqrt(p.variance[i]);
  return out;
}

}  // namespace uniso::search
