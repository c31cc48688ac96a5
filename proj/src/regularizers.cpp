#include "uniso/regularizers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "uniso/error.hpp"

namespace uniso::reg {
namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RMat>;
using MMap = Eigen::Map<RMat>;

const RMat& meta_projection() {
  static const RMat proj = [] {
    std::mt19937_64 rng(0);
    std::normal_distribution<double> normal(0.0, 1.0);
    RMat m(kMetaBuckets, kMetaDim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  }();
  return proj;
}

std::uint32_t trigram_bucket(unsigned char a, unsigned char b, unsigned char c) {
  std::uint32_t h = 2166136261u;
  for (unsigned char x : {a, b, c}) {
    h ^= x;
    h *= 16777619u;
  }
  return h % kMetaBuckets;
}

RMat unit_rows(const RMat& x, const char* op) {
  RMat u(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (!(n > 0.0)) throw DomainError(std::string(op) + ": zero-norm row " + std::to_string(r));
    u.row(r) = x.row(r) / n;
  }
  return u;
}

// Backward of S = U U^T with U the row-normalised x, given dL/dS = g.
RMat cosine_backward(const RMat& x, const RMat& u, const RMat& g) {
  RMat du = (g + g.transpose()) * u;
  RMat dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    dx.row(r) = (du.row(r) - u.row(r).dot(du.row(r)) * u.row(r)) / n;
  }
  return dx;
}

}  // namespace

std::vector<double> metadata_embed(const text::Metadata& m) {
  m.validate();
  const std::string s = "name: " + m.name + "; description: " + m.description + "; objective: " + m.objective;
  Eigen::RowVectorXd counts = Eigen::RowVectorXd::Zero(kMetaBuckets);
  for (std::size_t i = 0; i + 2 < s.size(); ++i) {
    counts[trigram_bucket(static_cast<unsigned char>(s[i]), static_cast<unsigned char>(s[i + 1]),
                          static_cast<unsigned char>(s[i + 2]))] += 1.0;
  }
  Eigen::RowVectorXd e = counts * meta_projection();
  e /= e.norm();
  return std::vector<double>(e.data(), e.data() + e.size());
}

ad::Tensor scaled_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> u(-a, a);
  ad::Tensor t({rows, cols});
  for (double& v : t.storage()) v = u(rng);
  return t;
}

void ProjectionHead::init(ad::ParamStore& store, std::mt19937_64& rng) const {
  store.add(prefix + ".w1", scaled_uniform(in, hidden, rng));
  store.add(prefix + ".b1", ad::Tensor({1, hidden}));
  store.add(prefix + ".w2", scaled_uniform(hidden, out, rng));
  store.add(prefix + ".b2", ad::Tensor({1, out}));
}

ad::Var ProjectionHead::apply(ad::Tape& t, const ad::ParamStore& store, ad::Var x) const {
  if (t.value(x).cols() != in) {
    throw ShapeError("projection head '" + prefix + "': input width " + std::to_string(t.value(x).cols()) +
                     " but head expects " + std::to_string(in));
  }
  ad::Var h = ad::relu(t, ad::linear(t, x, t.param(store, prefix + ".w1"), t.param(store, prefix + ".b1")));
  return ad::linear(t, h, t.param(store, prefix + ".w2"), t.param(store, prefix + ".b2"));
}

ad::Var contrastive_loss(ad::Tape& t, ad::Var zx, ad::Var zm, const ContrastiveConfig& cfg) {
  const ad::Tensor& X = t.value(zx);
  const ad::Tensor& M = t.value(zm);
  if (X.rank() != 2 || !X.same_shape(M)) {
    throw ShapeError("contrastive_loss: zx " + ad::shape_string(X.shape()) + " vs zm " + ad::shape_string(M.shape()));
  }
  if (!(cfg.temperature > 0.0)) throw DomainError("contrastive_loss: temperature must be positive");
  const std::size_t n = X.rows();
  if (n < 2) throw DomainError("contrastive_loss: need at least two rows");
  const RMat x = CMap(X.data(), n, X.cols());
  const RMat m = CMap(M.data(), n, M.cols());
  const RMat ux = unit_rows(x, "contrastive_loss");
  const RMat um = unit_rows(m, "contrastive_loss");
  const RMat sx = ux * ux.transpose();
  const RMat sm = um * um.transpose();

  double mn = sm(0, 1), mx = sm(0, 1);
  std::size_t mn_i = 0, mn_j = 1, mx_i = 0, mx_j = 1;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (sm(i, j) < mn) mn = sm(i, j), mn_i = i, mn_j = j;
      if (sm(i, j) > mx) mx = sm(i, j), mx_i = i, mx_j = j;
    }
  }
  const double range = mx - mn;
  if (range < cfg.degenerate_threshold) {
    return t.record("contrastive_loss", ad::Tensor::scalar(0.0), {zx, zm}, [](ad::Tape&, std::size_t) {});
  }

  const double tau = cfg.temperature;
  // Row-wise log-sum-exp over k != i, plus the softmax it induces.
  RMat p = RMat::Zero(n, n);
  std::vector<double> lse(n);
  for (std::size_t i = 0; i < n; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) top = std::max(top, sx(i, k) / tau);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) s += std::exp(sx(i, k) / tau - top);
    }
    lse[i] = top + std::log(s);
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) p(i, k) = std::exp(sx(i, k) / tau - lse[i]);
    }
  }

  const double c = -1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
  double loss = 0.0;
  RMat shat = RMat::Zero(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      shat(i, j) = (sm(i, j) - mn) / range;
      loss += shat(i, j) * (sx(i, j) / tau - lse[i]);
    }
  }
  loss *= c;

  return t.record(
      "contrastive_loss", ad::Tensor::scalar(loss), {zx, zm},
      [=](ad::Tape& t, std::size_t self) {
        const double g = t.grad(ad::Var{self})->item();
        if (t.requires_grad(zx)) {
          RMat gsx = RMat::Zero(n, n);
          for (std::size_t i = 0; i < n; ++i) {
            double w = 0.0;
            for (std::size_t j = i + 1; j < n; ++j) {
              gsx(i, j) += c * shat(i, j) / tau;
              w += shat(i, j);
            }
            for (std::size_t k = 0; k < n; ++k) {
              if (k != i) gsx(i, k) -= c * w * p(i, k) / tau;
            }
          }
          gsx *= g;
          RMat dx = cosine_backward(x, ux, gsx);
          MMap(t.grad_buffer(zx.id).data(), n, x.cols()) += dx;
        }
        if (t.requires_grad(zm)) {
          RMat gsm = RMat::Zero(n, n);
          double g_min = 0.0, g_max = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
              const double a = c * (sx(i, j) / tau - lse[i]);
              gsm(i, j) += a / range;
              g_min += a * (sm(i, j) - mx) / (range * range);
              g_max -= a * (sm(i, j) - mn) / (range * range);
            }
          }
          gsm(mn_i, mn_j) += g_min;
          gsm(mx_i, mx_j) += g_max;
          gsm *= g;
          RMat dm = cosine_backward(m, um, gsm);
          MMap(t.grad_buffer(zm.id).data(), n, m.cols()) += dm;
        }
      });
}

double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> pairwise_ratios(const ad::Tensor& z, const std::vector<double>& y) {
  const std::size_t n = z.rows(), d = z.cols();
  if (y.size() != n) throw ShapeError("pairwise_ratios: score count does not match embeddings");
  std::vector<double> out;
  out.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < d; ++k) ss += (z.at(i, k) - z.at(j, k)) * (z.at(i, k) - z.at(j, k));
      const double dist = std::sqrt(ss);
      const double dy = std::abs(y[i] - y[j]);
      if (dist <= 1e-12) {
        if (dy > 0.0) {
          throw DomainError("lipschitz: coincident embeddings with distinct scores at pair (" + std::to_string(i) + ", " +
                            std::to_string(j) + ")");
        }
        out.push_back(0.0);
      } else {
        out.push_back(dy / dist);
      }
    }
  }
  return out;
}

ad::Var lipschitz_loss(ad::Tape& t, const std::vector<LipschitzGroup>& groups, double total_size) {
  if (groups.empty()) throw DomainError("lipschitz_loss: no task groups");
  if (total_size <= 0.0) {
    total_size = 0.0;
    for (const auto& g : groups) total_size += g.dataset_size;
  }
  struct GroupGrad {
    ad::Var z;
    RMat dz;
  };
  double total = 0.0;
  std::vector<GroupGrad> grads;
  std::vector<ad::Var> parents;
  for (const auto& grp : groups) {
    const ad::Tensor& Z = t.value(grp.z);
    const std::size_t n = Z.rows(), d = Z.cols();
    if (n < 2) throw DomainError("lipschitz_loss: each task group needs at least two rows");
    if (grp.y.size() != n) throw ShapeError("lipschitz_loss: score count does not match embeddings");
    if (!(grp.dataset_size > 0.0)) throw DomainError("lipschitz_loss: task dataset size must be positive");
    const double weight = total_size / grp.dataset_size;
    const std::vector<double> r = pairwise_ratios(Z, grp.y);

    // Median and the pair(s) it is read from.
    std::vector<std::size_t> order(r.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r[a] < r[b]; });
    const std::size_t m = r.size();
    double lip;
    std::vector<std::pair<std::size_t, double>> med_share;
    if (m % 2) {
      lip = r[order[m / 2]];
      med_share = {{order[m / 2], 1.0}};
    } else {
      lip = 0.5 * (r[order[m / 2 - 1]] + r[order[m / 2]]);
      med_share = {{order[m / 2 - 1], 0.5}, {order[m / 2], 0.5}};
    }
    double loss = 0.0;
    std::vector<double> dr(m, 0.0);
    std::size_t above = 0;
    for (std::size_t p = 0; p < m; ++p) {
      if (r[p] > lip) {
        loss += r[p] - lip;
        dr[p] += 1.0;
        ++above;
      }
    }
    for (auto [p, share] : med_share) dr[p] -= static_cast<double>(above) * share;
    total += weight * loss;

    RMat dz = RMat::Zero(n, d);
    std::size_t p = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j, ++p) {
        if (dr[p] == 0.0 || r[p] == 0.0) continue;
        double ss = 0.0;
        for (std::size_t k = 0; k < d; ++k) ss += (Z.at(i, k) - Z.at(j, k)) * (Z.at(i, k) - Z.at(j, k));
        // dr/dz_i = -r (z_i - z_j) / ||z_i - z_j||^2
        const double coef = -weight * dr[p] * r[p] / ss;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = Z.at(i, k) - Z.at(j, k);
          dz(i, k) += coef * diff;
          dz(j, k) -= coef * diff;
        }
      }
    }
    grads.push_back({grp.z, std::move(dz)});
    parents.push_back(grp.z);
  }
  return t.record("lipschitz_loss", ad::Tensor::scalar(total), parents,
                  [grads = std::move(grads)](ad::Tape& t, std::size_t self) {
                    const double g = t.grad(ad::Var{self})->item();
                    for (const auto& gg : grads) {
                      if (!t.requires_grad(gg.z)) continue;
                      ad::Tensor& buf = t.grad_buffer(gg.z.id);
                      MMap(buf.data(), gg.dz.rows(), gg.dz.cols()) += g * gg.dz;
                    }
                  });
}

BalanceCoefficients balance_coefficients(double l_main, double l_con, double l_lip, const BalanceConfig& cfg) {
  if (!(cfg.delta > 0.0)) throw DomainError("balance: delta must be positive");
  if (l_main < 0.0 || l_con < 0.0 || l_lip < 0.0) throw DomainError("balance: losses must be non-negative");
  BalanceCoefficients c;
  if (cfg.use_contrastive) c.contrastive = l_main / (l_con + cfg.delta);
  if (cfg.use_lipschitz) c.lipschitz = l_main / (l_lip + cfg.delta);
  return c;
}

ad::GradMap balance_gradients(double l_main, const ad::GradMap& g_main, double l_con, const ad::GradMap& g_con,
                              double l_lip, const ad::GradMap& g_lip, const BalanceConfig& cfg) {
  const BalanceCoefficients c = balance_coefficients(l_main, l_con, l_lip, cfg);
  ad::GradMap out = g_main;
  auto accumulate = [&](const ad::GradMap& src, double coef) {
    if (coef == 0.0) return;
    for (const auto& [name, g] : src) {
      auto it = out.find(name);
      if (it == out.end()) {
        ad::Tensor scaled = g;
        scaled.scale_inplace(coef);
        out.emplace(name, std::move(scaled));
        continue;
      }
      if (!it->second.same_shape(g)) throw ShapeError("balance: gradient shapes differ for '" + name + "'");
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += coef * g[i];
    }
  };
  for (const auto& [name, g] : g_main) {
    for (const ad::GradMap* other : {&g_con, &g_lip}) {
      auto it = other->find(name);
      if (it != other->end() && !it->second.same_shape(g)) {
        throw ShapeError("balance: gradient shapes differ for '" + name + "'");
      }
    }
  }
  if (cfg.use_contrastive) accumulate(g_con, c.contrastive);
  if (cfg.use_lipschitz) accumulate(g_lip, c.lipschitz);
  return out;
}

}  // namespace uniso::reg
