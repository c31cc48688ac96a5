#include "uniso/substrate/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "uniso/error.hpp"

namespace uniso::ad {
namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RMat>;
using MMap = Eigen::Map<RMat>;

CMap view(const Tensor& x) { return CMap(x.data(), x.rows(), x.cols()); }
MMap view(Tensor& x) { return MMap(x.data(), x.rows(), x.cols()); }

const Tensor& need2d(const Tape& t, Var v, const char* op) {
  const Tensor& x = t.value(v);
  if (x.rank() != 2) throw ShapeError(std::string("op '") + op + "': expected rank-2 input, got " + shape_string(x.shape()));
  return x;
}

void need_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string("op '") + op + "': shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

const Tensor& upstream(Tape& t, std::size_t self) { return *t.grad(Var{self}); }

template <class F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = need2d(t, a, "matmul");
  const Tensor& B = need2d(t, b, "matmul");
  if (A.cols() != B.rows()) {
    throw ShapeError("op 'matmul': inner dimensions differ " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  Tensor out({A.rows(), B.cols()});
  view(out).noalias() = view(A) * view(B);
  return t.record("matmul", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    if (t.requires_grad(a)) view(t.grad_buffer(a.id)).noalias() += view(g) * view(t.value(b)).transpose();
    if (t.requires_grad(b)) view(t.grad_buffer(b.id)).noalias() += view(t.value(a)).transpose() * view(g);
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& A = need2d(t, a, "matmul_nt");
  const Tensor& B = need2d(t, b, "matmul_nt");
  if (A.cols() != B.cols()) {
    throw ShapeError("op 'matmul_nt': inner dimensions differ " + shape_string(A.shape()) + " x " +
                     shape_string(B.shape()) + "^T");
  }
  Tensor out({A.rows(), B.rows()});
  view(out).noalias() = view(A) * view(B).transpose();
  return t.record("matmul_nt", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    if (t.requires_grad(a)) view(t.grad_buffer(a.id)).noalias() += view(g) * view(t.value(b));
    if (t.requires_grad(b)) view(t.grad_buffer(b.id)).noalias() += view(g).transpose() * view(t.value(a));
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  need_same(A, B, "add");
  Tensor out = A;
  out.add_inplace(B);
  return t.record("add", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    if (t.requires_grad(a)) t.grad_buffer(a.id).add_inplace(g);
    if (t.requires_grad(b)) t.grad_buffer(b.id).add_inplace(g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  need_same(A, B, "sub");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return t.record("sub", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    if (t.requires_grad(a)) t.grad_buffer(a.id).add_inplace(g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  need_same(A, B, "mul");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return t.record("mul", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      const Tensor& B = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      const Tensor& A = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  Tensor out = t.value(a);
  out.scale_inplace(s);
  return t.record("scale", std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_row(Tape& t, Var a, Var row) {
  const Tensor& A = need2d(t, a, "add_row");
  const Tensor& R = need2d(t, row, "add_row");
  if (R.rows() != 1 || R.cols() != A.cols()) {
    throw ShapeError("op 'add_row': row " + shape_string(R.shape()) + " does not broadcast over " +
                     shape_string(A.shape()));
  }
  Tensor out = A;
  view(out).rowwise() += view(R).row(0);
  return t.record("add_row", std::move(out), {a, row}, [a, row](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    if (t.requires_grad(a)) t.grad_buffer(a.id).add_inplace(g);
    if (t.requires_grad(row)) view(t.grad_buffer(row.id)).row(0) += view(g).colwise().sum();
  });
}

Var linear(Tape& t, Var x, Var w, Var b) { return add_row(t, matmul(t, x, w), b); }

namespace {

Var rectify(Tape& t, Var a, const char* name) {
  Tensor out = map_values(t.value(a), [](double v) { return v > 0.0 ? v : 0.0; });
  return t.record(name, std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    const Tensor& A = t.value(a);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (A[i] > 0.0) ga[i] += g[i];
    }
  });
}

}  // namespace

Var relu(Tape& t, Var a) { return rectify(t, a, "relu"); }
Var hinge(Tape& t, Var a) { return rectify(t, a, "hinge"); }

Var exp(Tape& t, Var a) {
  Tensor out = map_values(t.value(a), [](double v) { return std::exp(v); });
  return t.record("exp", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    const Tensor& y = t.value(Var{self});
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var log(Tape& t, Var a) {
  Tensor out = map_values(t.value(a), [](double v) { return std::log(v); });
  return t.record("log", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    const Tensor& A = t.value(a);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / A[i];
  });
}

namespace {

void softmax_row_inplace(double* row, std::size_t n) {
  Eigen::Map<Eigen::ArrayXd> a(row, static_cast<Eigen::Index>(n));
  a = (a - a.maxCoeff()).exp();
  a /= a.sum();
}

}  // namespace

Var softmax_rows(Tape& t, Var a) {
  const Tensor& A = need2d(t, a, "softmax");
  Tensor out = A;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_row_inplace(out.data() + r * out.cols(), out.cols());
  return t.record("softmax", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    const Tensor& y = t.value(Var{self});
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t c = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

Var rms_norm(Tape& t, Var x, Var gain, double eps) {
  const Tensor& X = need2d(t, x, "rms_norm");
  const Tensor& G = need2d(t, gain, "rms_norm");
  if (G.rows() != 1 || G.cols() != X.cols()) {
    throw ShapeError("op 'rms_norm': gain " + shape_string(G.shape()) + " vs input " + shape_string(X.shape()));
  }
  const std::size_t n = X.rows(), c = X.cols();
  Tensor out({n, c});
  Tensor inv_rms({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += X[r * c + j] * X[r * c + j];
    double inv = 1.0 / std::sqrt(ss / static_cast<double>(c) + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = X[r * c + j] * inv * G[j];
  }
  return t.record("rms_norm", std::move(out), {x, gain},
                  [x, gain, inv_rms = std::move(inv_rms)](Tape& t, std::size_t self) {
                    const Tensor& g = upstream(t, self);
                    const Tensor& X = t.value(x);
                    const Tensor& G = t.value(gain);
                    const std::size_t n = X.rows(), c = X.cols();
                    Tensor* gx = t.requires_grad(x) ? &t.grad_buffer(x.id) : nullptr;
                    Tensor* gg = t.requires_grad(gain) ? &t.grad_buffer(gain.id) : nullptr;
                    for (std::size_t r = 0; r < n; ++r) {
                      const double inv = inv_rms[r];
                      double dot = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double xh = X[r * c + j] * inv;
                        const double dxh = g[r * c + j] * G[j];
                        if (gg) (*gg)[j] += g[r * c + j] * xh;
                        dot += dxh * xh;
                      }
                      if (!gx) continue;
                      dot /= static_cast<double>(c);
                      for (std::size_t j = 0; j < c; ++j) {
                        const double xh = X[r * c + j] * inv;
                        const double dxh = g[r * c + j] * G[j];
                        (*gx)[r * c + j] += (dxh - xh * dot) * inv;
                      }
                    }
                  });
}

Var batch_norm(Tape& t, Var x, Var gamma, Var beta, double eps, BatchStats* stats) {
  const Tensor& X = need2d(t, x, "batch_norm");
  const Tensor& Gm = need2d(t, gamma, "batch_norm");
  const Tensor& Bt = need2d(t, beta, "batch_norm");
  const std::size_t n = X.rows(), c = X.cols();
  if (Gm.rows() != 1 || Gm.cols() != c || !Gm.same_shape(Bt)) {
    throw ShapeError("op 'batch_norm': affine parameters do not match input " + shape_string(X.shape()));
  }
  Tensor mean({1, c}), var({1, c});
  for (std::size_t j = 0; j < c; ++j) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += X[r * c + j];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t r = 0; r < n; ++r) v += (X[r * c + j] - m) * (X[r * c + j] - m);
    mean[j] = m;
    var[j] = v / static_cast<double>(n);
  }
  Tensor xhat({n, c}), out({n, c}), inv_std({1, c});
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (X[r * c + j] - mean[j]) * inv_std[j];
      out[r * c + j] = Gm[j] * xhat[r * c + j] + Bt[j];
    }
  }
  if (stats) *stats = BatchStats{mean, var};
  return t.record("batch_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                    const Tensor& g = upstream(t, self);
                    const Tensor& Gm = t.value(gamma);
                    const std::size_t n = xhat.rows(), c = xhat.cols();
                    if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                      for (std::size_t j = 0; j < c; ++j) {
                        double sg = 0.0, sb = 0.0;
                        for (std::size_t r = 0; r < n; ++r) {
                          sg += g[r * c + j] * xhat[r * c + j];
                          sb += g[r * c + j];
                        }
                        if (t.requires_grad(gamma)) t.grad_buffer(gamma.id)[j] += sg;
                        if (t.requires_grad(beta)) t.grad_buffer(beta.id)[j] += sb;
                      }
                    }
                    if (!t.requires_grad(x)) return;
                    Tensor& gx = t.grad_buffer(x.id);
                    const double nn = static_cast<double>(n);
                    for (std::size_t j = 0; j < c; ++j) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t r = 0; r < n; ++r) {
                        const double d = g[r * c + j] * Gm[j];
                        s1 += d;
                        s2 += d * xhat[r * c + j];
                      }
                      for (std::size_t r = 0; r < n; ++r) {
                        const double d = g[r * c + j] * Gm[j];
                        gx[r * c + j] += inv_std[j] / nn * (nn * d - s1 - xhat[r * c + j] * s2);
                      }
                    }
                  });
}

Var batch_norm_inference(Tape& t, Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double eps) {
  const Tensor& X = need2d(t, x, "batch_norm_inference");
  const Tensor& Gm = t.value(gamma);
  const Tensor& Bt = t.value(beta);
  const std::size_t n = X.rows(), c = X.cols();
  if (Gm.size() != c || Bt.size() != c || mean.size() != c || var.size() != c) {
    throw ShapeError("op 'batch_norm_inference': statistics do not match input " + shape_string(X.shape()));
  }
  Tensor out({n, c}), inv_std({1, c});
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = Gm[j] * (X[r * c + j] - mean[j]) * inv_std[j] + Bt[j];
  }
  return t.record("batch_norm_inference", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, mean, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                    const Tensor& g = upstream(t, self);
                    const Tensor& X = t.value(x);
                    const Tensor& Gm = t.value(gamma);
                    const std::size_t n = X.rows(), c = X.cols();
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t j = 0; j < c; ++j) {
                        const double gij = g[r * c + j];
                        const double xh = (X[r * c + j] - mean[j]) * inv_std[j];
                        if (t.requires_grad(gamma)) t.grad_buffer(gamma.id)[j] += gij * xh;
                        if (t.requires_grad(beta)) t.grad_buffer(beta.id)[j] += gij;
                        if (t.requires_grad(x)) t.grad_buffer(x.id)[r * c + j] += gij * Gm[j] * inv_std[j];
                      }
                    }
                  });
}

Var embedding(Tape& t, Var table, std::span<const int> ids) {
  const Tensor& T = need2d(t, table, "embedding");
  const std::size_t v = T.rows(), d = T.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw ShapeError("op 'embedding': id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) +
                       " rows");
    }
    std::copy_n(T.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return t.record("embedding", std::move(out), {table}, [table, idv = std::move(idv)](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    Tensor& gt = t.grad_buffer(table.id);
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
      const double* src = g.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var mean_rows(Tape& t, Var a) {
  const Tensor& A = need2d(t, a, "mean_rows");
  if (A.rows() == 0) throw ShapeError("op 'mean_rows': empty input");
  Tensor out({1, A.cols()});
  view(out).row(0) = view(A).colwise().mean();
  return t.record("mean_rows", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    Tensor& ga = t.grad_buffer(a.id);
    const double inv = 1.0 / static_cast<double>(ga.rows());
    view(ga).rowwise() += view(g).row(0) * inv;
  });
}

Var sum_all(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  double s = 0.0;
  for (double v : A.values()) s += v;
  return t.record("sum_all", Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
    const double g = upstream(t, self)[0];
    Tensor& ga = t.grad_buffer(a.id);
    for (double& v : ga.storage()) v += g;
  });
}

Var mean_all(Tape& t, Var a) {
  const std::size_t n = t.value(a).size();
  if (n == 0) throw ShapeError("op 'mean_all': empty input");
  return scale(t, sum_all(t, a), 1.0 / static_cast<double>(n));
}

Var l2_norm_rows(Tape& t, Var a) {
  const Tensor& A = need2d(t, a, "l2_norm");
  const std::size_t n = A.rows();
  Tensor out({n, 1});
  for (std::size_t r = 0; r < n; ++r) out[r] = view(A).row(r).norm();
  return t.record("l2_norm", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    const Tensor& A = t.value(a);
    const Tensor& y = t.value(Var{self});
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t c = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r) {
      if (y[r] == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r] * A[r * c + j] / y[r];
    }
  });
}

Var cosine_similarity_rows(Tape& t, Var a, Var b) {
  const Tensor& A = need2d(t, a, "cosine_similarity");
  const Tensor& B = need2d(t, b, "cosine_similarity");
  need_same(A, B, "cosine_similarity");
  const std::size_t n = A.rows();
  Tensor out({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    const double na = view(A).row(r).norm(), nb = view(B).row(r).norm();
    if (na == 0.0 || nb == 0.0) throw DomainError("op 'cosine_similarity': zero-norm row " + std::to_string(r));
    out[r] = view(A).row(r).dot(view(B).row(r)) / (na * nb);
  }
  return t.record("cosine_similarity", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    const Tensor& y = t.value(Var{self});
    for (std::size_t r = 0; r < A.rows(); ++r) {
      const double na = view(A).row(r).norm(), nb = view(B).row(r).norm();
      if (t.requires_grad(a)) {
        view(t.grad_buffer(a.id)).row(r) +=
            g[r] * (view(B).row(r) / (na * nb) - y[r] * view(A).row(r) / (na * na));
      }
      if (t.requires_grad(b)) {
        view(t.grad_buffer(b.id)).row(r) +=
            g[r] * (view(A).row(r) / (na * nb) - y[r] * view(B).row(r) / (nb * nb));
      }
    }
  });
}

Var cosine_matrix(Tape& t, Var a) {
  const Tensor& A = need2d(t, a, "cosine_matrix");
  const std::size_t n = A.rows(), c = A.cols();
  Tensor unit({n, c}), norms({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    norms[r] = view(A).row(r).norm();
    if (norms[r] < 1e-300) throw DomainError("op 'cosine_matrix': zero-norm row " + std::to_string(r));
    view(unit).row(r) = view(A).row(r) / norms[r];
  }
  Tensor out({n, n});
  view(out).noalias() = view(unit) * view(unit).transpose();
  return t.record("cosine_matrix", std::move(out), {a},
                  [a, unit = std::move(unit), norms = std::move(norms)](Tape& t, std::size_t self) {
                    const Tensor& g = upstream(t, self);
                    RMat gs = view(g) + view(g).transpose();
                    RMat du = gs * view(unit);
                    Tensor& ga = t.grad_buffer(a.id);
                    for (std::size_t r = 0; r < unit.rows(); ++r) {
                      const double proj = view(unit).row(r).dot(du.row(r));
                      view(ga).row(r) += (du.row(r) - proj * view(unit).row(r)) / norms[r];
                    }
                  });
}

Var cross_entropy(Tape& t, Var logits, std::span<const int> targets) {
  const Tensor& L = need2d(t, logits, "cross_entropy");
  const std::size_t n = L.rows(), v = L.cols();
  if (targets.size() != n) {
    throw ShapeError("op 'cross_entropy': " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                     " rows");
  }
  if (n == 0) throw ShapeError("op 'cross_entropy': empty batch");
  Tensor probs = L;
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw ShapeError("op 'cross_entropy': target " + std::to_string(targets[r]) + " outside " + std::to_string(v) +
                       " classes");
    }
    const double* row = L.data() + r * v;
    double m = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - m);
    loss += std::log(s) + m - row[targets[r]];
    softmax_row_inplace(probs.data() + r * v, v);
  }
  loss /= static_cast<double>(n);
  std::vector<int> tv(targets.begin(), targets.end());
  return t.record("cross_entropy", Tensor::scalar(loss), {logits},
                  [logits, tv = std::move(tv), probs = std::move(probs)](Tape& t, std::size_t self) {
                    const double g = upstream(t, self)[0];
                    Tensor& gl = t.grad_buffer(logits.id);
                    const std::size_t n = probs.rows(), v = probs.cols();
                    const double s = g / static_cast<double>(n);
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += s * probs[r * v + j];
                      gl[r * v + static_cast<std::size_t>(tv[r])] -= s;
                    }
                  });
}

Var squared_error(Tape& t, Var pred, const Tensor& target) {
  const Tensor& P = t.value(pred);
  need_same(P, target, "squared_error");
  if (P.size() == 0) throw ShapeError("op 'squared_error': empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) s += (P[i] - target[i]) * (P[i] - target[i]);
  s /= static_cast<double>(P.size());
  return t.record("squared_error", Tensor::scalar(s), {pred}, [pred, target](Tape& t, std::size_t self) {
    const double g = upstream(t, self)[0];
    const Tensor& P = t.value(pred);
    Tensor& gp = t.grad_buffer(pred.id);
    const double k = 2.0 * g / static_cast<double>(P.size());
    for (std::size_t i = 0; i < P.size(); ++i) gp[i] += k * (P[i] - target[i]);
  });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("op 'concat_rows': no inputs");
  const std::size_t c = need2d(t, parts[0], "concat_rows").cols();
  std::size_t n = 0;
  for (Var p : parts) {
    if (need2d(t, p, "concat_rows").cols() != c) throw ShapeError("op 'concat_rows': column counts differ");
    n += t.value(p).rows();
  }
  Tensor out({n, c});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = t.value(p);
    std::copy(P.storage().begin(), P.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(off));
    off += P.size();
  }
  return t.record("concat_rows", std::move(out), parts, [parts](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t sz = t.value(p).size();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
      }
      off += sz;
    }
  });
}

Var gather_rows(Tape& t, Var a, std::span<const std::size_t> rows) {
  const Tensor& A = need2d(t, a, "gather_rows");
  const std::size_t c = A.cols();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= A.rows()) throw ShapeError("op 'gather_rows': row index out of range");
    std::copy_n(A.data() + rows[i] * c, c, out.data() + i * c);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return t.record("gather_rows", std::move(out), {a}, [a, rv = std::move(rv)](Tape& t, std::size_t self) {
    const Tensor& g = upstream(t, self);
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < rv.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[rv[i] * c + j] += g[i * c + j];
    }
  });
}

Var weighted_sum(Tape& t, const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.size() != weights.size() || scalars.empty()) throw ShapeError("op 'weighted_sum': arity mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) s += weights[i] * t.value(scalars[i]).item();
  return t.record("weighted_sum", Tensor::scalar(s), scalars, [scalars, weights](Tape& t, std::size_t self) {
    const double g = upstream(t, self)[0];
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (t.requires_grad(scalars[i])) t.grad_buffer(scalars[i].id)[0] += g * weights[i];
    }
  });
}

Var attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, bool causal, AttentionTrace* trace) {
  const Tensor& Q = need2d(t, q, "attention");
  const Tensor& K = need2d(t, k, "attention");
  const Tensor& V = need2d(t, v, "attention");
  const std::size_t lq = Q.rows(), lk = K.rows(), d = Q.cols();
  if (K.cols() != d || !K.same_shape(V) || n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("op 'attention': incompatible q " + shape_string(Q.shape()) + ", k " + shape_string(K.shape()) +
                     ", v " + shape_string(V.shape()) + " for " + std::to_string(n_heads) + " heads");
  }
  if (causal && lq > lk) throw ShapeError("op 'attention': causal mask needs lq <= lk");
  const std::size_t hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<RMat> probs(n_heads);
  Tensor out({lq, d});
  auto Qm = view(Q);
  auto Km = view(K);
  auto Vm = view(V);
  auto Om = view(out);
  const std::size_t shift = lk - lq;
  for (std::size_t h = 0; h < n_heads; ++h) {
    RMat s = (Qm.middleCols(h * hd, hd) * Km.middleCols(h * hd, hd).transpose()) * inv_sqrt;
    for (std::size_t i = 0; i < lq; ++i) {
      const std::size_t limit = causal ? i + shift + 1 : lk;
      double* row = s.data() + i * lk;
      softmax_row_inplace(row, limit);
      for (std::size_t j = limit; j < lk; ++j) row[j] = 0.0;
    }
    Om.middleCols(h * hd, hd).noalias() = s * Vm.middleCols(h * hd, hd);
    if (trace) trace->probs.emplace_back(Shape{lq, lk}, std::vector<double>(s.data(), s.data() + s.size()));
    probs[h] = std::move(s);
  }
  if (!t.grad_enabled()) probs.clear();
  return t.record("attention", std::move(out), {q, k, v},
                  [q, k, v, hd, inv_sqrt, probs = std::move(probs)](Tape& t, std::size_t self) {
                    const Tensor& g = upstream(t, self);
                    auto Gm = view(g);
                    auto Qm = view(t.value(q));
                    auto Km = view(t.value(k));
                    auto Vm = view(t.value(v));
                    for (std::size_t h = 0; h < probs.size(); ++h) {
                      const RMat& p = probs[h];
                      auto gh = Gm.middleCols(h * hd, hd);
                      if (t.requires_grad(v)) {
                        view(t.grad_buffer(v.id)).middleCols(h * hd, hd).noalias() += p.transpose() * gh;
                      }
                      if (!t.requires_grad(q) && !t.requires_grad(k)) continue;
                      RMat dp = gh * Vm.middleCols(h * hd, hd).transpose();
                      Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
                      RMat ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv_sqrt;
                      if (t.requires_grad(q)) {
                        view(t.grad_buffer(q.id)).middleCols(h * hd, hd).noalias() += ds * Km.middleCols(h * hd, hd);
                      }
                      if (t.requires_grad(k)) {
                        view(t.grad_buffer(k.id)).middleCols(h * hd, hd).noalias() +=
                            ds.transpose() * Qm.middleCols(h * hd, hd);
                      }
                    }
                  });
}

}  // namespace uniso::ad
