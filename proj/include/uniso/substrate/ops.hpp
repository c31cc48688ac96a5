#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "uniso/substrate/tape.hpp"

// Differentiable ops over rank-2 tensors. Every op validates shapes and
// throws ShapeError naming itself on mismatch.
namespace uniso::ad {

Var matmul(Tape& t, Var a, Var b);
/// a * b^T
Var matmul_nt(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
/// Adds a [1, c] row to every row of a.
Var add_row(Tape& t, Var a, Var row);
/// x * w + b with b broadcast over rows.
Var linear(Tape& t, Var x, Var w, Var b);
/// x * w (no bias).
inline Var linear(Tape& t, Var x, Var w) { return matmul(t, x, w); }

Var relu(Tape& t, Var a);
/// max(0, a); same math as relu, kept separate so traces read naturally.
Var hinge(Tape& t, Var a);
Var exp(Tape& t, Var a);
Var log(Tape& t, Var a);

Var softmax_rows(Tape& t, Var a);
/// Scale-only normalisation per row: x / sqrt(mean(x^2) + eps) * gain.
Var rms_norm(Tape& t, Var x, Var gain, double eps = 1e-6);

struct BatchStats {
  Tensor mean;
  Tensor var;
};
/// Training-mode batch normalisation over rows (biased variance). The batch
/// statistics are written to `stats` when non-null.
Var batch_norm(Tape& t, Var x, Var gamma, Var beta, double eps, BatchStats* stats);
/// Inference-mode batch normalisation with fixed statistics.
Var batch_norm_inference(Tape& t, Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double eps);

/// Rows of `table` selected by ids; result is [ids.size(), table.cols()].
Var embedding(Tape& t, Var table, std::span<const int> ids);

/// Mean over axis 0: [r, c] -> [1, c].
Var mean_rows(Tape& t, Var a);
Var mean_all(Tape& t, Var a);
Var sum_all(Tape& t, Var a);
/// Euclidean norm of each row: [r, c] -> [r, 1].
Var l2_norm_rows(Tape& t, Var a);
/// Row-wise cosine similarity of two equally shaped inputs: [r, 1].
Var cosine_similarity_rows(Tape& t, Var a, Var b);
/// Pairwise cosine similarity between all rows: [n, n].
Var cosine_matrix(Tape& t, Var a);

/// Mean token-level cross-entropy of logits [n, V] against n class ids.
Var cross_entropy(Tape& t, Var logits, std::span<const int> targets);
/// Mean squared error against a constant target of the same shape.
Var squared_error(Tape& t, Var pred, const Tensor& target);

Var concat_rows(Tape& t, const std::vector<Var>& parts);
Var gather_rows(Tape& t, Var a, std::span<const std::size_t> rows);
/// sum_i w_i * s_i over scalar inputs.
Var weighted_sum(Tape& t, const std::vector<Var>& scalars, const std::vector<double>& weights);

/// Per-head attention probabilities [Lq, Lk], filled when tracing.
struct AttentionTrace {
  std::vector<Tensor> probs;
};

/// Multi-head scaled dot-product attention on pre-projected q [Lq, d],
/// k [Lk, d], v [Lk, d]; heads split d evenly. Causal masking hides keys
/// j > i. Equivalent to per-head softmax(q k^T / sqrt(dh)) v, fused.
Var attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, bool causal, AttentionTrace* trace = nullptr);

}  // namespace uniso::ad
