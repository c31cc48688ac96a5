#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "uniso/substrate/ops.hpp"
#include "uniso/substrate/optim.hpp"
#include "uniso/textcodec.hpp"

namespace uniso::reg {

inline constexpr std::size_t kMetaDim = 64;
inline constexpr std::size_t kMetaBuckets = 2048;

/// Frozen metadata embedder: hashed character-trigram counts of the
/// metadata text, projected by a fixed seed-0 Gaussian matrix to kMetaDim,
/// unit L2 norm.
std::vector<double> metadata_embed(const text::Metadata& m);

/// Linear -> ReLU -> Linear, parameters stored under `prefix`.
struct ProjectionHead {
  std::string prefix;
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::size_t out = 0;

  void init(ad::ParamStore& store, std::mt19937_64& rng) const;
  ad::Var apply(ad::Tape& t, const ad::ParamStore& store, ad::Var x) const;
  std::size_t param_count() const { return in * hidden + hidden + hidden * out + out; }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix.
ad::Tensor scaled_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

struct ContrastiveConfig {
  double temperature = 0.1;
  double degenerate_threshold = 1e-12;
};

/// Metadata-guided contrastive alignment:
///   L = -1/(N(N-1)) sum_{i<j} s^m_ij' log( exp(s^x_ij/tau) / sum_{k!=i} exp(s^x_ik/tau) )
/// with s' the batch min-max normalised metadata cosine similarity.
/// Returns exactly 0 when the metadata similarities span less than the
/// degenerate threshold. Zero-norm rows are rejected.
ad::Var contrastive_loss(ad::Tape& t, ad::Var zx, ad::Var zm, const ContrastiveConfig& cfg = {});

struct LipschitzGroup {
  ad::Var z;               // [N_T, d] embeddings of one task
  std::vector<double> y;   // N_T scores
  double dataset_size = 0; // N_T of the task's full dataset
};

/// Per task: ratios r_ij = |y_i - y_j| / ||z_i - z_j||, L_T = median(r),
/// loss_T = sum max(0, r_ij - L_T). The total weights each task by
/// total_size / N_T; total_size <= 0 means "sum of the groups' sizes".
ad::Var lipschitz_loss(ad::Tape& t, const std::vector<LipschitzGroup>& groups, double total_size = 0.0);

/// Plain pairwise ratios (i<j order) for diagnostics.
std::vector<double> pairwise_ratios(const ad::Tensor& z, const std::vector<double>& y);
double median(std::vector<double> v);

struct BalanceConfig {
  double delta = 1e-10;
  bool use_contrastive = true;
  bool use_lipschitz = true;
};

struct BalanceCoefficients {
  double contrastive = 0.0;
  double lipschitz = 0.0;
};

/// L_main / (L_aux + delta) for each enabled auxiliary loss.
BalanceCoefficients balance_coefficients(double l_main, double l_con, double l_lip, const BalanceConfig& cfg = {});

/// g_main + (L_main/(L_con+delta)) g_con + (L_main/(L_lip+delta)) g_lip.
/// Entries missing from one map count as zero; shapes must agree.
ad::GradMap balance_gradients(double l_main, const ad::GradMap& g_main, double l_con, const ad::GradMap& g_con,
                              double l_lip, const ad::GradMap& g_lip, const BalanceConfig& cfg = {});

}  // namespace uniso::reg
