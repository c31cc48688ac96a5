#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "uniso/regularizers.hpp"
#include "uniso/substrate/ops.hpp"
#include "uniso/substrate/optim.hpp"
#include "uniso/textcodec.hpp"

namespace uniso::model {

enum class Variant { T, N };
enum class Mode { Vanilla, Improved };

std::string to_string(Variant v);
std::string to_string(Mode m);
Variant parse_variant(const std::string& s);
Mode parse_mode(const std::string& s);

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t d_ff = 128;
  std::size_t vocab = 305;
  std::size_t max_len = 512;
  Variant variant = Variant::T;
  std::size_t regressor_hidden = 256;
  std::size_t regressor_layers = 2;
  std::size_t proj_hidden = 128;
  std::size_t proj_dim = 128;
  std::size_t max_target_len = 16;
  int mantissa_len = 3;
  int e_max = 16;

  /// Throws DomainError on inconsistent sizes.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ModelState {
  ModelConfig config;
  ad::ParamStore params;
  std::int64_t step = 0;

  text::Vocabulary vocab() const { return text::Vocabulary(config.e_max); }
};

/// Scaled-uniform matrices, unit norm gains, zero biases; rounded to float32.
ModelState init_model(const ModelConfig& config, std::uint64_t seed);

/// Parameter count implied by a config, summed over what init_model creates.
std::size_t parameter_count(const ModelConfig& config);

/// Drops PAD positions; throws DomainError when nothing remains.
std::vector<int> strip_padding(std::span<const int> tokens);

/// Final encoder states [L, d] of one unpadded sequence. Per-layer attention
/// probabilities are appended to `traces` when given.
ad::Var encode(ad::Tape& t, const ModelConfig& c, const ad::ParamStore& p, std::span<const int> tokens,
               std::vector<ad::AttentionTrace>* traces = nullptr);

/// Mean over positions.
ad::Var mean_pool(ad::Tape& t, ad::Var hidden);

/// Pooled encoder embeddings, one row per sequence.
ad::Tensor embed(const ModelState& s, const std::vector<text::TokenSequence>& batch);

/// Input projection head applied to pooled embeddings [n, d_model] -> [n, proj_dim].
ad::Tensor project(const ModelState& s, const ad::Tensor& pooled);

/// One training example as the models consume it.
struct Example {
  text::TokenSequence input;
  std::vector<int> target;  // P10 tokens (UniSO-T)
  double y_norm = 0.0;      // ynorm-normalised score
  std::size_t task = 0;
};

struct TaskInfo {
  std::string id;
  std::vector<double> meta;  // metadata_embed of the task
  double dataset_size = 0.0;
};

struct TrainData {
  std::vector<Example> examples;
  std::vector<TaskInfo> tasks;
};

struct TrainConfig {
  Mode mode = Mode::Improved;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::size_t lipschitz_batch = 16;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  std::int64_t warmup_steps = 1000;
  double temperature = 0.1;
  std::uint64_t seed = 0;
  // UniSO-N Stage 2 (regressor).
  std::size_t regressor_epochs = 50;
  double regressor_lr = 1e-3;
  double regressor_weight_decay = 1e-5;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepLosses {
  double main = 0.0;
  double contrastive = 0.0;
  double lipschitz = 0.0;
  double coef_contrastive = 0.0;
  double coef_lipschitz = 0.0;
  bool skipped = false;
};

using StepCallback = std::function<void(std::int64_t step, std::size_t epoch, const StepLosses&)>;

/// Loss graph of one step. Balancing coefficients are computed from the
/// current loss values and enter the total as constants unless `fixed` is
/// given. Lipschitz groups with fewer than two rows are dropped.
struct LossGraph {
  ad::Var total;
  ad::Var main;
  ad::Var contrastive;
  ad::Var lipschitz;
  reg::BalanceCoefficients coef;
};

/// UniSO-T: L_ce + c_con L_con + c_lip L_lip (aux terms only when improved).
LossGraph build_loss_t(ad::Tape& t, const ModelConfig& c, const ad::ParamStore& p, const TrainData& data,
                       std::span<const std::size_t> batch, std::span<const std::size_t> lip_batch,
                       const TrainConfig& cfg, const reg::BalanceCoefficients* fixed = nullptr);

/// UniSO-N Stage 1: L_con + (L_con / (L_lip + delta)) L_lip.
LossGraph build_loss_n_stage1(ad::Tape& t, const ModelConfig& c, const ad::ParamStore& p, const TrainData& data,
                              std::span<const std::size_t> batch, std::span<const std::size_t> lip_batch,
                              const TrainConfig& cfg, const reg::BalanceCoefficients* fixed = nullptr);

/// UniSO-N Stage 2: training-mode batch norm, regressor, squared error.
ad::Var build_loss_n_stage2(ad::Tape& t, const ModelConfig& c, const ad::ParamStore& p, const ad::Tensor& embeddings,
                            const std::vector<double>& targets, ad::BatchStats* stats = nullptr);

/// build_loss_t, backward, one AdamW update at `lr`, float32 rounding.
StepLosses train_step_t(ModelState& s, const TrainData& data, std::span<const std::size_t> batch,
                        std::span<const std::size_t> lip_batch, const TrainConfig& cfg, double lr);

/// Full UniSO-T training with cosine schedule. Returns per-epoch mean losses.
std::vector<StepLosses> train_t(ModelState& s, const TrainData& data, const TrainConfig& cfg,
                                const StepCallback& on_step = {});

struct DecodeConfig {
  bool greedy = true;
  double temperature = 0.7;
  std::size_t top_k = 20;
  double top_p = 0.95;
  std::size_t n_samples = 1;
  std::uint64_t seed = 0;
};

/// Next-token logits [len(dec_in), vocab] for decoder inputs given
/// encoder states.
ad::Var decode_logits(ad::Tape& t, const ModelConfig& c, const ad::ParamStore& p, ad::Var enc,
                      std::span<const int> dec_in);

/// Raw decoded P10 tokens (greedy or one sample).
std::vector<int> decode_tokens(const ModelState& s, std::span<const int> input, const DecodeConfig& cfg,
                               std::uint64_t sample_index = 0);

/// Decoded score, or nullopt when the output is not a well-formed P10
/// sequence. Sampling mode returns the median of the valid samples.
std::optional<double> predict_t(const ModelState& s, std::span<const int> input, const DecodeConfig& cfg = {});

/// UniSO-N Stage 1 step: encoder and projection heads under
/// g_con + (L_con / (L_lip + delta)) g_lip. Skipped when both losses vanish.
StepLosses train_step_n_stage1(ModelState& s, const TrainData& data, std::span<const std::size_t> batch,
                               std::span<const std::size_t> lip_batch, const TrainConfig& cfg, double lr);

/// Stage 1 (improved mode only) then Stage 2 regressor training on frozen
/// pooled embeddings. Batch-norm inference statistics are the full-data
/// statistics of those embeddings.
std::vector<StepLosses> train_n(ModelState& s, const TrainData& data, const TrainConfig& cfg,
                                const StepCallback& on_step = {});

/// Stage 2 only, on given embeddings [n, d] and targets.
std::vector<double> train_regressor(ModelState& s, const ad::Tensor& embeddings, const std::vector<double>& targets,
                                    const TrainConfig& cfg, const StepCallback& on_step = {});

/// Regressor output for fixed embeddings using frozen batch-norm statistics.
std::vector<double> regress(const ModelState& s, const ad::Tensor& embeddings);

double predict_n(const ModelState& s, std::span<const int> input);

/// Few-shot adaptation by plain SGD on a copy of the state. UniSO-T tunes
/// the whole network on cross-entropy; UniSO-N tunes the regressor on
/// squared error over frozen embeddings.
ModelState finetune_few_shot(const ModelState& s, const TrainData& pairs, std::size_t epochs = 5, double lr = 2e-5,
                             std::size_t batch_size = 16, std::uint64_t seed = 0);

enum class TokenCategory { Metadata = 0, Key = 1, Numeric = 2, Structural = 3, Eos = 4 };
inline constexpr std::size_t kTokenCategories = 5;
std::string to_string(TokenCategory c);

/// Categories of a composed-input token sequence: BOS and JSON punctuation
/// are structural, bytes before the design text are metadata, quoted names
/// are keys, value characters are numeric.
std::vector<TokenCategory> categorize_tokens(std::span<const int> tokens, std::size_t prefix_bytes);

/// Mean over query rows of the attention mass on each key category.
/// `probs` are row-stochastic [Lq, Lk] matrices over the same keys.
std::array<double, kTokenCategories> category_shares(const std::vector<ad::Tensor>& probs,
                                                     const std::vector<TokenCategory>& categories);

/// Encoder self-attention shares averaged over layers and heads.
std::array<double, kTokenCategories> attention_profile(const ModelState& s, std::span<const int> tokens,
                                                       const std::vector<TokenCategory>& categories);

/// Checkpoint file: "UNISO1", u32 header length, JSON header, then named
/// float32 little-endian parameter blocks.
void save_checkpoint(const ModelState& s, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace uniso::model
