#include <algorithm>
#include <cmath>
#include <numeric>

#include "models_internal.hpp"
#include "uniso/error.hpp"

namespace uniso::model {

using ad::Tensor;
using ad::Var;
using namespace detail;

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lipschitz_batch", c.lipschitz_batch},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"warmup_steps", c.warmup_steps},
                     {"temperature", c.temperature},
                     {"seed", c.seed},
                     {"regressor_epochs", c.regressor_epochs},
                     {"regressor_lr", c.regressor_lr},
                     {"regressor_weight_decay", c.regressor_weight_decay}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.mode = parse_mode(j.value("mode", to_string(d.mode)));
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lipschitz_batch = j.value("lipschitz_batch", d.lipschitz_batch);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.temperature = j.value("temperature", d.temperature);
  c.seed = j.value("seed", d.seed);
  c.regressor_epochs = j.value("regressor_epochs", d.regressor_epochs);
  c.regressor_lr = j.value("regressor_lr", d.regressor_lr);
  c.regressor_weight_decay = j.value("regressor_weight_decay", d.regressor_weight_decay);
  if (c.batch_size == 0) throw DomainError("train config: batch_size must be positive");
  if (!(c.lr > 0.0) || !(c.regressor_lr > 0.0)) throw DomainError("train config: learning rates must be positive");
  if (!(c.temperature > 0.0)) throw DomainError("train config: temperature must be positive");
}

namespace {

constexpr double kDelta = 1e-10;
constexpr double kBnEps = 1e-5;

const Example& example(const TrainData& data, std::size_t i) {
  if (i >= data.examples.size()) throw DomainError("training batch index out of range");
  return data.examples[i];
}

Var teacher_forced_ce(Tape& t, const ModelConfig& c, const ParamStore& p, Var enc, const std::vector<int>& target) {
  if (target.empty()) throw DomainError("UniSO-T example has no target tokens");
  std::vector<int> dec_in;
  dec_in.reserve(target.size());
  dec_in.push_back(text::Vocabulary::kBos);
  dec_in.insert(dec_in.end(), target.begin(), target.end() - 1);
  return ad::cross_entropy(t, decoder_forward(t, c, p, make_memory(t, c, p, enc), dec_in), target);
}

Var contrastive_term(Tape& t, const ModelConfig& c, const ParamStore& p, const TrainData& data,
                     std::span<const std::size_t> batch, const std::vector<Var>& pooled, double temperature) {
  Var zx = input_head(c).apply(t, p, ad::concat_rows(t, pooled));
  Var zm = meta_head(c).apply(t, p, t.constant(meta_matrix(data, batch)));
  return reg::contrastive_loss(t, zx, zm, {temperature, 1e-12});
}

// Lipschitz term over a task-sequential slice. Invalid Var when no task
// contributes at least two rows.
Var lipschitz_term(Tape& t, const ModelConfig& c, const ParamStore& p, const TrainData& data,
                   std::span<const std::size_t> lip_batch) {
  double total_size = 0.0;
  for (const auto& task : data.tasks) total_size += task.dataset_size;
  std::vector<reg::LipschitzGroup> groups;
  std::size_t i = 0;
  while (i < lip_batch.size()) {
    const std::size_t task = example(data, lip_batch[i]).task;
    std::size_t j = i;
    while (j < lip_batch.size() && example(data, lip_batch[j]).task == task) ++j;
    if (j - i >= 2) {
      std::vector<Var> pooled;
      std::vector<double> y;
      for (std::size_t k = i; k < j; ++k) {
        const Example& ex = example(data, lip_batch[k]);
        pooled.push_back(mean_pool(t, encode(t, c, p, strip_padding(ex.input))));
        y.push_back(ex.y_norm);
      }
      Var z = input_head(c).apply(t, p, ad::concat_rows(t, pooled));
      groups.push_back({z, std::move(y), data.tasks.at(task).dataset_size});
    }
    i = j;
  }
  if (groups.empty()) return Var{};
  return reg::lipschitz_loss(t, groups, total_size);
}

double value_or_zero(const Tape& t, Var v) { return v.valid() ? t.value(v).item() : 0.0; }

Var combine(Tape& t, LossGraph& g, double main_value, bool main_is_con, const reg::BalanceCoefficients* fixed) {
  const double lc = value_or_zero(t, g.contrastive), ll = value_or_zero(t, g.lipschitz);
  if (fixed) {
    g.coef = *fixed;
  } else {
    reg::BalanceConfig bc{kDelta, g.contrastive.valid() && !main_is_con, g.lipschitz.valid()};
    g.coef = reg::balance_coefficients(main_value, lc, ll, bc);
  }
  std::vector<Var> parts{g.main};
  std::vector<double> w{1.0};
  if (g.contrastive.valid() && !main_is_con) {
    parts.push_back(g.contrastive);
    w.push_back(g.coef.contrastive);
  }
  if (g.lipschitz.valid()) {
    parts.push_back(g.lipschitz);
    w.push_back(g.coef.lipschitz);
  }
  return ad::weighted_sum(t, parts, w);
}

std::int64_t effective_warmup(std::int64_t warmup, std::int64_t total) {
  return std::max<std::int64_t>(0, std::min(warmup, total / 10));
}

// Indices sorted by task, then position: the unshuffled stream the
// Lipschitz term walks through.
std::vector<std::size_t> sequential_order(const TrainData& data) {
  std::vector<std::size_t> order(data.examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data.examples[a].task < data.examples[b].task; });
  return order;
}

class LipStream {
 public:
  LipStream(const TrainData& data, std::size_t size) : order_(sequential_order(data)), size_(size) {}
  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    if (order_.empty()) return out;
    const std::size_t n = std::min(size_, order_.size());
    for (std::size_t k = 0; k < n; ++k) {
      out.push_back(order_[cursor_]);
      cursor_ = (cursor_ + 1) % order_.size();
      if (cursor_ == 0) break;  // never let a group straddle the wrap
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t size_;
  std::size_t cursor_ = 0;
};

ad::AdamWConfig adam(const TrainConfig& cfg, double lr, double wd) { return {lr, cfg.beta1, cfg.beta2, wd, 1e-8}; }

void accumulate(StepLosses& acc, const StepLosses& s) {
  acc.main += s.main;
  acc.contrastive += s.contrastive;
  acc.lipschitz += s.lipschitz;
  acc.coef_contrastive += s.coef_contrastive;
  acc.coef_lipschitz += s.coef_lipschitz;
}

void average(StepLosses& acc, std::size_t n) {
  if (n == 0) return;
  const double k = 1.0 / static_cast<double>(n);
  acc.main *= k;
  acc.contrastive *= k;
  acc.lipschitz *= k;
  acc.coef_contrastive *= k;
  acc.coef_lipschitz *= k;
}

StepLosses summarize(const Tape& t, const LossGraph& g) {
  StepLosses s;
  s.main = t.value(g.main).item();
  s.contrastive = value_or_zero(t, g.contrastive);
  s.lipschitz = value_or_zero(t, g.lipschitz);
  s.coef_contrastive = g.coef.contrastive;
  s.coef_lipschitz = g.coef.lipschitz;
  return s;
}

using BatchStepFn = std::function<StepLosses(std::span<const std::size_t>, std::span<const std::size_t>, double)>;

std::vector<StepLosses> run_epochs(const TrainData& data, const TrainConfig& cfg, std::size_t epochs, bool use_lip,
                                   std::uint64_t salt, std::int64_t& global_step, const BatchStepFn& step,
                                   const StepCallback& on_step) {
  const std::size_t n = data.examples.size();
  if (n == 0) throw DomainError("training: empty dataset");
  const std::size_t bs = std::min(cfg.batch_size, n);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const auto total = static_cast<std::int64_t>(per_epoch * epochs);
  const std::int64_t warmup = effective_warmup(cfg.warmup_steps, total);
  std::mt19937_64 rng(cfg.seed ^ salt);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  LipStream lip(data, cfg.lipschitz_batch);
  std::vector<StepLosses> history;
  std::int64_t local = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    StepLosses acc;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * bs, hi = std::min(n, lo + bs);
      std::span<const std::size_t> batch(order.data() + lo, hi - lo);
      std::vector<std::size_t> lb;
      if (use_lip) lb = lip.next();
      const double lr = ad::cosine_lr(local + 1, warmup, total + 1, cfg.lr);
      StepLosses s = step(batch, lb, lr);
      ++local;
      ++global_step;
      accumulate(acc, s);
      if (on_step) on_step(global_step, e, s);
    }
    average(acc, per_epoch);
    history.push_back(acc);
  }
  return history;
}

}  // namespace

LossGraph build_loss_t(Tape& t, const ModelConfig& c, const ParamStore& p, const TrainData& data,
                       std::span<const std::size_t> batch, std::span<const std::size_t> lip_batch,
                       const TrainConfig& cfg, const reg::BalanceCoefficients* fixed) {
  if (c.variant != Variant::T) throw DomainError("build_loss_t: model is not UniSO-T");
  if (batch.empty()) throw DomainError("build_loss_t: empty batch");
  const bool improved = cfg.mode == Mode::Improved;
  std::vector<Var> ce, pooled;
  for (std::size_t idx : batch) {
    const Example& ex = example(data, idx);
    Var enc = encode(t, c, p, strip_padding(ex.input));
    if (improved) pooled.push_back(mean_pool(t, enc));
    ce.push_back(teacher_forced_ce(t, c, p, enc, ex.target));
  }
  LossGraph g;
  g.main = ad::weighted_sum(t, ce, std::vector<double>(ce.size(), 1.0 / static_cast<double>(ce.size())));
  if (!improved) {
    g.total = g.main;
    return g;
  }
  if (batch.size() >= 2) g.contrastive = contrastive_term(t, c, p, data, batch, pooled, cfg.temperature);
  if (!lip_batch.empty()) g.lipschitz = lipschitz_term(t, c, p, data, lip_batch);
  g.total = combine(t, g, t.value(g.main).item(), false, fixed);
  return g;
}

LossGraph build_loss_n_stage1(Tape& t, const ModelConfig& c, const ParamStore& p, const TrainData& data,
                              std::span<const std::size_t> batch, std::span<const std::size_t> lip_batch,
                              const TrainConfig& cfg, const reg::BalanceCoefficients* fixed) {
  if (batch.size() < 2) throw DomainError("build_loss_n_stage1: need at least two rows");
  std::vector<Var> pooled;
  for (std::size_t idx : batch) pooled.push_back(mean_pool(t, encode(t, c, p, strip_padding(example(data, idx).input))));
  LossGraph g;
  g.contrastive = contrastive_term(t, c, p, data, batch, pooled, cfg.temperature);
  g.main = g.contrastive;
  if (!lip_batch.empty()) g.lipschitz = lipschitz_term(t, c, p, data, lip_batch);
  g.total = combine(t, g, t.value(g.main).item(), true, fixed);
  return g;
}

Var build_loss_n_stage2(Tape& t, const ModelConfig& c, const ParamStore& p, const Tensor& embeddings,
                        const std::vector<double>& targets, ad::BatchStats* stats) {
  if (embeddings.rows() != targets.size()) throw ShapeError("stage 2: embedding rows do not match targets");
  Var x = ad::batch_norm(t, t.constant(embeddings), t.param(p, "bn.gamma"), t.param(p, "bn.beta"), kBnEps, stats);
  Var pred = regressor_forward(t, c, p, x);
  Tensor y({targets.size(), 1});
  std::copy(targets.begin(), targets.end(), y.data());
  return ad::squared_error(t, pred, y);
}

StepLosses train_step_t(ModelState& s, const TrainData& data, std::span<const std::size_t> batch,
                        std::span<const std::size_t> lip_batch, const TrainConfig& cfg, double lr) {
  Tape t;
  LossGraph g = build_loss_t(t, s.config, s.params, data, batch, lip_batch, cfg);
  StepLosses out = summarize(t, g);
  t.backward(g.total);
  ad::adamw_step(s.params, t.param_grads(), adam(cfg, lr, cfg.weight_decay));
  s.params.round_to_float();
  ++s.step;
  return out;
}

std::vector<StepLosses> train_t(ModelState& s, const TrainData& data, const TrainConfig& cfg,
                                const StepCallback& on_step) {
  if (s.config.variant != Variant::T) throw DomainError("train_t: model is not UniSO-T");
  std::int64_t step = s.step;
  return run_epochs(
      data, cfg, cfg.epochs, cfg.mode == Mode::Improved, 0x7A11ULL, step,
      [&](std::span<const std::size_t> b, std::span<const std::size_t> lb, double lr) {
        return train_step_t(s, data, b, lb, cfg, lr);
      },
      on_step);
}

StepLosses train_step_n_stage1(ModelState& s, const TrainData& data, std::span<const std::size_t> batch,
                               std::span<const std::size_t> lip_batch, const TrainConfig& cfg, double lr) {
  Tape t;
  LossGraph g = build_loss_n_stage1(t, s.config, s.params, data, batch, lip_batch, cfg);
  StepLosses out = summarize(t, g);
  if (out.contrastive == 0.0 && out.lipschitz == 0.0) {
    out.skipped = true;
    return out;
  }
  t.backward(g.total);
  ad::adamw_step(s.params, t.param_grads(), adam(cfg, lr, cfg.weight_decay));
  s.params.round_to_float();
  ++s.step;
  return out;
}

std::vector<double> train_regressor(ModelState& s, const Tensor& embeddings, const std::vector<double>& targets,
                                    const TrainConfig& cfg, const StepCallback& on_step) {
  const ModelConfig& c = s.config;
  if (c.variant != Variant::N) throw DomainError("train_regressor: model is not UniSO-N");
  const std::size_t n = targets.size();
  if (embeddings.rank() != 2 || embeddings.rows() != n || embeddings.cols() != c.d_model) {
    throw ShapeError("train_regressor: embeddings " + ad::shape_string(embeddings.shape()) + " for " +
                     std::to_string(n) + " targets");
  }
  if (n < 2) throw DomainError("train_regressor: need at least two examples");
  const double mean = std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(n);
  const std::size_t last = regressor_shapes(c).size() - 1;
  s.params.assign(reg_bias(last), Tensor({1, 1}, mean));
  s.params.round_to_float();

  const std::size_t d = c.d_model;
  const std::size_t bs = std::min(cfg.batch_size, n);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const auto total = static_cast<std::int64_t>(per_epoch * cfg.regressor_epochs);
  const std::int64_t warmup = effective_warmup(cfg.warmup_steps, total);
  std::mt19937_64 rng(cfg.seed ^ 0x2E6AULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  std::int64_t local = 0;
  for (std::size_t e = 0; e < cfg.regressor_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double acc = 0.0;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * bs, hi = std::min(n, lo + bs);
      const double lr = ad::cosine_lr(++local, warmup, total + 1, cfg.regressor_lr);
      if (hi - lo < 2) continue;  // batch norm needs two rows
      Tensor x({hi - lo, d});
      std::vector<double> y;
      for (std::size_t k = lo; k < hi; ++k) {
        std::copy_n(embeddings.data() + order[k] * d, d, x.data() + (k - lo) * d);
        y.push_back(targets[order[k]]);
      }
      Tape t;
      Var loss = build_loss_n_stage2(t, c, s.params, x, y);
      StepLosses sl;
      sl.main = t.value(loss).item();
      t.backward(loss);
      ad::adamw_step(s.params, t.param_grads(), adam(cfg, lr, cfg.regressor_weight_decay));
      s.params.round_to_float();
      ++s.step;
      acc += sl.main;
      ++counted;
      if (on_step) on_step(s.step, e, sl);
    }
    history.push_back(counted ? acc / static_cast<double>(counted) : 0.0);
  }

  // Inference statistics: exact full-data moments of the frozen embeddings.
  Tensor mu({1, d}), var({1, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mu[j] += embeddings.at(r, j);
  for (std::size_t j = 0; j < d; ++j) mu[j] /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) var[j] += (embeddings.at(r, j) - mu[j]) * (embeddings.at(r, j) - mu[j]);
  for (std::size_t j = 0; j < d; ++j) var[j] /= static_cast<double>(n);
  s.params.assign("bn.mean", mu);
  s.params.assign("bn.var", var);
  s.params.round_to_float();
  return history;
}

std::vector<StepLosses> train_n(ModelState& s, const TrainData& data, const TrainConfig& cfg,
                                const StepCallback& on_step) {
  if (s.config.variant != Variant::N) throw DomainError("train_n: model is not UniSO-N");
  std::vector<StepLosses> history;
  if (cfg.mode == Mode::Improved && data.examples.size() >= 2) {
    std::int64_t step = s.step;
    TrainConfig c1 = cfg;
    c1.batch_size = std::max<std::size_t>(2, cfg.batch_size);
    history = run_epochs(
        data, c1, cfg.epochs, true, 0x5A1EULL, step,
        [&](std::span<const std::size_t> b, std::span<const std::size_t> lb, double lr) {
          if (b.size() < 2) return StepLosses{0, 0, 0, 0, 0, true};
          return train_step_n_stage1(s, data, b, lb, cfg, lr);
        },
        on_step);
  }
  std::vector<text::TokenSequence> inputs;
  std::vector<double> targets;
  for (const auto& ex : data.examples) {
    inputs.push_back(ex.input);
    targets.push_back(ex.y_norm);
  }
  const Tensor emb = embed(s, inputs);
  const auto reg_hist = train_regressor(s, emb, targets, cfg, on_step);
  for (double v : reg_hist) {
    StepLosses sl;
    sl.main = v;
    history.push_back(sl);
  }
  return history;
}

std::vector<double> regress(const ModelState& s, const Tensor& embeddings) {
  const ModelConfig& c = s.config;
  if (c.variant != Variant::N) throw DomainError("regress: model is not UniSO-N");
  if (embeddings.rank() != 2 || embeddings.cols() != c.d_model) throw ShapeError("regress: embedding width mismatch");
  Tape t(false);
  Var x = ad::batch_norm_inference(t, t.constant(embeddings), t.param(s.params, "bn.gamma"),
                                   t.param(s.params, "bn.beta"), s.params.value("bn.mean"), s.params.value("bn.var"),
                                   kBnEps);
  const Tensor& out = t.value(regressor_forward(t, c, s.params, x));
  return std::vector<double>(out.data(), out.data() + out.size());
}

double predict_n(const ModelState& s, std::span<const int> input) {
  return regress(s, embed(s, {text::TokenSequence(input.begin(), input.end())})).front();
}

ModelState finetune_few_shot(const ModelState& s, const TrainData& pairs, std::size_t epochs, double lr,
                             std::size_t batch_size, std::uint64_t seed) {
  if (pairs.examples.empty()) throw DomainError("finetune: empty few-shot set");
  if (!(lr > 0.0)) throw DomainError("finetune: lr must be positive");
  ModelState out = s;
  if (epochs == 0) return out;
  const std::size_t n = pairs.examples.size();
  const std::size_t bs = std::max<std::size_t>(1, std::min(batch_size, n));
  std::mt19937_64 rng(seed ^ 0xF5ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const ModelConfig& c = out.config;

  Tensor emb;
  if (c.variant == Variant::N) {
    std::vector<text::TokenSequence> inputs;
    for (const auto& ex : pairs.examples) inputs.push_back(ex.input);
    emb = embed(out, inputs);
  }
  TrainConfig vanilla;
  vanilla.mode = Mode::Vanilla;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t lo = 0; lo < n; lo += bs) {
      std::span<const std::size_t> batch(order.data() + lo, std::min(n, lo + bs) - lo);
      Tape t;
      Var loss;
      if (c.variant == Variant::T) {
        loss = build_loss_t(t, c, out.params, pairs, batch, {}, vanilla).total;
      } else {
        Tensor x({batch.size(), c.d_model});
        Tensor y({batch.size(), 1});
        for (std::size_t k = 0; k < batch.size(); ++k) {
          std::copy_n(emb.data() + batch[k] * c.d_model, c.d_model, x.data() + k * c.d_model);
          y[k] = pairs.examples[batch[k]].y_norm;
        }
        Var xn = ad::batch_norm_inference(t, t.constant(x), t.param(out.params, "bn.gamma"),
                                          t.param(out.params, "bn.beta"), out.params.value("bn.mean"),
                                          out.params.value("bn.var"), kBnEps);
        loss = ad::squared_error(t, regressor_forward(t, c, out.params, xn), y);
      }
      t.backward(loss);
      ad::sgd_step(out.params, t.param_grads(), lr);
      out.params.round_to_float();
      ++out.step;
    }
  }
  return out;
}

}  // namespace uniso::model
