#include <algorithm>
#include <cmath>
#include <numeric>

#include "models_internal.hpp"
#include "uniso/error.hpp"

namespace uniso::model {

using ad::Tensor;
using ad::Var;

std::string to_string(Variant v) { return v == Variant::T ? "t" : "n"; }
std::string to_string(Mode m) { return m == Mode::Vanilla ? "vanilla" : "improved"; }

Variant parse_variant(const std::string& s) {
  if (s == "t" || s == "T") return Variant::T;
  if (s == "n" || s == "N") return Variant::N;
  throw DomainError("unknown variant '" + s + "' (expected t or n)");
}

Mode parse_mode(const std::string& s) {
  if (s == "vanilla") return Mode::Vanilla;
  if (s == "improved") return Mode::Improved;
  throw DomainError("unknown mode '" + s + "' (expected vanilla or improved)");
}

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || head_dim == 0 || d_ff == 0) throw DomainError("model config: zero-sized layer");
  if (d_model != n_heads * head_dim) {
    throw DomainError("model config: d_model " + std::to_string(d_model) + " != n_heads * head_dim");
  }
  if (max_len < 2) throw DomainError("model config: max_len must be at least 2");
  if (mantissa_len < 1) throw DomainError("model config: mantissa_len must be positive");
  if (max_target_len < static_cast<std::size_t>(mantissa_len) + 2) {
    throw DomainError("model config: max_target_len too small for the P10 target");
  }
  if (vocab < static_cast<std::size_t>(text::Vocabulary(e_max).size())) {
    throw DomainError("model config: vocab " + std::to_string(vocab) + " smaller than the token layout");
  }
  if (regressor_layers == 0 || regressor_hidden == 0) throw DomainError("model config: empty regressor");
  if (proj_hidden == 0 || proj_dim == 0) throw DomainError("model config: empty projection head");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"head_dim", c.head_dim},
                     {"d_ff", c.d_ff},
                     {"vocab", c.vocab},
                     {"max_len", c.max_len},
                     {"variant", to_string(c.variant)},
                     {"regressor_hidden", c.regressor_hidden},
                     {"regressor_layers", c.regressor_layers},
                     {"proj_hidden", c.proj_hidden},
                     {"proj_dim", c.proj_dim},
                     {"max_target_len", c.max_target_len},
                     {"mantissa_len", c.mantissa_len},
                     {"e_max", c.e_max}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.head_dim = j.value("head_dim", c.d_model / c.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.e_max = j.value("e_max", d.e_max);
  c.vocab = j.value("vocab", static_cast<std::size_t>(text::Vocabulary(c.e_max).size()));
  c.max_len = j.value("max_len", d.max_len);
  c.variant = parse_variant(j.value("variant", std::string("t")));
  c.regressor_hidden = j.value("regressor_hidden", d.regressor_hidden);
  c.regressor_layers = j.value("regressor_layers", d.regressor_layers);
  c.proj_hidden = j.value("proj_hidden", d.proj_hidden);
  c.proj_dim = j.value("proj_dim", d.proj_dim);
  c.max_target_len = j.value("max_target_len", d.max_target_len);
  c.mantissa_len = j.value("mantissa_len", d.mantissa_len);
  c.validate();
}

namespace detail {

std::string layer_name(const char* stack, std::size_t l, const char* leaf) {
  return std::string(stack) + "." + std::to_string(l) + "." + leaf;
}

reg::ProjectionHead input_head(const ModelConfig& c) { return {"proj.x", c.d_model, c.proj_hidden, c.proj_dim}; }
reg::ProjectionHead meta_head(const ModelConfig& c) { return {"proj.m", reg::kMetaDim, c.proj_hidden, c.proj_dim}; }

std::vector<std::pair<std::size_t, std::size_t>> regressor_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::size_t in = c.d_model;
  for (std::size_t l = 0; l < c.regressor_layers; ++l) {
    shapes.emplace_back(in, c.regressor_hidden);
    in = c.regressor_hidden;
  }
  shapes.emplace_back(in, 1);
  return shapes;
}

std::string reg_weight(std::size_t l) { return "reg." + std::to_string(l) + ".w"; }
std::string reg_bias(std::size_t l) { return "reg." + std::to_string(l) + ".b"; }

Var block_attention(Tape& t, const ParamStore& p, const ModelConfig& c, Var x_norm, Var kv, const std::string& pre,
                    const char* q, const char* k, const char* v, const char* o, bool causal, ad::AttentionTrace* trace) {
  Var qq = ad::matmul(t, x_norm, t.param(p, pre + q));
  Var kk = ad::matmul(t, kv, t.param(p, pre + k));
  Var vv = ad::matmul(t, kv, t.param(p, pre + v));
  Var a = ad::attention(t, qq, kk, vv, c.n_heads, causal, trace);
  return ad::matmul(t, a, t.param(p, pre + o));
}

Var feed_forward(Tape& t, const ParamStore& p, Var x_norm, const std::string& pre) {
  Var h = ad::relu(t, ad::matmul(t, x_norm, t.param(p, pre + "ff1")));
  return ad::matmul(t, h, t.param(p, pre + "ff2"));
}

std::vector<int> positions(std::size_t n) {
  std::vector<int> pos(n);
  std::iota(pos.begin(), pos.end(), 0);
  return pos;
}

CrossMemory make_memory(Tape& t, const ModelConfig& c, const ParamStore& p, Var enc) {
  CrossMemory m;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l) + ".";
    m.k.push_back(ad::matmul(t, enc, t.param(p, pre + "ck")));
    m.v.push_back(ad::matmul(t, enc, t.param(p, pre + "cv")));
  }
  return m;
}

Var decoder_forward(Tape& t, const ModelConfig& c, const ParamStore& p, const CrossMemory& mem,
                    std::span<const int> dec_in) {
  if (dec_in.empty() || dec_in.size() > c.max_target_len) {
    throw DomainError("decoder: input length " + std::to_string(dec_in.size()) + " outside [1, " +
                      std::to_string(c.max_target_len) + "]");
  }
  const auto pos = positions(dec_in.size());
  Var y = ad::add(t, ad::embedding(t, t.param(p, "emb"), dec_in), ad::embedding(t, t.param(p, "dec.pos"), pos));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l) + ".";
    Var h = ad::rms_norm(t, y, t.param(p, pre + "ln1"));
    y = ad::add(t, y, block_attention(t, p, c, h, h, pre, "sq", "sk", "sv", "so", true, nullptr));
    h = ad::rms_norm(t, y, t.param(p, pre + "ln2"));
    Var q = ad::matmul(t, h, t.param(p, pre + "cq"));
    Var a = ad::attention(t, q, mem.k[l], mem.v[l], c.n_heads, false);
    y = ad::add(t, y, ad::matmul(t, a, t.param(p, pre + "co")));
    h = ad::rms_norm(t, y, t.param(p, pre + "ln3"));
    y = ad::add(t, y, feed_forward(t, p, h, pre));
  }
  return ad::matmul(t, ad::rms_norm(t, y, t.param(p, "dec.ln_f")), t.param(p, "lm_head"));
}

Var regressor_forward(Tape& t, const ModelConfig& c, const ParamStore& p, Var x) {
  const auto shapes = regressor_shapes(c);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    x = ad::linear(t, x, t.param(p, reg_weight(l)), t.param(p, reg_bias(l)));
    if (l + 1 < shapes.size()) x = ad::relu(t, x);
  }
  return x;
}

Tensor meta_matrix(const TrainData& data, std::span<const std::size_t> rows) {
  Tensor m({rows.size(), reg::kMetaDim});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = data.tasks.at(data.examples.at(rows[i]).task).meta;
    if (v.size() != reg::kMetaDim) throw ShapeError("task metadata embedding has wrong width");
    std::copy(v.begin(), v.end(), m.data() + i * reg::kMetaDim);
  }
  return m;
}

}  // namespace detail

using namespace detail;

ModelState init_model(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ModelState s;
  s.config = c;
  std::mt19937_64 rng(seed);
  auto& p = s.params;
  const std::size_t d = c.d_model;
  auto mat = [&](const std::string& name, std::size_t r, std::size_t k) { p.add(name, reg::scaled_uniform(r, k, rng)); };
  auto gain = [&](const std::string& name) { p.add(name, Tensor({1, d}, 1.0)); };

  mat("emb", c.vocab, d);
  mat("enc.pos", c.max_len, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l) + ".";
    gain(pre + "ln1");
    for (const char* w : {"wq", "wk", "wv", "wo"}) mat(pre + w, d, d);
    gain(pre + "ln2");
    mat(pre + "ff1", d, c.d_ff);
    mat(pre + "ff2", c.d_ff, d);
  }
  gain("enc.ln_f");

  if (c.variant == Variant::T) {
    mat("dec.pos", c.max_target_len, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      gain(pre + "ln1");
      for (const char* w : {"sq", "sk", "sv", "so"}) mat(pre + w, d, d);
      gain(pre + "ln2");
      for (const char* w : {"cq", "ck", "cv", "co"}) mat(pre + w, d, d);
      gain(pre + "ln3");
      mat(pre + "ff1", d, c.d_ff);
      mat(pre + "ff2", c.d_ff, d);
    }
    gain("dec.ln_f");
    mat("lm_head", d, c.vocab);
  }

  input_head(c).init(p, rng);
  meta_head(c).init(p, rng);

  if (c.variant == Variant::N) {
    p.add("bn.gamma", Tensor({1, d}, 1.0));
    p.add("bn.beta", Tensor({1, d}));
    p.add("bn.mean", Tensor({1, d}), false);
    p.add("bn.var", Tensor({1, d}, 1.0), false);
    const auto shapes = regressor_shapes(c);
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      mat(reg_weight(l), shapes[l].first, shapes[l].second);
      p.add(reg_bias(l), Tensor({1, shapes[l].second}));
    }
  }
  p.round_to_float();
  return s;
}

std::size_t parameter_count(const ModelConfig& c) { return init_model(c, 0).params.total_size(); }

std::vector<int> strip_padding(std::span<const int> tokens) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (id != text::Vocabulary::kPad) out.push_back(id);
  }
  if (out.empty()) throw DomainError("embed: sequence has no non-PAD tokens");
  return out;
}

Var encode(Tape& t, const ModelConfig& c, const ParamStore& p, std::span<const int> tokens,
           std::vector<ad::AttentionTrace>* traces) {
  if (tokens.empty()) throw DomainError("encode: empty sequence");
  if (tokens.size() > c.max_len) {
    throw DomainError("encode: sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                      std::to_string(c.max_len));
  }
  const auto pos = positions(tokens.size());
  Var x = ad::add(t, ad::embedding(t, t.param(p, "emb"), tokens), ad::embedding(t, t.param(p, "enc.pos"), pos));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l) + ".";
    ad::AttentionTrace* tr = nullptr;
    if (traces) tr = &traces->emplace_back();
    Var h = ad::rms_norm(t, x, t.param(p, pre + "ln1"));
    x = ad::add(t, x, block_attention(t, p, c, h, h, pre, "wq", "wk", "wv", "wo", false, tr));
    h = ad::rms_norm(t, x, t.param(p, pre + "ln2"));
    x = ad::add(t, x, feed_forward(t, p, h, pre));
  }
  return ad::rms_norm(t, x, t.param(p, "enc.ln_f"));
}

Var mean_pool(Tape& t, Var hidden) { return ad::mean_rows(t, hidden); }

Tensor embed(const ModelState& s, const std::vector<text::TokenSequence>& batch) {
  const std::size_t d = s.config.d_model;
  Tensor out({batch.size(), d});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tape t(false);
    const auto ids = strip_padding(batch[i]);
    const Tensor& v = t.value(mean_pool(t, encode(t, s.config, s.params, ids)));
    std::copy_n(v.data(), d, out.data() + i * d);
  }
  return out;
}

Tensor project(const ModelState& s, const Tensor& pooled) {
  if (pooled.rank() != 2 || pooled.shape()[1] != s.config.d_model) throw ShapeError("project: expected [n, d_model] input");
  Tape t(false);
  return t.value(input_head(s.config).apply(t, s.params, t.constant(pooled)));
}

Var decode_logits(Tape& t, const ModelConfig& c, const ParamStore& p, Var enc, std::span<const int> dec_in) {
  if (c.variant != Variant::T) throw DomainError("decode_logits: model has no decoder");
  return decoder_forward(t, c, p, make_memory(t, c, p, enc), dec_in);
}

}  // namespace uniso::model
