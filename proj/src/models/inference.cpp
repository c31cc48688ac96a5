#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "models_internal.hpp"
#include "uniso/error.hpp"

namespace uniso::model {

using ad::Tensor;
using ad::Var;
using namespace detail;

namespace {

int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  const double* r = logits.data() + row * v;
  return static_cast<int>(std::max_element(r, r + v) - r);
}

int sample_row(const Tensor& logits, std::size_t row, const DecodeConfig& cfg, std::mt19937_64& rng) {
  if (cfg.temperature <= 1e-6) return argmax_row(logits, row);
  const std::size_t v = logits.cols();
  const double* r = logits.data() + row * v;
  std::vector<std::size_t> idx(v);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return r[a] > r[b]; });
  std::size_t keep = cfg.top_k == 0 ? v : std::min(cfg.top_k, v);
  std::vector<double> prob(keep);
  const double top = r[idx[0]] / cfg.temperature;
  double z = 0.0;
  for (std::size_t k = 0; k < keep; ++k) z += prob[k] = std::exp(r[idx[k]] / cfg.temperature - top);
  for (double& q : prob) q /= z;
  if (cfg.top_p < 1.0) {
    double cum = 0.0;
    std::size_t k = 0;
    while (k < keep) {
      cum += prob[k++];
      if (cum >= cfg.top_p) break;
    }
    keep = std::max<std::size_t>(1, k);
    prob.resize(keep);
  }
  std::discrete_distribution<std::size_t> pick(prob.begin(), prob.end());
  return static_cast<int>(idx[pick(rng)]);
}

}  // namespace

std::vector<int> decode_tokens(const ModelState& s, std::span<const int> input, const DecodeConfig& cfg,
                               std::uint64_t sample_index) {
  const ModelConfig& c = s.config;
  if (c.variant != Variant::T) throw DomainError("decode: model is not UniSO-T");
  Tape t(false);
  Var enc = encode(t, c, s.params, strip_padding(input));
  const CrossMemory mem = make_memory(t, c, s.params, enc);
  std::mt19937_64 rng(cfg.seed + 0x9E3779B97F4A7C15ULL * (sample_index + 1));
  std::vector<int> dec{text::Vocabulary::kBos};
  const std::size_t n = static_cast<std::size_t>(c.mantissa_len) + 2;
  for (std::size_t k = 0; k < n; ++k) {
    const Tensor& logits = t.value(decoder_forward(t, c, s.params, mem, dec));
    const std::size_t row = logits.rows() - 1;
    dec.push_back(cfg.greedy ? argmax_row(logits, row) : sample_row(logits, row, cfg, rng));
  }
  return std::vector<int>(dec.begin() + 1, dec.end());
}

std::optional<double> predict_t(const ModelState& s, std::span<const int> input, const DecodeConfig& cfg) {
  const text::Vocabulary vocab = s.vocab();
  if (cfg.greedy) return text::try_p10_decode(decode_tokens(s, input, cfg), vocab);
  std::vector<double> values;
  for (std::size_t k = 0; k < std::max<std::size_t>(1, cfg.n_samples); ++k) {
    if (auto v = text::try_p10_decode(decode_tokens(s, input, cfg, k), vocab)) values.push_back(*v);
  }
  if (values.empty()) return std::nullopt;
  return reg::median(values);
}

std::string to_string(TokenCategory c) {
  switch (c) {
    case TokenCategory::Metadata: return "metadata";
    case TokenCategory::Key: return "key";
    case TokenCategory::Numeric: return "numeric";
    case TokenCategory::Structural: return "structural";
    case TokenCategory::Eos: return "eos";
  }
  return "?";
}

std::vector<TokenCategory> categorize_tokens(std::span<const int> tokens, std::size_t prefix_bytes) {
  std::vector<TokenCategory> out;
  out.reserve(tokens.size());
  std::size_t byte_pos = 0;
  bool in_quotes = false;
  for (int id : tokens) {
    if (id == text::Vocabulary::kEos) {
      out.push_back(TokenCategory::Eos);
      continue;
    }
    if (id < 0 || id >= 256) {
      out.push_back(TokenCategory::Structural);
      continue;
    }
    const char ch = static_cast<char>(id);
    if (byte_pos++ < prefix_bytes) {
      out.push_back(TokenCategory::Metadata);
    } else if (ch == '"') {
      in_quotes = !in_quotes;
      out.push_back(TokenCategory::Structural);
    } else if (in_quotes) {
      out.push_back(TokenCategory::Key);
    } else if (ch == '{' || ch == '}' || ch == ':' || ch == ',' || ch == ' ') {
      out.push_back(TokenCategory::Structural);
    } else {
      out.push_back(TokenCategory::Numeric);
    }
  }
  return out;
}

std::array<double, kTokenCategories> category_shares(const std::vector<Tensor>& probs,
                                                     const std::vector<TokenCategory>& categories) {
  if (probs.empty()) throw DomainError("category_shares: no attention matrices");
  std::array<double, kTokenCategories> share{};
  double rows = 0.0;
  for (const Tensor& p : probs) {
    if (p.rank() != 2 || p.cols() != categories.size()) {
      throw DomainError("category_shares: categories do not partition the " + std::to_string(p.cols()) + " keys");
    }
    for (std::size_t i = 0; i < p.rows(); ++i) {
      for (std::size_t j = 0; j < p.cols(); ++j) {
        const auto k = static_cast<std::size_t>(categories[j]);
        if (k >= kTokenCategories) throw DomainError("category_shares: unknown category");
        share[k] += p.at(i, j);
      }
      rows += 1.0;
    }
  }
  double total = 0.0;
  for (double& v : share) total += v /= rows;
  for (double& v : share) v /= total;
  return share;
}

std::array<double, kTokenCategories> attention_profile(const ModelState& s, std::span<const int> tokens,
                                                       const std::vector<TokenCategory>& categories) {
  if (categories.size() != tokens.size()) {
    throw DomainError("attention_profile: " + std::to_string(categories.size()) + " categories for " +
                      std::to_string(tokens.size()) + " tokens");
  }
  Tape t(false);
  std::vector<ad::AttentionTrace> traces;
  encode(t, s.config, s.params, tokens, &traces);
  std::vector<Tensor> probs;
  for (auto& tr : traces)
    for (auto& p : tr.probs) probs.push_back(std::move(p));
  return category_shares(probs, categories);
}

namespace {

constexpr char kMagic[6] = {'U', 'N', 'I', 'S', 'O', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const ModelState& s, const std::string& path) {
  nlohmann::json header;
  header["config"] = s.config;
  header["vocab_hash"] = std::to_string(s.vocab().hash());
  header["variant"] = to_string(s.config.variant);
  header["step"] = s.step;
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& [name, e] : s.params.entries()) {
    blocks.push_back({{"name", name}, {"shape", e.value.shape()}, {"trainable", e.trainable}});
  }
  header["blocks"] = blocks;
  const std::string h = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot write " + path);
  os.write(kMagic, sizeof kMagic);
  put_u32(os, static_cast<std::uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, e] : s.params.entries()) {
    for (double v : e.value.values()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw Error("checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path);
  char magic[6];
  if (!is.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0) throw FormatError("checkpoint: bad magic in " + path);
  const std::uint32_t len = get_u32(is);
  std::string h(len, '\0');
  if (!is.read(h.data(), len)) throw FormatError("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(h);
  ModelState s;
  s.config = header.at("config").get<ModelConfig>();
  if (header.at("vocab_hash").get<std::string>() != std::to_string(s.vocab().hash())) {
    throw FormatError("checkpoint: vocabulary hash mismatch");
  }
  s.step = header.at("step").get<std::int64_t>();
  for (const auto& b : header.at("blocks")) {
    const auto shape = b.at("shape").get<std::vector<std::size_t>>();
    Tensor v(shape);
    for (double& x : v.storage()) {
      const std::uint32_t bits = get_u32(is);
      float f;
      std::memcpy(&f, &bits, 4);
      x = f;
    }
    s.params.add(b.at("name").get<std::string>(), std::move(v), b.at("trainable").get<bool>());
  }
  const ModelState fresh = init_model(s.config, 0);
  for (const auto& [name, e] : fresh.params.entries()) {
    if (!s.params.contains(name) || !s.params.value(name).same_shape(e.value)) {
      throw FormatError("checkpoint: block '" + name + "' missing or misshaped");
    }
  }
  return s;
}

}  // namespace uniso::model
