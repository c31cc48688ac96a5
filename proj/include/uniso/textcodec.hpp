#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace uniso::text {

enum class VarKind { Continuous, Categorical };

struct Variable {
  std::string name;
  VarKind kind = VarKind::Continuous;
  double lo = 0.0;
  double hi = 1.0;
  int categories = 0;

  static Variable continuous(std::string name, double lo, double hi);
  static Variable categorical(std::string name, int k);
};

/// Ordered, typed variables. Names are unique.
class DesignSpace {
 public:
  DesignSpace() = default;
  explicit DesignSpace(std::vector<Variable> vars);

  const std::vector<Variable>& variables() const noexcept { return vars_; }
  std::size_t dim() const noexcept { return vars_.size(); }
  bool all_continuous() const noexcept;
  bool all_categorical() const noexcept;

 private:
  std::vector<Variable> vars_;
};

/// One value per variable; categorical entries hold integral category ids.
using Design = std::vector<double>;

/// Throws DomainError naming the first variable out of range.
void validate_design(const DesignSpace& space, const Design& x);

struct Metadata {
  std::string name;
  std::string description;
  std::string objective;

  void validate() const;
  friend bool operator==(const Metadata&, const Metadata&) = default;
};

/// {"x0":0.1235,"x1":1} in variable order. Continuous values carry
/// `sig_digits` significant digits in shortest form.
std::string serialize_design(const DesignSpace& space, const Design& x, int sig_digits = 4);

/// Inverse of serialize_design for well-formed text.
Design parse_design(const DesignSpace& space, std::string_view text);

/// The design as the model sees it: continuous values rounded to the
/// printed precision.
Design snap_design(const DesignSpace& space, const Design& x, int sig_digits = 4);

/// Metadata prefix shared by every input of a task ("name: ...; x: ").
std::string metadata_prefix(const Metadata& m);
std::string compose_input(const Metadata& m, std::string_view design_text);

using TokenSequence = std::vector<int>;

/// Fixed id layout: bytes 0-255, PAD/BOS/EOS/SEP, sign tokens, digits,
/// exponent tokens E-emax..E+emax.
class Vocabulary {
 public:
  static constexpr int kPad = 256;
  static constexpr int kBos = 257;
  static constexpr int kEos = 258;
  static constexpr int kSep = 259;
  static constexpr int kPlus = 260;
  static constexpr int kMinus = 261;
  static constexpr int kDigit0 = 262;
  static constexpr int kExpBase = 272;

  explicit Vocabulary(int e_max = 16);

  int e_max() const noexcept { return e_max_; }
  int size() const noexcept { return kExpBase + 2 * e_max_ + 1; }

  int digit(int d) const;
  int exponent(int e) const;
  bool is_byte(int id) const noexcept { return id >= 0 && id < 256; }
  bool is_digit(int id) const noexcept { return id >= kDigit0 && id < kDigit0 + 10; }
  bool is_exponent(int id) const noexcept { return id >= kExpBase && id < size(); }
  int exponent_value(int id) const { return id - kExpBase - e_max_; }

  std::string token_name(int id) const;
  /// FNV-1a over the id layout; checkpoints record it.
  std::uint64_t hash() const;

 private:
  int e_max_;
};

TokenSequence tokenize(std::string_view s);
std::string detokenize(const TokenSequence& t);

/// Sign, `mantissa_len` digits, one exponent token. Rounds half to even.
TokenSequence p10_encode(double y, int mantissa_len, const Vocabulary& vocab);
/// Throws FormatError on malformed order or unknown tokens.
double p10_decode(const TokenSequence& t, const Vocabulary& vocab);
/// Non-throwing variant used by predictors.
std::optional<double> try_p10_decode(const TokenSequence& t, const Vocabulary& vocab);

}  // namespace uniso::text
