#include "uniso/textcodec.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>

#include "uniso/error.hpp"

namespace uniso::text {

Variable Variable::continuous(std::string name, double lo, double hi) {
  return Variable{std::move(name), VarKind::Continuous, lo, hi, 0};
}

Variable Variable::categorical(std::string name, int k) {
  return Variable{std::move(name), VarKind::Categorical, 0.0, 0.0, k};
}

DesignSpace::DesignSpace(std::vector<Variable> vars) : vars_(std::move(vars)) {
  std::set<std::string> seen;
  for (const auto& v : vars_) {
    if (v.name.empty()) throw DomainError("design space: empty variable name");
    if (!seen.insert(v.name).second) throw DomainError("design space: duplicate variable '" + v.name + "'");
    if (v.kind == VarKind::Continuous && !(v.lo < v.hi)) {
      throw DomainError("design space: variable '" + v.name + "' needs lo < hi");
    }
    if (v.kind == VarKind::Categorical && v.categories < 2) {
      throw DomainError("design space: variable '" + v.name + "' needs at least 2 categories");
    }
  }
}

bool DesignSpace::all_continuous() const noexcept {
  for (const auto& v : vars_) {
    if (v.kind != VarKind::Continuous) return false;
  }
  return true;
}

bool DesignSpace::all_categorical() const noexcept {
  for (const auto& v : vars_) {
    if (v.kind != VarKind::Categorical) return false;
  }
  return true;
}

void validate_design(const DesignSpace& space, const Design& x) {
  if (x.size() != space.dim()) {
    throw DomainError("design: arity " + std::to_string(x.size()) + " does not match space of " +
                      std::to_string(space.dim()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Variable& v = space.variables()[i];
    const double val = x[i];
    bool ok;
    if (v.kind == VarKind::Continuous) {
      ok = std::isfinite(val) && val >= v.lo && val <= v.hi;
    } else {
      ok = val == std::floor(val) && val >= 0 && val < v.categories;
    }
    if (!ok) throw DomainError("design: value " + std::to_string(val) + " out of range for variable '" + v.name + "'");
  }
}

void Metadata::validate() const {
  auto check = [](const std::string& field, const char* label) {
    if (field.empty()) throw DomainError(std::string("metadata: empty ") + label);
    if (field.find('\n') != std::string::npos || field.find('\r') != std::string::npos) {
      throw DomainError(std::string("metadata: newline in ") + label);
    }
  };
  check(name, "name");
  check(description, "description");
  check(objective, "objective");
}

namespace {

std::string format_value(double v, int sig_digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", sig_digits, v);
  std::string s(buf);
  if (s == "-0") s = "0";
  return s;
}

}  // namespace

std::string serialize_design(const DesignSpace& space, const Design& x, int sig_digits) {
  if (space.dim() == 0) throw DomainError("serialize_design: empty design space");
  if (sig_digits < 3 || sig_digits > 8) throw DomainError("serialize_design: sig_digits must lie in [3, 8]");
  validate_design(space, x);
  std::string out = "{";
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Variable& v = space.variables()[i];
    if (i) out += ',';
    out += '"';
    out += v.name;
    out += "\":";
    if (v.kind == VarKind::Categorical) {
      out += std::to_string(static_cast<long long>(x[i]));
    } else {
      out += format_value(x[i], sig_digits);
    }
  }
  out += '}';
  return out;
}

Design parse_design(const DesignSpace& space, std::string_view text) {
  Design x;
  std::size_t pos = 0;
  auto expect = [&](char c) {
    if (pos >= text.size() || text[pos] != c) {
      throw FormatError("parse_design: expected '" + std::string(1, c) + "' at offset " + std::to_string(pos));
    }
    ++pos;
  };
  expect('{');
  for (std::size_t i = 0; i < space.dim(); ++i) {
    if (i) expect(',');
    expect('"');
    const std::string& name = space.variables()[i].name;
    if (text.substr(pos, name.size()) != name) throw FormatError("parse_design: expected key '" + name + "'");
    pos += name.size();
    expect('"');
    expect(':');
    std::size_t end = text.find_first_of(",}", pos);
    if (end == std::string_view::npos) throw FormatError("parse_design: unterminated value");
    std::string num(text.substr(pos, end - pos));
    char* stop = nullptr;
    double v = std::strtod(num.c_str(), &stop);
    if (num.empty() || *stop != '\0') throw FormatError("parse_design: bad number '" + num + "'");
    x.push_back(v);
    pos = end;
  }
  expect('}');
  if (pos != text.size()) throw FormatError("parse_design: trailing characters");
  return x;
}

Design snap_design(const DesignSpace& space, const Design& x, int sig_digits) {
  Design out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Variable& v = space.variables()[i];
    if (v.kind != VarKind::Continuous) continue;
    out[i] = std::strtod(format_value(x[i], sig_digits).c_str(), nullptr);
    if (out[i] < v.lo) out[i] = v.lo;
    if (out[i] > v.hi) out[i] = v.hi;
  }
  return out;
}

std::string metadata_prefix(const Metadata& m) {
  m.validate();
  return "name: " + m.name + "; description: " + m.description + "; objective: " + m.objective + "; x: ";
}

std::string compose_input(const Metadata& m, std::string_view design_text) {
  return metadata_prefix(m) + std::string(design_text);
}

Vocabulary::Vocabulary(int e_max) : e_max_(e_max) {
  if (e_max < 1) throw DomainError("vocabulary: e_max must be positive");
}

int Vocabulary::digit(int d) const {
  if (d < 0 || d > 9) throw DomainError("vocabulary: digit out of range");
  return kDigit0 + d;
}

int Vocabulary::exponent(int e) const {
  if (e < -e_max_ || e > e_max_) {
    throw DomainError("vocabulary: exponent " + std::to_string(e) + " needs E_MAX >= " + std::to_string(std::abs(e)));
  }
  return kExpBase + e + e_max_;
}

std::string Vocabulary::token_name(int id) const {
  if (is_byte(id)) return std::string(1, static_cast<char>(id));
  switch (id) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kSep: return "<sep>";
    case kPlus: return "<+>";
    case kMinus: return "<->";
    default: break;
  }
  if (is_digit(id)) return "<" + std::to_string(id - kDigit0) + ">";
  if (is_exponent(id)) return "<E" + std::to_string(exponent_value(id)) + ">";
  return "<unk:" + std::to_string(id) + ">";
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ULL;
    }
  };
  for (int id : {kPad, kBos, kEos, kSep, kPlus, kMinus, kDigit0, kExpBase, e_max_, size()}) {
    mix(static_cast<std::uint64_t>(id));
  }
  return h;
}

TokenSequence tokenize(std::string_view s) {
  TokenSequence t;
  t.reserve(s.size() + 2);
  t.push_back(Vocabulary::kBos);
  for (unsigned char c : s) t.push_back(c);
  t.push_back(Vocabulary::kEos);
  return t;
}

std::string detokenize(const TokenSequence& t) {
  if (t.size() < 2 || t.front() != Vocabulary::kBos || t.back() != Vocabulary::kEos) {
    throw FormatError("detokenize: sequence must be framed by BOS/EOS");
  }
  std::string s;
  s.reserve(t.size() - 2);
  for (std::size_t i = 1; i + 1 < t.size(); ++i) {
    if (t[i] < 0 || t[i] > 255) {
      throw FormatError("detokenize: special token " + std::to_string(t[i]) + " at position " + std::to_string(i));
    }
    s.push_back(static_cast<char>(t[i]));
  }
  return s;
}

TokenSequence p10_encode(double y, int mantissa_len, const Vocabulary& vocab) {
  if (mantissa_len < 1) throw DomainError("p10_encode: mantissa_len must be >= 1");
  if (!std::isfinite(y)) throw DomainError("p10_encode: non-finite value");
  TokenSequence out;
  if (y == 0.0) {
    out.push_back(Vocabulary::kPlus);
    for (int i = 0; i < mantissa_len; ++i) out.push_back(vocab.digit(0));
    out.push_back(vocab.exponent(0));
    return out;
  }
  // %e rounds the exact binary value half-to-even and renormalises on carry.
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*e", mantissa_len - 1, std::abs(y));
  std::string s(buf);
  const std::size_t epos = s.find('e');
  int exp10 = std::atoi(s.c_str() + epos + 1) - (mantissa_len - 1);
  if (std::abs(exp10) > vocab.e_max()) {
    throw DomainError("p10_encode: exponent " + std::to_string(exp10) + " needs E_MAX >= " +
                      std::to_string(std::abs(exp10)));
  }
  out.push_back(y < 0 ? Vocabulary::kMinus : Vocabulary::kPlus);
  for (std::size_t i = 0; i < epos; ++i) {
    if (s[i] == '.') continue;
    out.push_back(vocab.digit(s[i] - '0'));
  }
  out.push_back(vocab.exponent(exp10));
  return out;
}

std::optional<double> try_p10_decode(const TokenSequence& t, const Vocabulary& vocab) {
  if (t.size() < 3) return std::nullopt;
  if (t.front() != Vocabulary::kPlus && t.front() != Vocabulary::kMinus) return std::nullopt;
  if (!vocab.is_exponent(t.back())) return std::nullopt;
  std::string num = t.front() == Vocabulary::kMinus ? "-" : "";
  bool all_zero = true;
  for (std::size_t i = 1; i + 1 < t.size(); ++i) {
    if (!vocab.is_digit(t[i])) return std::nullopt;
    const int d = t[i] - Vocabulary::kDigit0;
    all_zero = all_zero && d == 0;
    num.push_back(static_cast<char>('0' + d));
  }
  if (all_zero) return 0.0;
  num += "e" + std::to_string(vocab.exponent_value(t.back()));
  return std::strtod(num.c_str(), nullptr);
}

double p10_decode(const TokenSequence& t, const Vocabulary& vocab) {
  auto v = try_p10_decode(t, vocab);
  if (!v) throw FormatError("p10_decode: expected sign, digits, exponent");
  return *v;
}

}  // namespace uniso::text
