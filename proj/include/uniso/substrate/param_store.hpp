#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uniso/substrate/tensor.hpp"

namespace uniso::ad {

struct ParamEntry {
  Tensor value;
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t step = 0;
  bool trainable = true;
};

using GradMap = std::map<std::string, Tensor>;

/// Named parameters plus their optimizer state. Shapes are fixed at add().
class ParamStore {
 public:
  void add(const std::string& name, Tensor value, bool trainable = true);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  ParamEntry& entry(const std::string& name);
  const ParamEntry& entry(const std::string& name) const;
  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }

  /// Overwrite a value in place; the shape must match.
  void assign(const std::string& name, const Tensor& value);

  std::vector<std::string> names() const;
  std::size_t total_size() const;
  std::size_t trainable_size() const;

  /// Marks every entry whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable);

  /// Rounds every value to the nearest float32 so single-width checkpoints
  /// reproduce the in-memory state exactly.
  void round_to_float();

  /// Drops optimizer moments and step counts.
  void reset_optimizer_state();

  const std::map<std::string, ParamEntry>& entries() const noexcept { return entries_; }

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::map<std::string, ParamEntry> entries_;
};

}  // namespace uniso::ad
