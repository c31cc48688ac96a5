#include "uniso/substrate/param_store.hpp"

#include "uniso/error.hpp"

namespace uniso::ad {

void ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  if (entries_.count(name)) throw Error("param store: duplicate parameter '" + name + "'");
  ParamEntry e;
  e.first_moment = Tensor::zeros_like(value);
  e.second_moment = Tensor::zeros_like(value);
  e.value = std::move(value);
  e.trainable = trainable;
  entries_.emplace(name, std::move(e));
}

ParamEntry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("param store: unknown parameter '" + name + "'");
  return it->second;
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("param store: unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::assign(const std::string& name, const Tensor& value) {
  auto& e = entry(name);
  if (!e.value.same_shape(value)) {
    throw ShapeError("param store: assigning " + shape_string(value.shape()) + " to '" + name + "' of shape " +
                     shape_string(e.value.shape()));
  }
  e.value = value;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

std::size_t ParamStore::trainable_size() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& [k, e] : entries_) {
    if (k.compare(0, prefix.size(), prefix) == 0) e.trainable = trainable;
  }
}

void ParamStore::round_to_float() {
  for (auto& [_, e] : entries_) {
    for (double& v : e.value.storage()) v = static_cast<double>(static_cast<float>(v));
  }
}

void ParamStore::reset_optimizer_state() {
  for (auto& [_, e] : entries_) {
    e.first_moment.fill(0.0);
    e.second_moment.fill(0.0);
    e.step = 0;
  }
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (const auto& [k, e] : a.entries_) {
    auto it = b.entries_.find(k);
    if (it == b.entries_.end() || !(it->second.value == e.value)) return false;
  }
  return true;
}

}  // namespace uniso::ad
