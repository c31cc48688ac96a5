#include "uniso/substrate/tape.hpp"

#include "uniso/error.hpp"

namespace uniso::ad {

Var Tape::constant(Tensor value) {
  Node n;
  n.own = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::param(const ParamStore& store, const std::string& name) {
  auto key = std::make_pair(&store, name);
  if (auto it = bound_.find(key); it != bound_.end()) return Var{it->second};
  const ParamEntry& e = store.entry(name);
  Node n;
  n.external = &e.value;
  n.op = "param";
  n.param_name = name;
  n.requires_grad = grad_enabled_ && e.trainable;
  nodes_.push_back(std::move(n));
  std::size_t id = nodes_.size() - 1;
  bound_.emplace(std::move(key), id);
  if (nodes_[id].requires_grad) param_nodes_.push_back(id);
  return Var{id};
}

const Tensor& Tape::value(Var v) const {
  if (v.id >= nodes_.size()) throw Error("tape: invalid variable handle");
  return nodes_[v.id].value_ref();
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NonFiniteError("non-finite value produced by op '" + std::string(op) + "' at step " +
                         std::to_string(nodes_.size()));
  }
  Node n;
  n.own = std::move(value);
  n.op = op;
  if (grad_enabled_) {
    for (Var p : parents) {
      if (nodes_[p.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.grad_touched) {
    n.grad = Tensor(n.value_ref().shape());
    n.grad_touched = true;
  }
  return n.grad;
}

const Tensor* Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.grad_touched ? &n.grad : nullptr;
}

void Tape::backward(Var loss, double seed) {
  if (!grad_enabled_) throw Error("tape: backward() on a tape recorded without gradients");
  if (value(loss).size() != 1) {
    throw ShapeError("tape: backward() needs a scalar loss, got " + shape_string(value(loss).shape()));
  }
  for (auto& n : nodes_) {
    if (n.grad_touched) n.grad.fill(0.0);
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] = seed;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad_touched || !n.backward) continue;
    n.backward(*this, i);
    if (!nodes_[i].grad.all_finite()) {
      throw NonFiniteError("non-finite gradient in backward of op '" + std::string(nodes_[i].op) + "' at step " +
                           std::to_string(i));
    }
  }
}

GradMap Tape::param_grads() const {
  GradMap out;
  for (std::size_t id : param_nodes_) {
    const Node& n = nodes_[id];
    out[n.param_name] = n.grad_touched ? n.grad : Tensor(n.value_ref().shape());
  }
  return out;
}

}  // namespace uniso::ad
