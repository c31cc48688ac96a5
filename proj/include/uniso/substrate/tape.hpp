#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "uniso/substrate/param_store.hpp"
#include "uniso/substrate/tensor.hpp"

namespace uniso::ad {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode recorder. Nodes are appended in evaluation order, so a
/// reverse sweep over the node list is a valid topological order.
///
/// A tape built with grad disabled records forward values only; it is the
/// inference path and never allocates gradient buffers.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Tensor value);
  /// Binds a parameter by reference. The store must outlive the tape.
  /// Trainable entries receive gradients; frozen ones behave as constants.
  Var param(const ParamStore& store, const std::string& name);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::string_view op_name(Var v) const { return nodes_[v.id].op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Appends an op result. `parents` determine whether the node needs a
  /// gradient; `backward` is dropped when none of them do. Throws
  /// NonFiniteError naming the op and step if the value has NaN/Inf.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = seed and sweeps backwards.
  void backward(Var loss, double seed = 1.0);

  /// Gradient accumulated into a node, or nullptr if none reached it.
  const Tensor* grad(Var v) const;
  /// Zero-initialised gradient buffer of a node, created on first use.
  Tensor& grad_buffer(std::size_t id);

  /// Gradients of every trainable parameter bound to this tape that the
  /// last backward() reached. Unreached parameters get zero tensors.
  GradMap param_grads() const;

 private:
  struct Node {
    Tensor own;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    bool grad_touched = false;
    std::string_view op;
    std::string param_name;
    BackwardFn backward;

    const Tensor& value_ref() const { return external ? *external : own; }
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> param_nodes_;
  std::map<std::pair<const ParamStore*, std::string>, std::size_t> bound_;
};

}  // namespace uniso::ad
