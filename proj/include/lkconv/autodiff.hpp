#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lkconv/tensor.hpp"

namespace lkc::ad {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// What a recorded op sees when its backward runs. Entries of `input_grads` are
/// null for inputs that do not need a gradient; non-null ones must be accumulated into.
template <typename T>
struct BackwardContext {
  const Tensor<T>& grad_out;
  const Tensor<T>& out;
  std::vector<const Tensor<T>*> inputs;
  std::vector<Tensor<T>*> input_grads;

  const Tensor<T>& input(std::size_t i) const { return *inputs[i]; }
  Tensor<T>* grad(std::size_t i) const { return input_grads[i]; }
};

template <typename T>
class Gradients {
 public:
  Gradients(std::vector<std::string> names, std::vector<std::size_t> nodes, std::vector<Tensor<T>> grads)
      : names_(std::move(names)), nodes_(std::move(nodes)), grads_(std::move(grads)) {}

  std::size_t size() const { return grads_.size(); }
  const std::string& name(std::size_t param_id) const { return names_.at(param_id); }
  const Tensor<T>& at(std::size_t param_id) const { return grads_.at(param_id); }

  const Tensor<T>& operator[](const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return grads_[i];
    throw ShapeError("no parameter named '" + name + "' on the tape");
  }

  const Tensor<T>& of(Var<T> v) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i] == v.id) return grads_[i];
    throw ShapeError("variable is not a parameter of this tape");
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> nodes_;
  std::vector<Tensor<T>> grads_;
};

/// Reverse-mode tape. Ops append nodes in evaluation order; backward() walks them in
/// exact reverse order and adds each op's contribution into its inputs' gradients.
/// backward() does not consume the tape, so it can be replayed.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const BackwardContext<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Detached value; never receives a gradient.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false); }

  Var<T> parameter(Tensor<T> value, std::string name) {
    for (const auto& n : param_names_)
      if (n == name) throw ShapeError("parameter '" + name + "' registered twice");
    auto v = push(std::move(value), {}, nullptr, true);
    param_names_.push_back(std::move(name));
    param_nodes_.push_back(v.id);
    return v;
  }

  Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.tape != this) throw ShapeError("op mixes variables from different tapes");
      ids.push_back(in.id);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), std::move(ids), needs ? std::move(fn) : nullptr, needs);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::string>& parameter_names() const { return param_names_; }

  Gradients<T> backward(Var<T> loss) const {
    if (loss.tape != this) throw ShapeError("loss belongs to another tape");
    if (value(loss).size() != 1) throw DomainError("backward needs a scalar loss, got shape " + shape_str(value(loss).shape()));
    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    grads[loss.id] = Tensor<T>::ones(value(loss).shape());
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!grads[i] || !node.backward) continue;
      BackwardContext<T> ctx{*grads[i], node.value, {}, {}};
      for (auto in : node.inputs) {
        ctx.inputs.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (!grads[in]) grads[in] = Tensor<T>::zeros(nodes_[in].value.shape());
          ctx.input_grads.push_back(&*grads[in]);
        } else {
          ctx.input_grads.push_back(nullptr);
        }
      }
      node.backward(ctx);
    }
    std::vector<Tensor<T>> out;
    out.reserve(param_nodes_.size());
    for (auto id : param_nodes_)
      out.push_back(grads[id] ? std::move(*grads[id]) : Tensor<T>::zeros(nodes_[id].value.shape()));
    return Gradients<T>(param_names_, param_nodes_, std::move(out));
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), requires_grad});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::string> param_names_;
  std::vector<std::size_t> param_nodes_;
};

}  // namespace lkc::ad
