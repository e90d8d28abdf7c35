#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "osm/autodiff/tensor.hpp"

namespace osm::ad {

// A named learnable tensor and its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), std::vector<T>(value.size())) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Ordered record of executed primitives. Nodes are appended in execution
// order, so reverse iteration is a reverse topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  // Registers a parameter leaf; repeated calls return the same node.
  Var<T> parameter(Parameter<T>& p);
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn);

  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  // Upstream gradient of a node while its backward function runs.
  const Tensor<T>& grad(std::uint32_t id) const { return nodes_[id].grad; }
  // Gradient accumulator of an input node (zero-initialized on first use).
  T* grad_buffer(std::uint32_t id);

  // Accumulates d(loss)/d(parameter) into every reachable Parameter::grad.
  void backward(Var<T> loss);
  // Same with an explicit upstream gradient for a non-scalar output.
  void backward(Var<T> output, const Tensor<T>& seed);

  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  void run_backward(std::uint32_t from);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::uint32_t> param_ids_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace osm::ad
