#include "osm/autodiff/tape.hpp"

#include "osm/autodiff/kernels.hpp"
#include "osm/errors.hpp"

namespace osm::ad {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
  if (!p.grad.same_shape(p.value) || p.grad.size() != p.value.size()) {
    throw ContractError("parameter '" + p.name + "' has grad shape " + p.grad.shape_string() +
                        " but value shape " + p.value.shape_string());
  }
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_ids_.emplace(&p, id);
  return {this, id};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
  bool needs = false;
  for (const auto& v : inputs) {
    if (v.tape != this) throw ContractError("operand recorded on a different tape");
    needs = needs || nodes_[v.id].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
T* Tape<T>::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) {
    n.grad = Tensor<T>(n.value.shape(), std::vector<T>(n.value.size(), T(0)));
  }
  return n.grad.data();
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ContractError("loss recorded on a different tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        nodes_[loss.id].value.shape_string());
  }
  backward(loss, Tensor<T>::scalar(T(1)));
}

template <typename T>
void Tape<T>::backward(Var<T> output, const Tensor<T>& seed) {
  if (output.tape != this) throw ContractError("output recorded on a different tape");
  Node& out = nodes_[output.id];
  if (seed.size() != out.value.size()) {
    throw DimensionError("backward seed " + seed.shape_string() + " does not match output " +
                         out.value.shape_string());
  }
  for (auto& n : nodes_) n.grad = Tensor<T>();
  if (!out.requires_grad) return;
  T* g = grad_buffer(output.id);
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] = seed[i];
  run_backward(output.id);
}

template <typename T>
void Tape<T>::run_backward(std::uint32_t from) {
  const auto& k = kernels::active<T>();
  for (std::int64_t id = from; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(id));
    if (n.param) k.add_inplace(n.grad.size(), n.grad.data(), n.param->grad.data());
  }
  for (auto& n : nodes_) n.grad = Tensor<T>();
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  param_ids_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace osm::ad
