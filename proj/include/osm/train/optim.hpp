#pragma once

#include <cmath>
#include <vector>

#include "osm/autodiff/tape.hpp"
#include "osm/train/config.hpp"

namespace osm::train {

template <typename T>
struct AdamSlots {
  std::vector<ad::Tensor<T>> m, v;
};

template <typename T>
void init_slots(AdamSlots<T>& slots, const std::vector<ad::Parameter<T>*>& params) {
  slots.m.clear();
  slots.v.clear();
  for (auto* p : params) {
    slots.m.emplace_back(p->value.shape(), std::vector<T>(p->value.size()));
    slots.v.emplace_back(p->value.shape(), std::vector<T>(p->value.size()));
  }
}

// AdamW with decoupled weight decay; `count` is the 1-based update index.
template <typename T>
void adam_step(const std::vector<ad::Parameter<T>*>& params, AdamSlots<T>& slots, long count, double lr,
               double weight_decay, const TrainConfig& c) {
  const double b1 = c.adam_beta1, b2 = c.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(count));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    T* m = slots.m[i].data();
    T* v = slots.v[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double upd = (mj / corr1) / (std::sqrt(vj / corr2) + c.adam_eps);
      const double w = p.value[j];
      p.value[j] = static_cast<T>(w - lr * (upd + weight_decay * w));
    }
  }
}

template <typename T>
void clip_grads(const std::vector<ad::Parameter<T>*>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto* p : params)
    for (T g : p->grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return;
  const T s = static_cast<T>(max_norm / norm);
  for (auto* p : params)
    for (T& g : p->grad.storage()) g *= s;
}

template <typename T>
void zero_grads(const std::vector<ad::Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace osm::train
