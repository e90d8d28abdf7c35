#include "osm/orthomask/orthomask.hpp"

#include <cmath>
#include <string>

#include "osm/errors.hpp"

namespace osm::orthomask {

double TemperatureSchedule::operator()(long step) const {
  if (step < 0) throw DomainError("temperature step must be >= 0");
  return std::max(floor, initial * std::pow(decay, static_cast<double>(step)));
}

double temperature(long step) { return TemperatureSchedule{}(step); }

Var<double> weights(Var<double> scores, double temperature) {
  return ad::softmax_rows(scores, temperature);
}

Tensor<double> weights(const Tensor<double>& scores, double temperature) {
  return ad::softmax_rows_value(scores, temperature);
}

int select_k(const Tensor<double>& w, std::span<const double> costs, double tau) {
  if (w.cols() != costs.size()) throw DimensionError("W columns and cost vector length differ");
  double prefix = 0.0;
  int k = 0;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) row += w(i, j) * costs[j];
    prefix += row;
    if (!(prefix < tau)) break;
    k = static_cast<int>(i) + 1;
  }
  return k;
}

namespace {

void check_k(std::size_t rows, int k) {
  if (k < 0 || static_cast<std::size_t>(k) > rows) {
    throw ContractError("k = " + std::to_string(k) + " outside [0, " + std::to_string(rows) + "]");
  }
}

}  // namespace

Var<double> assemble_mask(Var<double> w, int k) {
  check_k(w.rows(), k);
  if (k == 0) return w.tape->constant(Tensor<double>(1, w.cols(), 0.0));
  return ad::sum_axis(ad::slice_rows(w, 0, static_cast<std::size_t>(k)), 0);
}

MaskVector assemble_mask(const Tensor<double>& w, int k) {
  check_k(w.rows(), k);
  MaskVector z = MaskVector::zeros(w.cols());
  z.mode = encoder::MaskMode::soft;
  for (int i = 0; i < k; ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) z.values[j] += w(static_cast<std::size_t>(i), j);
  return z;
}

Var<double> ortho_loss(Var<double> w, int k) {
  check_k(w.rows(), k);
  if (k == 0) return w.tape->constant(Tensor<double>::scalar(0.0));
  const auto n = static_cast<std::size_t>(k);
  Var<double> top = ad::slice_rows(w, 0, n);
  Var<double> gram = ad::matmul(top, ad::transpose(top));
  Tensor<double> eye(n, n), upper(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    eye(i, i) = 1.0;
    for (std::size_t j = i; j < n; ++j) upper(i, j) = 1.0;
  }
  Var<double> diff = ad::sub(gram, w.tape->constant(std::move(eye)));
  Var<double> sq = ad::mul(ad::mul(diff, diff), w.tape->constant(std::move(upper)));
  return ad::sqrt(ad::sum(sq));
}

double ortho_loss(const Tensor<double>& w, int k) {
  check_k(w.rows(), k);
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = i; j < k; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c)
        dot += w(static_cast<std::size_t>(i), c) * w(static_cast<std::size_t>(j), c);
      const double e = i == j ? dot - 1.0 : dot;
      acc += e * e;
    }
  }
  return std::sqrt(acc);
}

MaskVector round_mask(const Tensor<double>& w, const CostVector& cost, double tau) {
  const int k = select_k(w, cost.per_group, tau);
  const std::size_t n = w.cols();
  std::vector<bool> taken(n, false);
  std::vector<int> order;
  for (int i = 0; i < k; ++i) {
    int best = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (taken[j]) continue;
      if (best < 0 || w(static_cast<std::size_t>(i), j) > w(static_cast<std::size_t>(i), static_cast<std::size_t>(best)))
        best = static_cast<int>(j);
    }
    if (best < 0) break;
    taken[static_cast<std::size_t>(best)] = true;
    order.push_back(best);
  }
  MaskVector mask = MaskVector::from_selection(n, order);
  while (!costs::verify(mask, cost, tau)) {
    if (order.empty()) {
      throw BudgetInfeasibleError("no mask satisfies budget tau = " + std::to_string(tau));
    }
    mask.values[static_cast<std::size_t>(order.back())] = 0.0;
    order.pop_back();
  }
  return mask;
}

void round_masks(const Tensor<double>& w, std::vector<SubnetPlan>& plans, const CostVector& cost) {
  for (auto& p : plans) {
    p.mask = round_mask(w, cost, p.tau);
    p.k = static_cast<int>(p.mask.selected().size());
  }
}

}  // namespace osm::orthomask
