#pragma once

#include <span>
#include <vector>

#include "osm/autodiff/ops.hpp"
#include "osm/costs/costs.hpp"

namespace osm::orthomask {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using costs::CostVector;
using encoder::MaskVector;

struct TemperatureSchedule {
  double initial = 1.0;
  double floor = 0.1;
  double decay = 0.999992;

  double operator()(long step) const;
};

// max(0.1, 0.999992^t).
double temperature(long step);

// Row-wise softmax of the score matrix at temperature T.
Var<double> weights(Var<double> scores, double temperature);
Tensor<double> weights(const Tensor<double>& scores, double temperature);

// Largest k whose top-k rows have expected cost strictly below tau.
int select_k(const Tensor<double>& w, std::span<const double> costs, double tau);

// Sum of the top k rows, 1xN.
Var<double> assemble_mask(Var<double> w, int k);
MaskVector assemble_mask(const Tensor<double>& w, int k);

// sqrt(sum_i (D_ii - 1)^2 + sum_{i<j} D_ij^2) with D = W[0:k] W[0:k]^T.
Var<double> ortho_loss(Var<double> w, int k);
double ortho_loss(const Tensor<double>& w, int k);

// Binary mask from the top k rows: each row takes its most probable group not
// yet taken. Trailing groups are dropped until the strict budget check passes.
// Throws BudgetInfeasibleError if even the empty mask fails.
MaskVector round_mask(const Tensor<double>& w, const CostVector& cost, double tau);

struct SubnetPlan {
  costs::Budget budget;
  double tau = 0.0;
  int k = 0;
  MaskVector mask;
};

// Rounds every plan in place (k and mask updated).
void round_masks(const Tensor<double>& w, std::vector<SubnetPlan>& plans, const CostVector& cost);

}  // namespace osm::orthomask
