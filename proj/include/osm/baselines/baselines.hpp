#pragma once

#include <span>
#include <vector>

#include "osm/orthomask/learner.hpp"

namespace osm::baselines {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using costs::CostVector;
using encoder::GroupRegistry;
using encoder::MaskVector;

// Hard-concrete constants: stretch interval (gamma, zeta) and temperature.
inline constexpr double kHcGamma = -0.1;
inline constexpr double kHcZeta = 1.1;
inline constexpr double kHcBeta = 2.0 / 3.0;

// Groups in descending score order (ties to the lower id), taken while the
// running cost stays strictly below tau.
MaskVector ste_mask(std::span<const double> scores, const CostVector& cost, double tau);

double hc_sample(double log_alpha, double u);
// Elementwise over a 1xN log_alpha with matching uniform draws.
Var<double> hc_sample(Var<double> log_alpha, const Tensor<double>& u);
double hc_expected_open(double log_alpha);
Var<double> hc_expected_open(Var<double> log_alpha);
double hc_deterministic(double log_alpha);

// Ones on every group of blocks [0, split_block).
MaskVector aux_bottom_mask(const GroupRegistry& registry, int split_block);
// Deepest split whose bottom-block mask costs strictly less than tau.
int aux_split_for_budget(const GroupRegistry& registry, const CostVector& cost, double tau);

class TopkSteLearner final : public orthomask::MaskLearner {
 public:
  TopkSteLearner(CostVector cost, std::vector<double> taus);
  std::string_view name() const override { return "topk_ste"; }
  orthomask::StepGates step_gates(Tape<double>& tape, int subnet, long step) override;
  std::vector<ad::Parameter<double>*> parameters() override { return {&scores_}; }
  void finalize(std::vector<orthomask::SubnetPlan>& plans, long step) override;

 private:
  CostVector cost_;
  std::vector<double> taus_;
  ad::Parameter<double> scores_;
};

class L0Learner final : public orthomask::MaskLearner {
 public:
  // The budget penalty weight ramps linearly from 0 to `penalty` over Step 1.
  L0Learner(CostVector cost, std::vector<double> taus, double penalty, double init_log_alpha,
            long step1_steps, std::uint64_t seed);
  std::string_view name() const override { return "l0"; }
  orthomask::StepGates step_gates(Tape<double>& tape, int subnet, long step) override;
  std::vector<ad::Parameter<double>*> parameters() override { return {&log_alpha_}; }
  void finalize(std::vector<orthomask::SubnetPlan>& plans, long step) override;

  const ad::Parameter<double>& log_alpha() const { return log_alpha_; }

 private:
  CostVector cost_;
  std::vector<double> taus_;
  double penalty_;
  long step1_steps_;
  std::uint64_t seed_;
  ad::Parameter<double> log_alpha_;
};

class AuxLearner final : public orthomask::MaskLearner {
 public:
  AuxLearner(const GroupRegistry& registry, CostVector cost, std::vector<double> taus);
  std::string_view name() const override { return "aux"; }
  orthomask::StepGates step_gates(Tape<double>& tape, int subnet, long step) override;
  std::vector<ad::Parameter<double>*> parameters() override { return {}; }
  void finalize(std::vector<orthomask::SubnetPlan>& plans, long step) override;
  std::optional<int> aux_split(int subnet) const override;

  const std::vector<int>& splits() const { return splits_; }

 private:
  GroupRegistry registry_;
  CostVector cost_;
  std::vector<int> splits_;
};

}  // namespace osm::baselines
