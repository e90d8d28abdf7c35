#pragma once

#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "osm/autodiff/tape.hpp"
#include "osm/orthomask/orthomask.hpp"

namespace osm::orthomask {

// Gates one learner produces for one subnet at one Step 1 update, recorded on
// the 64-bit mask tape.
struct StepGates {
  Var<double> gates;                    // 1xN
  std::optional<Var<double>> ortho;     // weighted by the beta schedule
  std::optional<Var<double>> penalty;   // added unweighted
  bool differentiable = true;           // false: gates are constants
  std::optional<int> aux_split;         // subnet runs through this auxiliary head
  int k = 0;
  double expected_cost = 0.0;
  double temperature = 1.0;
};

class MaskLearner {
 public:
  virtual ~MaskLearner() = default;
  virtual std::string_view name() const = 0;
  virtual StepGates step_gates(Tape<double>& tape, int subnet, long step) = 0;
  virtual std::vector<ad::Parameter<double>*> parameters() = 0;
  // Rounds to binary masks at the Step 1 -> Step 2 boundary (sets k and mask).
  virtual void finalize(std::vector<SubnetPlan>& plans, long step) = 0;
  virtual std::optional<int> aux_split(int /*subnet*/) const { return std::nullopt; }
};

class OrthoSoftmaxLearner final : public MaskLearner {
 public:
  // `init_noise` is the half-width of the uniform perturbation added to the
  // zero score matrix; exact zeros keep all selected rows identical forever.
  OrthoSoftmaxLearner(CostVector cost, std::vector<double> taus, TemperatureSchedule schedule,
                      double init_noise, std::uint64_t seed);

  std::string_view name() const override { return "orthosoftmax"; }
  StepGates step_gates(Tape<double>& tape, int subnet, long step) override;
  std::vector<ad::Parameter<double>*> parameters() override { return {&scores_}; }
  void finalize(std::vector<SubnetPlan>& plans, long step) override;

  Tensor<double> weights_at(long step) const;
  const ad::Parameter<double>& scores() const { return scores_; }

 private:
  CostVector cost_;
  std::vector<double> taus_;
  TemperatureSchedule schedule_;
  ad::Parameter<double> scores_;
};

}  // namespace osm::orthomask
