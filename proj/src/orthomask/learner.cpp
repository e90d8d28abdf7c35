#include "osm/orthomask/learner.hpp"

#include "osm/autodiff/rng.hpp"

namespace osm::orthomask {

OrthoSoftmaxLearner::OrthoSoftmaxLearner(CostVector cost, std::vector<double> taus,
                                         TemperatureSchedule schedule, double init_noise,
                                         std::uint64_t seed)
    : cost_(std::move(cost)), taus_(std::move(taus)), schedule_(schedule) {
  const std::size_t n = cost_.per_group.size();
  Tensor<double> s(n, n, 0.0);
  if (init_noise > 0.0) {
    ad::CounterRng rng(ad::derive_key({seed, ad::fnv1a("learner/scores")}));
    for (auto& v : s.storage()) v = rng.uniform(-init_noise, init_noise);
  }
  scores_ = ad::Parameter<double>("learner/scores", std::move(s));
}

StepGates OrthoSoftmaxLearner::step_gates(Tape<double>& tape, int subnet, long step) {
  const double tau = taus_.at(static_cast<std::size_t>(subnet));
  StepGates out;
  out.temperature = schedule_(step);
  Var<double> w = weights(tape.parameter(scores_), out.temperature);
  out.k = select_k(w.value(), cost_.per_group, tau);
  out.gates = assemble_mask(w, out.k);
  out.ortho = ortho_loss(w, out.k);
  out.expected_cost = cost_.expected(out.gates.value().values());
  return out;
}

Tensor<double> OrthoSoftmaxLearner::weights_at(long step) const {
  return weights(scores_.value, schedule_(step));
}

void OrthoSoftmaxLearner::finalize(std::vector<SubnetPlan>& plans, long step) {
  round_masks(weights_at(step), plans, cost_);
}

}  // namespace osm::orthomask
