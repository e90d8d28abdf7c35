#include "osm/baselines/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"

namespace osm::baselines {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Shift that turns log_alpha into the logit of P(gate > 0).
double open_shift() { return -kHcBeta * std::log(-kHcGamma / kHcZeta); }

}  // namespace

MaskVector ste_mask(std::span<const double> scores, const CostVector& cost, double tau) {
  if (scores.size() != cost.per_group.size()) throw DimensionError("scores and costs differ in length");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  MaskVector m = MaskVector::zeros(scores.size());
  double running = 0.0;
  for (int j : order) {
    const double next = running + cost.per_group[static_cast<std::size_t>(j)];
    if (!(next < tau)) break;
    running = next;
    m.values[static_cast<std::size_t>(j)] = 1.0;
  }
  return m;
}

double hc_sample(double log_alpha, double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("hard-concrete draw must lie in (0, 1)");
  const double s = sigmoid((std::log(u) - std::log1p(-u) + log_alpha) / kHcBeta);
  return std::clamp(s * (kHcZeta - kHcGamma) + kHcGamma, 0.0, 1.0);
}

Var<double> hc_sample(Var<double> log_alpha, const Tensor<double>& u) {
  if (u.size() != log_alpha.value().size()) throw DimensionError("hc_sample: draw count mismatch");
  Tensor<double> noise(1, u.size());
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (!(u[j] > 0.0 && u[j] < 1.0)) throw DomainError("hard-concrete draw must lie in (0, 1)");
    noise[j] = std::log(u[j]) - std::log1p(-u[j]);
  }
  Var<double> s = ad::sigmoid(
      ad::scale(ad::add(log_alpha, log_alpha.tape->constant(std::move(noise))), 1.0 / kHcBeta));
  return ad::clamp(ad::add_scalar(ad::scale(s, kHcZeta - kHcGamma), kHcGamma), 0.0, 1.0);
}

double hc_expected_open(double log_alpha) { return sigmoid(log_alpha + open_shift()); }

Var<double> hc_expected_open(Var<double> log_alpha) {
  return ad::sigmoid(ad::add_scalar(log_alpha, open_shift()));
}

double hc_deterministic(double log_alpha) {
  return std::clamp(sigmoid(log_alpha) * (kHcZeta - kHcGamma) + kHcGamma, 0.0, 1.0);
}

MaskVector aux_bottom_mask(const GroupRegistry& registry, int split_block) {
  if (split_block < 1 || split_block > registry.num_blocks()) {
    throw ContractError("aux split " + std::to_string(split_block) + " outside [1, " +
                        std::to_string(registry.num_blocks()) + "]");
  }
  MaskVector m = MaskVector::zeros(registry.size());
  for (const auto& g : registry.groups())
    if (g.block < split_block) m.values[static_cast<std::size_t>(g.id)] = 1.0;
  return m;
}

int aux_split_for_budget(const GroupRegistry& registry, const CostVector& cost, double tau) {
  int best = 0;
  for (int s = 1; s <= registry.num_blocks(); ++s)
    if (costs::verify(aux_bottom_mask(registry, s), cost, tau)) best = s;
  if (best == 0) {
    throw BudgetInfeasibleError("budget tau = " + std::to_string(tau) +
                                " cannot hold even one bottom block");
  }
  return best;
}

TopkSteLearner::TopkSteLearner(CostVector cost, std::vector<double> taus)
    : cost_(std::move(cost)),
      taus_(std::move(taus)),
      scores_("learner/scores", Tensor<double>(1, cost_.per_group.size(), 0.0)) {}

orthomask::StepGates TopkSteLearner::step_gates(Tape<double>& tape, int subnet, long) {
  const double tau = taus_.at(static_cast<std::size_t>(subnet));
  MaskVector hard = ste_mask(scores_.value.values(), cost_, tau);
  orthomask::StepGates out;
  out.gates = ad::straight_through(tape.parameter(scores_), Tensor<double>::row(hard.values));
  out.k = static_cast<int>(hard.selected().size());
  out.expected_cost = cost_.selected(hard);
  return out;
}

void TopkSteLearner::finalize(std::vector<orthomask::SubnetPlan>& plans, long) {
  for (auto& p : plans) {
    p.mask = ste_mask(scores_.value.values(), cost_, p.tau);
    p.k = static_cast<int>(p.mask.selected().size());
  }
}

L0Learner::L0Learner(CostVector cost, std::vector<double> taus, double penalty,
                     double init_log_alpha, long step1_steps, std::uint64_t seed)
    : cost_(std::move(cost)),
      taus_(std::move(taus)),
      penalty_(penalty),
      step1_steps_(step1_steps),
      seed_(seed),
      log_alpha_("learner/log_alpha", Tensor<double>(1, cost_.per_group.size(), init_log_alpha)) {}

orthomask::StepGates L0Learner::step_gates(Tape<double>& tape, int subnet, long step) {
  const double tau = taus_.at(static_cast<std::size_t>(subnet));
  const std::size_t n = cost_.per_group.size();
  ad::CounterRng rng(ad::derive_key({seed_, ad::fnv1a("hard-concrete"),
                                     static_cast<std::uint64_t>(step),
                                     static_cast<std::uint64_t>(subnet)}));
  Tensor<double> u(1, n);
  for (auto& v : u.storage()) v = rng.uniform();
  Var<double> la = tape.parameter(log_alpha_);
  orthomask::StepGates out;
  out.gates = hc_sample(la, u);
  Var<double> open = hc_expected_open(la);
  Tensor<double> c(n, 1);
  for (std::size_t j = 0; j < n; ++j) c[j] = cost_.per_group[j];
  Var<double> expected = ad::matmul(open, tape.constant(std::move(c)));
  Var<double> excess = ad::relu(ad::add_scalar(ad::scale(expected, 1.0 / tau), -1.0));
  const double ramp =
      step1_steps_ > 1 ? std::min(1.0, static_cast<double>(step) / static_cast<double>(step1_steps_ - 1)) : 1.0;
  out.penalty = ad::scale(ad::mul(excess, excess), penalty_ * ramp);
  out.expected_cost = expected.value().item();
  for (std::size_t j = 0; j < n; ++j) out.k += out.gates.value()[j] > 0.0 ? 1 : 0;
  return out;
}

void L0Learner::finalize(std::vector<orthomask::SubnetPlan>& plans, long) {
  const std::size_t n = cost_.per_group.size();
  std::vector<int> by_alpha(n);
  std::iota(by_alpha.begin(), by_alpha.end(), 0);
  std::stable_sort(by_alpha.begin(), by_alpha.end(), [&](int a, int b) {
    return log_alpha_.value[static_cast<std::size_t>(a)] < log_alpha_.value[static_cast<std::size_t>(b)];
  });
  for (auto& p : plans) {
    MaskVector m = MaskVector::zeros(n);
    for (std::size_t j = 0; j < n; ++j)
      m.values[j] = hc_deterministic(log_alpha_.value[j]) >= 0.5 ? 1.0 : 0.0;
    for (int j : by_alpha) {
      if (costs::verify(m, cost_, p.tau)) break;
      m.values[static_cast<std::size_t>(j)] = 0.0;
    }
    if (!costs::verify(m, cost_, p.tau)) {
      throw BudgetInfeasibleError("no L0 mask satisfies budget tau = " + std::to_string(p.tau));
    }
    p.mask = m;
    p.k = static_cast<int>(m.selected().size());
  }
}

AuxLearner::AuxLearner(const GroupRegistry& registry, CostVector cost, std::vector<double> taus)
    : registry_(registry), cost_(std::move(cost)) {
  for (double tau : taus) splits_.push_back(aux_split_for_budget(registry_, cost_, tau));
}

orthomask::StepGates AuxLearner::step_gates(Tape<double>& tape, int subnet, long) {
  const int split = splits_.at(static_cast<std::size_t>(subnet));
  MaskVector m = aux_bottom_mask(registry_, split);
  orthomask::StepGates out;
  out.gates = tape.constant(Tensor<double>::row(m.values));
  out.differentiable = false;
  out.aux_split = split;
  out.k = static_cast<int>(m.selected().size());
  out.expected_cost = cost_.selected(m);
  return out;
}

void AuxLearner::finalize(std::vector<orthomask::SubnetPlan>& plans, long) {
  for (std::size_t m = 0; m < plans.size(); ++m) {
    plans[m].mask = aux_bottom_mask(registry_, splits_.at(m));
    plans[m].k = static_cast<int>(plans[m].mask.selected().size());
  }
}

std::optional<int> AuxLearner::aux_split(int subnet) const {
  return splits_.at(static_cast<std::size_t>(subnet));
}

}  // namespace osm::baselines
