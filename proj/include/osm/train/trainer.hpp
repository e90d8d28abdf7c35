#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "osm/encoder/encoder.hpp"
#include "osm/orthomask/learner.hpp"
#include "osm/train/checkpoint.hpp"
#include "osm/train/config.hpp"
#include "osm/train/optim.hpp"

namespace osm::train {

struct MetricsRow {
  long step = 0;
  Phase phase = Phase::step1;
  double temperature = 1.0;
  double beta = 0.0;
  double lambda_mean = 0.0;
  int m_sampled = 0;
  int k_m = 0;
  double expected_cost_m = 0.0;
  double loss_super = 0.0;
  double loss_sub = 0.0;
  double loss_orthog = 0.0;
  double lr = 0.0;
};

std::string metrics_header();
std::string format_metrics(const MetricsRow& row);

// Owns the full run state: encoder, mask learner, optimizer moments, plans
// and the step counter. Every random draw is keyed on (seed, step, site), so
// the state below is all a resume needs.
template <typename T>
class Trainer {
 public:
  Trainer(RunConfig config, const tasks::Corpus& corpus);

  const RunConfig& config() const { return config_; }
  long step() const { return step_; }
  Phase phase() const { return phase_; }
  long step1_steps() const { return config_.train.step1_steps(); }
  long total_steps() const { return config_.train.total_steps; }
  bool done() const { return step_ >= total_steps(); }

  // One update. Rounds the masks first when the Step 1 budget is used up.
  MetricsRow advance();
  // Rounds masks, freezes the learner and switches to Step 2. Idempotent.
  void transition();

  encoder::Encoder<T>& encoder() { return encoder_; }
  const encoder::Encoder<T>& encoder() const { return encoder_; }
  const costs::CostVector& cost() const { return cost_; }
  const std::vector<orthomask::SubnetPlan>& plans() const { return plans_; }
  orthomask::MaskLearner& learner() { return *learner_; }
  int smallest_subnet() const { return 0; }
  std::optional<int> aux_split(int subnet) const { return learner_->aux_split(subnet); }

  Checkpoint checkpoint() const;
  // Restores a state produced by checkpoint() of a run with the same config.
  void restore(const Checkpoint& ckpt);

  // Supernet (subnet < 0) or rounded subnet LER on the dev split.
  double evaluate_dev(int subnet) const;

 private:
  MetricsRow step1_update();
  MetricsRow step2_update();
  std::vector<std::size_t> draw_batch(long step) const;
  std::uint64_t key(std::string_view site, long step, std::uint64_t a = 0, std::uint64_t b = 0) const;
  void prepare_step2();
  void apply_updates(long step, bool update_learner);

  RunConfig config_;
  const tasks::Corpus* corpus_;
  std::vector<ad::Tensor<T>> train_x_;
  encoder::Encoder<T> encoder_;
  costs::CostVector cost_;
  std::vector<orthomask::SubnetPlan> plans_;
  std::unique_ptr<orthomask::MaskLearner> learner_;
  AdamSlots<T> theta_moments_;
  AdamSlots<double> learner_moments_;
  long step_ = 0;
  Phase phase_ = Phase::step1;
  double frozen_temperature_ = 1.0;
  std::vector<bool> drop_candidates_;                   // block * 4 + kind
  std::vector<std::vector<double>> subnet_ffn_dropout_;  // per subnet, block * 2 + ffn
};

// LER (percent) of greedy decoding on `data` with the encoder pruned to
// `mask` (all groups when null), through an auxiliary head if given.
template <typename T>
double evaluate(const encoder::Encoder<T>& enc, const encoder::MaskVector* mask,
                std::optional<int> aux_split, const std::vector<tasks::Sample>& data);

// masks.json document: per subnet tau, criterion, k, group_ids, verify_cost.
nlohmann::json masks_document(const RunConfig& config, const costs::CostVector& cost,
                              const std::vector<orthomask::SubnetPlan>& plans);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace osm::train
