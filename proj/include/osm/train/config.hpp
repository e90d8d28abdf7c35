#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "osm/costs/costs.hpp"
#include "osm/encoder/config.hpp"
#include "osm/orthomask/orthomask.hpp"
#include "osm/tasks/tasks.hpp"

namespace osm::train {

enum class LambdaMode { adaptive, constant };
enum class BetaMode { linear, constant };
// Third sandwich slot: sampled from the non-smallest subnets (the supernet
// acts as the largest model) or pinned to the largest subnet.
enum class LargestMode { supernet, largest_subnet };
enum class LayerDropScope { supernet, all };
enum class LearnerKind { orthosoftmax, topk_ste, l0, aux };
enum class Precision { f32, f64 };
enum class Phase { step1, step2 };

std::string_view to_string(LearnerKind k);
std::string_view to_string(Precision p);
std::string_view to_string(Phase p);
LearnerKind parse_learner(std::string_view s);

struct TrainConfig {
  long total_steps = 1000;
  double step1_fraction = 0.6;
  int batch_size = 8;
  double lr = 2e-3;
  double warmup_fraction = 0.1;
  double decay_start_fraction = 0.7;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-2;
  double mask_lr = 0.05;
  double grad_clip = 5.0;  // global norm over encoder grads; 0 disables
  LambdaMode lambda_mode = LambdaMode::adaptive;
  double lambda_value = 1.0;
  BetaMode beta_mode = BetaMode::linear;
  double beta_value = 1.0;
  double beta_focal = 1.0;
  double layer_drop_p = 0.2;
  LayerDropScope layer_drop_scope = LayerDropScope::supernet;
  LargestMode largest = LargestMode::supernet;
  int flops_reference_frames = costs::kDefaultReferenceFrames;
  Precision precision = Precision::f32;
  std::uint64_t seed = 1;

  long step1_steps() const;
  void validate() const;
};

struct LearnerConfig {
  LearnerKind kind = LearnerKind::orthosoftmax;
  double score_init_noise = 1e-3;
  orthomask::TemperatureSchedule temperature;
  double l0_penalty = 10.0;
  double l0_init_log_alpha = 0.0;
};

struct RunConfig {
  encoder::EncoderConfig model;
  tasks::SynthConfig task;
  TrainConfig train;
  std::vector<costs::Budget> subnets;  // ascending by budget value
  LearnerConfig learner;
  std::string source;      // canonical config text
  std::uint64_t hash = 0;  // FNV-1a of `source`

  void validate() const;
};

// Learning rate at update t: linear warmup, hold, linear decay to zero.
double learning_rate(const TrainConfig& c, long step);
// Orthogonality weight at update t.
double beta_at(const TrainConfig& c, long step);
// (1 - p)^beta_focal for a sequence probability p.
double focal_scale_from_prob(double p, double beta_focal);
// Same from a per-sequence CTC loss, p = exp(-loss).
double focal_scale(double loss, double beta_focal);

}  // namespace osm::train
