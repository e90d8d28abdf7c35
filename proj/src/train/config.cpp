#include "osm/train/config.hpp"

#include <cmath>

#include "osm/errors.hpp"

namespace osm::train {

std::string_view to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::orthosoftmax:
      return "orthosoftmax";
    case LearnerKind::topk_ste:
      return "topk_ste";
    case LearnerKind::l0:
      return "l0";
    case LearnerKind::aux:
      return "aux";
  }
  return "?";
}

std::string_view to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }
std::string_view to_string(Phase p) { return p == Phase::step2 ? "step2" : "step1"; }

LearnerKind parse_learner(std::string_view s) {
  for (LearnerKind k : {LearnerKind::orthosoftmax, LearnerKind::topk_ste, LearnerKind::l0, LearnerKind::aux})
    if (to_string(k) == s) return k;
  throw ConfigError("mask_learner must be orthosoftmax, topk_ste, l0 or aux, got '" + std::string(s) + "'");
}

long TrainConfig::step1_steps() const {
  return std::lround(static_cast<double>(total_steps) * step1_fraction);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (total_steps < 2) fail("total_steps must be >= 2");
  if (!(step1_fraction > 0.0 && step1_fraction < 1.0)) fail("step1_fraction must be in (0, 1)");
  if (step1_steps() < 1 || step1_steps() >= total_steps) fail("both steps need at least one update");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0.0) || !(mask_lr > 0.0)) fail("learning rates must be positive");
  if (warmup_fraction < 0.0 || decay_start_fraction < warmup_fraction || decay_start_fraction > 1.0) {
    fail("need 0 <= warmup_fraction <= decay_start_fraction <= 1");
  }
  if (lambda_mode == LambdaMode::constant && !(lambda_value > 0.0)) fail("constant lambda must be > 0");
  if (beta_value < 0.0 || beta_focal < 0.0) fail("beta values must be >= 0");
  if (layer_drop_p < 0.0 || layer_drop_p >= 1.0) fail("layer_drop_p must be in [0, 1)");
  if (grad_clip < 0.0 || weight_decay < 0.0) fail("grad_clip and weight_decay must be >= 0");
  if (flops_reference_frames < 1) fail("flops_reference_frames must be >= 1");
}

void RunConfig::validate() const {
  model.validate();
  task.validate();
  train.validate();
  if (model.d_in != task.d_in || model.vocab_size != task.vocab_size) {
    throw ConfigError("model and task disagree on d_in or vocab_size");
  }
  if (subnets.empty()) throw ConfigError("at least one subnet budget is required");
  for (const auto& b : subnets) {
    if (b.criterion != subnets.front().criterion) {
      throw ConfigError("all subnets must share one selection criterion");
    }
    if (b.kind != subnets.front().kind) {
      throw ConfigError("subnet budgets must all be fractions or all be absolute");
    }
    if (b.kind == costs::Budget::Kind::fraction && !(b.value > 0.0 && b.value <= 1.0)) {
      throw ConfigError("budget fraction must be in (0, 1], got " + std::to_string(b.value));
    }
    if (b.kind == costs::Budget::Kind::absolute && !(b.value > 0.0)) {
      throw ConfigError("absolute budget must be positive");
    }
  }
  if (learner.temperature.floor <= 0.0 || learner.temperature.initial <= 0.0 ||
      learner.temperature.decay <= 0.0 || learner.temperature.decay > 1.0) {
    throw ConfigError("temperature schedule needs positive initial/floor and decay in (0, 1]");
  }
  if (learner.score_init_noise < 0.0 || learner.l0_penalty < 0.0) {
    throw ConfigError("learner noise and penalty must be >= 0");
  }
}

double learning_rate(const TrainConfig& c, long step) {
  const double total = static_cast<double>(c.total_steps);
  const double t = static_cast<double>(step);
  const double warm = std::max(1.0, std::round(c.warmup_fraction * total));
  const double decay_from = std::round(c.decay_start_fraction * total);
  if (t < warm) return c.lr * (t + 1.0) / warm;
  if (t < decay_from || decay_from >= total) return c.lr;
  return c.lr * std::max(0.0, (total - t) / (total - decay_from));
}

double beta_at(const TrainConfig& c, long step) {
  if (c.beta_mode == BetaMode::constant) return c.beta_value;
  const long last = c.step1_steps() - 1;
  if (last <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(last));
}

double focal_scale_from_prob(double p, double beta_focal) { return std::pow(1.0 - p, beta_focal); }

double focal_scale(double loss, double beta_focal) {
  return std::pow(-std::expm1(-loss), beta_focal);
}

}  // namespace osm::train
