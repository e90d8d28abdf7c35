#include "osm/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "osm/autodiff/rng.hpp"
#include "osm/baselines/baselines.hpp"
#include "osm/errors.hpp"
#include "osm/tasks/tasks.hpp"
#include "osm/train/optim.hpp"

namespace osm::train {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using encoder::MaskVector;
using encoder::ModuleKind;

std::string metrics_header() {
  return "step,phase,T,beta,lambda_mean,m_sampled,k_m,expected_cost_m,loss_super,loss_sub,loss_orthog,lr";
}

std::string format_metrics(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%ld,%s,%.17g,%.17g,%.17g,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g", r.step,
                std::string(to_string(r.phase)).c_str(), r.temperature, r.beta, r.lambda_mean, r.m_sampled,
                r.k_m, r.expected_cost_m, r.loss_super, r.loss_sub, r.loss_orthog, r.lr);
  return buf;
}

namespace {

std::vector<double> taus_of(const std::vector<orthomask::SubnetPlan>& plans) {
  std::vector<double> out;
  for (const auto& p : plans) out.push_back(p.tau);
  return out;
}

template <typename T>
bool finite(T v) {
  return std::isfinite(static_cast<double>(v));
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(RunConfig config, const tasks::Corpus& corpus)
    : config_(std::move(config)), corpus_(&corpus) {
  config_.validate();
  if (corpus.config.hash() != config_.task.hash()) {
    throw ConfigError("corpus was generated from a different task config");
  }
  if (corpus.train.empty()) throw ConfigError("training corpus is empty");
  std::stable_sort(config_.subnets.begin(), config_.subnets.end(),
                   [](const costs::Budget& a, const costs::Budget& b) { return a.value < b.value; });

  const auto registry = encoder::GroupRegistry::build(config_.model);
  cost_ = costs::cost_for(config_.subnets.front().criterion, registry, config_.model,
                          config_.train.flops_reference_frames);
  for (const auto& b : config_.subnets) {
    orthomask::SubnetPlan plan;
    plan.budget = b;
    plan.tau = costs::resolve_budget(b, cost_);
    plans_.push_back(plan);
  }
  const auto taus = taus_of(plans_);
  const auto& lc = config_.learner;
  const auto seed = config_.train.seed;
  switch (lc.kind) {
    case LearnerKind::orthosoftmax:
      learner_ = std::make_unique<orthomask::OrthoSoftmaxLearner>(cost_, taus, lc.temperature,
                                                                  lc.score_init_noise, seed);
      break;
    case LearnerKind::topk_ste:
      learner_ = std::make_unique<baselines::TopkSteLearner>(cost_, taus);
      break;
    case LearnerKind::l0:
      learner_ = std::make_unique<baselines::L0Learner>(cost_, taus, lc.l0_penalty, lc.l0_init_log_alpha,
                                                        step1_steps(), seed);
      break;
    case LearnerKind::aux: {
      auto aux = std::make_unique<baselines::AuxLearner>(registry, cost_, taus);
      for (int s : aux->splits())
        if (std::find(config_.model.aux_splits.begin(), config_.model.aux_splits.end(), s) ==
            config_.model.aux_splits.end())
          config_.model.aux_splits.push_back(s);
      learner_ = std::move(aux);
      break;
    }
  }
  encoder_ = encoder::Encoder<T>::build(config_.model, seed);
  init_slots(theta_moments_, encoder_.parameters());
  init_slots(learner_moments_, learner_->parameters());
  train_x_.reserve(corpus.train.size());
  for (const auto& s : corpus.train) train_x_.push_back(s.features.template cast<T>());
  frozen_temperature_ = lc.temperature(0);
}

template <typename T>
std::uint64_t Trainer<T>::key(std::string_view site, long step, std::uint64_t a, std::uint64_t b) const {
  return ad::derive_key({config_.train.seed, ad::fnv1a(site), static_cast<std::uint64_t>(step), a, b});
}

template <typename T>
std::vector<std::size_t> Trainer<T>::draw_batch(long step) const {
  ad::CounterRng rng(key("batch", step));
  std::vector<std::size_t> idx(static_cast<std::size_t>(config_.train.batch_size));
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(train_x_.size()));
  return idx;
}

template <typename T>
MetricsRow Trainer<T>::advance() {
  if (done()) throw StateError("training already finished");
  if (phase_ == Phase::step1 && step_ >= step1_steps()) transition();
  MetricsRow row = phase_ == Phase::step1 ? step1_update() : step2_update();
  ++step_;
  return row;
}

template <typename T>
void Trainer<T>::apply_updates(long step, bool update_learner) {
  const auto& tc = config_.train;
  auto params = encoder_.parameters();
  clip_grads(params, tc.grad_clip);
  adam_step(params, theta_moments_, step + 1, learning_rate(tc, step), tc.weight_decay, tc);
  if (update_learner) {
    auto lp = learner_->parameters();
    if (!lp.empty()) adam_step(lp, learner_moments_, step + 1, tc.mask_lr, 0.0, tc);
  }
}

template <typename T>
MetricsRow Trainer<T>::step1_update() {
  const auto& tc = config_.train;
  const long t = step_;
  const auto batch = draw_batch(t);
  const auto inv_batch = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  const int m = static_cast<int>(ad::CounterRng(key("subnet", t)).below(plans_.size()));

  Tape<double> mask_tape;
  orthomask::StepGates sg = learner_->step_gates(mask_tape, m, t);
  Parameter<T> gate_param("gates", sg.gates.value().template cast<T>());

  auto params = encoder_.parameters();
  zero_grads(params);
  auto learner_params = learner_->parameters();
  zero_grads(learner_params);

  double sup_sum = 0.0, sub_sum = 0.0, lambda_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& x = train_x_[batch[i]];
    const auto& labels = corpus_->train[batch[i]].labels;
    Tape<T> tape;
    encoder::ForwardOptions<T> sup_opts;
    sup_opts.training = true;
    sup_opts.dropout_key = key("dropout", t, i, 0);
    Var<T> sup = tasks::ctc_loss(encoder::forward(tape, encoder_, x, sup_opts), labels);

    encoder::ForwardOptions<T> sub_opts;
    sub_opts.training = true;
    sub_opts.dropout_key = key("dropout", t, i, 1);
    Var<T> sub_lp;
    if (sg.aux_split) {
      sub_lp = encoder::aux_head_forward(tape, encoder_, x, *sg.aux_split, sub_opts);
    } else {
      if (sg.differentiable) {
        sub_opts.gates = tape.parameter(gate_param);
      } else {
        sub_opts.gates = tape.constant(gate_param.value);
        sub_opts.skip_zero_gates = true;
      }
      sub_lp = encoder::forward(tape, encoder_, x, sub_opts);
    }
    Var<T> sub = tasks::ctc_loss(sub_lp, labels);
    const double sub_val = sub.value().item();
    const double lambda = tc.lambda_mode == LambdaMode::adaptive ? focal_scale(sub_val, tc.beta_focal)
                                                                  : tc.lambda_value;
    sup_sum += sup.value().item();
    sub_sum += sub_val;
    lambda_sum += lambda;
    if (!finite(sup.value().item()) || !finite(sub_val)) break;
    Var<T> total = ad::add(ad::scale(sup, inv_batch), ad::scale(sub, static_cast<T>(lambda) * inv_batch));
    tape.backward(total);
  }

  const double beta = beta_at(tc, t);
  double ortho_val = sg.ortho ? sg.ortho->value().item() : 0.0;
  if (!std::isfinite(sup_sum) || !std::isfinite(sub_sum) || !std::isfinite(ortho_val)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << t << " (subnet " << m << "): super=" << sup_sum
        << " sub=" << sub_sum << " orthog=" << ortho_val << " k=" << sg.k;
    throw DivergenceError(msg.str());
  }

  std::optional<Var<double>> mask_loss;
  auto accumulate = [&](Var<double> term) { mask_loss = mask_loss ? ad::add(*mask_loss, term) : term; };
  if (sg.differentiable && !sg.aux_split) {
    accumulate(ad::sum(ad::mul(sg.gates, mask_tape.constant(gate_param.grad.template cast<double>()))));
  }
  if (sg.ortho) accumulate(ad::scale(*sg.ortho, beta));
  if (sg.penalty) accumulate(*sg.penalty);
  if (mask_loss && !learner_params.empty()) mask_tape.backward(*mask_loss);

  apply_updates(t, true);

  const double n = static_cast<double>(batch.size());
  MetricsRow row;
  row.step = t;
  row.phase = Phase::step1;
  row.temperature = sg.temperature;
  row.beta = beta;
  row.lambda_mean = lambda_sum / n;
  row.m_sampled = m;
  row.k_m = sg.k;
  row.expected_cost_m = sg.expected_cost;
  row.loss_super = sup_sum / n;
  row.loss_sub = sub_sum / n;
  row.loss_orthog = ortho_val;
  row.lr = learning_rate(tc, t);
  return row;
}

template <typename T>
void Trainer<T>::transition() {
  if (phase_ == Phase::step2) return;
  const long at = std::max(0L, step1_steps() - 1);
  learner_->finalize(plans_, at);
  for (std::size_t m = 0; m < plans_.size(); ++m) {
    if (!costs::verify(plans_[m].mask, cost_, plans_[m].tau)) {
      throw BudgetInfeasibleError("subnet " + std::to_string(m) + " mask exceeds its budget after rounding");
    }
  }
  frozen_temperature_ = config_.learner.temperature(at);
  phase_ = Phase::step2;
  prepare_step2();
}

template <typename T>
void Trainer<T>::prepare_step2() {
  const auto& reg = encoder_.registry();
  const auto& cfg = encoder_.config();
  const MaskVector& smallest = plans_[static_cast<std::size_t>(smallest_subnet())].mask;
  drop_candidates_.assign(static_cast<std::size_t>(cfg.num_blocks) * 4, false);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    for (ModuleKind kind : encoder::kModuleKinds) {
      bool any = false;
      for (int sub = 0; sub < reg.groups_per_block(kind); ++sub)
        any = any || smallest.values[static_cast<std::size_t>(reg.group_of(b, kind, sub))] != 0.0;
      drop_candidates_[static_cast<std::size_t>(b * 4 + static_cast<int>(kind))] = !any;
    }
  }
  subnet_ffn_dropout_.clear();
  for (const auto& plan : plans_) {
    std::vector<double> rates(static_cast<std::size_t>(cfg.num_blocks) * 2, cfg.dropout_base);
    if (reg.granularity() == encoder::Granularity::component) {
      for (int b = 0; b < cfg.num_blocks; ++b) {
        for (int f = 0; f < 2; ++f) {
          const ModuleKind kind = f == 0 ? ModuleKind::ffn1 : ModuleKind::ffn2;
          int kept = 0;
          for (int c = 0; c < cfg.ffn_chunks(); ++c)
            kept += plan.mask.values[static_cast<std::size_t>(reg.group_of(b, kind, c))] != 0.0 ? 1 : 0;
          rates[static_cast<std::size_t>(b * 2 + f)] =
              cfg.dropout_base * static_cast<double>(kept) / static_cast<double>(cfg.ffn_chunks());
        }
      }
    }
    subnet_ffn_dropout_.push_back(std::move(rates));
  }
}

template <typename T>
MetricsRow Trainer<T>::step2_update() {
  const auto& tc = config_.train;
  const long t = step_;
  const auto batch = draw_batch(t);
  const auto inv_batch = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  const int count = static_cast<int>(plans_.size());
  const int smallest = smallest_subnet();

  // Sandwich: supernet, smallest subnet, and one more subnet.
  std::vector<int> forwarded = {smallest};
  int sampled = smallest;
  if (count >= 2) {
    if (tc.largest == LargestMode::largest_subnet) {
      sampled = count - 1;
    } else {
      std::vector<int> rest;
      for (int m = 0; m < count; ++m)
        if (m != smallest) rest.push_back(m);
      sampled = rest[ad::CounterRng(key("subnet", t)).below(rest.size())];
    }
    forwarded.push_back(sampled);
  }

  auto params = encoder_.parameters();
  zero_grads(params);
  const auto nmod = drop_candidates_.size();
  double sup_sum = 0.0, sub_sum = 0.0, lambda_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& x = train_x_[batch[i]];
    const auto& labels = corpus_->train[batch[i]].labels;
    ad::CounterRng drop_rng(key("layerdrop", t, i));
    std::vector<bool> dropped(nmod, false);
    for (std::size_t j = 0; j < nmod; ++j)
      dropped[j] = drop_candidates_[j] && tc.layer_drop_p > 0.0 && drop_rng.uniform() < tc.layer_drop_p;

    Tape<T> tape;
    encoder::ForwardOptions<T> sup_opts;
    sup_opts.training = true;
    sup_opts.dropout_key = key("dropout", t, i, 0);
    if (tc.layer_drop_p > 0.0) sup_opts.skipped_modules = dropped;
    Var<T> sup = tasks::ctc_loss(encoder::forward(tape, encoder_, x, sup_opts), labels);
    Var<T> total = ad::scale(sup, inv_batch);
    sup_sum += sup.value().item();

    for (std::size_t s = 0; s < forwarded.size(); ++s) {
      const int m = forwarded[s];
      const auto& plan = plans_[static_cast<std::size_t>(m)];
      encoder::ForwardOptions<T> opts;
      opts.training = true;
      opts.dropout_key = key("dropout", t, i, 1 + s);
      opts.ffn_dropout = subnet_ffn_dropout_[static_cast<std::size_t>(m)];
      if (tc.layer_drop_scope == LayerDropScope::all && m != smallest && tc.layer_drop_p > 0.0) {
        opts.skipped_modules = dropped;
      }
      Var<T> lp;
      if (auto split = learner_->aux_split(m)) {
        lp = encoder::aux_head_forward(tape, encoder_, x, *split, opts);
      } else {
        opts.gates = tape.constant(Tensor<T>::row(std::vector<T>(plan.mask.values.begin(), plan.mask.values.end())));
        opts.skip_zero_gates = true;
        lp = encoder::forward(tape, encoder_, x, opts);
      }
      Var<T> sub = tasks::ctc_loss(lp, labels);
      const double sub_val = sub.value().item();
      const double lambda = tc.lambda_mode == LambdaMode::adaptive ? focal_scale(sub_val, tc.beta_focal)
                                                                    : tc.lambda_value;
      sub_sum += sub_val;
      lambda_sum += lambda;
      total = ad::add(total, ad::scale(sub, static_cast<T>(lambda) * inv_batch));
    }
    if (!finite(total.value().item())) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << t << " (sample " << batch[i] << ")";
      throw DivergenceError(msg.str());
    }
    tape.backward(total);
  }

  apply_updates(t, false);

  const double n = static_cast<double>(batch.size());
  const auto& plan = plans_[static_cast<std::size_t>(sampled)];
  MetricsRow row;
  row.step = t;
  row.phase = Phase::step2;
  row.temperature = frozen_temperature_;
  row.beta = beta_at(tc, step1_steps() - 1);
  row.lambda_mean = lambda_sum / (n * static_cast<double>(forwarded.size()));
  row.m_sampled = sampled;
  row.k_m = plan.k;
  row.expected_cost_m = cost_.selected(plan.mask);
  row.loss_super = sup_sum / n;
  row.loss_sub = sub_sum / (n * static_cast<double>(forwarded.size()));
  row.loss_orthog = 0.0;
  row.lr = learning_rate(tc, t);
  return row;
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint ck;
  auto& self = const_cast<Trainer&>(*this);
  auto params = self.encoder_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.tensors.push_back(StoredTensor::from("theta/" + params[i]->name, params[i]->value));
    ck.tensors.push_back(StoredTensor::from("adam_m/" + params[i]->name, theta_moments_.m[i]));
    ck.tensors.push_back(StoredTensor::from("adam_v/" + params[i]->name, theta_moments_.v[i]));
  }
  auto lp = self.learner_->parameters();
  for (std::size_t i = 0; i < lp.size(); ++i) {
    ck.tensors.push_back(StoredTensor::from("mask/" + lp[i]->name, lp[i]->value));
    ck.tensors.push_back(StoredTensor::from("mask_adam_m/" + lp[i]->name, learner_moments_.m[i]));
    ck.tensors.push_back(StoredTensor::from("mask_adam_v/" + lp[i]->name, learner_moments_.v[i]));
  }
  auto& meta = ck.meta;
  meta["config_text"] = config_.source;
  meta["config_hash"] = config_.hash;
  meta["corpus_hash"] = config_.task.hash();
  meta["step"] = step_;
  meta["phase"] = std::string(to_string(phase_));
  meta["precision"] = std::string(to_string(config_.train.precision));
  meta["learner"] = std::string(learner_->name());
  meta["frozen_temperature"] = frozen_temperature_;
  meta["masks"] = masks_document(config_, cost_, plans_);
  return ck;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ck) {
  const auto& meta = ck.meta;
  if (meta.at("config_hash").get<std::uint64_t>() != config_.hash) {
    throw FormatError("checkpoint belongs to a different configuration");
  }
  if (meta.at("precision").get<std::string>() != to_string(config_.train.precision)) {
    throw FormatError("checkpoint precision does not match the configuration");
  }
  auto params = encoder_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto load = [&](const std::string& name, Tensor<T>& dst) {
      Tensor<T> v = ck.at(name).template to<T>();
      if (!v.same_shape(dst)) throw FormatError("tensor " + name + " has shape " + v.shape_string());
      dst = std::move(v);
    };
    load("theta/" + p.name, p.value);
    load("adam_m/" + p.name, theta_moments_.m[i]);
    load("adam_v/" + p.name, theta_moments_.v[i]);
  }
  auto lp = learner_->parameters();
  for (std::size_t i = 0; i < lp.size(); ++i) {
    lp[i]->value = ck.at("mask/" + lp[i]->name).to<double>();
    learner_moments_.m[i] = ck.at("mask_adam_m/" + lp[i]->name).to<double>();
    learner_moments_.v[i] = ck.at("mask_adam_v/" + lp[i]->name).to<double>();
  }
  step_ = meta.at("step").get<long>();
  frozen_temperature_ = meta.at("frozen_temperature").get<double>();
  phase_ = meta.at("phase").get<std::string>() == "step2" ? Phase::step2 : Phase::step1;
  if (phase_ == Phase::step2) {
    const auto& subnets = meta.at("masks").at("subnets");
    if (subnets.size() != plans_.size()) throw FormatError("checkpoint subnet count mismatch");
    for (std::size_t m = 0; m < plans_.size(); ++m) {
      const auto ids = subnets[m].at("group_ids").get<std::vector<int>>();
      plans_[m].mask = MaskVector::from_selection(cost_.per_group.size(), ids);
      plans_[m].k = static_cast<int>(ids.size());
    }
    prepare_step2();
  }
}

template <typename T>
double Trainer<T>::evaluate_dev(int subnet) const {
  if (subnet < 0) return evaluate<T>(encoder_, nullptr, std::nullopt, corpus_->dev);
  if (phase_ != Phase::step2) throw StateError("subnet masks are not rounded before the transition");
  const auto& plan = plans_.at(static_cast<std::size_t>(subnet));
  return evaluate<T>(encoder_, &plan.mask, learner_->aux_split(subnet), corpus_->dev);
}

template <typename T>
double evaluate(const encoder::Encoder<T>& enc, const MaskVector* mask, std::optional<int> aux_split,
                const std::vector<tasks::Sample>& data) {
  encoder::Encoder<T> model = mask ? encoder::structural_prune(enc, *mask) : enc;
  std::vector<std::vector<int>> hyps, refs;
  for (const auto& s : data) {
    Tape<T> tape;
    const Tensor<T> x = s.features.template cast<T>();
    Var<T> lp = aux_split ? encoder::aux_head_forward(tape, model, x, *aux_split)
                          : encoder::forward(tape, model, x);
    hyps.push_back(tasks::greedy_decode(lp.value()));
    refs.push_back(s.labels);
  }
  return tasks::label_error_rate(hyps, refs);
}

nlohmann::json masks_document(const RunConfig& config, const costs::CostVector& cost,
                              const std::vector<orthomask::SubnetPlan>& plans) {
  nlohmann::json doc;
  doc["config_hash"] = config.hash;
  doc["base_cost"] = cost.base;
  doc["subnets"] = nlohmann::json::array();
  for (std::size_t m = 0; m < plans.size(); ++m) {
    const auto& p = plans[m];
    const bool rounded = p.mask.size() == cost.per_group.size();
    nlohmann::json e;
    e["subnet"] = m;
    e["tau"] = p.tau;
    e["criterion"] = std::string(costs::to_string(p.budget.criterion));
    e["budget"] = p.budget.value;
    e["budget_kind"] = p.budget.kind == costs::Budget::Kind::fraction ? "fraction" : "absolute";
    e["k"] = p.k;
    e["group_ids"] = rounded ? p.mask.selected() : std::vector<int>{};
    e["verify_cost"] = rounded ? cost.selected(p.mask) : 0.0;
    e["rounded"] = rounded;
    doc["subnets"].push_back(std::move(e));
  }
  return doc;
}

template class Trainer<float>;
template class Trainer<double>;
template double evaluate(const encoder::Encoder<float>&, const MaskVector*, std::optional<int>,
                         const std::vector<tasks::Sample>&);
template double evaluate(const encoder::Encoder<double>&, const MaskVector*, std::optional<int>,
                         const std::vector<tasks::Sample>&);

}  // namespace osm::train
