#include "osm/train/standalone.hpp"

#include <sstream>

#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"
#include "osm/train/optim.hpp"

namespace osm::train {

template <typename T>
encoder::Encoder<T> train_standalone(const RunConfig& config, const tasks::Corpus& corpus,
                                     const encoder::MaskVector* architecture,
                                     const std::function<void(long, double)>& on_step) {
  config.validate();
  if (corpus.train.empty()) throw ConfigError("training corpus is empty");
  const auto& tc = config.train;
  auto enc = encoder::Encoder<T>::build(config.model, tc.seed);
  if (architecture) enc = encoder::structural_prune(enc, *architecture);

  std::vector<ad::Tensor<T>> xs;
  xs.reserve(corpus.train.size());
  for (const auto& s : corpus.train) xs.push_back(s.features.template cast<T>());

  auto key = [&](std::string_view site, long step, std::uint64_t a = 0, std::uint64_t b = 0) {
    return ad::derive_key({tc.seed, ad::fnv1a(site), static_cast<std::uint64_t>(step), a, b});
  };

  auto params = enc.parameters();
  AdamSlots<T> slots;
  init_slots(slots, params);
  const auto batch = static_cast<std::size_t>(tc.batch_size);
  const auto inv_batch = static_cast<T>(1.0 / static_cast<double>(batch));
  for (long t = 0; t < tc.total_steps; ++t) {
    ad::CounterRng rng(key("batch", t));
    zero_grads(params);
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      const auto idx = static_cast<std::size_t>(rng.below(xs.size()));
      ad::Tape<T> tape;
      encoder::ForwardOptions<T> opts;
      opts.training = true;
      opts.dropout_key = key("dropout", t, i, 0);
      auto loss = tasks::ctc_loss(encoder::forward(tape, enc, xs[idx], opts), corpus.train[idx].labels);
      const double v = loss.value().item();
      if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << t << " (sample " << idx << ")";
        throw DivergenceError(msg.str());
      }
      loss_sum += v;
      tape.backward(ad::scale(loss, inv_batch));
    }
    clip_grads(params, tc.grad_clip);
    adam_step(params, slots, t + 1, learning_rate(tc, t), tc.weight_decay, tc);
    if (on_step) on_step(t, loss_sum / static_cast<double>(batch));
  }
  return enc;
}

template encoder::Encoder<float> train_standalone(const RunConfig&, const tasks::Corpus&,
                                                  const encoder::MaskVector*,
                                                  const std::function<void(long, double)>&);
template encoder::Encoder<double> train_standalone(const RunConfig&, const tasks::Corpus&,
                                                   const encoder::MaskVector*,
                                                   const std::function<void(long, double)>&);

}  // namespace osm::train
