#pragma once

#include <functional>

#include "osm/encoder/encoder.hpp"
#include "osm/tasks/tasks.hpp"
#include "osm/train/config.hpp"

namespace osm::train {

// Plain CTC training of one model for train.total_steps updates with the same
// optimizer, schedule, batch draws and dropout as a joint run, but without
// masks, subnet forwards or layer dropout. With `architecture`, the freshly
// initialized encoder is first pruned to that mask, giving a separately
// trained model of the subnet's shape.
template <typename T>
encoder::Encoder<T> train_standalone(const RunConfig& config, const tasks::Corpus& corpus,
                                     const encoder::MaskVector* architecture = nullptr,
                                     const std::function<void(long, double)>& on_step = {});

}  // namespace osm::train
