#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "osm/train/trainer.hpp"

namespace osm::train {

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  long stop_at = -1;                            // stop before this update; -1 runs to the end
  long checkpoint_every = 0;                    // extra numbered checkpoints; 0 disables
  std::function<void(const MetricsRow&)> on_row;
};

struct RunSummary {
  long step = 0;
  Phase phase = Phase::step1;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::filesystem::path masks;
};

// Runs (or resumes) training and writes metrics.csv, masks.json,
// checkpoint.orsm and the resolved config.ini into out_dir. On resume,
// metrics rows at or after the checkpoint step are replaced.
RunSummary run_training(const RunConfig& config, const tasks::Corpus& corpus, const RunOptions& options);

}  // namespace osm::train
