#pragma once

#include <filesystem>
#include <string>

#include "osm/train/config.hpp"

namespace osm::cli {

// Parses the INI-style run configuration. Sections [model], [task], [train],
// [subnets] and [mask_learner] are required; unknown sections or keys are
// rejected with the offending line number. The returned config carries its
// canonical rendering and hash.
train::RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
train::RunConfig load_run_config(const std::filesystem::path& path);

// Canonical text: every key in a fixed order, doubles printed round-trip.
std::string render_run_config(const train::RunConfig& config);

// Re-renders and re-hashes after programmatic edits (e.g. a seed override).
void refresh_identity(train::RunConfig& config);

}  // namespace osm::cli
