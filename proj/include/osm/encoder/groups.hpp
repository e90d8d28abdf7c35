#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "osm/encoder/config.hpp"

namespace osm::encoder {

// Atomic unit of subnet selection.
struct ParameterGroup {
  int id = 0;
  int block = 0;
  ModuleKind kind = ModuleKind::ffn1;
  int sub = 0;  // chunk or head index; 0 for CONV and for layer granularity
};

// Canonical enumeration of the maskable groups of an encoder: block-major,
// kinds in execution order, then sub index.
class GroupRegistry {
 public:
  static GroupRegistry build(const EncoderConfig& config);

  std::size_t size() const { return groups_.size(); }
  const ParameterGroup& operator[](std::size_t id) const { return groups_[id]; }
  std::span<const ParameterGroup> groups() const { return groups_; }
  Granularity granularity() const { return granularity_; }
  int num_blocks() const { return num_blocks_; }

  // Group id that owns (block, kind, sub); `sub` is ignored at layer
  // granularity. Returns -1 when no such group exists.
  int group_of(int block, ModuleKind kind, int sub = 0) const;
  // Number of groups of `kind` inside one block.
  int groups_per_block(ModuleKind kind) const;

  // Maps a parameter name `block{b}/{kind}/{sub}/{tensor}` to its group; base
  // (unmaskable) parameters return std::nullopt.
  std::optional<int> group_of_parameter(std::string_view name) const;

  friend bool operator==(const GroupRegistry&, const GroupRegistry&);

 private:
  Granularity granularity_ = Granularity::component;
  int num_blocks_ = 0;
  int per_kind_[4] = {0, 0, 0, 0};
  std::vector<ParameterGroup> groups_;
  std::vector<int> first_id_;  // [block * 4 + kind] -> first group id
};

bool operator==(const ParameterGroup& a, const ParameterGroup& b);

enum class MaskMode { soft, hard };

// Per-group gate values z in [0, 1].
struct MaskVector {
  std::vector<double> values;
  MaskMode mode = MaskMode::soft;

  static MaskVector ones(std::size_t n);
  static MaskVector zeros(std::size_t n);
  // Hard mask with ones at `selected`.
  static MaskVector from_selection(std::size_t n, std::span<const int> selected);

  std::size_t size() const { return values.size(); }
  bool is_binary() const;
  std::vector<int> selected() const;
};

}  // namespace osm::encoder
