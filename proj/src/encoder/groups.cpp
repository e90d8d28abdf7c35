#include "osm/encoder/groups.hpp"

#include <charconv>

#include "osm/errors.hpp"

namespace osm::encoder {

std::string_view to_string(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::ffn1:
      return "ffn1";
    case ModuleKind::mhsa:
      return "mhsa";
    case ModuleKind::conv:
      return "conv";
    case ModuleKind::ffn2:
      return "ffn2";
  }
  return "?";
}

std::string_view to_string(Granularity g) {
  return g == Granularity::layer ? "layer" : "component";
}

ModuleKind parse_module_kind(std::string_view s) {
  for (ModuleKind k : kModuleKinds)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown module kind '" + std::string(s) + "'");
}

Granularity parse_granularity(std::string_view s) {
  if (s == "layer") return Granularity::layer;
  if (s == "component") return Granularity::component;
  throw ConfigError("granularity must be 'layer' or 'component', got '" + std::string(s) + "'");
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("encoder config: " + msg); };
  if (num_blocks < 1) fail("num_blocks must be >= 1");
  if (d_model < 1) fail("d_model must be >= 1");
  if (d_in < 1) fail("d_in must be >= 1");
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) fail("conv_kernel must be odd and positive");
  if (max_frames < 1) fail("max_frames must be >= 1");
  if (dropout_base < 0.0 || dropout_base >= 1.0) fail("dropout_base must be in [0, 1)");
  if (d_model % num_heads() != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by " +
         std::to_string(num_heads()) + " heads");
  }
  if (ffn_hidden() % chunk_size() != 0) {
    fail("ffn hidden width " + std::to_string(ffn_hidden()) + " not divisible by chunk size " +
         std::to_string(chunk_size()));
  }
  for (int s : aux_splits) {
    if (s < 1 || s > num_blocks) fail("aux split " + std::to_string(s) + " out of range");
  }
}

GroupRegistry GroupRegistry::build(const EncoderConfig& config) {
  config.validate();
  GroupRegistry r;
  r.granularity_ = config.granularity;
  r.num_blocks_ = config.num_blocks;
  if (config.granularity == Granularity::component) {
    r.per_kind_[0] = config.ffn_chunks();
    r.per_kind_[1] = config.num_heads();
    r.per_kind_[2] = 1;
    r.per_kind_[3] = config.ffn_chunks();
  } else {
    for (int& n : r.per_kind_) n = 1;
  }
  r.first_id_.resize(static_cast<std::size_t>(config.num_blocks) * 4);
  for (int b = 0; b < config.num_blocks; ++b) {
    for (ModuleKind kind : kModuleKinds) {
      const int k = static_cast<int>(kind);
      r.first_id_[static_cast<std::size_t>(b * 4 + k)] = static_cast<int>(r.groups_.size());
      for (int sub = 0; sub < r.per_kind_[k]; ++sub) {
        r.groups_.push_back({static_cast<int>(r.groups_.size()), b, kind, sub});
      }
    }
  }
  return r;
}

int GroupRegistry::group_of(int block, ModuleKind kind, int sub) const {
  const int k = static_cast<int>(kind);
  if (block < 0 || block >= num_blocks_) return -1;
  if (granularity_ == Granularity::layer) sub = 0;
  if (sub < 0 || sub >= per_kind_[k]) return -1;
  return first_id_[static_cast<std::size_t>(block * 4 + k)] + sub;
}

int GroupRegistry::groups_per_block(ModuleKind kind) const {
  return per_kind_[static_cast<int>(kind)];
}

std::optional<int> GroupRegistry::group_of_parameter(std::string_view name) const {
  // block{b}/{kind}/{sub}/{tensor}
  if (!name.starts_with("block")) return std::nullopt;
  const auto s1 = name.find('/');
  const auto s2 = name.find('/', s1 + 1);
  const auto s3 = name.find('/', s2 + 1);
  if (s1 == std::string_view::npos || s2 == std::string_view::npos ||
      s3 == std::string_view::npos) {
    return std::nullopt;
  }
  int block = 0;
  const auto bpart = name.substr(5, s1 - 5);
  if (std::from_chars(bpart.data(), bpart.data() + bpart.size(), block).ec != std::errc()) {
    return std::nullopt;
  }
  const auto kpart = name.substr(s1 + 1, s2 - s1 - 1);
  const auto spart = name.substr(s2 + 1, s3 - s2 - 1);
  if (spart == "base") return std::nullopt;
  int sub = 0;
  if (std::from_chars(spart.data(), spart.data() + spart.size(), sub).ec != std::errc()) {
    return std::nullopt;
  }
  for (ModuleKind k : kModuleKinds) {
    if (to_string(k) == kpart) {
      const int id = group_of(block, k, sub);
      if (id < 0) return std::nullopt;
      return id;
    }
  }
  return std::nullopt;
}

bool operator==(const ParameterGroup& a, const ParameterGroup& b) {
  return a.id == b.id && a.block == b.block && a.kind == b.kind && a.sub == b.sub;
}

bool operator==(const GroupRegistry& a, const GroupRegistry& b) {
  return a.granularity_ == b.granularity_ && a.num_blocks_ == b.num_blocks_ && a.groups_ == b.groups_;
}

MaskVector MaskVector::ones(std::size_t n) { return {std::vector<double>(n, 1.0), MaskMode::hard}; }

MaskVector MaskVector::zeros(std::size_t n) {
  return {std::vector<double>(n, 0.0), MaskMode::hard};
}

MaskVector MaskVector::from_selection(std::size_t n, std::span<const int> selected) {
  MaskVector m = zeros(n);
  for (int j : selected) {
    if (j < 0 || static_cast<std::size_t>(j) >= n) {
      throw ContractError("mask selection index " + std::to_string(j) + " out of range");
    }
    m.values[static_cast<std::size_t>(j)] = 1.0;
  }
  return m;
}

bool MaskVector::is_binary() const {
  for (double v : values)
    if (v != 0.0 && v != 1.0) return false;
  return true;
}

std::vector<int> MaskVector::selected() const {
  std::vector<int> out;
  for (std::size_t j = 0; j < values.size(); ++j)
    if (values[j] != 0.0) out.push_back(static_cast<int>(j));
  return out;
}

}  // namespace osm::encoder
