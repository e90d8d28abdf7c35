#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "osm/encoder/encoder.hpp"

namespace osm::costs {

using encoder::EncoderConfig;
using encoder::GroupRegistry;
using encoder::MaskVector;

enum class Criterion { sparsity, flops };

std::string_view to_string(Criterion c);
Criterion parse_criterion(std::string_view s);

inline constexpr int kDefaultReferenceFrames = 100;

struct CostVector {
  Criterion criterion = Criterion::sparsity;
  std::vector<double> per_group;
  double base = 0.0;
  int reference_frames = 0;  // FLOPs only

  double maskable_total() const;
  double total() const { return base + maskable_total(); }
  // Sum of per-group costs over the groups a mask keeps (nonzero entries).
  double selected(const MaskVector& mask) const;
  // Expected cost sum_j z_j * c_j of a soft mask.
  double expected(std::span<const double> gates) const;
};

struct Budget {
  enum class Kind { fraction, absolute };
  Criterion criterion = Criterion::flops;
  Kind kind = Kind::fraction;
  double value = 0.5;
};

// Scalar parameter counts per group; base holds everything unmaskable.
CostVector param_cost(const GroupRegistry& registry, const EncoderConfig& config);

// Multiply-accumulate counts per group for `reference_frames` frames after
// subsampling. Norms, biases and activations are not counted.
CostVector flops_cost(const GroupRegistry& registry, const EncoderConfig& config,
                      int reference_frames = kDefaultReferenceFrames);

CostVector cost_for(Criterion c, const GroupRegistry& registry, const EncoderConfig& config,
                    int reference_frames = kDefaultReferenceFrames);

// Absolute tau over the maskable groups. Throws ConfigError for a fraction
// outside (0, 1] or a criterion mismatch.
double resolve_budget(const Budget& budget, const CostVector& cost);

// Strict budget check: sum of selected costs < tau.
bool verify(const MaskVector& mask, const CostVector& cost, double tau);

// MACs executed by matmul and depthwise convolution during a forward pass of
// the structurally pruned encoder.
template <typename T>
std::uint64_t measured_flops(const encoder::Encoder<T>& enc, const MaskVector& mask,
                             const ad::Tensor<T>& features);

}  // namespace osm::costs
