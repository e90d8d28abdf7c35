#include "osm/costs/costs.hpp"

#include <string>

#include "osm/errors.hpp"

namespace osm::costs {

using encoder::ModuleKind;

std::string_view to_string(Criterion c) { return c == Criterion::flops ? "flops" : "sparsity"; }

Criterion parse_criterion(std::string_view s) {
  if (s == "flops") return Criterion::flops;
  if (s == "sparsity") return Criterion::sparsity;
  throw ConfigError("criterion must be 'sparsity' or 'flops', got '" + std::string(s) + "'");
}

double CostVector::maskable_total() const {
  double s = 0.0;
  for (double c : per_group) s += c;
  return s;
}

double CostVector::selected(const MaskVector& mask) const {
  if (mask.size() != per_group.size()) {
    throw ContractError("mask has " + std::to_string(mask.size()) + " entries, cost vector has " +
                        std::to_string(per_group.size()));
  }
  double s = 0.0;
  for (std::size_t j = 0; j < per_group.size(); ++j)
    if (mask.values[j] != 0.0) s += per_group[j];
  return s;
}

double CostVector::expected(std::span<const double> gates) const {
  if (gates.size() != per_group.size()) throw ContractError("gate vector length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < per_group.size(); ++j) s += gates[j] * per_group[j];
  return s;
}

namespace {

struct Dims {
  double d, din, dh, chunk, hidden, k, out, frames;
  int chunks, heads;
};

Dims dims_of(const EncoderConfig& c) {
  return {static_cast<double>(c.d_model),      static_cast<double>(c.d_in),
          static_cast<double>(c.d_head()),     static_cast<double>(c.chunk_size()),
          static_cast<double>(c.ffn_hidden()), static_cast<double>(c.conv_kernel),
          static_cast<double>(c.output_dim()), static_cast<double>(c.max_frames),
          c.ffn_chunks(),                      c.num_heads()};
}

// Fills per-group costs from per-unit costs; at layer granularity a module's
// group absorbs all of its units.
void assign(CostVector& cv, const GroupRegistry& reg, const EncoderConfig& c, double chunk_cost,
            double head_cost, double conv_cost) {
  cv.per_group.assign(reg.size(), 0.0);
  for (const auto& g : reg.groups()) {
    double v = 0.0;
    const bool layer = reg.granularity() == encoder::Granularity::layer;
    switch (g.kind) {
      case ModuleKind::ffn1:
      case ModuleKind::ffn2:
        v = chunk_cost * (layer ? c.ffn_chunks() : 1);
        break;
      case ModuleKind::mhsa:
        v = head_cost * (layer ? c.num_heads() : 1);
        break;
      case ModuleKind::conv:
        v = conv_cost;
        break;
    }
    cv.per_group[static_cast<std::size_t>(g.id)] = v;
  }
}

}  // namespace

CostVector param_cost(const GroupRegistry& registry, const EncoderConfig& config) {
  const Dims m = dims_of(config);
  CostVector cv;
  cv.criterion = Criterion::sparsity;
  const double chunk = m.d * m.chunk + m.chunk + m.chunk * m.d;
  const double head = 4 * m.d * m.dh + 3 * m.dh;
  const double conv = (m.d * 2 * m.d + 2 * m.d) + (m.k * m.d + m.d) + 2 * m.d + (m.d * m.d + m.d);
  assign(cv, registry, config, chunk, head, conv);
  const double frontend = 3 * m.din * m.d + m.d + m.d * m.d + m.d + m.frames * m.d;
  // Pre-norms of the four modules plus the block's final norm.
  const double per_block = 5 * 2 * m.d;
  const double output = m.d * m.out + m.out;
  cv.base = frontend + config.num_blocks * per_block + output +
            static_cast<double>(config.aux_splits.size()) * output;
  return cv;
}

CostVector flops_cost(const GroupRegistry& registry, const EncoderConfig& config,
                      int reference_frames) {
  if (reference_frames < 1) throw ConfigError("reference frame count must be >= 1");
  const Dims m = dims_of(config);
  const double L = reference_frames;
  CostVector cv;
  cv.criterion = Criterion::flops;
  cv.reference_frames = reference_frames;
  const double chunk = L * 2 * m.d * m.chunk;
  const double head = L * 4 * m.d * m.dh + 2 * L * L * m.dh;
  const double conv = L * (3 * m.d * m.d + m.d * m.k);
  assign(cv, registry, config, chunk, head, conv);
  cv.base = L * 3 * m.din * m.d + L * m.d * m.d + L * m.d * m.out;
  return cv;
}

CostVector cost_for(Criterion c, const GroupRegistry& registry, const EncoderConfig& config,
                    int reference_frames) {
  return c == Criterion::flops ? flops_cost(registry, config, reference_frames)
                               : param_cost(registry, config);
}

double resolve_budget(const Budget& budget, const CostVector& cost) {
  if (budget.criterion != cost.criterion) {
    throw ConfigError("budget criterion " + std::string(to_string(budget.criterion)) +
                      " does not match cost vector criterion " +
                      std::string(to_string(cost.criterion)));
  }
  if (budget.kind == Budget::Kind::absolute) {
    if (!(budget.value > 0.0)) throw ConfigError("absolute budget must be positive");
    return budget.value;
  }
  if (!(budget.value > 0.0 && budget.value <= 1.0)) {
    throw ConfigError("budget fraction must be in (0, 1], got " + std::to_string(budget.value));
  }
  return budget.value * cost.maskable_total();
}

bool verify(const MaskVector& mask, const CostVector& cost, double tau) {
  if (!mask.is_binary()) throw ContractError("verify needs a binary mask");
  return cost.selected(mask) < tau;
}

template <typename T>
std::uint64_t measured_flops(const encoder::Encoder<T>& enc, const MaskVector& mask,
                             const ad::Tensor<T>& features) {
  encoder::Encoder<T> pruned = encoder::structural_prune(enc, mask);
  ad::MacCounter counter;
  ad::Tape<T> tape;
  encoder::forward(tape, pruned, features);
  return counter.count();
}

template std::uint64_t measured_flops(const encoder::Encoder<float>&, const MaskVector&,
                                      const ad::Tensor<float>&);
template std::uint64_t measured_flops(const encoder::Encoder<double>&, const MaskVector&,
                                      const ad::Tensor<double>&);

}  // namespace osm::costs
