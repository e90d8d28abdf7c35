#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "osm/autodiff/ops.hpp"
#include "osm/autodiff/tape.hpp"
#include "osm/encoder/config.hpp"
#include "osm/encoder/groups.hpp"

namespace osm::encoder {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// One hidden-channel chunk of a feed-forward module: its slice of the first
// projection (weights and biases) and the matching rows of the second.
template <typename T>
struct FfnChunk {
  int index = 0;
  Parameter<T> w1, b1, w2;
};

template <typename T>
struct FfnModule {
  Parameter<T> norm_g, norm_b;
  std::vector<FfnChunk<T>> chunks;
};

// q/k/v projection slices of one head plus its rows of the output projection.
template <typename T>
struct AttentionHead {
  int index = 0;
  Parameter<T> wq, bq, wk, bk, wv, bv, wo;
};

template <typename T>
struct MhsaModule {
  Parameter<T> norm_g, norm_b;
  std::vector<AttentionHead<T>> heads;
};

// Pointwise -> GLU -> depthwise -> norm -> swish -> pointwise.
template <typename T>
struct ConvLayers {
  Parameter<T> pw1_w, pw1_b, dw_w, dw_b, bn_g, bn_b, pw2_w, pw2_b;
};

template <typename T>
struct ConvModule {
  Parameter<T> norm_g, norm_b;
  std::optional<ConvLayers<T>> layers;
};

template <typename T>
struct Block {
  FfnModule<T> ffn1;
  MhsaModule<T> mhsa;
  ConvModule<T> conv;
  FfnModule<T> ffn2;
  Parameter<T> final_g, final_b;
};

template <typename T>
struct AuxHead {
  int split = 0;
  Parameter<T> w, b;
};

// Conformer-lite CTC encoder. Parameters are stored per selectable group so
// that structural pruning only drops container entries.
template <typename T>
class Encoder {
 public:
  static Encoder build(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  const GroupRegistry& registry() const { return registry_; }

  template <typename F>
  void for_each_parameter(F&& f);
  template <typename F>
  void for_each_parameter(F&& f) const;

  std::vector<Parameter<T>*> parameters();
  std::size_t parameter_count() const;
  Parameter<T>* find(std::string_view name);

  const AuxHead<T>* aux_head(int split) const;
  AuxHead<T>* aux_head(int split);

  Parameter<T> frontend_w, frontend_b, proj_w, proj_b, pos_emb;
  std::vector<Block<T>> blocks;
  Parameter<T> out_w, out_b;
  std::vector<AuxHead<T>> aux;

 private:
  EncoderConfig config_;
  GroupRegistry registry_;
};

template <typename T>
struct ForwardOptions {
  // Per-group gates (1xN). Absent means the ungated code path.
  std::optional<Var<T>> gates;
  // Skip groups whose gate is exactly 0 instead of multiplying by it. Only
  // allowed when the gates are constants.
  bool skip_zero_gates = false;
  bool training = false;
  std::uint64_t dropout_key = 0;
  // Dropout on MHSA/CONV outputs; negative selects config().dropout_base.
  double dropout = -1.0;
  // FFN hidden dropout per (block * 2 + ffn); empty uses `dropout`.
  std::vector<double> ffn_dropout;
  // Modules skipped entirely (layer dropout), indexed block * 4 + kind.
  std::vector<bool> skipped_modules;
};

// Frames after the stride-2 frontend.
inline std::size_t subsampled_frames(std::size_t input_frames) { return (input_frames + 1) / 2; }

// Per-frame log-probabilities over blank + V labels, shape T' x (V + 1).
template <typename T>
Var<T> forward(Tape<T>& tape, Encoder<T>& enc, const Tensor<T>& features,
               const ForwardOptions<T>& opts = {});

// Log-probabilities from the auxiliary head tapped after block `split`
// (1-based). Throws ContractError if the split is out of range or has no head.
template <typename T>
Var<T> aux_head_forward(Tape<T>& tape, Encoder<T>& enc, const Tensor<T>& features, int split,
                        const ForwardOptions<T>& opts = {});

// Physically smaller copy without the groups that `mask` zeroes.
template <typename T>
Encoder<T> structural_prune(const Encoder<T>& enc, const MaskVector& mask);

// Groups still present in an encoder (all ones for an unpruned one).
template <typename T>
MaskVector present_groups(const Encoder<T>& enc);

template <typename T>
template <typename F>
void Encoder<T>::for_each_parameter(F&& f) {
  f(frontend_w);
  f(frontend_b);
  f(proj_w);
  f(proj_b);
  f(pos_emb);
  for (auto& b : blocks) {
    f(b.ffn1.norm_g);
    f(b.ffn1.norm_b);
    for (auto& c : b.ffn1.chunks) {
      f(c.w1);
      f(c.b1);
      f(c.w2);
    }
    f(b.mhsa.norm_g);
    f(b.mhsa.norm_b);
    for (auto& h : b.mhsa.heads) {
      f(h.wq);
      f(h.bq);
      f(h.wk);
      f(h.bk);
      f(h.wv);
      f(h.bv);
      f(h.wo);
    }
    f(b.conv.norm_g);
    f(b.conv.norm_b);
    if (b.conv.layers) {
      auto& l = *b.conv.layers;
      f(l.pw1_w);
      f(l.pw1_b);
      f(l.dw_w);
      f(l.dw_b);
      f(l.bn_g);
      f(l.bn_b);
      f(l.pw2_w);
      f(l.pw2_b);
    }
    f(b.ffn2.norm_g);
    f(b.ffn2.norm_b);
    for (auto& c : b.ffn2.chunks) {
      f(c.w1);
      f(c.b1);
      f(c.w2);
    }
    f(b.final_g);
    f(b.final_b);
  }
  f(out_w);
  f(out_b);
  for (auto& a : aux) {
    f(a.w);
    f(a.b);
  }
}

template <typename T>
template <typename F>
void Encoder<T>::for_each_parameter(F&& f) const {
  const_cast<Encoder*>(this)->for_each_parameter(
      [&](Parameter<T>& p) { f(static_cast<const Parameter<T>&>(p)); });
}

extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace osm::encoder
