#include "osm/encoder/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"

namespace osm::encoder {
namespace {

using ad::CounterRng;

template <typename T>
Parameter<T> uniform_param(const std::string& name, std::size_t rows, std::size_t cols, double bound,
                           std::uint64_t seed) {
  Tensor<T> v(rows, cols);
  CounterRng rng(ad::derive_key({seed, ad::fnv1a(name)}));
  for (auto& x : v.storage()) x = static_cast<T>(rng.uniform(-bound, bound));
  return Parameter<T>(name, std::move(v));
}

template <typename T>
Parameter<T> const_param(const std::string& name, std::size_t cols, T value) {
  return Parameter<T>(name, Tensor<T>(1, cols, value));
}

double he_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

std::string prefix(int block, ModuleKind kind, const std::string& sub) {
  return "block" + std::to_string(block) + "/" + std::string(to_string(kind)) + "/" + sub + "/";
}

template <typename T>
FfnModule<T> make_ffn(const EncoderConfig& c, int block, ModuleKind kind, std::uint64_t seed) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto chunk = static_cast<std::size_t>(c.chunk_size());
  FfnModule<T> m;
  const std::string base = prefix(block, kind, "base");
  m.norm_g = const_param<T>(base + "norm_g", d, T(1));
  m.norm_b = const_param<T>(base + "norm_b", d, T(0));
  for (int i = 0; i < c.ffn_chunks(); ++i) {
    const std::string p = prefix(block, kind, std::to_string(i));
    FfnChunk<T> ch;
    ch.index = i;
    ch.w1 = uniform_param<T>(p + "w1", d, chunk, he_bound(d), seed);
    ch.b1 = const_param<T>(p + "b1", chunk, T(0));
    ch.w2 = uniform_param<T>(p + "w2", chunk, d, he_bound(static_cast<std::size_t>(c.ffn_hidden())), seed);
    m.chunks.push_back(std::move(ch));
  }
  return m;
}

// Gate bookkeeping shared by all modules of one forward pass.
template <typename T>
struct GateContext {
  const GroupRegistry& registry;
  const ForwardOptions<T>& opts;
  std::optional<Var<T>> clamped;

  bool gated() const { return clamped.has_value(); }
  bool layer() const { return registry.granularity() == Granularity::layer; }
  bool skip(int gid) const {
    return opts.skip_zero_gates && clamped && clamped->value()[static_cast<std::size_t>(gid)] == T(0);
  }
  Var<T> gate(int gid) const {
    const int idx[1] = {gid};
    return ad::take_cols(*clamped, std::span<const int>(idx, 1), T(0));
  }
  bool module_skipped(int block, ModuleKind kind) const {
    const auto i = static_cast<std::size_t>(block * 4 + static_cast<int>(kind));
    return !opts.skipped_modules.empty() && opts.skipped_modules[i];
  }
  double out_rate(const EncoderConfig& c) const {
    return opts.dropout >= 0.0 ? opts.dropout : c.dropout_base;
  }
  double ffn_rate(const EncoderConfig& c, int block, ModuleKind kind) const {
    if (opts.ffn_dropout.empty()) return out_rate(c);
    return opts.ffn_dropout[static_cast<std::size_t>(block * 2 + (kind == ModuleKind::ffn2 ? 1 : 0))];
  }
  std::uint64_t site(int block, ModuleKind kind, int sub) const {
    return ad::derive_key({opts.dropout_key, static_cast<std::uint64_t>(block),
                           static_cast<std::uint64_t>(kind), static_cast<std::uint64_t>(sub)});
  }
};

template <typename T>
Var<T> ffn_module(Tape<T>& tape, const EncoderConfig& cfg, FfnModule<T>& m, Var<T> x, int block,
                  ModuleKind kind, const GateContext<T>& g) {
  if (g.module_skipped(block, kind)) return x;
  const int layer_gid = g.registry.group_of(block, kind);
  if (g.layer() && g.skip(layer_gid)) return x;
  Var<T> h = ad::layer_norm(x, tape.parameter(m.norm_g), tape.parameter(m.norm_b));
  const double rate = g.ffn_rate(cfg, block, kind);
  std::optional<Var<T>> acc;
  for (auto& ch : m.chunks) {
    const int gid = g.registry.group_of(block, kind, ch.index);
    if (!g.layer() && g.skip(gid)) continue;
    Var<T> a = ad::swish(ad::add(ad::matmul(h, tape.parameter(ch.w1)), tape.parameter(ch.b1)));
    if (g.opts.training && rate > 0.0) a = ad::dropout(a, rate, g.site(block, kind, ch.index));
    if (!g.layer() && g.gated()) a = ad::mul(a, g.gate(gid));
    Var<T> y = ad::matmul(a, tape.parameter(ch.w2));
    acc = acc ? ad::add(*acc, y) : y;
  }
  if (!acc) return x;
  Var<T> out = *acc;
  if (g.layer() && g.gated()) out = ad::mul(out, g.gate(layer_gid));
  return ad::add(x, ad::scale(out, T(0.5)));
}

template <typename T>
Var<T> mhsa_module(Tape<T>& tape, const EncoderConfig& cfg, MhsaModule<T>& m, Var<T> x, int block,
                   const GateContext<T>& g) {
  constexpr ModuleKind kind = ModuleKind::mhsa;
  if (g.module_skipped(block, kind)) return x;
  const int layer_gid = g.registry.group_of(block, kind);
  if (g.layer() && g.skip(layer_gid)) return x;
  Var<T> h = ad::layer_norm(x, tape.parameter(m.norm_g), tape.parameter(m.norm_b));
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(cfg.d_head()));
  std::optional<Var<T>> acc;
  for (auto& head : m.heads) {
    const int gid = g.registry.group_of(block, kind, head.index);
    if (!g.layer() && g.skip(gid)) continue;
    Var<T> q = ad::add(ad::matmul(h, tape.parameter(head.wq)), tape.parameter(head.bq));
    Var<T> k = ad::add(ad::matmul(h, tape.parameter(head.wk)), tape.parameter(head.bk));
    Var<T> v = ad::add(ad::matmul(h, tape.parameter(head.wv)), tape.parameter(head.bv));
    Var<T> scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_scale);
    Var<T> ctx = ad::matmul(ad::softmax_rows(scores, T(1)), v);
    if (!g.layer() && g.gated()) ctx = ad::mul(ctx, g.gate(gid));
    Var<T> y = ad::matmul(ctx, tape.parameter(head.wo));
    acc = acc ? ad::add(*acc, y) : y;
  }
  if (!acc) return x;
  Var<T> out = *acc;
  const double rate = g.out_rate(cfg);
  if (g.opts.training && rate > 0.0) out = ad::dropout(out, rate, g.site(block, kind, -1));
  if (g.layer() && g.gated()) out = ad::mul(out, g.gate(layer_gid));
  return ad::add(x, out);
}

template <typename T>
Var<T> conv_module(Tape<T>& tape, const EncoderConfig& cfg, ConvModule<T>& m, Var<T> x, int block,
                   const GateContext<T>& g) {
  constexpr ModuleKind kind = ModuleKind::conv;
  if (g.module_skipped(block, kind) || !m.layers) return x;
  const int gid = g.registry.group_of(block, kind);
  if (g.skip(gid)) return x;
  auto& l = *m.layers;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  Var<T> h = ad::layer_norm(x, tape.parameter(m.norm_g), tape.parameter(m.norm_b));
  Var<T> a = ad::add(ad::matmul(h, tape.parameter(l.pw1_w)), tape.parameter(l.pw1_b));
  Var<T> glu = ad::mul(ad::slice_cols(a, 0, d), ad::sigmoid(ad::slice_cols(a, d, 2 * d)));
  Var<T> c = ad::depthwise_conv1d(glu, tape.parameter(l.dw_w), tape.parameter(l.dw_b));
  Var<T> s = ad::swish(ad::layer_norm(c, tape.parameter(l.bn_g), tape.parameter(l.bn_b)));
  Var<T> out = ad::add(ad::matmul(s, tape.parameter(l.pw2_w)), tape.parameter(l.pw2_b));
  const double rate = g.out_rate(cfg);
  if (g.opts.training && rate > 0.0) out = ad::dropout(out, rate, g.site(block, kind, -1));
  if (g.gated()) out = ad::mul(out, g.gate(gid));
  return ad::add(x, out);
}

template <typename T>
Var<T> frontend(Tape<T>& tape, Encoder<T>& enc, const Tensor<T>& features) {
  const auto& cfg = enc.config();
  if (features.cols() != static_cast<std::size_t>(cfg.d_in)) {
    throw DimensionError("features have " + std::to_string(features.cols()) +
                         " channels, encoder expects " + std::to_string(cfg.d_in));
  }
  const std::size_t frames = features.rows();
  if (frames == 0) throw DimensionError("empty feature sequence");
  const std::size_t out_frames = subsampled_frames(frames);
  if (out_frames > static_cast<std::size_t>(cfg.max_frames)) {
    throw ContractError("sequence of " + std::to_string(out_frames) +
                        " frames exceeds max_frames " + std::to_string(cfg.max_frames));
  }
  Var<T> feat = tape.constant(features);
  std::vector<Var<T>> taps;
  for (int k = 0; k < 3; ++k) {
    std::vector<int> idx(out_frames);
    for (std::size_t t = 0; t < out_frames; ++t) {
      const auto src = static_cast<std::ptrdiff_t>(2 * t) + k - 1;
      idx[t] = (src >= 0 && src < static_cast<std::ptrdiff_t>(frames)) ? static_cast<int>(src) : -1;
    }
    taps.push_back(ad::gather_rows(feat, std::span<const int>(idx)));
  }
  Var<T> h = ad::relu(ad::add(ad::matmul(ad::concat_cols(taps), tape.parameter(enc.frontend_w)),
                              tape.parameter(enc.frontend_b)));
  h = ad::add(ad::matmul(h, tape.parameter(enc.proj_w)), tape.parameter(enc.proj_b));
  std::vector<int> pos(out_frames);
  std::iota(pos.begin(), pos.end(), 0);
  return ad::add(h, ad::gather_rows(tape.parameter(enc.pos_emb), std::span<const int>(pos)));
}

template <typename T>
GateContext<T> make_context(Encoder<T>& enc, const ForwardOptions<T>& opts) {
  GateContext<T> g{enc.registry(), opts, std::nullopt};
  if (opts.gates) {
    const auto n = enc.registry().size();
    if (opts.gates->value().size() != n) {
      throw ContractError("mask has " + std::to_string(opts.gates->value().size()) +
                          " entries, registry has " + std::to_string(n) + " groups");
    }
    if (opts.skip_zero_gates && opts.gates->tape->requires_grad(opts.gates->id)) {
      throw ContractError("skip_zero_gates needs constant gates");
    }
    g.clamped = ad::clamp(*opts.gates, T(0), T(1));
  }
  if (!opts.skipped_modules.empty() &&
      opts.skipped_modules.size() != static_cast<std::size_t>(enc.config().num_blocks) * 4) {
    throw ContractError("skipped_modules must have num_blocks * 4 entries");
  }
  if (!opts.ffn_dropout.empty() &&
      opts.ffn_dropout.size() != static_cast<std::size_t>(enc.config().num_blocks) * 2) {
    throw ContractError("ffn_dropout must have num_blocks * 2 entries");
  }
  return g;
}

template <typename T>
Var<T> run_blocks(Tape<T>& tape, Encoder<T>& enc, Var<T> x, int count, const GateContext<T>& g) {
  const auto& cfg = enc.config();
  for (int b = 0; b < count; ++b) {
    auto& blk = enc.blocks[static_cast<std::size_t>(b)];
    x = ffn_module(tape, cfg, blk.ffn1, x, b, ModuleKind::ffn1, g);
    x = mhsa_module(tape, cfg, blk.mhsa, x, b, g);
    x = conv_module(tape, cfg, blk.conv, x, b, g);
    x = ffn_module(tape, cfg, blk.ffn2, x, b, ModuleKind::ffn2, g);
    x = ad::layer_norm(x, tape.parameter(blk.final_g), tape.parameter(blk.final_b));
  }
  return x;
}

}  // namespace

template <typename T>
Encoder<T> Encoder<T>::build(const EncoderConfig& c, std::uint64_t seed) {
  c.validate();
  Encoder e;
  e.config_ = c;
  e.registry_ = GroupRegistry::build(c);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto din = static_cast<std::size_t>(c.d_in);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto out = static_cast<std::size_t>(c.output_dim());
  e.frontend_w = uniform_param<T>("frontend/base/conv_w", 3 * din, d, he_bound(3 * din), seed);
  e.frontend_b = const_param<T>("frontend/base/conv_b", d, T(0));
  e.proj_w = uniform_param<T>("frontend/base/proj_w", d, d, he_bound(d), seed);
  e.proj_b = const_param<T>("frontend/base/proj_b", d, T(0));
  e.pos_emb = uniform_param<T>("frontend/base/pos_emb", static_cast<std::size_t>(c.max_frames), d,
                               0.1, seed);
  for (int b = 0; b < c.num_blocks; ++b) {
    Block<T> blk;
    blk.ffn1 = make_ffn<T>(c, b, ModuleKind::ffn1, seed);
    const std::string mbase = prefix(b, ModuleKind::mhsa, "base");
    blk.mhsa.norm_g = const_param<T>(mbase + "norm_g", d, T(1));
    blk.mhsa.norm_b = const_param<T>(mbase + "norm_b", d, T(0));
    for (int h = 0; h < c.num_heads(); ++h) {
      const std::string p = prefix(b, ModuleKind::mhsa, std::to_string(h));
      AttentionHead<T> head;
      head.index = h;
      head.wq = uniform_param<T>(p + "wq", d, dh, he_bound(d), seed);
      head.bq = const_param<T>(p + "bq", dh, T(0));
      head.wk = uniform_param<T>(p + "wk", d, dh, he_bound(d), seed);
      head.bk = const_param<T>(p + "bk", dh, T(0));
      head.wv = uniform_param<T>(p + "wv", d, dh, he_bound(d), seed);
      head.bv = const_param<T>(p + "bv", dh, T(0));
      head.wo = uniform_param<T>(p + "wo", dh, d, he_bound(d), seed);
      blk.mhsa.heads.push_back(std::move(head));
    }
    const std::string cbase = prefix(b, ModuleKind::conv, "base");
    blk.conv.norm_g = const_param<T>(cbase + "norm_g", d, T(1));
    blk.conv.norm_b = const_param<T>(cbase + "norm_b", d, T(0));
    const std::string cp = prefix(b, ModuleKind::conv, "0");
    ConvLayers<T> l;
    const auto k = static_cast<std::size_t>(c.conv_kernel);
    l.pw1_w = uniform_param<T>(cp + "pw1_w", d, 2 * d, he_bound(d), seed);
    l.pw1_b = const_param<T>(cp + "pw1_b", 2 * d, T(0));
    l.dw_w = uniform_param<T>(cp + "dw_w", k, d, he_bound(k), seed);
    l.dw_b = const_param<T>(cp + "dw_b", d, T(0));
    l.bn_g = const_param<T>(cp + "bn_g", d, T(1));
    l.bn_b = const_param<T>(cp + "bn_b", d, T(0));
    l.pw2_w = uniform_param<T>(cp + "pw2_w", d, d, he_bound(d), seed);
    l.pw2_b = const_param<T>(cp + "pw2_b", d, T(0));
    blk.conv.layers = std::move(l);
    blk.ffn2 = make_ffn<T>(c, b, ModuleKind::ffn2, seed);
    const std::string fbase = "block" + std::to_string(b) + "/final/base/";
    blk.final_g = const_param<T>(fbase + "norm_g", d, T(1));
    blk.final_b = const_param<T>(fbase + "norm_b", d, T(0));
    e.blocks.push_back(std::move(blk));
  }
  e.out_w = uniform_param<T>("output/base/w", d, out, he_bound(d), seed);
  e.out_b = const_param<T>("output/base/b", out, T(0));
  std::vector<int> splits = c.aux_splits;
  std::sort(splits.begin(), splits.end());
  splits.erase(std::unique(splits.begin(), splits.end()), splits.end());
  for (int s : splits) {
    AuxHead<T> a;
    a.split = s;
    const std::string p = "aux/" + std::to_string(s) + "/";
    a.w = uniform_param<T>(p + "w", d, out, he_bound(d), seed);
    a.b = const_param<T>(p + "b", out, T(0));
    e.aux.push_back(std::move(a));
  }
  return e;
}

template <typename T>
std::vector<Parameter<T>*> Encoder<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::size_t Encoder<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&](const Parameter<T>& p) { n += p.value.size(); });
  return n;
}

template <typename T>
Parameter<T>* Encoder<T>::find(std::string_view name) {
  Parameter<T>* hit = nullptr;
  for_each_parameter([&](Parameter<T>& p) {
    if (p.name == name) hit = &p;
  });
  return hit;
}

template <typename T>
const AuxHead<T>* Encoder<T>::aux_head(int split) const {
  for (const auto& a : aux)
    if (a.split == split) return &a;
  return nullptr;
}

template <typename T>
AuxHead<T>* Encoder<T>::aux_head(int split) {
  for (auto& a : aux)
    if (a.split == split) return &a;
  return nullptr;
}

template <typename T>
Var<T> forward(Tape<T>& tape, Encoder<T>& enc, const Tensor<T>& features,
               const ForwardOptions<T>& opts) {
  const GateContext<T> g = make_context(enc, opts);
  Var<T> x = frontend(tape, enc, features);
  x = run_blocks(tape, enc, x, enc.config().num_blocks, g);
  Var<T> logits = ad::add(ad::matmul(x, tape.parameter(enc.out_w)), tape.parameter(enc.out_b));
  return ad::log_softmax_rows(logits);
}

template <typename T>
Var<T> aux_head_forward(Tape<T>& tape, Encoder<T>& enc, const Tensor<T>& features, int split,
                        const ForwardOptions<T>& opts) {
  if (split < 1 || split > enc.config().num_blocks) {
    throw ContractError("aux split " + std::to_string(split) + " outside [1, " +
                        std::to_string(enc.config().num_blocks) + "]");
  }
  AuxHead<T>* head = enc.aux_head(split);
  if (!head) throw ContractError("encoder has no auxiliary head at block " + std::to_string(split));
  const GateContext<T> g = make_context(enc, opts);
  Var<T> x = frontend(tape, enc, features);
  x = run_blocks(tape, enc, x, split, g);
  Var<T> logits = ad::add(ad::matmul(x, tape.parameter(head->w)), tape.parameter(head->b));
  return ad::log_softmax_rows(logits);
}

template <typename T>
Encoder<T> structural_prune(const Encoder<T>& enc, const MaskVector& mask) {
  const auto& reg = enc.registry();
  if (mask.size() != reg.size()) {
    throw ContractError("mask has " + std::to_string(mask.size()) + " entries, registry has " +
                        std::to_string(reg.size()) + " groups");
  }
  if (!mask.is_binary()) throw ContractError("structural_prune needs a binary mask");
  auto kept = [&](int gid) { return mask.values[static_cast<std::size_t>(gid)] != 0.0; };
  Encoder<T> out = enc;
  for (int b = 0; b < enc.config().num_blocks; ++b) {
    auto& blk = out.blocks[static_cast<std::size_t>(b)];
    for (auto [ffn, kind] : {std::pair{&blk.ffn1, ModuleKind::ffn1}, std::pair{&blk.ffn2, ModuleKind::ffn2}}) {
      std::erase_if(ffn->chunks, [&](const FfnChunk<T>& c) { return !kept(reg.group_of(b, kind, c.index)); });
    }
    std::erase_if(blk.mhsa.heads, [&](const AttentionHead<T>& h) {
      return !kept(reg.group_of(b, ModuleKind::mhsa, h.index));
    });
    if (!kept(reg.group_of(b, ModuleKind::conv))) blk.conv.layers.reset();
  }
  return out;
}

template <typename T>
MaskVector present_groups(const Encoder<T>& enc) {
  const auto& reg = enc.registry();
  MaskVector m = MaskVector::zeros(reg.size());
  for (int b = 0; b < enc.config().num_blocks; ++b) {
    const auto& blk = enc.blocks[static_cast<std::size_t>(b)];
    for (const auto& c : blk.ffn1.chunks) m.values[static_cast<std::size_t>(reg.group_of(b, ModuleKind::ffn1, c.index))] = 1.0;
    for (const auto& c : blk.ffn2.chunks) m.values[static_cast<std::size_t>(reg.group_of(b, ModuleKind::ffn2, c.index))] = 1.0;
    for (const auto& h : blk.mhsa.heads) m.values[static_cast<std::size_t>(reg.group_of(b, ModuleKind::mhsa, h.index))] = 1.0;
    if (blk.conv.layers) m.values[static_cast<std::size_t>(reg.group_of(b, ModuleKind::conv))] = 1.0;
  }
  return m;
}

template class Encoder<float>;
template class Encoder<double>;

#define OSM_INSTANTIATE_ENCODER(T)                                                               \
  template Var<T> forward(Tape<T>&, Encoder<T>&, const Tensor<T>&, const ForwardOptions<T>&);    \
  template Var<T> aux_head_forward(Tape<T>&, Encoder<T>&, const Tensor<T>&, int,                 \
                                   const ForwardOptions<T>&);                                    \
  template Encoder<T> structural_prune(const Encoder<T>&, const MaskVector&);                    \
  template MaskVector present_groups(const Encoder<T>&);

OSM_INSTANTIATE_ENCODER(float)
OSM_INSTANTIATE_ENCODER(double)

}  // namespace osm::encoder
