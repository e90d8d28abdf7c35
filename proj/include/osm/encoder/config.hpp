#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace osm::encoder {

enum class Granularity { layer, component };

// Residual modules of one Conformer block, in execution order.
enum class ModuleKind { ffn1 = 0, mhsa = 1, conv = 2, ffn2 = 3 };

inline constexpr ModuleKind kModuleKinds[] = {ModuleKind::ffn1, ModuleKind::mhsa,
                                              ModuleKind::conv, ModuleKind::ffn2};

std::string_view to_string(ModuleKind kind);
std::string_view to_string(Granularity g);
ModuleKind parse_module_kind(std::string_view s);
Granularity parse_granularity(std::string_view s);

struct EncoderConfig {
  int num_blocks = 12;
  int d_model = 512;
  int d_in = 16;
  int vocab_size = 8;  // labels 1..V; the output layer has V + 1 classes (0 = blank)
  int ffn_mult = 4;
  int conv_kernel = 15;
  int max_frames = 512;  // positional table length (post-subsampling frames)
  double dropout_base = 0.1;
  Granularity granularity = Granularity::component;
  // Blocks (1-based) that carry an auxiliary CTC projection.
  std::vector<int> aux_splits;

  int num_heads() const { return d_model / 64 > 0 ? d_model / 64 : 1; }
  int d_head() const { return d_model / num_heads(); }
  int chunk_size() const { return d_model; }
  int ffn_hidden() const { return ffn_mult * d_model; }
  int ffn_chunks() const { return ffn_hidden() / chunk_size(); }
  int output_dim() const { return vocab_size + 1; }

  // Throws ConfigError on indivisible or out-of-range dimensions.
  void validate() const;
};

}  // namespace osm::encoder
