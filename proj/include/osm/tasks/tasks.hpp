#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "osm/autodiff/ops.hpp"

namespace osm::tasks {

using ad::Tensor;
using ad::Var;

struct SynthConfig {
  int vocab_size = 8;
  int d_in = 16;
  int min_label_len = 2;
  int max_label_len = 8;
  int min_frames_per_label = 1;
  int max_frames_per_label = 4;
  double noise = 0.3;
  int train_size = 2000;
  int dev_size = 500;
  std::uint64_t seed = 1;

  void validate() const;
  std::uint64_t hash() const;
};

struct Sample {
  Tensor<float> features;   // T x d_in
  std::vector<int> labels;  // values in 1..V; 0 is the blank
};

struct Corpus {
  SynthConfig config;
  Tensor<float> prototypes;  // V x d_in, row v-1 belongs to label v
  std::vector<Sample> train;
  std::vector<Sample> dev;
};

// Frames remaining after the stride-2 frontend.
inline std::size_t frames_after_frontend(std::size_t frames) { return (frames + 1) / 2; }

// Minimum frame count CTC needs for a label sequence: one per label plus one
// blank between each pair of equal neighbours.
std::size_t ctc_min_frames(std::span<const int> labels);

// Deterministic per (seed, split, index); `threads` only changes speed.
Corpus generate(const SynthConfig& config, int threads = 1);

// Little-endian cache: magic, version, config hash, counts, then samples.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
// Throws FormatError on a bad header, or on a task-config hash mismatch
// unless `check_hash` is false.
Corpus load_corpus(const std::filesystem::path& path, const SynthConfig& config, bool check_hash = true);

// -log p(labels | log_probs) by the log-space alpha recursion on the tape.
// log_probs is T x (V + 1) with column 0 the blank.
template <typename T>
Var<T> ctc_loss(Var<T> log_probs, std::span<const int> labels);

// Exhaustive path enumeration over (V + 1)^T alignments; T <= 8, V <= 4.
double ctc_brute_force(const Tensor<double>& log_probs, std::span<const int> labels);

template <typename T>
std::vector<int> greedy_decode(const Tensor<T>& log_probs);

std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

// 100 * sum of edit distances / sum of reference lengths.
double label_error_rate(const std::vector<std::vector<int>>& hyps,
                        const std::vector<std::vector<int>>& refs);

}  // namespace osm::tasks
