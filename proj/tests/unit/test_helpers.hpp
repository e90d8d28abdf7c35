#pragma once

#include "osm/autodiff/rng.hpp"
#include "osm/autodiff/tensor.hpp"
#include "osm/encoder/config.hpp"
#include "osm/encoder/groups.hpp"

namespace osm::test {

inline encoder::EncoderConfig small_model(int blocks = 2, int d_model = 16) {
  encoder::EncoderConfig c;
  c.num_blocks = blocks;
  c.d_model = d_model;
  c.d_in = 6;
  c.vocab_size = 4;
  c.ffn_mult = 4;
  c.conv_kernel = 3;
  c.max_frames = 32;
  return c;
}

template <typename T>
ad::Tensor<T> features(std::size_t frames, std::size_t d_in, std::uint64_t key) {
  ad::CounterRng rng(key);
  ad::Tensor<T> x(frames, d_in);
  for (auto& v : x.storage()) v = static_cast<T>(rng.normal());
  return x;
}

inline encoder::MaskVector random_mask(std::size_t n, std::uint64_t key, double keep = 0.5) {
  ad::CounterRng rng(key);
  encoder::MaskVector m = encoder::MaskVector::zeros(n);
  for (auto& v : m.values) v = rng.uniform() < keep ? 1.0 : 0.0;
  return m;
}

}  // namespace osm::test
