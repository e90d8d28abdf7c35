#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "osm/autodiff/tape.hpp"

namespace osm::ad {

// Counts multiply-accumulates executed by forward matmul/convolution
// primitives on this thread while the scope is alive. Scopes nest.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t count() const { return count_; }

  // Adds to the innermost active scope, if any.
  static void charge(std::uint64_t n);

 private:
  std::uint64_t count_ = 0;
  MacCounter* parent_ = nullptr;
};

// Linear algebra.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
template <typename T>
Var<T> transpose(Var<T> a);

// Elementwise arithmetic. `b` may match `a` or broadcast as a 1xC row or a
// 1x1 scalar.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);
template <typename T>
Var<T> add_scalar(Var<T> a, T s);

// Indexing.
template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);
// out[r, j] = a[r, index[j]], or `fill` where index[j] < 0.
template <typename T>
Var<T> take_cols(Var<T> a, std::span<const int> index, T fill);
// Embedding gather: out[i, :] = a[index[i], :], or zeros where index[i] < 0.
template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const int> index);

// Activations.
template <typename T>
Var<T> relu(Var<T> a);
template <typename T>
Var<T> sigmoid(Var<T> a);
template <typename T>
Var<T> swish(Var<T> a);
template <typename T>
Var<T> sqrt(Var<T> a);
// Gradient passes where lo <= a <= hi.
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi);

// Row-wise normalization with learned scale/shift, both 1xC.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

// Inverted dropout; the keep mask is drawn from CounterRng(key).
template <typename T>
Var<T> dropout(Var<T> x, double p, std::uint64_t key);

// Row-wise softmax of s / temperature. Throws DomainError if temperature <= 0.
template <typename T>
Var<T> softmax_rows(Var<T> s, T temperature);
template <typename T>
Var<T> log_softmax_rows(Var<T> x);
// axis 0 reduces rows (-> 1xC), axis 1 reduces columns (-> Rx1).
template <typename T>
Var<T> logsumexp(Var<T> x, int axis);

template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);
template <typename T>
Var<T> sum_axis(Var<T> x, int axis);

// Depthwise convolution along rows (time), 'same' zero padding, odd kernel.
// x: TxC, w: KxC, b: 1xC.
template <typename T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> w, Var<T> b);

// Forward value `forward_value`, gradient passed unchanged to `a`.
template <typename T>
Var<T> straight_through(Var<T> a, Tensor<T> forward_value);

// Forward-only helpers on plain tensors.
template <typename T>
Tensor<T> softmax_rows_value(const Tensor<T>& s, T temperature);

}  // namespace osm::ad
