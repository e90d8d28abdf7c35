// Compiled with -mavx2 only; never use FMA here (see KernelTable contract).
#include "osm/autodiff/kernels.hpp"

#if defined(__AVX2__)
#include <immintrin.h>

#include <cstring>

namespace osm::ad::kernels {
namespace {

struct F32 {
  using T = float;
  using V = __m256;
  static constexpr std::size_t lanes = 8;
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(T v) { return _mm256_set1_ps(v); }
  static V zero() { return _mm256_setzero_ps(); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static V mul(V a, V b) { return _mm256_mul_ps(a, b); }
};

struct F64 {
  using T = double;
  using V = __m256d;
  static constexpr std::size_t lanes = 4;
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(T v) { return _mm256_set1_pd(v); }
  static V zero() { return _mm256_setzero_pd(); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static V mul(V a, V b) { return _mm256_mul_pd(a, b); }
};

template <typename O>
void axpy(std::size_t n, typename O::T alpha, const typename O::T* x, typename O::T* y) {
  const auto va = O::set1(alpha);
  std::size_t i = 0;
  for (; i + O::lanes <= n; i += O::lanes) {
    O::store(y + i, O::add(O::load(y + i), O::mul(va, O::load(x + i))));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

// Register-tiled over four vectors of output columns; the k-loop order per
// output element matches the scalar kernel exactly.
template <typename O>
void gemm_nn(const typename O::T* a, const typename O::T* b, typename O::T* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  using T = typename O::T;
  constexpr std::size_t tile = 4 * O::lanes;
  if (!accumulate) std::memset(c, 0, sizeof(T) * m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::size_t j = 0;
    for (; j + tile <= n; j += tile) {
      auto c0 = O::load(crow + j);
      auto c1 = O::load(crow + j + O::lanes);
      auto c2 = O::load(crow + j + 2 * O::lanes);
      auto c3 = O::load(crow + j + 3 * O::lanes);
      for (std::size_t p = 0; p < k; ++p) {
        const auto va = O::set1(arow[p]);
        const T* brow = b + p * n + j;
        c0 = O::add(c0, O::mul(va, O::load(brow)));
        c1 = O::add(c1, O::mul(va, O::load(brow + O::lanes)));
        c2 = O::add(c2, O::mul(va, O::load(brow + 2 * O::lanes)));
        c3 = O::add(c3, O::mul(va, O::load(brow + 3 * O::lanes)));
      }
      O::store(crow + j, c0);
      O::store(crow + j + O::lanes, c1);
      O::store(crow + j + 2 * O::lanes, c2);
      O::store(crow + j + 3 * O::lanes, c3);
    }
    for (; j + O::lanes <= n; j += O::lanes) {
      auto acc = O::load(crow + j);
      for (std::size_t p = 0; p < k; ++p) {
        acc = O::add(acc, O::mul(O::set1(arow[p]), O::load(b + p * n + j)));
      }
      O::store(crow + j, acc);
    }
    for (; j < n; ++j) {
      T acc = crow[j];
      for (std::size_t p = 0; p < k; ++p) acc = acc + arow[p] * b[p * n + j];
      crow[j] = acc;
    }
  }
}

template <typename O>
void mul(std::size_t n, const typename O::T* x, const typename O::T* y, typename O::T* z) {
  std::size_t i = 0;
  for (; i + O::lanes <= n; i += O::lanes) {
    O::store(z + i, O::mul(O::load(x + i), O::load(y + i)));
  }
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

template <typename O>
void add_inplace(std::size_t n, const typename O::T* x, typename O::T* y) {
  std::size_t i = 0;
  for (; i + O::lanes <= n; i += O::lanes) {
    O::store(y + i, O::add(O::load(y + i), O::load(x + i)));
  }
  for (; i < n; ++i) y[i] = y[i] + x[i];
}

template <typename O>
const KernelTable<typename O::T>& make_table() {
  static const KernelTable<typename O::T> t{"avx2", &gemm_nn<O>, &axpy<O>, &mul<O>,
                                            &add_inplace<O>};
  return t;
}

}  // namespace

template <>
const KernelTable<float>* avx2_table<float>() {
  return &make_table<F32>();
}
template <>
const KernelTable<double>* avx2_table<double>() {
  return &make_table<F64>();
}

}  // namespace osm::ad::kernels

#else

namespace osm::ad::kernels {
template <>
const KernelTable<float>* avx2_table<float>() {
  return nullptr;
}
template <>
const KernelTable<double>* avx2_table<double>() {
  return nullptr;
}
}  // namespace osm::ad::kernels

#endif
