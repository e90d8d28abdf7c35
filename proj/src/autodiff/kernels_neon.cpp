// AArch64 variant. Uses separate vmul/vadd (never vfma) to stay bitwise
// identical to the scalar kernels.
#include "osm/autodiff/kernels.hpp"

#if defined(__ARM_NEON) && defined(__aarch64__)
#include <arm_neon.h>

#include <cstring>

namespace osm::ad::kernels {
namespace {

struct F32 {
  using T = float;
  using V = float32x4_t;
  static constexpr std::size_t lanes = 4;
  static V load(const T* p) { return vld1q_f32(p); }
  static void store(T* p, V v) { vst1q_f32(p, v); }
  static V set1(T v) { return vdupq_n_f32(v); }
  static V add(V a, V b) { return vaddq_f32(a, b); }
  static V mul(V a, V b) { return vmulq_f32(a, b); }
};

struct F64 {
  using T = double;
  using V = float64x2_t;
  static constexpr std::size_t lanes = 2;
  static V load(const T* p) { return vld1q_f64(p); }
  static void store(T* p, V v) { vst1q_f64(p, v); }
  static V set1(T v) { return vdupq_n_f64(v); }
  static V add(V a, V b) { return vaddq_f64(a, b); }
  static V mul(V a, V b) { return vmulq_f64(a, b); }
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

template <typename O>
void gemm_nn(const typename O::T* a, const typename O::T* b, typename O::T* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  using T = typename O::T;
  if (!accumulate) std::memset(c, 0, sizeof(T) * m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 2 * O::lanes <= n; j += 2 * O::lanes) {
      auto c0 = O::load(crow + j);
      auto c1 = O::load(crow + j + O::lanes);
      for (std::size_t p = 0; p < k; ++p) {
        const auto va = O::set1(arow[p]);
        c0 = O::add(c0, O::mul(va, O::load(b + p * n + j)));
        c1 = O::add(c1, O::mul(va, O::load(b + p * n + j + O::lanes)));
      }
      O::store(crow + j, c0);
      O::store(crow + j + O::lanes, c1);
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
  for (; i + O::lanes <= n; i += O::lanes) O::store(z + i, O::mul(O::load(x + i), O::load(y + i)));
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

template <typename O>
void add_inplace(std::size_t n, const typename O::T* x, typename O::T* y) {
  std::size_t i = 0;
  for (; i + O::lanes <= n; i += O::lanes) O::store(y + i, O::add(O::load(y + i), O::load(x + i)));
  for (; i < n; ++i) y[i] = y[i] + x[i];
}

template <typename O>
const KernelTable<typename O::T>& make_table() {
  static const KernelTable<typename O::T> t{"neon", &gemm_nn<O>, &axpy<O>, &mul<O>,
                                            &add_inplace<O>};
  return t;
}

}  // namespace

template <>
const KernelTable<float>* neon_table<float>() {
  return &make_table<F32>();
}
template <>
const KernelTable<double>* neon_table<double>() {
  return &make_table<F64>();
}

}  // namespace osm::ad::kernels

#else

namespace osm::ad::kernels {
template <>
const KernelTable<float>* neon_table<float>() {
  return nullptr;
}
template <>
const KernelTable<double>* neon_table<double>() {
  return nullptr;
}
}  // namespace osm::ad::kernels

#endif
