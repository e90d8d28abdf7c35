#pragma once

#include <cstddef>
#include <string_view>

namespace osm::ad::kernels {

// Data-parallel inner loops behind the autodiff primitives. Every variant
// evaluates the same operations in the same order (no fused multiply-add,
// reductions only along the non-vectorized axis), so scalar and SIMD paths
// are bitwise interchangeable.
template <typename T>
struct KernelTable {
  std::string_view name;
  // c[m x n] (+)= a[m x k] * b[k x n], all row-major, accumulated as row axpys.
  void (*gemm_nn)(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                  std::size_t n, bool accumulate);
  // y[i] += alpha * x[i]
  void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
  // z[i] = x[i] * y[i]
  void (*mul)(std::size_t n, const T* x, const T* y, T* z);
  // y[i] += x[i]
  void (*add_inplace)(std::size_t n, const T* x, T* y);
};

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

// Whether the variant was compiled in and the CPU can run it.
bool isa_available(Isa isa);

template <typename T>
const KernelTable<T>& table(Isa isa);

// Best available variant, unless OSM_KERNELS=scalar|avx2|neon overrides it
// or force_isa() was called.
template <typename T>
const KernelTable<T>& active();

Isa active_isa();
void force_isa(Isa isa);

// Per-variant tables, each defined in its own translation unit.
template <typename T>
const KernelTable<T>& scalar_table();
template <typename T>
const KernelTable<T>* avx2_table();
template <typename T>
const KernelTable<T>* neon_table();

}  // namespace osm::ad::kernels
