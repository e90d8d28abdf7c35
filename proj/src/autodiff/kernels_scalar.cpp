#include <cstring>

#include "osm/autodiff/kernels.hpp"

namespace osm::ad::kernels {
namespace {

template <typename T>
void axpy_scalar(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

template <typename T>
void gemm_nn_scalar(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                    std::size_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(T) * m * n);
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy_scalar(n, a[i * k + p], b + p * n, crow);
  }
}

template <typename T>
void mul_scalar(std::size_t n, const T* x, const T* y, T* z) {
  for (std::size_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

template <typename T>
void add_inplace_scalar(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = y[i] + x[i];
}

}  // namespace

template <typename T>
const KernelTable<T>& scalar_table() {
  static const KernelTable<T> t{"scalar", &gemm_nn_scalar<T>, &axpy_scalar<T>, &mul_scalar<T>,
                                &add_inplace_scalar<T>};
  return t;
}

template const KernelTable<float>& scalar_table<float>();
template const KernelTable<double>& scalar_table<double>();

}  // namespace osm::ad::kernels
