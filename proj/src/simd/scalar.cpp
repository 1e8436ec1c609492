#include "mlfn/simd.hpp"

namespace mlfn::simd {
namespace {

template <typename T>
T dot_scalar(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy_scalar(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T squared_distance_scalar(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

template <typename T>
T sum_scalar(const T* a, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

}  // namespace

template <typename T>
const KernelTable<T>& scalar_kernels() {
  static const KernelTable<T> table{&dot_scalar<T>, &axpy_scalar<T>, &squared_distance_scalar<T>,
                                    &sum_scalar<T>};
  return table;
}

template const KernelTable<float>& scalar_kernels<float>();
template const KernelTable<double>& scalar_kernels<double>();

}  // namespace mlfn::simd
