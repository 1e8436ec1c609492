#pragma once

// Inner-loop primitives used by the tensor kernels. Each primitive has a
// scalar reference implementation and, on x86-64, an AVX2+FMA variant chosen
// at runtime from CPUID. The environment variable MLFN_ISA=scalar forces the
// reference path.

#include <cstddef>
#include <string_view>

namespace mlfn::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

/// Best instruction set the running CPU supports (and this build compiled).
Isa detected_isa();

/// Instruction set currently used by the dispatched entry points.
Isa active_isa();

/// Switches the dispatched entry points. Throws ContractError when the CPU
/// or build lacks `isa`.
void set_active_isa(Isa isa);

template <typename T>
struct KernelTable {
  T (*dot)(const T* a, const T* b, std::size_t n);
  /// y[i] += alpha * x[i]
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  /// sum_i (a[i] - b[i])^2
  T (*squared_distance)(const T* a, const T* b, std::size_t n);
  T (*sum)(const T* a, std::size_t n);
};

template <typename T>
const KernelTable<T>& scalar_kernels();

/// Null when the build or CPU has no AVX2.
template <typename T>
const KernelTable<T>* avx2_kernels();

template <typename T>
const KernelTable<T>& active_kernels();

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  return active_kernels<T>().dot(a, b, n);
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  active_kernels<T>().axpy(alpha, x, y, n);
}

template <typename T>
inline T squared_distance(const T* a, const T* b, std::size_t n) {
  return active_kernels<T>().squared_distance(a, b, n);
}

template <typename T>
inline T sum(const T* a, std::size_t n) {
  return active_kernels<T>().sum(a, n);
}

}  // namespace mlfn::simd
