#include <atomic>
#include <cstdlib>
#include <string>

#include "mlfn/errors.hpp"
#include "mlfn/simd.hpp"

namespace mlfn::simd {
namespace detail {
const KernelTable<float>* avx2_table_f32();
const KernelTable<double>* avx2_table_f64();
}  // namespace detail

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  if (const char* env = std::getenv("MLFN_ISA"); env && std::string(env) == "scalar")
    return Isa::scalar;
  return detected_isa();
}

std::atomic<Isa>& active_slot() {
  static std::atomic<Isa> slot{initial_isa()};
  return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

Isa detected_isa() {
  static const Isa isa =
      (cpu_has_avx2() && detail::avx2_table_f32() != nullptr) ? Isa::avx2 : Isa::scalar;
  return isa;
}

Isa active_isa() { return active_slot().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (isa == Isa::avx2 && detected_isa() != Isa::avx2)
    throw ContractError("AVX2 kernels unavailable on this CPU or build");
  active_slot().store(isa, std::memory_order_relaxed);
}

template <>
const KernelTable<float>* avx2_kernels<float>() {
  return detected_isa() == Isa::avx2 ? detail::avx2_table_f32() : nullptr;
}

template <>
const KernelTable<double>* avx2_kernels<double>() {
  return detected_isa() == Isa::avx2 ? detail::avx2_table_f64() : nullptr;
}

template <typename T>
const KernelTable<T>& active_kernels() {
  if (active_isa() == Isa::avx2) return *avx2_kernels<T>();
  return scalar_kernels<T>();
}

template const KernelTable<float>& active_kernels<float>();
template const KernelTable<double>& active_kernels<double>();

}  // namespace mlfn::simd
