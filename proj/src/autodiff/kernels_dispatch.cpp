#include <atomic>
#include <cstdlib>
#include <string>

#include "osm/autodiff/kernels.hpp"
#include "osm/errors.hpp"

namespace osm::ad::kernels {
namespace {

std::atomic<int> g_forced{-1};

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Isa detect() {
  if (const char* env = std::getenv("OSM_KERNELS")) {
    const std::string v(env);
    if (v == "scalar") return Isa::scalar;
    if (v == "avx2" && isa_available(Isa::avx2)) return Isa::avx2;
    if (v == "neon" && isa_available(Isa::neon)) return Isa::neon;
  }
  if (isa_available(Isa::avx2)) return Isa::avx2;
  if (isa_available(Isa::neon)) return Isa::neon;
  return Isa::scalar;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::neon:
      return "neon";
  }
  return "unknown";
}

bool isa_available(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
      return avx2_table<float>() != nullptr && cpu_has_avx2();
    case Isa::neon:
      return neon_table<float>() != nullptr;
  }
  return false;
}

template <typename T>
const KernelTable<T>& table(Isa isa) {
  if (!isa_available(isa)) {
    throw ContractError("kernel variant '" + std::string(isa_name(isa)) + "' is not available");
  }
  switch (isa) {
    case Isa::avx2:
      return *avx2_table<T>();
    case Isa::neon:
      return *neon_table<T>();
    case Isa::scalar:
      break;
  }
  return scalar_table<T>();
}

Isa active_isa() {
  const int forced = g_forced.load(std::memory_order_relaxed);
  if (forced >= 0) return static_cast<Isa>(forced);
  static const Isa detected = detect();
  return detected;
}

void force_isa(Isa isa) {
  if (!isa_available(isa)) {
    throw ContractError("kernel variant '" + std::string(isa_name(isa)) + "' is not available");
  }
  g_forced.store(static_cast<int>(isa), std::memory_order_relaxed);
}

template <typename T>
const KernelTable<T>& active() {
  return table<T>(active_isa());
}

template const KernelTable<float>& table<float>(Isa);
template const KernelTable<double>& table<double>(Isa);
template const KernelTable<float>& active<float>();
template const KernelTable<double>& active<double>();

}  // namespace osm::ad::kernels
