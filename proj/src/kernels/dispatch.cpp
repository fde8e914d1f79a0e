#include "tri/kernels.hpp"

#include "tri/error.hpp"

#include <cstdlib>
#include <string>

namespace tri::kernels {

bool supported(Isa isa) noexcept {
  switch (isa) {
  case Isa::scalar:
    return true;
  case Isa::avx2:
#if defined(TRI_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
  }
  return false;
}

const KernelTable& table_for(Isa isa) {
  if (!supported(isa)) throw DomainError("kernel ISA '" + std::string(name(isa)) + "' is not supported on this CPU");
#if defined(TRI_HAVE_AVX2)
  if (isa == Isa::avx2) return avx2_table();
#endif
  return scalar_table();
}

const KernelTable& active() noexcept {
  static const KernelTable& selected = [] () -> const KernelTable& {
    const char* forced = std::getenv("TRI_KERNEL");
    if (forced && std::string(forced) == "scalar") return scalar_table();
#if defined(TRI_HAVE_AVX2)
    if (supported(Isa::avx2)) return avx2_table();
#endif
    return scalar_table();
  }();
  return selected;
}

std::string_view name(Isa isa) noexcept {
  switch (isa) {
  case Isa::scalar:
    return "scalar";
  case Isa::avx2:
    return "avx2";
  }
  return "unknown";
}

} // namespace tri::kernels
