#include <cstdlib>
#include <string_view>

#include "prerec/kernels.hpp"

namespace prerec::kernels {

bool host_supports_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const KernelTable& select() {
  if (const char* forced = std::getenv("PREREC_KERNELS"); forced && std::string_view(forced) == "scalar") {
    return scalar_table();
  }
  if (const KernelTable* t = avx2_table(); t && host_supports_avx2()) return *t;
  if (const KernelTable* t = neon_table(); t) return *t;
  return scalar_table();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = select();
  return table;
}

}  // namespace prerec::kernels
