#pragma once

// Dense inner loops used by the forward pass, backprop and attribution.
//
// Every kernel has a scalar reference implementation; an AVX2+FMA variant is
// selected at process start when the CPU supports it. Set TRI_KERNEL=scalar
// to force the reference path. Within one process the selection never
// changes, so forward passes stay bit-reproducible.

#include <cstddef>
#include <span>
#include <string_view>

namespace tri::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  // sum_i a[i]*b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // out = W x (+ bias); W is rows x cols, row-major. bias may be null.
  void (*gemv)(const double* w, std::size_t rows, std::size_t cols, const double* x,
               const double* bias, double* out);
  // out = W^T y; W is rows x cols, row-major, out has cols entries.
  void (*gemv_t)(const double* w, std::size_t rows, std::size_t cols, const double* y,
                 double* out);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_table() noexcept;
#if defined(TRI_HAVE_AVX2)
const KernelTable& avx2_table() noexcept;
#endif

bool supported(Isa isa) noexcept;
const KernelTable& table_for(Isa isa);
const KernelTable& active() noexcept;
std::string_view name(Isa isa) noexcept;

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

} // namespace tri::kernels
