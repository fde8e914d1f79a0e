#include "tri/kernels.hpp"

namespace tri::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void gemv_scalar(const double* w, std::size_t rows, std::size_t cols, const double* x,
                 const double* bias, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w + r * cols;
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
    out[r] = bias ? s + bias[r] : s;
  }
}

void gemv_t_scalar(const double* w, std::size_t rows, std::size_t cols, const double* y,
                   double* out) {
  for (std::size_t c = 0; c < cols; ++c) out[c] = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double yr = y[r];
    const double* row = w + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += yr * row[c];
  }
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

} // namespace

const KernelTable& scalar_table() noexcept {
  static const KernelTable t{Isa::scalar, dot_scalar, gemv_scalar, gemv_t_scalar, axpy_scalar};
  return t;
}

} // namespace tri::kernels
