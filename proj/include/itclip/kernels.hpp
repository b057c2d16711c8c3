// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 inner-loop kernels. A scalar reference implementation always
// exists; an AVX2/FMA variant is selected at runtime when the CPU supports
// it. Both variants are equivalence-tested against each other.
//
// All matmul kernels ACCUMULATE into c (callers zero c when they want a
// plain product); this is the convention backward passes need.

#pragma once

#include <cstddef>
#include <string_view>

namespace itclip::kernels {

struct Ops {
  const char* name;

  // sum_i a[i]*b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double* y, double alpha, const double* x, std::size_t n);
  // y[i] *= alpha
  void (*scale)(double* y, double alpha, std::size_t n);
  // out[i] = a[i] + b[i]
  void (*vadd)(double* out, const double* a, const double* b, std::size_t n);
  // out[i] = a[i] - b[i]
  void (*vsub)(double* out, const double* a, const double* b, std::size_t n);
  // out[i] = a[i] * b[i]
  void (*vmul)(double* out, const double* a, const double* b, std::size_t n);

  // c(r x n) += a(r x k) * b(k x n)
  void (*matmul_nn)(double* c, const double* a, const double* b,
                    std::size_t r, std::size_t k, std::size_t n);
  // c(r x n) += a(r x k) * b(n x k)^T
  void (*matmul_nt)(double* c, const double* a, const double* b,
                    std::size_t r, std::size_t k, std::size_t n);
  // c(r x n) += a(k x r)^T * b(k x n)
  void (*matmul_tn)(double* c, const double* a, const double* b,
                    std::size_t r, std::size_t k, std::size_t n);
};

// Scalar reference kernels; always available.
const Ops& scalar_ops();

// AVX2+FMA kernels, or nullptr when the CPU (or build) lacks support.
const Ops* avx2_ops();

// Kernel set in use. Defaults to the best supported variant; the
// ITCLIP_KERNELS environment variable ("scalar", "avx2", "auto") overrides
// the choice at process start.
const Ops& active();

// Force a variant by name ("scalar", "avx2", "auto"). Returns false when the
// requested variant is unavailable (selection then stays unchanged).
bool select(std::string_view name);

}  // namespace itclip::kernels
