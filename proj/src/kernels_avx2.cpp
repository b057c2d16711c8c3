// SPDX-License-Identifier: Apache-2.0
//
// AVX2+FMA kernels. Compiled with -mavx2 -mfma in its own translation unit;
// avx2_ops() returns nullptr on CPUs without both feature bits so the
// dispatcher can fall back to the scalar set.

#include "itclip/kernels.hpp"

#if defined(__x86_64__) || defined(__i386__)
#define ITCLIP_X86 1
#include <immintrin.h>
#else
#define ITCLIP_X86 0
#endif

namespace itclip::kernels {

#if ITCLIP_X86

namespace {

double a_dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  acc0 = _mm256_add_pd(acc0, acc1);
  __m128d lo = _mm256_castpd256_pd128(acc0);
  __m128d hi = _mm256_extractf128_pd(acc0, 1);
  lo = _mm_add_pd(lo, hi);
  double acc = _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void a_axpy(double* y, double alpha, const double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    _mm256_storeu_pd(y + i + 4,
                     _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4)));
  }
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void a_scale(double* y, double alpha, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_mul_pd(va, _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] *= alpha;
}

void a_vadd(double* out, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void a_vsub(double* out, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void a_vmul(double* out, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

// c(r x n) += a(r x k) b(k x n): saxpy-form, streams rows of b, keeps the
// c row hot. Two k-steps are fused per pass to cut load traffic on c.
void a_matmul_nn(double* c, const double* a, const double* b,
                 std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    std::size_t l = 0;
    for (; l + 2 <= k; l += 2) {
      const __m256d a0 = _mm256_set1_pd(arow[l]);
      const __m256d a1 = _mm256_set1_pd(arow[l + 1]);
      const double* b0 = b + l * n;
      const double* b1 = b0 + n;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        __m256d c0 = _mm256_loadu_pd(crow + j);
        __m256d c1 = _mm256_loadu_pd(crow + j + 4);
        c0 = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j), c0);
        c1 = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j + 4), c1);
        c0 = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + j), c0);
        c1 = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + j + 4), c1);
        _mm256_storeu_pd(crow + j, c0);
        _mm256_storeu_pd(crow + j + 4, c1);
      }
      for (; j + 4 <= n; j += 4) {
        __m256d c0 = _mm256_loadu_pd(crow + j);
        c0 = _mm256_fmadd_pd(a0, _mm256_loadu_pd(b0 + j), c0);
        c0 = _mm256_fmadd_pd(a1, _mm256_loadu_pd(b1 + j), c0);
        _mm256_storeu_pd(crow + j, c0);
      }
      for (; j < n; ++j) crow[j] += arow[l] * b0[j] + arow[l + 1] * b1[j];
    }
    for (; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + l * n;
      a_axpy(crow, av, brow, n);
    }
  }
}

void a_matmul_nt(double* c, const double* a, const double* b,
                 std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += a_dot(arow, b + j * k, k);
  }
}

void a_matmul_tn(double* c, const double* a, const double* b,
                 std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t l = 0; l < k; ++l) {
    const double* arow = a + l * r;
    const double* brow = b + l * n;
    for (std::size_t i = 0; i < r; ++i) {
      a_axpy(c + i * n, arow[i], brow, n);
    }
  }
}

}  // namespace

const Ops* avx2_ops() {
  static const bool supported =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  if (!supported) return nullptr;
  static const Ops ops{"avx2", a_dot,       a_axpy,      a_scale,
                       a_vadd, a_vsub,      a_vmul,      a_matmul_nn,
                       a_matmul_nt, a_matmul_tn};
  return &ops;
}

#else  // !ITCLIP_X86

const Ops* avx2_ops() { return nullptr; }

#endif

}  // namespace itclip::kernels
