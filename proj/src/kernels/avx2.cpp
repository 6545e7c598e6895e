// AVX2/FMA backend. This translation unit is the only one compiled with
// -mavx2 -mfma; callers reach it through the dispatch table after a CPU check.

#include "flowkd/kernels/kernels.hpp"

#if defined(FLOWKD_BUILD_AVX2)

#include <immintrin.h>

#include <algorithm>

#include "flowkd/kernels/reference.hpp"

namespace flowkd::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

// One MRx16 tile of C. B rows are contiguous slices, A entries broadcast.
template <int MR>
inline void tile_mrx16(int K, const float* A, int lda, const float* B, int ldb, float* C,
                       int ldc, bool accumulate) {
  __m256 acc0[MR], acc1[MR];
  for (int m = 0; m < MR; ++m) {
    if (accumulate) {
      acc0[m] = _mm256_loadu_ps(C + static_cast<int64_t>(m) * ldc);
      acc1[m] = _mm256_loadu_ps(C + static_cast<int64_t>(m) * ldc + 8);
    } else {
      acc0[m] = _mm256_setzero_ps();
      acc1[m] = _mm256_setzero_ps();
    }
  }
  for (int k = 0; k < K; ++k) {
    const float* brow = B + static_cast<int64_t>(k) * ldb;
    __m256 b0 = _mm256_loadu_ps(brow);
    __m256 b1 = _mm256_loadu_ps(brow + 8);
    for (int m = 0; m < MR; ++m) {
      __m256 a = _mm256_broadcast_ss(A + static_cast<int64_t>(m) * lda + k);
      acc0[m] = _mm256_fmadd_ps(a, b0, acc0[m]);
      acc1[m] = _mm256_fmadd_ps(a, b1, acc1[m]);
    }
  }
  for (int m = 0; m < MR; ++m) {
    _mm256_storeu_ps(C + static_cast<int64_t>(m) * ldc, acc0[m]);
    _mm256_storeu_ps(C + static_cast<int64_t>(m) * ldc + 8, acc1[m]);
  }
}

// Small-K path: K fits in the k-loop of a single wide tile, so accumulator
// spill amortizes badly in the generic kernel. One row, 64 columns.
void gemm_nn_small_k(int M, int N, int K, const float* A, const float* B, float* C, bool acc) {
  constexpr int NR = 64;
  const int n_full = N - N % NR;
  // n0 outer keeps the K x NR panel of B hot across all rows of A
  for (int n0 = 0; n0 < n_full; n0 += NR) {
    for (int m = 0; m < M; ++m) {
      const float* a = A + static_cast<int64_t>(m) * K;
      float* crow = C + static_cast<int64_t>(m) * N + n0;
      __m256 accv[8];
      if (acc) {
        for (int j = 0; j < 8; ++j) accv[j] = _mm256_loadu_ps(crow + 8 * j);
      } else {
        for (int j = 0; j < 8; ++j) accv[j] = _mm256_setzero_ps();
      }
      for (int k = 0; k < K; ++k) {
        const float* brow = B + static_cast<int64_t>(k) * N + n0;
        const __m256 av = _mm256_broadcast_ss(a + k);
        for (int j = 0; j < 8; ++j)
          accv[j] = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8 * j), accv[j]);
      }
      for (int j = 0; j < 8; ++j) _mm256_storeu_ps(crow + 8 * j, accv[j]);
    }
  }
  for (int m = 0; m < M; ++m) {
    const float* a = A + static_cast<int64_t>(m) * K;
    float* crow = C + static_cast<int64_t>(m) * N;
    for (int n = n_full; n < N; ++n) {
      float s = 0.f;
      for (int k = 0; k < K; ++k) s += a[k] * B[static_cast<int64_t>(k) * N + n];
      crow[n] = acc ? crow[n] + s : s;
    }
  }
}

void a_gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool acc) {
  if (K <= 8 && N >= 64) {
    gemm_nn_small_k(M, N, K, A, B, C, acc);
    return;
  }
  constexpr int NR = 16;
  const int n_full = N - N % NR;
  for (int n0 = 0; n0 < n_full; n0 += NR) {
    int m0 = 0;
    for (; m0 + 6 <= M; m0 += 6)
      tile_mrx16<6>(K, A + static_cast<int64_t>(m0) * K, K, B + n0, N,
                    C + static_cast<int64_t>(m0) * N + n0, N, acc);
    switch (M - m0) {
      case 5:
        tile_mrx16<5>(K, A + static_cast<int64_t>(m0) * K, K, B + n0, N,
                      C + static_cast<int64_t>(m0) * N + n0, N, acc);
        break;
      case 4:
        tile_mrx16<4>(K, A + static_cast<int64_t>(m0) * K, K, B + n0, N,
                      C + static_cast<int64_t>(m0) * N + n0, N, acc);
        break;
      case 3:
        tile_mrx16<3>(K, A + static_cast<int64_t>(m0) * K, K, B + n0, N,
                      C + static_cast<int64_t>(m0) * N + n0, N, acc);
        break;
      case 2:
        tile_mrx16<2>(K, A + static_cast<int64_t>(m0) * K, K, B + n0, N,
                      C + static_cast<int64_t>(m0) * N + n0, N, acc);
        break;
      case 1:
        tile_mrx16<1>(K, A + static_cast<int64_t>(m0) * K, K, B + n0, N,
                      C + static_cast<int64_t>(m0) * N + n0, N, acc);
        break;
      default:
        break;
    }
  }
  if (n_full < N) {
    // narrow right edge: scalar reference on the remaining columns
    for (int i = 0; i < M; ++i) {
      for (int j = n_full; j < N; ++j) {
        float s = 0.f;
        for (int k = 0; k < K; ++k) s += A[static_cast<int64_t>(i) * K + k] * B[static_cast<int64_t>(k) * N + j];
        float* c = C + static_cast<int64_t>(i) * N + j;
        *c = acc ? *c + s : s;
      }
    }
  }
}

// C[i][j] = dot(A_i, B_j). K is blocked so a strip of B rows stays cache-hot
// while every row of A runs over it.
void a_gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool acc) {
  constexpr int KB = 4096;
  constexpr int JB = 48;
  if (!acc) {
    for (int64_t i = 0; i < static_cast<int64_t>(M) * N; ++i) C[i] = 0.f;
  }
  for (int k0 = 0; k0 < K; k0 += KB) {
    const int kb = std::min(KB, K - k0);
    const int kfull = kb - kb % 8;
    for (int j0 = 0; j0 < N; j0 += JB) {
      const int jb = std::min(JB, N - j0);
      for (int i = 0; i < M; ++i) {
        const float* a = A + static_cast<int64_t>(i) * K + k0;
        for (int j = j0; j < j0 + jb; ++j) {
          const float* b = B + static_cast<int64_t>(j) * K + k0;
          __m256 vacc = _mm256_setzero_ps();
          int k = 0;
          for (; k + 32 <= kfull; k += 32) {
            vacc = _mm256_fmadd_ps(_mm256_loadu_ps(a + k), _mm256_loadu_ps(b + k), vacc);
            vacc = _mm256_fmadd_ps(_mm256_loadu_ps(a + k + 8), _mm256_loadu_ps(b + k + 8), vacc);
            vacc = _mm256_fmadd_ps(_mm256_loadu_ps(a + k + 16), _mm256_loadu_ps(b + k + 16), vacc);
            vacc = _mm256_fmadd_ps(_mm256_loadu_ps(a + k + 24), _mm256_loadu_ps(b + k + 24), vacc);
          }
          for (; k < kfull; k += 8)
            vacc = _mm256_fmadd_ps(_mm256_loadu_ps(a + k), _mm256_loadu_ps(b + k), vacc);
          float s = hsum(vacc);
          for (; k < kb; ++k) s += a[k] * b[k];
          C[static_cast<int64_t>(i) * N + j] += s;
        }
      }
    }
  }
}

void a_axpy(int64_t n, float a, const float* x, float* y) {
  __m256 va = _mm256_set1_ps(a);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

void a_vadd(int64_t n, const float* a, const float* b, float* o) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(o + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) o[i] = a[i] + b[i];
}

void a_vsub(int64_t n, const float* a, const float* b, float* o) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(o + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) o[i] = a[i] - b[i];
}

void a_vmul(int64_t n, const float* a, const float* b, float* o) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) o[i] = a[i] * b[i];
}

void a_vscale(int64_t n, float a, const float* x, float* o) {
  __m256 va = _mm256_set1_ps(a);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(o + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) o[i] = a * x[i];
}

void a_relu_fwd(int64_t n, const float* x, float* o) {
  __m256 z = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(o + i, _mm256_max_ps(z, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) o[i] = x[i] > 0.f ? x[i] : 0.f;
}

void a_relu_bwd(int64_t n, const float* x, const float* dy, float* dx) {
  __m256 z = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), z, _CMP_GT_OQ);
    __m256 g = _mm256_and_ps(mask, _mm256_loadu_ps(dy + i));
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), g));
  }
  for (; i < n; ++i)
    if (x[i] > 0.f) dx[i] += dy[i];
}

float a_dot(int64_t n, const float* a, const float* b) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  float s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

float a_sum(int64_t n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

float a_sumsq(int64_t n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    acc = _mm256_fmadd_ps(v, v, acc);
  }
  float s = hsum(acc);
  for (; i < n; ++i) s += x[i] * x[i];
  return s;
}

}  // namespace

const Backend& avx2_backend() {
  static const Backend b{
      "avx2",   a_gemm_nn, a_gemm_nt, a_axpy, a_vadd, a_vsub, a_vmul,
      a_vscale, a_relu_fwd, a_relu_bwd, a_dot,  a_sum,  a_sumsq,
  };
  return b;
}

}  // namespace flowkd::kernels

#endif  // FLOWKD_BUILD_AVX2
