#pragma once

#include <cstdint>

namespace flowkd::kernels::ref {

// Scalar reference kernels, templated so the double-precision path (used by the
// gradient-check oracles) shares one definition with the float32 scalar backend.

template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    T* c = C + static_cast<int64_t>(i) * N;
    if (!accumulate)
      for (int j = 0; j < N; ++j) c[j] = T(0);
    const T* a = A + static_cast<int64_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const T aik = a[k];
      if (aik == T(0)) continue;
      const T* b = B + static_cast<int64_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<int64_t>(i) * K;
    for (int j = 0; j < N; ++j) {
      const T* b = B + static_cast<int64_t>(j) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      T* c = C + static_cast<int64_t>(i) * N + j;
      *c = accumulate ? *c + acc : acc;
    }
  }
}

template <typename T>
void axpy(int64_t n, T a, const T* x, T* y) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void vadd(int64_t n, const T* a, const T* b, T* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void vsub(int64_t n, const T* a, const T* b, T* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void vmul(int64_t n, const T* a, const T* b, T* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void vscale(int64_t n, T a, const T* x, T* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = a * x[i];
}

template <typename T>
void relu_fwd(int64_t n, const T* x, T* out) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_bwd(int64_t n, const T* x, const T* dy, T* dx) {
  for (int64_t i = 0; i < n; ++i)
    if (x[i] > T(0)) dx[i] += dy[i];
}

template <typename T>
T dot(int64_t n, const T* a, const T* b) {
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T sum(int64_t n, const T* x) {
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T sumsq(int64_t n, const T* x) {
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

}  // namespace flowkd::kernels::ref
