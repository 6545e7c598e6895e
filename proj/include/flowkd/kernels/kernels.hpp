#pragma once

#include <cstdint>
#include <functional>
#include <string>

namespace flowkd::kernels {

// Deterministic fork/join over one worker thread plus the caller. Work must
// write disjoint outputs; each element is computed by exactly one thread with
// the same arithmetic as the serial path, so results are bit-identical.
// FLOWKD_THREADS=1 disables the worker.
int num_threads();
void parallel_2(const std::function<void()>& first, const std::function<void()>& second);

// Row-split drivers used by the hot call sites. They dispatch through the
// active backend and split over M (disjoint C rows).
void gemm_nn_mt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
void gemm_nt_mt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);

// Runtime-dispatched float32 inner loops. Scalar versions are the reference
// semantics; the AVX2 backend must agree with them within accumulation-order
// rounding (equivalence-tested in tests/test_kernels.cpp).
struct Backend {
  const char* name;

  // C(MxN) = A(MxK) * B(KxN), row-major. accumulate adds into C.
  void (*gemm_nn)(int M, int N, int K, const float* A, const float* B, float* C,
                  bool accumulate);
  // C(MxN) = A(MxK) * B(NxK)^T, i.e. C[i][j] = dot(A row i, B row j).
  void (*gemm_nt)(int M, int N, int K, const float* A, const float* B, float* C,
                  bool accumulate);

  void (*axpy)(int64_t n, float a, const float* x, float* y);  // y += a*x
  void (*vadd)(int64_t n, const float* a, const float* b, float* out);
  void (*vsub)(int64_t n, const float* a, const float* b, float* out);
  void (*vmul)(int64_t n, const float* a, const float* b, float* out);
  void (*vscale)(int64_t n, float a, const float* x, float* out);
  void (*relu_fwd)(int64_t n, const float* x, float* out);
  void (*relu_bwd)(int64_t n, const float* x, const float* dy, float* dx);  // dx += dy*(x>0)

  float (*dot)(int64_t n, const float* a, const float* b);
  float (*sum)(int64_t n, const float* x);
  float (*sumsq)(int64_t n, const float* x);
};

const Backend& scalar_backend();
bool avx2_backend_available();   // compiled in and CPU supports it
const Backend& avx2_backend();   // valid only if compiled in

// Active backend: AVX2 when available unless overridden by set_backend() or the
// FLOWKD_KERNELS environment variable ("scalar" / "avx2").
const Backend& active();
void set_backend(const std::string& name);  // "scalar", "avx2", "auto"
std::string active_name();

}  // namespace flowkd::kernels
