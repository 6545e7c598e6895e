#include "flowkd/kernels/kernels.hpp"
#include "flowkd/kernels/reference.hpp"

namespace flowkd::kernels {

namespace {

void s_gemm_nn(int M, int N, int K, const float* A, const float* B, float* C, bool acc) {
  ref::gemm_nn(M, N, K, A, B, C, acc);
}
void s_gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool acc) {
  ref::gemm_nt(M, N, K, A, B, C, acc);
}
void s_axpy(int64_t n, float a, const float* x, float* y) { ref::axpy(n, a, x, y); }
void s_vadd(int64_t n, const float* a, const float* b, float* o) { ref::vadd(n, a, b, o); }
void s_vsub(int64_t n, const float* a, const float* b, float* o) { ref::vsub(n, a, b, o); }
void s_vmul(int64_t n, const float* a, const float* b, float* o) { ref::vmul(n, a, b, o); }
void s_vscale(int64_t n, float a, const float* x, float* o) { ref::vscale(n, a, x, o); }
void s_relu_fwd(int64_t n, const float* x, float* o) { ref::relu_fwd(n, x, o); }
void s_relu_bwd(int64_t n, const float* x, const float* dy, float* dx) {
  ref::relu_bwd(n, x, dy, dx);
}
float s_dot(int64_t n, const float* a, const float* b) { return ref::dot(n, a, b); }
float s_sum(int64_t n, const float* x) { return ref::sum(n, x); }
float s_sumsq(int64_t n, const float* x) { return ref::sumsq(n, x); }

}  // namespace

const Backend& scalar_backend() {
  static const Backend b{
      "scalar",   s_gemm_nn, s_gemm_nt, s_axpy, s_vadd, s_vsub, s_vmul,
      s_vscale,   s_relu_fwd, s_relu_bwd, s_dot,  s_sum,  s_sumsq,
  };
  return b;
}

}  // namespace flowkd::kernels
