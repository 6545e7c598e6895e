#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "flowkd/kernels/kernels.hpp"
#include "flowkd/kernels/reference.hpp"
#include "flowkd/rng.hpp"

using namespace flowkd;

namespace {

std::vector<float> random_vec(int64_t n, Rng& rng, float lo = -1.f, float hi = 1.f) {
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

double rel_err(float a, float b) {
  return std::abs(a - b) / std::max(1.0, std::abs(static_cast<double>(b)));
}

}  // namespace

TEST_CASE("dispatch selects a backend and can be overridden") {
  kernels::set_backend("scalar");
  CHECK(kernels::active_name() == "scalar");
  if (kernels::avx2_backend_available()) {
    kernels::set_backend("avx2");
    CHECK(kernels::active_name() == "avx2");
  }
  kernels::set_backend("auto");
}

TEST_CASE("gemm_nn: simd agrees with scalar reference over random shapes") {
  if (!kernels::avx2_backend_available()) return;
  const kernels::Backend& simd = kernels::avx2_backend();
  Rng rng(42);
  for (int trial = 0; trial < 40; ++trial) {
    int M = static_cast<int>(rng.uniform_int(1, 40));
    int N = static_cast<int>(rng.uniform_int(1, 90));
    int K = static_cast<int>(rng.uniform_int(1, 70));
    auto A = random_vec(static_cast<int64_t>(M) * K, rng);
    auto B = random_vec(static_cast<int64_t>(K) * N, rng);
    std::vector<float> C0(static_cast<size_t>(M) * N), C1(static_cast<size_t>(M) * N);
    bool acc = trial % 2 == 0;
    if (acc) {
      auto seed = random_vec(static_cast<int64_t>(M) * N, rng);
      C0 = seed;
      C1 = seed;
    }
    kernels::ref::gemm_nn(M, N, K, A.data(), B.data(), C0.data(), acc);
    simd.gemm_nn(M, N, K, A.data(), B.data(), C1.data(), acc);
    for (size_t i = 0; i < C0.size(); ++i) CHECK(rel_err(C1[i], C0[i]) < 2e-5);
  }
}

TEST_CASE("gemm_nt: simd agrees with scalar reference, including large K blocks") {
  if (!kernels::avx2_backend_available()) return;
  const kernels::Backend& simd = kernels::avx2_backend();
  Rng rng(43);
  for (int trial = 0; trial < 12; ++trial) {
    int M = static_cast<int>(rng.uniform_int(1, 12));
    int N = static_cast<int>(rng.uniform_int(1, 60));
    int K = static_cast<int>(rng.uniform_int(1, 5000));
    auto A = random_vec(static_cast<int64_t>(M) * K, rng);
    auto B = random_vec(static_cast<int64_t>(N) * K, rng);
    std::vector<float> C0(static_cast<size_t>(M) * N), C1(static_cast<size_t>(M) * N);
    kernels::ref::gemm_nt(M, N, K, A.data(), B.data(), C0.data(), false);
    simd.gemm_nt(M, N, K, A.data(), B.data(), C1.data(), false);
    double scale = std::sqrt(static_cast<double>(K));
    for (size_t i = 0; i < C0.size(); ++i)
      CHECK(std::abs(C1[i] - C0[i]) < 1e-5 * scale);
  }
}

TEST_CASE("elementwise and reduction kernels: simd equals scalar") {
  if (!kernels::avx2_backend_available()) return;
  const kernels::Backend& simd = kernels::avx2_backend();
  Rng rng(44);
  for (int64_t n : {1, 7, 8, 9, 64, 1000, 4097}) {
    auto x = random_vec(n, rng);
    auto y = random_vec(n, rng);
    std::vector<float> o0(static_cast<size_t>(n)), o1(static_cast<size_t>(n));

    simd.vadd(n, x.data(), y.data(), o1.data());
    kernels::ref::vadd(n, x.data(), y.data(), o0.data());
    CHECK(o0 == o1);

    simd.vsub(n, x.data(), y.data(), o1.data());
    kernels::ref::vsub(n, x.data(), y.data(), o0.data());
    CHECK(o0 == o1);

    simd.vmul(n, x.data(), y.data(), o1.data());
    kernels::ref::vmul(n, x.data(), y.data(), o0.data());
    CHECK(o0 == o1);

    simd.vscale(n, 1.7f, x.data(), o1.data());
    kernels::ref::vscale(n, 1.7f, x.data(), o0.data());
    CHECK(o0 == o1);

    simd.relu_fwd(n, x.data(), o1.data());
    kernels::ref::relu_fwd(n, x.data(), o0.data());
    CHECK(o0 == o1);

    auto dx0 = random_vec(n, rng);
    auto dx1 = dx0;
    kernels::ref::relu_bwd(n, x.data(), y.data(), dx0.data());
    simd.relu_bwd(n, x.data(), y.data(), dx1.data());
    CHECK(dx0 == dx1);

    // axpy uses fused multiply-add in the simd path, so allow one rounding
    auto y0 = y;
    auto y1 = y;
    kernels::ref::axpy(n, 0.3f, x.data(), y0.data());
    simd.axpy(n, 0.3f, x.data(), y1.data());
    for (int64_t i = 0; i < n; ++i)
      CHECK(std::abs(y0[static_cast<size_t>(i)] - y1[static_cast<size_t>(i)]) <= 2.4e-7f);

    CHECK(rel_err(simd.dot(n, x.data(), y.data()), kernels::ref::dot(n, x.data(), y.data())) <
          1e-5);
    CHECK(rel_err(simd.sum(n, x.data()), kernels::ref::sum(n, x.data())) < 1e-5);
    CHECK(rel_err(simd.sumsq(n, x.data()), kernels::ref::sumsq(n, x.data())) < 1e-5);
  }
}
