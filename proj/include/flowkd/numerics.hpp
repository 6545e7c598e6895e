#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "flowkd/error.hpp"
#include "flowkd/tensor.hpp"

namespace flowkd {

// Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.
// Used for the K x K Gram matrix behind the nuclear norm (K is the tuple length,
// so K <= ~8). Returns eigenvalues descending; columns of V are eigenvectors.
template <typename T>
void jacobi_eigh(const Tensor<T>& M, std::vector<T>& eigvals, Tensor<T>& V) {
  require(M.ndim() == 2 && M.dim(0) == M.dim(1), Err::ShapeMismatch, "jacobi_eigh: square input");
  const int n = M.dim(0);
  Tensor<T> A = M;
  V = Tensor<T>({n, n});
  for (int i = 0; i < n; ++i) V.at(i, i) = T(1);

  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    T off = T(0);
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += A.at(p, q) * A.at(p, q);
    T diag = T(0);
    for (int p = 0; p < n; ++p) diag += A.at(p, p) * A.at(p, p);
    if (off <= std::numeric_limits<T>::epsilon() * std::numeric_limits<T>::epsilon() *
                   std::max(diag, T(1)))
      break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const T apq = A.at(p, q);
        if (apq == T(0)) continue;
        const T app = A.at(p, p), aqq = A.at(q, q);
        const T tau = (aqq - app) / (T(2) * apq);
        const T t = (tau >= T(0)) ? T(1) / (tau + std::sqrt(T(1) + tau * tau))
                                  : T(1) / (tau - std::sqrt(T(1) + tau * tau));
        const T c = T(1) / std::sqrt(T(1) + t * t);
        const T s = t * c;
        for (int k = 0; k < n; ++k) {
          const T akp = A.at(k, p), akq = A.at(k, q);
          A.at(k, p) = c * akp - s * akq;
          A.at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const T apk = A.at(p, k), aqk = A.at(q, k);
          A.at(p, k) = c * apk - s * aqk;
          A.at(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const T vkp = V.at(k, p), vkq = V.at(k, q);
          V.at(k, p) = c * vkp - s * vkq;
          V.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  eigvals.resize(static_cast<size_t>(n));
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::vector<T> raw(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) raw[static_cast<size_t>(i)] = A.at(i, i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return raw[static_cast<size_t>(a)] > raw[static_cast<size_t>(b)]; });
  Tensor<T> Vs({n, n});
  for (int j = 0; j < n; ++j) {
    eigvals[static_cast<size_t>(j)] = raw[static_cast<size_t>(order[static_cast<size_t>(j)])];
    for (int i = 0; i < n; ++i) Vs.at(i, j) = V.at(i, order[static_cast<size_t>(j)]);
  }
  V = std::move(Vs);
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& A) {
  require(A.ndim() == 2, Err::ShapeMismatch, "transpose2d: 2-D input");
  Tensor<T> out({A.dim(1), A.dim(0)});
  for (int i = 0; i < A.dim(0); ++i)
    for (int j = 0; j < A.dim(1); ++j) out.at(j, i) = A.at(i, j);
  return out;
}

}  // namespace flowkd
