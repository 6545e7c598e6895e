#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "flowkd/rng.hpp"
#include "flowkd/tensor.hpp"

namespace flowkd::testutil {

template <typename T>
Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Central finite difference of a scalar-valued function w.r.t. one tensor input.
// f is re-evaluated from scratch at each probe.
template <typename T>
Tensor<T> fd_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                      T h = T(1e-6)) {
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (int64_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T fp = f(probe);
    probe[i] = orig - h;
    const T fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

// max_i |a_i - b_i| / max(scale, max_i |b_i|)
template <typename T>
double rel_max_err(const Tensor<T>& a, const Tensor<T>& b, double floor_scale = 1e-8) {
  double denom = floor_scale;
  for (int64_t i = 0; i < b.size(); ++i) denom = std::max(denom, std::abs(static_cast<double>(b[i])));
  double err = 0;
  for (int64_t i = 0; i < a.size(); ++i)
    err = std::max(err, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return err / denom;
}

// One-sided Jacobi (Hestenes) SVD: orthogonalize the rows of X by plane
// rotations; singular values are the final row norms. Independent of the
// Gram-eigen path used by the library.
template <typename T>
std::vector<T> svd_singular_values(const Tensor<T>& X) {
  const int K = X.dim(0);
  const int64_t L = X.dim(1);
  Tensor<T> A = X;
  auto row = [&](int i) { return A.data() + static_cast<int64_t>(i) * L; };
  for (int sweep = 0; sweep < 64; ++sweep) {
    bool converged = true;
    for (int p = 0; p < K; ++p) {
      for (int q = p + 1; q < K; ++q) {
        T app = 0, aqq = 0, apq = 0;
        for (int64_t k = 0; k < L; ++k) {
          app += row(p)[k] * row(p)[k];
          aqq += row(q)[k] * row(q)[k];
          apq += row(p)[k] * row(q)[k];
        }
        if (std::abs(static_cast<double>(apq)) >
            1e-15 * std::sqrt(static_cast<double>(app) * static_cast<double>(aqq)) + 1e-300) {
          converged = false;
          const T tau = (aqq - app) / (T(2) * apq);
          const T t = (tau >= T(0)) ? T(1) / (tau + std::sqrt(T(1) + tau * tau))
                                    : T(1) / (tau - std::sqrt(T(1) + tau * tau));
          const T c = T(1) / std::sqrt(T(1) + t * t);
          const T s = t * c;
          for (int64_t k = 0; k < L; ++k) {
            const T xp = row(p)[k], xq = row(q)[k];
            row(p)[k] = c * xp - s * xq;
            row(q)[k] = s * xp + c * xq;
          }
        }
      }
    }
    if (converged) break;
  }
  std::vector<T> sv(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) {
    T n2 = 0;
    for (int64_t k = 0; k < L; ++k) n2 += row(i)[k] * row(i)[k];
    sv[static_cast<size_t>(i)] = std::sqrt(n2);
  }
  std::sort(sv.begin(), sv.end(), std::greater<T>());
  return sv;
}

}  // namespace flowkd::testutil
