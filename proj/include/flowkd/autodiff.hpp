#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "flowkd/error.hpp"
#include "flowkd/kernels/kernels.hpp"
#include "flowkd/kernels/reference.hpp"
#include "flowkd/numerics.hpp"
#include "flowkd/tensor.hpp"

namespace flowkd {

// Templated front door to the kernel layer: float32 goes through the runtime
// dispatch table, double (gradient-check oracles) through the scalar reference.
namespace kp {

template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool acc) {
  if constexpr (std::is_same_v<T, float>)
    kernels::gemm_nn_mt(M, N, K, A, B, C, acc);
  else
    kernels::ref::gemm_nn(M, N, K, A, B, C, acc);
}
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool acc) {
  if constexpr (std::is_same_v<T, float>)
    kernels::gemm_nt_mt(M, N, K, A, B, C, acc);
  else
    kernels::ref::gemm_nt(M, N, K, A, B, C, acc);
}
template <typename T>
void axpy(int64_t n, T a, const T* x, T* y) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().axpy(n, a, x, y);
  else
    kernels::ref::axpy(n, a, x, y);
}
template <typename T>
void vadd(int64_t n, const T* a, const T* b, T* o) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().vadd(n, a, b, o);
  else
    kernels::ref::vadd(n, a, b, o);
}
template <typename T>
void vsub(int64_t n, const T* a, const T* b, T* o) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().vsub(n, a, b, o);
  else
    kernels::ref::vsub(n, a, b, o);
}
template <typename T>
void vmul(int64_t n, const T* a, const T* b, T* o) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().vmul(n, a, b, o);
  else
    kernels::ref::vmul(n, a, b, o);
}
template <typename T>
void vscale(int64_t n, T a, const T* x, T* o) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().vscale(n, a, x, o);
  else
    kernels::ref::vscale(n, a, x, o);
}
template <typename T>
void relu_fwd(int64_t n, const T* x, T* o) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().relu_fwd(n, x, o);
  else
    kernels::ref::relu_fwd(n, x, o);
}
template <typename T>
void relu_bwd(int64_t n, const T* x, const T* dy, T* dx) {
  if constexpr (std::is_same_v<T, float>)
    kernels::active().relu_bwd(n, x, dy, dx);
  else
    kernels::ref::relu_bwd(n, x, dy, dx);
}
template <typename T>
T sumsq(int64_t n, const T* x) {
  if constexpr (std::is_same_v<T, float>)
    return kernels::active().sumsq(n, x);
  else
    return kernels::ref::sumsq(n, x);
}
template <typename T>
T sum(int64_t n, const T* x) {
  if constexpr (std::is_same_v<T, float>)
    return kernels::active().sum(n, x);
  else
    return kernels::ref::sum(n, x);
}

}  // namespace kp

enum class Pad { zero, reflect };

namespace detail {

inline int reflect_index(int p, int n) {
  // mirror without repeating the border sample (reflect-101)
  if (p < 0) p = -p;
  if (p >= n) p = 2 * n - 2 - p;
  return p;
}

// x (C,H,W) -> col (C*k*k, OH*OW) for a k x k window, pad (k-1)/2.
// The in-bounds span of every output row is contiguous (stride 1) or a fixed
// stride walk, so only the edges pay for border handling.
template <typename T>
void im2col_range(const Tensor<T>& x, int k, int stride, Pad pad, Tensor<T>& col, int OH, int OW,
                  int c_begin, int c_end) {
  const int H = x.dim(1), W = x.dim(2);
  const int p = (k - 1) / 2;
  int64_t row = static_cast<int64_t>(c_begin) * k * k;
  for (int c = c_begin; c < c_end; ++c) {
    const T* xc = x.data() + static_cast<int64_t>(c) * H * W;
    for (int dy = 0; dy < k; ++dy) {
      for (int dx = 0; dx < k; ++dx, ++row) {
        T* out = col.data() + row * OH * OW;
        const int off = dx - p;
        // ox with ix = ox*stride + off inside [0, W)
        int lo = off < 0 ? (-off + stride - 1) / stride : 0;
        int hi = (W - 1 - off) / stride + 1;  // exclusive
        lo = std::min(std::max(lo, 0), OW);
        hi = std::min(std::max(hi, lo), OW);
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride + dy - p;
          T* o = out + static_cast<int64_t>(oy) * OW;
          const bool y_in = iy >= 0 && iy < H;
          if (!y_in && pad == Pad::zero) {
            for (int ox = 0; ox < OW; ++ox) o[ox] = T(0);
            continue;
          }
          const int ry = pad == Pad::reflect ? reflect_index(iy, H) : iy;
          const T* src = xc + static_cast<int64_t>(ry) * W;
          if (pad == Pad::reflect) {
            for (int ox = 0; ox < lo; ++ox) o[ox] = src[reflect_index(ox * stride + off, W)];
            for (int ox = hi; ox < OW; ++ox) o[ox] = src[reflect_index(ox * stride + off, W)];
          } else {
            for (int ox = 0; ox < lo; ++ox) o[ox] = T(0);
            for (int ox = hi; ox < OW; ++ox) o[ox] = T(0);
          }
          if (stride == 1) {
            if (hi > lo) std::copy(src + lo + off, src + hi + off, o + lo);
          } else {
            const T* s = src + static_cast<int64_t>(lo) * stride + off;
            for (int ox = lo; ox < hi; ++ox, s += stride) o[ox] = *s;
          }
        }
      }
    }
  }
}

template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, Pad pad, Tensor<T>& col, int OH, int OW) {
  const int C = x.dim(0);
  if constexpr (std::is_same_v<T, float>) {
    if (kernels::num_threads() >= 2 && C >= 2 && col.size() >= (1 << 18)) {
      const int c0 = C / 2;
      kernels::parallel_2(
          [&] { im2col_range(x, k, stride, pad, col, OH, OW, 0, c0); },
          [&] { im2col_range(x, k, stride, pad, col, OH, OW, c0, C); });
      return;
    }
  }
  im2col_range(x, k, stride, pad, col, OH, OW, 0, C);
}

// scatter-add of dcol back onto dx, inverse index map of im2col. Each channel
// scatters onto its own plane, so a channel split is race-free.
template <typename T>
void col2im_add_range(const Tensor<T>& dcol, int k, int stride, Pad pad, Tensor<T>& dx, int OH,
                      int OW, int c_begin, int c_end) {
  const int H = dx.dim(1), W = dx.dim(2);
  const int p = (k - 1) / 2;
  int64_t row = static_cast<int64_t>(c_begin) * k * k;
  for (int c = c_begin; c < c_end; ++c) {
    T* xc = dx.data() + static_cast<int64_t>(c) * H * W;
    for (int dy = 0; dy < k; ++dy) {
      for (int dx2 = 0; dx2 < k; ++dx2, ++row) {
        const T* in = dcol.data() + row * OH * OW;
        const int off = dx2 - p;
        int lo = off < 0 ? (-off + stride - 1) / stride : 0;
        int hi = (W - 1 - off) / stride + 1;
        lo = std::min(std::max(lo, 0), OW);
        hi = std::min(std::max(hi, lo), OW);
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride + dy - p;
          if (pad == Pad::reflect) {
            iy = reflect_index(iy, H);
          } else if (iy < 0 || iy >= H) {
            continue;
          }
          const T* i = in + static_cast<int64_t>(oy) * OW;
          T* dst = xc + static_cast<int64_t>(iy) * W;
          if (pad == Pad::reflect) {
            for (int ox = 0; ox < lo; ++ox) dst[reflect_index(ox * stride + off, W)] += i[ox];
            for (int ox = hi; ox < OW; ++ox) dst[reflect_index(ox * stride + off, W)] += i[ox];
          }
          if (stride == 1) {
            T* d = dst + lo + off;
            for (int ox = lo; ox < hi; ++ox) d[ox - lo] += i[ox];
          } else {
            T* d = dst + static_cast<int64_t>(lo) * stride + off;
            for (int ox = lo; ox < hi; ++ox, d += stride) *d += i[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const Tensor<T>& dcol, int k, int stride, Pad pad, Tensor<T>& dx, int OH, int OW) {
  const int C = dx.dim(0);
  if constexpr (std::is_same_v<T, float>) {
    if (kernels::num_threads() >= 2 && C >= 2 && dcol.size() >= (1 << 18)) {
      const int c0 = C / 2;
      kernels::parallel_2(
          [&] { col2im_add_range(dcol, k, stride, pad, dx, OH, OW, 0, c0); },
          [&] { col2im_add_range(dcol, k, stride, pad, dx, OH, OW, c0, C); });
      return;
    }
  }
  col2im_add_range(dcol, k, stride, pad, dx, OH, OW, 0, C);
}

// Bilinear backward warp: out[c](y,x) = src[c](y + v(y,x), x + u(y,x)).
// Samples falling outside the source are 0 with validity 0.
template <typename T>
void warp_fwd(const Tensor<T>& src, const Tensor<T>& u, const Tensor<T>& v, Tensor<T>& out,
              Tensor<T>* validity) {
  const int C = src.dim(0), H = src.dim(1), W = src.dim(2);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const T sx = T(x) + u.at(y, x);
      const T sy = T(y) + v.at(y, x);
      const bool ok = sx >= T(0) && sx <= T(W - 1) && sy >= T(0) && sy <= T(H - 1);
      if (validity) validity->at(y, x) = ok ? T(1) : T(0);
      if (!ok) {
        for (int c = 0; c < C; ++c) out.at(c, y, x) = T(0);
        continue;
      }
      const int x1 = static_cast<int>(std::floor(sx));
      const int y1 = static_cast<int>(std::floor(sy));
      const int x2 = std::min(x1 + 1, W - 1);
      const int y2 = std::min(y1 + 1, H - 1);
      const T fx = sx - T(x1);
      const T fy = sy - T(y1);
      const T w11 = (T(1) - fx) * (T(1) - fy);
      const T w21 = fx * (T(1) - fy);
      const T w12 = (T(1) - fx) * fy;
      const T w22 = fx * fy;
      for (int c = 0; c < C; ++c) {
        out.at(c, y, x) = w11 * src.at(c, y1, x1) + w21 * src.at(c, y1, x2) +
                          w12 * src.at(c, y2, x1) + w22 * src.at(c, y2, x2);
      }
    }
  }
}

template <typename T>
void warp_bwd(const Tensor<T>& src, const Tensor<T>& u, const Tensor<T>& v, const Tensor<T>& dout,
              Tensor<T>* dsrc, Tensor<T>* du, Tensor<T>* dv) {
  const int C = src.dim(0), H = src.dim(1), W = src.dim(2);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const T sx = T(x) + u.at(y, x);
      const T sy = T(y) + v.at(y, x);
      if (!(sx >= T(0) && sx <= T(W - 1) && sy >= T(0) && sy <= T(H - 1))) continue;
      const int x1 = static_cast<int>(std::floor(sx));
      const int y1 = static_cast<int>(std::floor(sy));
      const int x2 = std::min(x1 + 1, W - 1);
      const int y2 = std::min(y1 + 1, H - 1);
      const T fx = sx - T(x1);
      const T fy = sy - T(y1);
      T gu = T(0), gv = T(0);
      for (int c = 0; c < C; ++c) {
        const T g = dout.at(c, y, x);
        if (dsrc) {
          dsrc->at(c, y1, x1) += g * (T(1) - fx) * (T(1) - fy);
          dsrc->at(c, y1, x2) += g * fx * (T(1) - fy);
          dsrc->at(c, y2, x1) += g * (T(1) - fx) * fy;
          dsrc->at(c, y2, x2) += g * fx * fy;
        }
        if (du || dv) {
          const T s11 = src.at(c, y1, x1), s21 = src.at(c, y1, x2);
          const T s12 = src.at(c, y2, x1), s22 = src.at(c, y2, x2);
          gu += g * ((T(1) - fy) * (s21 - s11) + fy * (s22 - s12));
          gv += g * ((T(1) - fx) * (s12 - s11) + fx * (s22 - s21));
        }
      }
      if (du) du->at(y, x) += gu;
      if (dv) dv->at(y, x) += gv;
    }
  }
}

}  // namespace detail

// Reverse-mode tape. A Graph lives for one forward/backward pass; nodes are
// appended in forward order, so the creation order is already topological.
template <typename T>
class Graph {
 public:
  class Var {
   public:
    Var() = default;
    bool valid() const { return g_ != nullptr; }
    const Tensor<T>& value() const { return g_->nodes_[static_cast<size_t>(i_)].value; }
    const Tensor<T>& grad() const { return g_->nodes_[static_cast<size_t>(i_)].grad; }
    bool requires_grad() const { return g_->nodes_[static_cast<size_t>(i_)].requires_grad; }
    T scalar() const { return value()[0]; }

   private:
    friend class Graph;
    Var(Graph* g, int i) : g_(g), i_(i) {}
    Graph* g_ = nullptr;
    int i_ = -1;
  };

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, {});
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var add(Var a, Var b) {
    check_same(a, b);
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::vadd(out.size(), a.value().data(), b.value().data(), out.data());
    return unary_binary(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
      accum(a, g);
      accum(b, g);
    });
  }

  Var sub(Var a, Var b) {
    check_same(a, b);
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::vsub(out.size(), a.value().data(), b.value().data(), out.data());
    return unary_binary(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
      accum(a, g);
      accum_scaled(b, g, T(-1));
    });
  }

  Var mul(Var a, Var b) {
    check_same(a, b);
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::vmul(out.size(), a.value().data(), b.value().data(), out.data());
    return unary_binary(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
      if (node(a).requires_grad) {
        Tensor<T> t = Tensor<T>::uninit(g.shape());
        kp::vmul(g.size(), g.data(), b.value().data(), t.data());
        accum(a, t);
      }
      if (node(b).requires_grad) {
        Tensor<T> t = Tensor<T>::uninit(g.shape());
        kp::vmul(g.size(), g.data(), a.value().data(), t.data());
        accum(b, t);
      }
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::vscale(out.size(), c, a.value().data(), out.data());
    return unary_binary(std::move(out), {a},
                        [this, a, c](const Tensor<T>& g) { accum_scaled(a, g, c); });
  }

  Var add_const(Var a, const Tensor<T>& t) {
    require(a.value().same_shape(t), Err::ShapeMismatch, "add_const");
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::vadd(out.size(), a.value().data(), t.data(), out.data());
    return unary_binary(std::move(out), {a}, [this, a](const Tensor<T>& g) { accum(a, g); });
  }

  Var sub_const(Var a, const Tensor<T>& t) {
    require(a.value().same_shape(t), Err::ShapeMismatch, "sub_const");
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::vsub(out.size(), a.value().data(), t.data(), out.data());
    return unary_binary(std::move(out), {a}, [this, a](const Tensor<T>& g) { accum(a, g); });
  }

  Var mul_const(Var a, Tensor<T> t) {
    require(a.value().same_shape(t), Err::ShapeMismatch, "mul_const");
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::vmul(out.size(), a.value().data(), t.data(), out.data());
    auto tt = std::make_shared<Tensor<T>>(std::move(t));
    return unary_binary(std::move(out), {a}, [this, a, tt](const Tensor<T>& g) {
      Tensor<T> d = Tensor<T>::uninit(g.shape());
      kp::vmul(g.size(), g.data(), tt->data(), d.data());
      accum(a, d);
    });
  }

  Var relu(Var a) {
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    kp::relu_fwd(out.size(), a.value().data(), out.data());
    return unary_binary(std::move(out), {a}, [this, a](const Tensor<T>& g) {
      if (!node(a).requires_grad) return;
      kp::relu_bwd(g.size(), a.value().data(), g.data(), node(a).grad.data());
    });
  }

  Var sigmoid(Var a) {
    Tensor<T> out = Tensor<T>::uninit(a.value().shape());
    const T* x = a.value().data();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
    int oi = next_index();
    Var o = unary_binary(std::move(out), {a}, [this, a, oi](const Tensor<T>& g) {
      const Tensor<T>& y = nodes_[static_cast<size_t>(oi)].value;
      Tensor<T>& da = node(a).grad;
      for (int64_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (T(1) - y[i]);
    });
    return o;
  }

  // k x k conv, pad (k-1)/2, bias optional (empty Var allowed via valid()==false)
  Var conv2d(Var x, Var w, Var b, int stride, Pad pad) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    require(xv.ndim() == 3 && wv.ndim() == 4, Err::ShapeMismatch, "conv2d: x CHW, w OIHW");
    require(wv.dim(1) == xv.dim(0), Err::ShapeMismatch, "conv2d: channel mismatch");
    require(wv.dim(2) == wv.dim(3), Err::ShapeMismatch, "conv2d: square kernel");
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    const int OC = wv.dim(0), k = wv.dim(2);
    const int p = (k - 1) / 2;
    const int OH = (H + 2 * p - k) / stride + 1;
    const int OW = (W + 2 * p - k) / stride + 1;
    const int CK2 = C * k * k;

    Tensor<T> col = Tensor<T>::uninit({CK2, OH * OW});
    detail::im2col(xv, k, stride, pad, col, OH, OW);
    Tensor<T> out = Tensor<T>::uninit({OC, OH, OW});
    kp::gemm_nn(OC, OH * OW, CK2, wv.data(), col.data(), out.data(), false);
    if (b.valid()) {
      require(b.value().size() == OC, Err::ShapeMismatch, "conv2d: bias size");
      for (int oc = 0; oc < OC; ++oc) {
        T* o = out.data() + static_cast<int64_t>(oc) * OH * OW;
        const T bv = b.value()[oc];
        for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) o[i] += bv;
      }
    }
    // col recomputed in backward instead of captured: keeps tape memory at
    // activation scale rather than im2col scale
    std::vector<Var> parents = {x, w};
    if (b.valid()) parents.push_back(b);
    return unary_binary(std::move(out), parents,
                        [this, x, w, b, stride, pad, k, OH, OW, CK2](const Tensor<T>& g) {
                          const Tensor<T>& xv2 = x.value();
                          const Tensor<T>& wv2 = w.value();
                          const int OC2 = wv2.dim(0);
                          if (b.valid() && node(b).requires_grad) {
                            Tensor<T>& db = node(b).grad;
                            for (int oc = 0; oc < OC2; ++oc)
                              db[oc] += kp::sum(static_cast<int64_t>(OH) * OW,
                                                g.data() + static_cast<int64_t>(oc) * OH * OW);
                          }
                          if (node(w).requires_grad || node(x).requires_grad) {
                            Tensor<T> col2 = Tensor<T>::uninit({CK2, OH * OW});
                            detail::im2col(xv2, k, stride, pad, col2, OH, OW);
                            if (node(w).requires_grad) {
                              kp::gemm_nt(OC2, CK2, OH * OW, g.data(), col2.data(),
                                          node(w).grad.data(), true);
                            }
                            if (node(x).requires_grad) {
                              Tensor<T> wt = transpose_oc(wv2, CK2);
                              Tensor<T> dcol = Tensor<T>::uninit({CK2, OH * OW});
                              kp::gemm_nn(CK2, OH * OW, OC2, wt.data(), g.data(), dcol.data(),
                                          false);
                              detail::col2im_add(dcol, k, stride, pad, node(x).grad, OH, OW);
                            }
                          }
                        });
  }

  Var instance_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Tensor<T>& xv = x.value();
    require(xv.ndim() == 3, Err::ShapeMismatch, "instance_norm: CHW input");
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    require(gamma.value().size() == C && beta.value().size() == C, Err::ShapeMismatch,
            "instance_norm: affine size");
    const int64_t n = static_cast<int64_t>(H) * W;
    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
    auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
    Tensor<T> out = Tensor<T>::uninit(xv.shape());
    for (int c = 0; c < C; ++c) {
      const T* xp = xv.data() + static_cast<int64_t>(c) * n;
      T mu = kp::sum(n, xp) / T(n);
      T var = T(0);
      for (int64_t i = 0; i < n; ++i) {
        T d = xp[i] - mu;
        var += d * d;
      }
      var /= T(n);
      T is = T(1) / std::sqrt(var + eps);
      (*mean)[static_cast<size_t>(c)] = mu;
      (*istd)[static_cast<size_t>(c)] = is;
      const T gc = gamma.value()[c], bc = beta.value()[c];
      T* op = out.data() + static_cast<int64_t>(c) * n;
      for (int64_t i = 0; i < n; ++i) op[i] = gc * (xp[i] - mu) * is + bc;
    }
    return unary_binary(std::move(out), {x, gamma, beta},
                        [this, x, gamma, beta, mean, istd, C, n](const Tensor<T>& g) {
                          const Tensor<T>& xv2 = x.value();
                          for (int c = 0; c < C; ++c) {
                            const T* xp = xv2.data() + static_cast<int64_t>(c) * n;
                            const T* gp = g.data() + static_cast<int64_t>(c) * n;
                            const T mu = (*mean)[static_cast<size_t>(c)];
                            const T is = (*istd)[static_cast<size_t>(c)];
                            const T gc = gamma.value()[c];
                            T sg = T(0), sgx = T(0);
                            for (int64_t i = 0; i < n; ++i) {
                              const T xh = (xp[i] - mu) * is;
                              sg += gp[i];
                              sgx += gp[i] * xh;
                            }
                            if (node(beta).requires_grad) node(beta).grad[c] += sg;
                            if (node(gamma).requires_grad) node(gamma).grad[c] += sgx;
                            if (node(x).requires_grad) {
                              T* dx = node(x).grad.data() + static_cast<int64_t>(c) * n;
                              const T mg = sg / T(n), mgx = sgx / T(n);
                              for (int64_t i = 0; i < n; ++i) {
                                const T xh = (xp[i] - mu) * is;
                                dx[i] += gc * is * (gp[i] - mg - xh * mgx);
                              }
                            }
                          }
                        });
  }

  Var upsample_nearest2(Var x) {
    const Tensor<T>& xv = x.value();
    require(xv.ndim() == 3, Err::ShapeMismatch, "upsample: CHW input");
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor<T> out = Tensor<T>::uninit({C, H * 2, W * 2});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx) out.at(c, y, xx) = xv.at(c, y / 2, xx / 2);
    return unary_binary(std::move(out), {x}, [this, x, C, H, W](const Tensor<T>& g) {
      if (!node(x).requires_grad) return;
      Tensor<T>& dx = node(x).grad;
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
          for (int xx = 0; xx < 2 * W; ++xx) dx.at(c, y / 2, xx / 2) += g.at(c, y, xx);
    });
  }

  Var concat_ch(const std::vector<Var>& parts) {
    require(!parts.empty(), Err::ShapeMismatch, "concat_ch: empty");
    const int H = parts[0].value().dim(1), W = parts[0].value().dim(2);
    int C = 0;
    for (const Var& p : parts) {
      require(p.value().ndim() == 3 && p.value().dim(1) == H && p.value().dim(2) == W,
              Err::ShapeMismatch, "concat_ch: spatial mismatch");
      C += p.value().dim(0);
    }
    Tensor<T> out = Tensor<T>::uninit({C, H, W});
    int64_t off = 0;
    for (const Var& p : parts) {
      std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
      off += p.value().size();
    }
    return unary_binary(std::move(out), parts, [this, parts](const Tensor<T>& g) {
      int64_t o = 0;
      for (const Var& p : parts) {
        if (node(p).requires_grad)
          kp::axpy(p.value().size(), T(1), g.data() + o, node(p).grad.data());
        o += p.value().size();
      }
    });
  }

  // Bilinear backward warp; u, v are per-pixel displacements on the output grid.
  Var warp(Var src, Var u, Var v, Tensor<T>* validity_out = nullptr) {
    const Tensor<T>& sv = src.value();
    require(sv.ndim() == 3, Err::ShapeMismatch, "warp: src CHW");
    require(u.value().ndim() == 2 && v.value().ndim() == 2 && u.value().dim(0) == sv.dim(1) &&
                u.value().dim(1) == sv.dim(2) && v.value().same_shape(u.value()),
            Err::ShapeMismatch, "warp: flow shape");
    Tensor<T> out = Tensor<T>::uninit(sv.shape());
    Tensor<T> validity = Tensor<T>::uninit({sv.dim(1), sv.dim(2)});
    detail::warp_fwd(sv, u.value(), v.value(), out, &validity);
    if (validity_out) *validity_out = validity;
    return unary_binary(std::move(out), {src, u, v}, [this, src, u, v](const Tensor<T>& g) {
      detail::warp_bwd(src.value(), u.value(), v.value(), g,
                       node(src).requires_grad ? &node(src).grad : nullptr,
                       node(u).requires_grad ? &node(u).grad : nullptr,
                       node(v).requires_grad ? &node(v).grad : nullptr);
    });
  }

  // G = F F^T / (C*H*W) where F is the C x (H*W) unfolding of a CHW map
  Var gram(Var x) {
    const Tensor<T>& xv = x.value();
    require(xv.ndim() == 3, Err::ShapeMismatch, "gram: CHW input");
    const int C = xv.dim(0);
    const int64_t n = static_cast<int64_t>(xv.dim(1)) * xv.dim(2);
    const T norm = T(1) / static_cast<T>(C * n);
    Tensor<T> out = Tensor<T>::uninit({C, C});
    kp::gemm_nt(C, C, static_cast<int>(n), xv.data(), xv.data(), out.data(), false);
    kp::vscale(out.size(), norm, out.data(), out.data());
    return unary_binary(std::move(out), {x}, [this, x, C, n, norm](const Tensor<T>& g) {
      if (!node(x).requires_grad) return;
      // dF = (G' + G'^T) F * norm
      Tensor<T> s = Tensor<T>::uninit({C, C});
      for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) s.at(i, j) = (g.at(i, j) + g.at(j, i)) * norm;
      Tensor<T> d = Tensor<T>::uninit({C, static_cast<int>(n)});
      kp::gemm_nn(C, static_cast<int>(n), C, s.data(), x.value().data(), d.data(), false);
      kp::axpy(d.size(), T(1), d.data(), node(x).grad.data());
    });
  }

  // rows (each any shape, flattened) -> (K, L) matrix
  Var stack_rows(const std::vector<Var>& rows) {
    require(!rows.empty(), Err::ShapeMismatch, "stack_rows: empty");
    const int64_t L = rows[0].value().size();
    for (const Var& r : rows)
      require(r.value().size() == L, Err::GeometryMismatch, "stack_rows: row sizes differ");
    const int K = static_cast<int>(rows.size());
    Tensor<T> out = Tensor<T>::uninit({K, static_cast<int>(L)});
    for (int i = 0; i < K; ++i)
      std::copy(rows[static_cast<size_t>(i)].value().data(),
                rows[static_cast<size_t>(i)].value().data() + L, out.data() + i * L);
    return unary_binary(std::move(out), rows, [this, rows, L](const Tensor<T>& g) {
      for (size_t i = 0; i < rows.size(); ++i)
        if (node(rows[i]).requires_grad)
          kp::axpy(L, T(1), g.data() + static_cast<int64_t>(i) * L, node(rows[i]).grad.data());
    });
  }

  // Sum of singular values via the K x K Gram eigen-decomposition (K << L).
  // Gradient is U diag(1/sigma) U^T X over the non-degenerate part of the
  // spectrum, i.e. the clamped subgradient of ||X||_*.
  Var nuclear_norm(Var X) {
    const Tensor<T>& xv = X.value();
    require(xv.ndim() == 2, Err::ShapeMismatch, "nuclear_norm: matrix input");
    require(xv.all_finite(), Err::NonFinite, "nuclear_norm: non-finite input");
    const int K = xv.dim(0), L = xv.dim(1);
    Tensor<T> gramm = Tensor<T>::uninit({K, K});
    kp::gemm_nt(K, K, L, xv.data(), xv.data(), gramm.data(), false);
    auto eigvals = std::make_shared<std::vector<T>>();
    auto U = std::make_shared<Tensor<T>>();
    jacobi_eigh(gramm, *eigvals, *U);
    T total = T(0);
    for (T& ev : *eigvals) {
      ev = ev > T(0) ? std::sqrt(ev) : T(0);  // eigenvalue -> singular value
      total += ev;
    }
    Tensor<T> out({1});
    out[0] = total;
    return unary_binary(std::move(out), {X}, [this, X, eigvals, U, K, L](const Tensor<T>& g) {
      if (!node(X).requires_grad) return;
      const T g0 = g[0];
      const std::vector<T>& sv = *eigvals;
      const T tol = (sv.empty() ? T(0) : sv[0]) * T(1e-12);
      Tensor<T>& dX = node(X).grad;
      const Tensor<T>& xv2 = X.value();
      std::vector<T> row(static_cast<size_t>(L));
      for (int i = 0; i < K; ++i) {
        if (!(sv[static_cast<size_t>(i)] > tol) || sv[static_cast<size_t>(i)] == T(0)) continue;
        // row = u_i^T X
        std::fill(row.begin(), row.end(), T(0));
        for (int r = 0; r < K; ++r) {
          const T w = U->at(r, i);
          if (w == T(0)) continue;
          kp::axpy(static_cast<int64_t>(L), w, xv2.data() + static_cast<int64_t>(r) * L,
                   row.data());
        }
        const T inv = g0 / sv[static_cast<size_t>(i)];
        for (int r = 0; r < K; ++r) {
          const T w = U->at(r, i) * inv;
          if (w == T(0)) continue;
          kp::axpy(static_cast<int64_t>(L), w, row.data(), dX.data() + static_cast<int64_t>(r) * L);
        }
      }
    });
  }

  // mean over all horizontal+vertical neighbor pairs of squared differences
  Var tv_mean(Var x) {
    const Tensor<T>& xv = x.value();
    require(xv.ndim() == 3, Err::ShapeMismatch, "tv_mean: CHW input");
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    const int64_t pairs = static_cast<int64_t>(C) * (static_cast<int64_t>(H) * (W - 1) +
                                                     static_cast<int64_t>(H - 1) * W);
    T acc = T(0);
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx + 1 < W; ++xx) {
          T d = xv.at(c, y, xx + 1) - xv.at(c, y, xx);
          acc += d * d;
        }
      for (int y = 0; y + 1 < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          T d = xv.at(c, y + 1, xx) - xv.at(c, y, xx);
          acc += d * d;
        }
    }
    Tensor<T> out({1});
    out[0] = pairs > 0 ? acc / static_cast<T>(pairs) : T(0);
    return unary_binary(std::move(out), {x}, [this, x, C, H, W, pairs](const Tensor<T>& g) {
      if (!node(x).requires_grad || pairs == 0) return;
      const T s = T(2) * g[0] / static_cast<T>(pairs);
      const Tensor<T>& xv2 = x.value();
      Tensor<T>& dx = node(x).grad;
      for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx + 1 < W; ++xx) {
            T d = xv2.at(c, y, xx + 1) - xv2.at(c, y, xx);
            dx.at(c, y, xx + 1) += s * d;
            dx.at(c, y, xx) -= s * d;
          }
        for (int y = 0; y + 1 < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            T d = xv2.at(c, y + 1, xx) - xv2.at(c, y, xx);
            dx.at(c, y + 1, xx) += s * d;
            dx.at(c, y, xx) -= s * d;
          }
      }
    });
  }

  // mean of squared entries
  Var mean_sq(Var x) {
    const int64_t n = x.value().size();
    Tensor<T> out({1});
    out[0] = kp::sumsq(n, x.value().data()) / static_cast<T>(n);
    return unary_binary(std::move(out), {x}, [this, x, n](const Tensor<T>& g) {
      if (!node(x).requires_grad) return;
      kp::axpy(n, T(2) * g[0] / static_cast<T>(n), x.value().data(), node(x).grad.data());
    });
  }

  Var mean_all(Var x) {
    const int64_t n = x.value().size();
    Tensor<T> out({1});
    out[0] = kp::sum(n, x.value().data()) / static_cast<T>(n);
    return unary_binary(std::move(out), {x}, [this, x, n](const Tensor<T>& g) {
      if (!node(x).requires_grad) return;
      Tensor<T>& dx = node(x).grad;
      const T s = g[0] / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) dx[i] += s;
    });
  }

  Var wsum(const std::vector<Var>& scalars, const std::vector<T>& weights) {
    require(scalars.size() == weights.size(), Err::ShapeMismatch, "wsum: length mismatch");
    Tensor<T> out({1});
    T acc = T(0);
    for (size_t i = 0; i < scalars.size(); ++i) {
      require(scalars[i].value().size() == 1, Err::ShapeMismatch, "wsum: scalar inputs");
      acc += weights[i] * scalars[i].value()[0];
    }
    out[0] = acc;
    return unary_binary(std::move(out), scalars, [this, scalars, weights](const Tensor<T>& g) {
      for (size_t i = 0; i < scalars.size(); ++i)
        if (node(scalars[i]).requires_grad) node(scalars[i]).grad[0] += g[0] * weights[i];
    });
  }

  void backward(Var root) {
    require(root.value().size() == 1, Err::ShapeMismatch, "backward: root must be scalar");
    for (NodeRec& nd : nodes_)
      if (nd.requires_grad && nd.grad.empty()) nd.grad = Tensor<T>(nd.value.shape());
    node(root).grad[0] = T(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      NodeRec& nd = nodes_[static_cast<size_t>(i)];
      if (nd.requires_grad && nd.backprop) nd.backprop(nd.grad);
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct NodeRec {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(const Tensor<T>&)> backprop;
  };

  NodeRec& node(Var v) { return nodes_[static_cast<size_t>(v.i_)]; }

  int next_index() const { return static_cast<int>(nodes_.size()); }

  Var push(Tensor<T> value, bool rg, std::function<void(const Tensor<T>&)> bp) {
    NodeRec nd;
    nd.value = std::move(value);
    nd.requires_grad = rg;
    nd.backprop = std::move(bp);
    nodes_.push_back(std::move(nd));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var unary_binary(Tensor<T> out, const std::vector<Var>& parents,
                   std::function<void(const Tensor<T>&)> bp) {
    bool rg = false;
    for (const Var& p : parents) rg = rg || node(p).requires_grad;
    return push(std::move(out), rg, rg ? std::move(bp) : nullptr);
  }

  void check_same(Var a, Var b) {
    require(a.value().same_shape(b.value()), Err::ShapeMismatch, "elementwise shape mismatch");
  }

  void accum(Var v, const Tensor<T>& g) {
    if (node(v).requires_grad) kp::axpy(g.size(), T(1), g.data(), node(v).grad.data());
  }

  void accum_scaled(Var v, const Tensor<T>& g, T c) {
    if (node(v).requires_grad) kp::axpy(g.size(), c, g.data(), node(v).grad.data());
  }

  static Tensor<T> transpose_oc(const Tensor<T>& w, int CK2) {
    const int OC = w.dim(0);
    Tensor<T> out = Tensor<T>::uninit({CK2, OC});
    for (int oc = 0; oc < OC; ++oc)
      for (int j = 0; j < CK2; ++j) out.at(j, oc) = w[static_cast<int64_t>(oc) * CK2 + j];
    return out;
  }

  std::deque<NodeRec> nodes_;
};

template <typename T>
using Var = typename Graph<T>::Var;

}  // namespace flowkd
