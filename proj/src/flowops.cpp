#include "flowkd/flowops.hpp"

#include <cmath>

#include "flowkd/error.hpp"

namespace flowkd {

namespace {

void check_flow_shape(const TensorF& img, const FlowField& flow) {
  require(img.ndim() == 3, Err::ShapeMismatch, "image must be CHW");
  require(flow.u.ndim() == 2 && flow.u.same_shape(flow.v), Err::ShapeMismatch,
          "flow u/v must be (H,W)");
  require(flow.height() == img.dim(1) && flow.width() == img.dim(2), Err::ShapeMismatch,
          "flow does not match image");
}

// bilinear sample of a 2-D field with border clamp
float sample_clamped(const TensorF& t, float y, float x) {
  const int H = t.dim(0), W = t.dim(1);
  x = std::min(std::max(x, 0.f), static_cast<float>(W - 1));
  y = std::min(std::max(y, 0.f), static_cast<float>(H - 1));
  const int x1 = static_cast<int>(std::floor(x));
  const int y1 = static_cast<int>(std::floor(y));
  const int x2 = std::min(x1 + 1, W - 1);
  const int y2 = std::min(y1 + 1, H - 1);
  const float fx = x - static_cast<float>(x1);
  const float fy = y - static_cast<float>(y1);
  return (1.f - fy) * ((1.f - fx) * t.at(y1, x1) + fx * t.at(y1, x2)) +
         fy * ((1.f - fx) * t.at(y2, x1) + fx * t.at(y2, x2));
}

bool in_bounds(float y, float x, int H, int W) {
  return x >= 0.f && x <= static_cast<float>(W - 1) && y >= 0.f && y <= static_cast<float>(H - 1);
}

}  // namespace

WarpResult warp_backward(const TensorF& src, const FlowField& flow) {
  check_flow_shape(src, flow);
  WarpResult r;
  r.image = TensorF(src.shape());
  r.validity = TensorF({src.dim(1), src.dim(2)});
  detail::warp_fwd(src, flow.u, flow.v, r.image, &r.validity);
  return r;
}

FlowField compose_flow(const FlowField& a, const FlowField& b) {
  require(a.u.same_shape(b.u), Err::ShapeMismatch, "compose_flow shapes differ");
  const int H = a.height(), W = a.width();
  FlowField out{TensorF({H, W}), TensorF({H, W})};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const float ax = a.u.at(y, x), ay = a.v.at(y, x);
      const float px = static_cast<float>(x) + ax;
      const float py = static_cast<float>(y) + ay;
      out.u.at(y, x) = ax + sample_clamped(b.u, py, px);
      out.v.at(y, x) = ay + sample_clamped(b.v, py, px);
    }
  return out;
}

FlowField compose_to_anchor(std::span<const FlowField> step_flows, int t, int tau) {
  require(t >= 0 && tau >= 0 && t <= static_cast<int>(step_flows.size()) &&
              tau <= static_cast<int>(step_flows.size()),
          Err::IndexOutOfRange, "compose_to_anchor indices");
  require(t <= tau, Err::IndexOutOfRange,
          "compose_to_anchor chains toward a later anchor; flip the step direction for t > tau");
  if (step_flows.empty()) return FlowField{TensorF({1, 1}), TensorF({1, 1})};
  if (t == tau) {
    const int H = step_flows[0].height(), W = step_flows[0].width();
    return FlowField{TensorF({H, W}), TensorF({H, W})};  // zero flow
  }
  FlowField acc = step_flows[static_cast<size_t>(tau - 1)];
  for (int j = tau - 2; j >= t; --j) acc = compose_flow(acc, step_flows[static_cast<size_t>(j)]);
  return acc;
}

OcclusionMask estimate_occlusion_mask(const FlowField& fwd, const FlowField& bwd,
                                      const OcclusionParams& p) {
  require(fwd.u.same_shape(bwd.u) && fwd.u.same_shape(fwd.v) && bwd.u.same_shape(bwd.v),
          Err::ShapeMismatch, "flow pair shapes differ");
  const int H = fwd.height(), W = fwd.width();
  OcclusionMask out{TensorF({H, W})};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const float wu = fwd.u.at(y, x), wv = fwd.v.at(y, x);
      const float tx = static_cast<float>(x) + wu;
      const float ty = static_cast<float>(y) + wv;
      if (!in_bounds(ty, tx, H, W)) {
        out.m.at(y, x) = 0.f;
        continue;
      }
      const float bu = sample_clamped(bwd.u, ty, tx);
      const float bv = sample_clamped(bwd.v, ty, tx);
      const float du = wu + bu, dv = wv + bv;
      const float w2 = wu * wu + wv * wv;
      const float b2 = bu * bu + bv * bv;
      if (du * du + dv * dv > p.alpha1 * (w2 + b2) + p.alpha2) {
        out.m.at(y, x) = 0.f;
        continue;
      }
      // motion-boundary energy from central differences of the forward flow
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, W - 1);
      const int ym = std::max(y - 1, 0), yp = std::min(y + 1, H - 1);
      const float gux = (fwd.u.at(y, xp) - fwd.u.at(y, xm)) * 0.5f;
      const float guy = (fwd.u.at(yp, x) - fwd.u.at(ym, x)) * 0.5f;
      const float gvx = (fwd.v.at(y, xp) - fwd.v.at(y, xm)) * 0.5f;
      const float gvy = (fwd.v.at(yp, x) - fwd.v.at(ym, x)) * 0.5f;
      const float edge = gux * gux + guy * guy + gvx * gvx + gvy * gvy;
      out.m.at(y, x) = edge > p.alpha3 * w2 + p.alpha4 ? 0.f : 1.f;
    }
  return out;
}

TensorF traceable_region(const TensorF& stylized, const FlowField& flow_to_anchor,
                         const OcclusionMask& mask) {
  check_flow_shape(stylized, flow_to_anchor);
  require(mask.m.same_shape(flow_to_anchor.u), Err::ShapeMismatch, "mask does not match flow");
  WarpResult w = warp_backward(stylized, flow_to_anchor);
  TensorF out(w.image.shape());
  const int C = out.dim(0), H = out.dim(1), W = out.dim(2);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at(c, y, x) = mask.m.at(y, x) * w.image.at(c, y, x);
  return out;
}

FlowField invert_flow(const FlowField& flow, int iters) {
  const int H = flow.height(), W = flow.width();
  FlowField inv{TensorF({H, W}), TensorF({H, W})};
  for (int64_t i = 0; i < inv.u.size(); ++i) {
    inv.u[i] = -flow.u[i];
    inv.v[i] = -flow.v[i];
  }
  for (int it = 0; it < iters; ++it) {
    FlowField next{TensorF({H, W}), TensorF({H, W})};
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const float px = static_cast<float>(x) + inv.u.at(y, x);
        const float py = static_cast<float>(y) + inv.v.at(y, x);
        next.u.at(y, x) = -sample_clamped(flow.u, py, px);
        next.v.at(y, x) = -sample_clamped(flow.v, py, px);
      }
    inv = std::move(next);
  }
  return inv;
}

namespace {

// Walk a chain of hops starting on the anchor grid. hop_flows[j] / hop_masks[j]
// live on the grid the walk is currently at before taking hop j.
AnchorWarp chain_anchor(const std::vector<const FlowField*>& hop_flows,
                        const std::vector<const TensorF*>& hop_masks, int H, int W) {
  AnchorWarp out{FlowField{TensorF({H, W}), TensorF({H, W})}, OcclusionMask{TensorF({H, W}, 1.f)}};
  for (size_t j = 0; j < hop_flows.size(); ++j) {
    const FlowField& sf = *hop_flows[j];
    const TensorF& sm = *hop_masks[j];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (out.mask.m.at(y, x) == 0.f) continue;
        const float px = static_cast<float>(x) + out.flow.u.at(y, x);
        const float py = static_cast<float>(y) + out.flow.v.at(y, x);
        if (!in_bounds(py, px, H, W)) {
          out.mask.m.at(y, x) = 0.f;
          continue;
        }
        if (sample_clamped(sm, py, px) < 0.5f) {
          out.mask.m.at(y, x) = 0.f;
          continue;
        }
        out.flow.u.at(y, x) += sample_clamped(sf.u, py, px);
        out.flow.v.at(y, x) += sample_clamped(sf.v, py, px);
      }
  }
  // final landing position must be inside the source frame
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (out.mask.m.at(y, x) == 0.f) continue;
      const float px = static_cast<float>(x) + out.flow.u.at(y, x);
      const float py = static_cast<float>(y) + out.flow.v.at(y, x);
      if (!in_bounds(py, px, H, W)) out.mask.m.at(y, x) = 0.f;
    }
  return out;
}

}  // namespace

std::vector<AnchorWarp> anchor_warps(const TrainingTuple& t) {
  const int K = t.k();
  const int tau = t.anchor;
  require(tau >= 0 && tau < K, Err::IndexOutOfRange, "anchor outside tuple");
  const int H = t.frames[0].dim(1), W = t.frames[0].dim(2);

  // reverse-direction steps: exact when the tuple carries them, else inverted
  std::vector<FlowField> rflows;
  std::vector<TensorF> rmasks;
  if (t.has_reverse()) {
    for (size_t i = 0; i < t.reverse_flows.size(); ++i) {
      rflows.push_back(t.reverse_flows[i]);
      rmasks.push_back(t.reverse_masks[i].m);
    }
  } else {
    for (size_t i = 0; i < t.flows.size(); ++i) {
      rflows.push_back(invert_flow(t.flows[i]));
      WarpResult wm = warp_backward(
          TensorF::from({1, H, W},
                        std::vector<float>(t.masks[i].m.data(), t.masks[i].m.data() + t.masks[i].m.size())),
          rflows.back());
      TensorF m({H, W});
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          m.at(y, x) =
              wm.validity.at(y, x) > 0.f && wm.image.at(0, y, x) >= 0.5f ? 1.f : 0.f;
      rmasks.push_back(std::move(m));
    }
  }

  std::vector<AnchorWarp> out;
  out.reserve(static_cast<size_t>(K));
  for (int f = 0; f < K; ++f) {
    if (f == tau) {
      out.push_back({FlowField{TensorF({H, W}), TensorF({H, W})}, OcclusionMask{TensorF({H, W}, 1.f)}});
      continue;
    }
    std::vector<const FlowField*> hop_flows;
    std::vector<const TensorF*> hop_masks;
    if (f < tau) {
      // hops tau-1, tau-2, ..., f over the stored direction
      for (int j = tau - 1; j >= f; --j) {
        hop_flows.push_back(&t.flows[static_cast<size_t>(j)]);
        hop_masks.push_back(&t.masks[static_cast<size_t>(j)].m);
      }
    } else {
      // hops tau, tau+1, ..., f-1 over the reverse direction
      for (int j = tau; j < f; ++j) {
        hop_flows.push_back(&rflows[static_cast<size_t>(j)]);
        hop_masks.push_back(&rmasks[static_cast<size_t>(j)]);
      }
    }
    out.push_back(chain_anchor(hop_flows, hop_masks, H, W));
  }
  return out;
}

}  // namespace flowkd
