#pragma once

#include <span>
#include <vector>

#include "flowkd/autodiff.hpp"
#include "flowkd/tensor.hpp"
#include "flowkd/videodata.hpp"

namespace flowkd {

struct WarpResult {
  TensorF image;
  TensorF validity;  // 1 where the sample position fell inside the source frame
};

// out(p) = bilinear sample of src at p + flow(p); out-of-bounds -> 0, validity 0.
WarpResult warp_backward(const TensorF& src, const FlowField& flow);

// Chain two step flows: (a then b)(p) = a(p) + b(p + a(p)).
FlowField compose_flow(const FlowField& a, const FlowField& b);

// step_flows[i] warps frame i onto grid i+1 (the stored direction). Composes
// the chain aligning frame t with anchor grid tau. Requires t <= tau; chains
// toward later anchors come from the reverse-direction steps via anchor_warps.
FlowField compose_to_anchor(std::span<const FlowField> step_flows, int t, int tau);

// Forward-backward consistency + motion-boundary test. The mask lives on
// fwd's grid; bwd is the opposite-direction flow on the other frame's grid.
struct OcclusionParams {
  float alpha1 = 0.01f;
  float alpha2 = 0.5f;
  float alpha3 = 0.01f;
  float alpha4 = 0.002f;
};
OcclusionMask estimate_occlusion_mask(const FlowField& fwd, const FlowField& bwd,
                                      const OcclusionParams& p = {});

// mask ⊙ warp_backward(stylized, flow_to_anchor)
TensorF traceable_region(const TensorF& stylized, const FlowField& flow_to_anchor,
                         const OcclusionMask& mask);

// Approximate inverse of a step flow by fixed-point refinement of g = -f(p+g).
FlowField invert_flow(const FlowField& flow, int iters = 3);

// Everything needed to build one rank-matrix row: the composed flow onto the
// anchor grid and the conjunction of all per-step masks along the chain,
// resampled to the anchor grid, re-binarized at 0.5 and ANDed with warp
// validity. The anchor's own entry is the zero flow with an all-ones mask.
struct AnchorWarp {
  FlowField flow;
  OcclusionMask mask;
};

// Per-frame anchor warps for a tuple. Frames after the anchor need the
// reverse-direction step flows; when the tuple does not carry them they are
// approximated with invert_flow and a resampled step mask.
std::vector<AnchorWarp> anchor_warps(const TrainingTuple& t);

// Graph-side warp with a fixed flow, for building differentiable losses.
template <typename T>
typename Graph<T>::Var warp_var(Graph<T>& g, typename Graph<T>::Var src, const Tensor<T>& u,
                                const Tensor<T>& v, Tensor<T>* validity = nullptr) {
  return g.warp(src, g.constant(u), g.constant(v), validity);
}

inline Graph<float>::Var warp_var(Graph<float>& g, Graph<float>::Var src, const FlowField& flow,
                                  TensorF* validity = nullptr) {
  return warp_var<float>(g, src, flow.u, flow.v, validity);
}

}  // namespace flowkd
