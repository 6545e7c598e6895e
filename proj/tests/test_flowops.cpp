#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowkd/error.hpp"
#include "flowkd/flowops.hpp"
#include "flowkd/videodata.hpp"
#include "testutil.hpp"

using namespace flowkd;
using testutil::random_tensor;

namespace {

FlowField constant_flow(int h, int w, float u, float v) {
  return {TensorF({h, w}, u), TensorF({h, w}, v)};
}

}  // namespace

TEST_CASE("warp_backward: zero flow is a bit-exact identity with full validity") {
  Rng rng(1);
  TensorF img = random_tensor<float>({3, 7, 9}, rng, 0, 1);
  WarpResult w = warp_backward(img, constant_flow(7, 9, 0, 0));
  CHECK(tensors_equal(w.image, img));
  CHECK(max_abs_diff(w.validity, TensorF({7, 9}, 1.f)) == 0.0);
}

TEST_CASE("warp_backward: integer translation matches the index-shift oracle") {
  Rng rng(2);
  TensorF img = random_tensor<float>({2, 6, 8}, rng, 0, 1);
  WarpResult w = warp_backward(img, constant_flow(6, 8, 1, 0));
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x) {
        if (x + 1 < 8) {
          CHECK(w.image.at(c, y, x) == img.at(c, y, x + 1));
          CHECK(w.validity.at(y, x) == 1.f);
        } else {
          CHECK(w.image.at(c, y, x) == 0.f);
          CHECK(w.validity.at(y, x) == 0.f);
        }
      }

  // ramp image: shifted-by-one-column contract of the spec example
  TensorF ramp({1, 4, 5});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) ramp.at(0, y, x) = static_cast<float>(x);
  WarpResult wr = warp_backward(ramp, constant_flow(4, 5, 1, 0));
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x + 1 < 5; ++x) CHECK(wr.image.at(0, y, x) == static_cast<float>(x + 1));
    CHECK(wr.validity.at(y, 4) == 0.f);
  }
}

TEST_CASE("warp_backward is linear in the source on valid pixels") {
  Rng rng(3);
  TensorF a = random_tensor<float>({3, 6, 6}, rng, 0, 1);
  TensorF b = random_tensor<float>({3, 6, 6}, rng, 0, 1);
  FlowField f{random_tensor<float>({6, 6}, rng, -1.5, 1.5),
              random_tensor<float>({6, 6}, rng, -1.5, 1.5)};
  TensorF mix({3, 6, 6});
  for (int64_t i = 0; i < mix.size(); ++i) mix[i] = 2.f * a[i] - 0.5f * b[i];
  WarpResult wa = warp_backward(a, f);
  WarpResult wb = warp_backward(b, f);
  WarpResult wm = warp_backward(mix, f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        if (wa.validity.at(y, x) == 1.f)
          CHECK(std::abs(wm.image.at(c, y, x) -
                         (2.f * wa.image.at(c, y, x) - 0.5f * wb.image.at(c, y, x))) < 1e-5f);
}

TEST_CASE("warp_backward rejects shape mismatches") {
  TensorF img({3, 4, 4});
  CHECK_THROWS_WITH_AS(warp_backward(img, constant_flow(5, 4, 0, 0)),
                       doctest::Contains("ShapeMismatch"), Error);
}

TEST_CASE("compose_to_anchor: identity, constants, zero flows, bounds") {
  std::vector<FlowField> steps;
  steps.push_back(constant_flow(8, 10, 1, 0));
  steps.push_back(constant_flow(8, 10, 2, 0));

  FlowField zero = compose_to_anchor(steps, 1, 1);
  CHECK(max_abs_diff(zero.u, TensorF({8, 10})) == 0.0);

  // chain 0 -> 2: +1 then +2 gives +3 on interior pixels
  FlowField c = compose_to_anchor(steps, 0, 2);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 6; ++x) {
      CHECK(c.u.at(y, x) == doctest::Approx(3.f));
      CHECK(c.v.at(y, x) == doctest::Approx(0.f));
    }

  std::vector<FlowField> zeros = {constant_flow(8, 10, 0, 0), constant_flow(8, 10, 0, 0)};
  FlowField z = compose_to_anchor(zeros, 0, 2);
  CHECK(max_abs_diff(z.u, TensorF({8, 10})) == 0.0);
  CHECK(max_abs_diff(z.v, TensorF({8, 10})) == 0.0);

  CHECK_THROWS_WITH_AS(compose_to_anchor(steps, 0, 5), doctest::Contains("IndexOutOfRange"),
                       Error);
  CHECK_THROWS_WITH_AS(compose_to_anchor(steps, 2, 0), doctest::Contains("IndexOutOfRange"),
                       Error);
}

TEST_CASE("composed warp matches chained per-step warps on jointly valid pixels") {
  SceneSpec spec;
  spec.width = 48;
  spec.height = 36;
  spec.num_frames = 4;
  spec.seed = 5;
  spec.num_sprites = 2;
  FrameSequence seq = synth_sequence(spec);

  // warp frame 0 to grid 2: chained single-step warps vs one composed warp
  WarpResult hop1 = warp_backward(seq.frames[0], seq.flows[0]);
  WarpResult hop2 = warp_backward(hop1.image, seq.flows[1]);
  FlowField composed = compose_to_anchor(seq.flows, 0, 2);
  WarpResult direct = warp_backward(seq.frames[0], composed);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 36; ++y)
      for (int x = 0; x < 48; ++x) {
        const bool valid = hop2.validity.at(y, x) == 1.f &&
                           warp_backward(hop1.image, seq.flows[1]).validity.at(y, x) == 1.f &&
                           direct.validity.at(y, x) == 1.f &&
                           seq.masks[0].m.at(y, x) + seq.masks[1].m.at(y, x) == 2.f;
        if (valid)
          CHECK(std::abs(direct.image.at(c, y, x) - hop2.image.at(c, y, x)) <= 1e-5f);
      }
}

TEST_CASE("estimate_occlusion_mask: consistent pair is all ones") {
  FlowField fwd = constant_flow(10, 12, 1.25f, -0.5f);
  FlowField bwd = constant_flow(10, 12, -1.25f, 0.5f);
  OcclusionMask m = estimate_occlusion_mask(fwd, bwd);
  // every pixel whose target stays in frame is consistent -> 1; the rest 0
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 12; ++x) {
      const bool in = x + 1.25f <= 11.f && y - 0.5f >= 0.f;
      CHECK(m.m.at(y, x) == (in ? 1.f : 0.f));
    }
}

TEST_CASE("estimate_occlusion_mask: gross inconsistency is all zeros") {
  // |w + w_hat|^2 = 25 > alpha1*(25+0) + alpha2 = 0.75
  FlowField fwd = constant_flow(8, 8, 5.f, 0.f);
  FlowField bwd = constant_flow(8, 8, 0.f, 0.f);
  OcclusionMask m = estimate_occlusion_mask(fwd, bwd);
  CHECK(max_abs_diff(m.m, TensorF({8, 8})) == 0.0);
}

TEST_CASE("estimate_occlusion_mask agrees with ground truth on >= 95% of pixels") {
  SceneSpec spec;
  spec.width = 96;
  spec.height = 64;
  spec.num_frames = 3;
  spec.seed = 12;
  spec.sprites = {{20, 16, 24, 20, 2, 1}};
  FrameSequence seq = synth_sequence(spec);
  OcclusionMask est = estimate_occlusion_mask(seq.flows[0], seq.reverse_flows[0]);
  OcclusionMask est2 = estimate_occlusion_mask(seq.flows[0], seq.reverse_flows[0]);
  CHECK(tensors_equal(est.m, est2.m));  // deterministic
  int agree = 0;
  for (int64_t i = 0; i < est.m.size(); ++i)
    if (est.m[i] == seq.masks[0].m[i]) ++agree;
  CHECK(static_cast<double>(agree) / static_cast<double>(est.m.size()) >= 0.95);
}

TEST_CASE("traceable_region: annihilating mask, identity, static scene") {
  Rng rng(9);
  TensorF img = random_tensor<float>({3, 8, 8}, rng, 0, 1);
  FlowField zero = constant_flow(8, 8, 0, 0);

  TensorF z = traceable_region(img, zero, {TensorF({8, 8})});
  CHECK(max_abs_diff(z, TensorF({3, 8, 8})) == 0.0);

  TensorF id = traceable_region(img, zero, {TensorF({8, 8}, 1.f)});
  CHECK(tensors_equal(id, img));

  // static scene: R_t identical for every frame
  SceneSpec spec;
  spec.width = 32;
  spec.height = 24;
  spec.num_frames = 5;
  spec.seed = 2;
  spec.sprites = {{6, 6, 10, 8, 0, 0}};
  FrameSequence seq = synth_sequence(spec);
  TrainingTuple tup = make_tuple(seq, 0, 5);
  auto warps = anchor_warps(tup);
  TensorF r0 = traceable_region(seq.frames[0], warps[0].flow, warps[0].mask);
  for (int t = 1; t < 5; ++t) {
    TensorF rt = traceable_region(seq.frames[static_cast<size_t>(t)],
                                  warps[static_cast<size_t>(t)].flow,
                                  warps[static_cast<size_t>(t)].mask);
    CHECK(max_abs_diff(rt, r0) <= 1e-6);
  }
}

TEST_CASE("anchor_warps: moving scene, every row matches the anchor frame content") {
  SceneSpec spec;
  spec.width = 48;
  spec.height = 32;
  spec.num_frames = 7;
  spec.seed = 31;
  spec.num_sprites = 2;
  FrameSequence seq = synth_sequence(spec);
  TrainingTuple tup = make_tuple(seq, 1, 5);
  auto warps = anchor_warps(tup);
  REQUIRE(warps.size() == 5);
  const int tau = tup.anchor;
  // anchor entry: zero flow, all-ones mask
  CHECK(max_abs_diff(warps[static_cast<size_t>(tau)].flow.u, TensorF({32, 48})) == 0.0);
  CHECK(max_abs_diff(warps[static_cast<size_t>(tau)].mask.m, TensorF({32, 48}, 1.f)) == 0.0);
  for (int t = 0; t < 5; ++t) {
    WarpResult w = warp_backward(tup.frames[static_cast<size_t>(t)],
                                 warps[static_cast<size_t>(t)].flow);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 48; ++x)
          if (warps[static_cast<size_t>(t)].mask.m.at(y, x) == 1.f)
            CHECK(std::abs(w.image.at(c, y, x) -
                           tup.frames[static_cast<size_t>(tau)].at(c, y, x)) <= 1e-6f);
  }
}

TEST_CASE("invert_flow recovers the reverse field away from occlusions") {
  SceneSpec spec;
  spec.width = 40;
  spec.height = 30;
  spec.num_frames = 3;
  spec.seed = 8;
  spec.sprites = {{8, 6, 12, 10, 1, 1}};
  FrameSequence seq = synth_sequence(spec);
  FlowField inv = invert_flow(seq.flows[0]);
  int close = 0, checked = 0;
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 40; ++x) {
      if (seq.reverse_masks[0].m.at(y, x) != 1.f) continue;
      ++checked;
      if (std::abs(inv.u.at(y, x) - seq.reverse_flows[0].u.at(y, x)) < 0.5f &&
          std::abs(inv.v.at(y, x) - seq.reverse_flows[0].v.at(y, x)) < 0.5f)
        ++close;
    }
  CHECK(checked > 0);
  CHECK(static_cast<double>(close) / checked > 0.9);
}
