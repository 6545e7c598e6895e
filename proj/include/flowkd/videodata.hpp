#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowkd/tensor.hpp"

namespace flowkd {

// Dense per-pixel displacement field in pixels.
struct FlowField {
  TensorF u;  // (H,W) horizontal
  TensorF v;  // (H,W) vertical
  int height() const { return u.dim(0); }
  int width() const { return u.dim(1); }
};

// Binary map: 1 = traceable, 0 = occluded / motion boundary / leaves frame.
struct OcclusionMask {
  TensorF m;  // (H,W), values exactly 0 or 1
};

// Ordered video frames with per-step flows and masks.
//
// Step i connects frames i and i+1. flows[i] lives on frame i+1's grid and
// holds, for every pixel, the displacement to its source location in frame i;
// warping frame i by flows[i] aligns it with frame i+1 on masks[i]==1 pixels.
// reverse_flows[i] (optional, exact for synthetic data) lives on frame i's
// grid and points into frame i+1; reverse_masks[i] marks frame-i pixels that
// stay visible in frame i+1. The reverse direction is what lets later frames
// be warped back onto an earlier anchor.
struct FrameSequence {
  std::vector<TensorF> frames;  // each (3,H,W), values in [0,1]
  std::vector<FlowField> flows;
  std::vector<OcclusionMask> masks;
  std::vector<FlowField> reverse_flows;      // may be empty
  std::vector<OcclusionMask> reverse_masks;  // may be empty
  std::string source_id;

  int num_frames() const { return static_cast<int>(frames.size()); }
  int height() const { return frames.empty() ? 0 : frames[0].dim(1); }
  int width() const { return frames.empty() ? 0 : frames[0].dim(2); }
  bool has_reverse() const { return !reverse_flows.empty(); }
  void validate() const;
};

// K consecutive frames with the K-1 step flows/masks between them.
struct TrainingTuple {
  std::vector<TensorF> frames;
  std::vector<FlowField> flows;
  std::vector<OcclusionMask> masks;
  std::vector<FlowField> reverse_flows;
  std::vector<OcclusionMask> reverse_masks;
  int anchor = 0;  // tau = K/2
  std::string source_id;
  int start = 0;

  int k() const { return static_cast<int>(frames.size()); }
  bool has_reverse() const { return !reverse_flows.empty(); }
};

// Middlebury .flo container
FlowField read_flo(const std::string& path);
void write_flo(const std::string& path, const FlowField& flow);

// Synthetic scenes: textured sprites translating over a textured background,
// with exact flows and masks. All motion is integer pixels per frame so the
// ground truth is exact under bilinear warping.
struct SpriteSpec {
  int x0 = 0, y0 = 0;  // top-left at frame 0
  int w = 8, h = 8;
  int vx = 0, vy = 0;  // pixels per frame
};

struct SceneSpec {
  int width = 128;
  int height = 96;
  int num_frames = 24;
  int num_sprites = 3;    // used when sprites is empty
  int max_speed = 2;      // |vx|,|vy| bound for generated sprites
  uint64_t seed = 0;
  std::vector<SpriteSpec> sprites;  // explicit layout overrides generation
};

FrameSequence synth_sequence(const SceneSpec& spec);

TrainingTuple make_tuple(const FrameSequence& seq, int start, int K);
std::vector<TrainingTuple> sample_tuples(const FrameSequence& seq, int K, int count,
                                         uint64_t seed);
// Sample across a corpus of sequences, tuples drawn uniformly over sequences.
std::vector<TrainingTuple> sample_tuples_corpus(const std::vector<FrameSequence>& corpus, int K,
                                                int count, uint64_t seed);

TrainingTuple crop_tuple(const TrainingTuple& t, int x0, int y0, int w, int h);

// Directory layout: frames/ *.png, flow/ *.flo, occlusions/ *.png, optionally
// flow_rev/ and occlusions_rev/. Files are matched in lexicographic order.
FrameSequence load_sequence_dir(const std::string& dir);
void save_sequence_dir(const FrameSequence& seq, const std::string& dir);

}  // namespace flowkd
