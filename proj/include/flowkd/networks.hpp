#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowkd/autodiff.hpp"
#include "flowkd/tensor.hpp"
#include "flowkd/videodata.hpp"

namespace flowkd {

enum class Arch : uint8_t { student = 0, teacher_flow = 1, teacher_noflow = 2, features = 3 };

const char* arch_name(Arch a);

struct NamedTensor {
  std::string name;
  TensorF value;
};

// A parameterized image-to-image map plus its checkpoint identity. The student
// and the flow-free teacher consume 3 channels; the flow teacher consumes 7
// (frame + warped previous stylized + mask); the feature net is a frozen
// conv stack used by the perceptual loss.
struct Network {
  Arch arch = Arch::student;
  float width_multiplier = 1.f;
  bool frozen = false;
  uint64_t init_seed = 0;
  std::string checkpoint_id;
  std::vector<NamedTensor> params;

  int in_channels() const { return arch == Arch::teacher_flow ? 7 : 3; }
  const TensorF& param(const std::string& name) const;
};

// Channel plan derived from the width multiplier.
struct TrunkPlan {
  int c1, c2, c3;
  int res_blocks;
  int stem_kernel;  // first/last conv; 9 at full scale, 5 at small widths
};
TrunkPlan trunk_plan(float width_multiplier);

Network make_network(Arch arch, float width_multiplier, uint64_t seed);

std::string compute_checkpoint_id(const Network& net);

// Per-graph binding of a network's parameters. Trainable bindings expose the
// parameter Vars so an optimizer can read gradients after backward().
template <typename T>
struct BoundNetwork {
  const Network* net = nullptr;
  std::vector<typename Graph<T>::Var> params;
  typename Graph<T>::Var param(const std::string& name) const {
    for (size_t i = 0; i < net->params.size(); ++i)
      if (net->params[i].name == name) return params[i];
    fail(Err::UnknownLayer, "no parameter named " + name);
  }
};

template <typename T>
BoundNetwork<T> bind_network(Graph<T>& g, const Network& net, bool trainable);

// Stylization trunk (student / teacher-noflow / teacher-flow). Input channels
// must match net.in_channels(); output is sigmoid-bounded (3,H,W).
template <typename T>
typename Graph<T>::Var trunk_forward(Graph<T>& g, const BoundNetwork<T>& bn,
                                     typename Graph<T>::Var x);

// Feature net taps, in network order. Valid layer names: relu1..relu4.
extern const std::vector<std::string> kFeatureLayers;
template <typename T>
std::vector<std::pair<std::string, typename Graph<T>::Var>> feature_forward(
    Graph<T>& g, const BoundNetwork<T>& bn, typename Graph<T>::Var x,
    const std::vector<std::string>& layers);

struct FeatureStack {
  std::vector<NamedTensor> maps;
};

// Non-graph convenience forwards (fresh graph, no gradients).
TensorF student_forward(const Network& net, const TensorF& frame);
TensorF teacher_noflow_forward(const Network& net, const TensorF& frame);
TensorF teacher_forward(const Network& net, const TensorF& frame, const TensorF* prev_stylized,
                        const FlowField* flow, const OcclusionMask* mask);
FeatureStack feature_extract(const Network& net, const TensorF& image,
                             const std::vector<std::string>& layers);

// 7-channel teacher input: frame + warp(prev, flow) + mask; zero-filled
// conditioning for the first frame of a sequence.
TensorF assemble_teacher_input(const TensorF& frame, const TensorF* prev_stylized,
                               const FlowField* flow, const OcclusionMask* mask);

// Frame-local for student / teacher-noflow, recurrent for teacher-flow.
std::vector<TensorF> stylize_sequence(const Network& net, const FrameSequence& seq);

void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);
Network load_checkpoint_as(const std::string& path, Arch expected);

}  // namespace flowkd
