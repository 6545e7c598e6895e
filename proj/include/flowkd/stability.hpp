#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flowkd/losses.hpp"
#include "flowkd/networks.hpp"
#include "flowkd/videodata.hpp"

namespace flowkd {

struct EstabOptions {
  // true: the per-pair term is the mean of squared masked differences (RMS
  // reading). false: the literal unsquared-L2 reading.
  bool squared_norm = true;
  // whether D counts channels as well as pixels
  bool d_includes_channels = true;
};

// sqrt( (1/N) sum_t (1/D) ||M_t . (y_t - warp(y_{t-1}, f_t))||^2 ), N = number
// of consecutive pairs. Warp validity is ANDed with the mask.
double e_stab(const std::vector<TensorF>& stylized, const std::vector<FlowField>& flows,
              const std::vector<OcclusionMask>& masks, const EstabOptions& opt = {});

// Any frame-sequence -> stylized-frames map. Identity is the floor any
// stylizer is compared against.
using Stylizer = std::function<std::vector<TensorF>(const FrameSequence&)>;

Stylizer identity_stylizer();
Stylizer network_stylizer(const Network& net);

struct SceneStability {
  std::string scene_id;
  double estab = 0.0;
};

struct RankDiagnostic {
  std::string scene_id;
  int tuple_start = 0;
  float nuclear = 0.f;
  int numeric_rank = 0;
};

struct StabilityReport {
  std::string model_name;
  std::vector<SceneStability> scenes;
  double sum = 0.0;
  double fps = 0.0;  // 0 when not benchmarked
  std::vector<RankDiagnostic> rank_diagnostics;
  std::string config_fingerprint;
};

StabilityReport evaluate_scenes(const std::string& model_name, const Stylizer& stylize,
                                const std::vector<FrameSequence>& scenes,
                                const EstabOptions& opt = {});

// Per-frame |y_t - warp(y_{t-1})| averaged over channels, masked; black = no
// error. One image per consecutive pair.
std::vector<TensorF> temporal_error_heatmaps(const std::vector<TensorF>& stylized,
                                             const std::vector<FlowField>& flows,
                                             const std::vector<OcclusionMask>& masks);

// Median-of-runs throughput of one forward (plus warp + mask handling for the
// flow teacher when include_flow_pipeline).
double fps_bench(const Network& net, int width, int height, int warmup_iters, int timed_iters,
                 bool include_flow_pipeline);

// nuclear norm + numeric rank of the warped traceable regions of each tuple
std::vector<RankDiagnostic> rank_diagnostics(const std::vector<std::vector<TensorF>>& stylized_tuples,
                                             const std::vector<TrainingTuple>& tuples);

std::string render_report_table(const std::vector<StabilityReport>& reports);

}  // namespace flowkd
