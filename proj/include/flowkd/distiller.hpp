#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flowkd/losses.hpp"
#include "flowkd/networks.hpp"
#include "flowkd/stability.hpp"
#include "flowkd/videodata.hpp"

namespace flowkd {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 1;
  float base_lr = 1e-3f;
  float lr_decay_factor = 1.2f;
  int lr_decay_every_iters = 500;
  uint64_t seed = 1;
  LossWeights weights;  // carries K
  bool use_temporal = true;
  RankAnchor rank_anchor = RankAnchor::input;
  int tuples_per_epoch = 200;
  int crop_width = 96;
  int crop_height = 96;
  float width_multiplier = 0.25f;
  float teacher_width_multiplier = 0.5f;
  int teacher_epochs = 0;  // 0: same as epochs
  uint64_t feature_seed = 77;
  std::string dataset_dir;
  std::string eval_dir;
  std::string style_image;
  std::string feature_checkpoint;  // optional pretrained feature weights
  std::string teacher_checkpoint;
  std::string teacher_noflow_checkpoint;
  std::string baseline_checkpoint;
  std::string cache_dir;
  bool auto_build = true;
  bool deterministic = true;

  void validate() const;
};

// exact schedule: base_lr * (1/decay)^floor(iter/every)
float lr_at(const TrainConfig& cfg, int64_t iter);

struct Corpus {
  std::vector<FrameSequence> train;
  std::vector<FrameSequence> eval_scenes;
  TensorF style_image;
  Network features;
  StyleTarget style;
};

Corpus load_corpus(const TrainConfig& cfg);

class Adam {
 public:
  explicit Adam(float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(Network& net, const std::vector<TensorF>& grads, float lr);
  float beta1() const { return beta1_; }
  float beta2() const { return beta2_; }
  float eps() const { return eps_; }

 private:
  float beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<TensorF> m_, v_;
};

// Line-delimited JSON run log. Records: header, iter, epoch.
class RunLogger {
 public:
  RunLogger() = default;
  explicit RunLogger(const std::string& path);
  void line(const std::string& json_line);
  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::string path_;
  std::vector<std::string> lines_;
};

struct IterRecord {
  int64_t iter = 0;
  float lr = 0.f;
  LossBreakdown loss;
};

struct TrainResult {
  Network net;
  float iter0_total = 0.f;
  double final_val_estab = 0.0;
  std::vector<IterRecord> iters;
  std::vector<double> epoch_val_estab;
};

// Student trained from scratch with the perceptual loss (plus the temporal
// term when use_temporal); the use_temporal=false flavor is the frozen
// baseline the residual targets are built against.
TrainResult train_baseline(const TrainConfig& cfg, const Corpus& corpus, bool use_temporal,
                           Arch arch = Arch::student, RunLogger* log = nullptr);

struct TeacherPair {
  Network teacher_flow;
  Network teacher_noflow;
};

// Flow teacher: 7-channel conditioning trained with perceptual + temporal
// loss over tuples (previous output detached). Flow-free teacher: the same
// trunk trained frame-wise with the perceptual loss only.
TeacherPair train_teacher(const TrainConfig& cfg, const Corpus& corpus, RunLogger* log = nullptr);

struct FrozenSet {
  Network teacher_flow;
  Network teacher_noflow;
  Network baseline;
};

// Loads the three frozen networks, training any missing one from the config
// seed when auto_build is set.
FrozenSet prepare_frozen(const TrainConfig& cfg, const Corpus& corpus);

struct CachedFrame {
  TensorF delta_t;      // N_T(x,f) - ~N_T(x), float32
  TensorF baseline;     // ~N_S(x)
  TensorF teacher_out;  // N_T(x,f), kept for the teacher-anchored rank ablation
};

struct TeacherCache {
  std::string key;  // teacher|teacher_noflow|baseline checkpoint ids
  std::map<std::string, std::vector<CachedFrame>> entries;
  const CachedFrame& get(const std::string& seq_id, int frame) const;
};

std::string cache_key(const FrozenSet& frozen);

TeacherCache cache_teacher_outputs(const TrainConfig& cfg, const Corpus& corpus,
                                   const FrozenSet& frozen);

// Algorithm: sample a tuple, forward the student on its K frames, assemble the
// total loss from cached targets, take one optimizer step; lr decays by the
// configured factor on the configured period; validation e_stab per epoch.
TrainResult distill(const TrainConfig& cfg, const Corpus& corpus, const FrozenSet& frozen,
                    const TeacherCache& cache, RunLogger* log = nullptr);

// parameter checksum used by the frozen-networks invariant
std::string params_checksum(const Network& net);

}  // namespace flowkd
