#pragma once

#include <string>
#include <vector>

#include "flowkd/autodiff.hpp"
#include "flowkd/flowops.hpp"
#include "flowkd/networks.hpp"
#include "flowkd/tensor.hpp"
#include "flowkd/videodata.hpp"

namespace flowkd {

// All squared norms are realized as MEANS over elements, so losses are
// resolution-independent and the lambda weights can be rescaled if a
// sum-reduction convention is preferred.
struct LossWeights {
  float lambda_content = 1.f;
  float lambda_style = 1e4f;
  float lambda_tv = 1e-5f;
  float lambda_res = 0.f;
  float lambda_temp = 0.f;
  float lambda_rank = 0.f;
  int k = 5;
  void validate() const;
};

// K x L matrix of flattened traceable regions plus its singular spectrum.
// All rows share one mask: the conjunction of every row's chain mask, so a
// flow-consistent stylization collapses to an exactly rank-1 matrix.
struct RankMatrix {
  TensorF X;                    // (K, L), L = H*W*C
  std::vector<float> spectrum;  // singular values, descending
  float nuclear = 0.f;
  int numeric_rank = 0;
};

inline constexpr float kEpsRank = 1e-6f;

// Frozen distillation targets for one frame: the teacher-pair difference and
// the from-scratch baseline output.
struct ResidualTarget {
  TensorF delta_t;   // N_T(x,f) - ~N_T(x)
  TensorF baseline;  // ~N_S(x)
};

struct StyleTarget {
  TensorF style_image;
  std::vector<std::string> style_layers;
  std::string content_layer;
  std::vector<NamedTensor> style_grams;  // one per style layer
};

StyleTarget make_style_target(const Network& features, const TensorF& style_image,
                              std::vector<std::string> style_layers = {"relu1", "relu2", "relu3",
                                                                       "relu4"},
                              std::string content_layer = "relu3");

// G = F F^T / (C*H*W) with F the C x (H*W) unfolding.
TensorF gram_matrix(const TensorF& feat);

struct PerceptualBreakdown {
  float content = 0.f;
  float style = 0.f;
  float tv = 0.f;
  float total = 0.f;
};

template <typename T>
typename Graph<T>::Var perceptual_loss_var(Graph<T>& g, const BoundNetwork<T>& features,
                                           typename Graph<T>::Var stylized,
                                           const Tensor<T>& content_image,
                                           const StyleTarget& target, const LossWeights& w,
                                           PerceptualBreakdown* bd = nullptr);

float perceptual_loss(const Network& features, const TensorF& stylized, const TensorF& content,
                      const StyleTarget& target, const LossWeights& w,
                      PerceptualBreakdown* bd = nullptr);

// Plain output-matching distillation (the inferior baseline; kept for the
// ablations): mean squared teacher/student difference.
float vanilla_kd_loss(const TensorF& teacher_out, const TensorF& student_out);

// Residual distillation: mean squared (dT - dS) with dS = student - baseline.
// Implemented in the collapsed form mean_sq(student - (baseline + dT)), which
// is algebraically identical.
float residual_loss(const TensorF& student_out, const ResidualTarget& target);
template <typename T>
typename Graph<T>::Var residual_loss_var(Graph<T>& g, typename Graph<T>::Var student_out,
                                         const ResidualTarget& target);

// Spectrum helpers on the K x K Gram path (K << L).
std::vector<float> singular_values(const TensorF& X);
float nuclear_norm_value(const TensorF& X);
int matrix_rank(const TensorF& X, float eps_rank = kEpsRank);

RankMatrix make_rank_matrix(TensorF X);

// Rows are the anchor-warped traceable regions of the given frames under the
// tuple's geometry (the common mask described above).
RankMatrix build_rank_matrix(const std::vector<TensorF>& frames, const TrainingTuple& tup);

enum class RankAnchor { input, teacher };

// (anchor.nuclear - X_S.nuclear)^2; the anchor is a constant.
float lowrank_loss(const RankMatrix& x_s, const RankMatrix& anchor);

// mean over all elements of || M * (cur - warp(prev, flow)) ||^2. Warp
// validity is ANDed into the mask.
float temporal_loss(const TensorF& cur, const TensorF& prev, const FlowField& flow,
                    const OcclusionMask& mask);
template <typename T>
typename Graph<T>::Var temporal_loss_var(Graph<T>& g, typename Graph<T>::Var cur,
                                         typename Graph<T>::Var prev, const Tensor<T>& u,
                                         const Tensor<T>& v, const Tensor<T>& mask);

struct LossBreakdown {
  float content = 0.f, style = 0.f, tv = 0.f;
  float percep = 0.f;  // content+style+tv over all frames
  float res = 0.f;     // unweighted residual sum over frames
  float temp = 0.f;    // unweighted temporal sum over consecutive pairs
  float rank = 0.f;    // unweighted (anchor - student nuclear)^2
  float student_nuclear = 0.f;
  float anchor_nuclear = 0.f;
  float total = 0.f;
  // re-sum with the weights that produced `total`
  float recompose(const LossWeights& w, bool use_temporal, bool use_residual,
                  bool use_rank) const;
};

// The full objective over one tuple: per-frame perceptual + residual terms,
// temporal terms over consecutive pairs, and the low-rank term against a
// precomputed anchor nuclear norm.
Graph<float>::Var total_loss_var(Graph<float>& g, const TrainingTuple& tup,
                                 const std::vector<Graph<float>::Var>& student_outs,
                                 const BoundNetwork<float>& features, const StyleTarget& style,
                                 const std::vector<ResidualTarget>& residual_targets,
                                 float anchor_nuclear, const LossWeights& w, bool use_temporal,
                                 bool use_residual, bool use_rank, LossBreakdown* bd = nullptr);

}  // namespace flowkd
