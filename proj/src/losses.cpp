#include "flowkd/losses.hpp"

#include <cmath>

#include "flowkd/error.hpp"
#include "flowkd/numerics.hpp"

namespace flowkd {

void LossWeights::validate() const {
  require(lambda_content >= 0 && lambda_style >= 0 && lambda_tv >= 0 && lambda_res >= 0 &&
              lambda_temp >= 0 && lambda_rank >= 0,
          Err::ConfigInvalid, "loss weights must be non-negative");
  require(k >= 2, Err::ConfigInvalid, "K must be >= 2");
}

TensorF gram_matrix(const TensorF& feat) {
  require(feat.ndim() == 3, Err::ShapeMismatch, "gram_matrix: CHW input");
  require(feat.all_finite(), Err::NonFinite, "gram_matrix: non-finite features");
  Graph<float> g;
  return g.gram(g.constant(feat)).value();
}

StyleTarget make_style_target(const Network& features, const TensorF& style_image,
                              std::vector<std::string> style_layers, std::string content_layer) {
  StyleTarget t;
  t.style_image = style_image;
  t.style_layers = std::move(style_layers);
  t.content_layer = std::move(content_layer);
  FeatureStack fs = feature_extract(features, style_image, t.style_layers);
  for (const NamedTensor& m : fs.maps) t.style_grams.push_back({m.name, gram_matrix(m.value)});
  return t;
}

namespace {

template <typename T>
Tensor<T> cast_f(const TensorF& t) {
  if constexpr (std::is_same_v<T, float>)
    return t;
  else
    return t.template cast<T>();
}

}  // namespace

template <typename T>
typename Graph<T>::Var perceptual_loss_var(Graph<T>& g, const BoundNetwork<T>& features,
                                           typename Graph<T>::Var stylized,
                                           const Tensor<T>& content_image,
                                           const StyleTarget& target, const LossWeights& w,
                                           PerceptualBreakdown* bd) {
  require(stylized.value().same_shape(content_image), Err::ShapeMismatch,
          "perceptual_loss: stylized/content shape mismatch");

  // taps needed: content layer + all style layers, extracted in one pass
  std::vector<std::string> taps = target.style_layers;
  if (std::find(taps.begin(), taps.end(), target.content_layer) == taps.end())
    taps.push_back(target.content_layer);

  auto stylized_maps = feature_forward(g, features, stylized, taps);
  auto content_maps = feature_forward(g, features, g.constant(content_image), taps);

  auto find_map = [](const std::vector<std::pair<std::string, typename Graph<T>::Var>>& maps,
                     const std::string& name) -> typename Graph<T>::Var {
    for (const auto& kv : maps)
      if (kv.first == name) return kv.second;
    fail(Err::UnknownLayer, "missing feature tap " + name);
  };

  auto content_term =
      g.mean_sq(g.sub(find_map(stylized_maps, target.content_layer),
                      find_map(content_maps, target.content_layer)));

  typename Graph<T>::Var style_term;
  bool have_style = false;
  for (const std::string& layer : target.style_layers) {
    const NamedTensor* gram_target = nullptr;
    for (const NamedTensor& nt : target.style_grams)
      if (nt.name == layer) gram_target = &nt;
    require(gram_target != nullptr, Err::UnknownLayer, "style gram missing for " + layer);
    auto diff = g.sub_const(g.gram(find_map(stylized_maps, layer)), cast_f<T>(gram_target->value));
    auto term = g.mean_sq(diff);
    style_term = have_style ? g.add(style_term, term) : term;
    have_style = true;
  }
  if (!have_style) style_term = g.constant(Tensor<T>({1}));

  auto tv_term = g.tv_mean(stylized);

  auto total = g.wsum({content_term, style_term, tv_term},
                      {static_cast<T>(w.lambda_content), static_cast<T>(w.lambda_style),
                       static_cast<T>(w.lambda_tv)});
  if (bd) {
    bd->content = static_cast<float>(content_term.scalar());
    bd->style = static_cast<float>(style_term.scalar());
    bd->tv = static_cast<float>(tv_term.scalar());
    bd->total = static_cast<float>(total.scalar());
  }
  return total;
}

template Graph<float>::Var perceptual_loss_var<float>(Graph<float>&, const BoundNetwork<float>&,
                                                      Graph<float>::Var, const TensorF&,
                                                      const StyleTarget&, const LossWeights&,
                                                      PerceptualBreakdown*);
template Graph<double>::Var perceptual_loss_var<double>(Graph<double>&,
                                                        const BoundNetwork<double>&,
                                                        Graph<double>::Var, const TensorD&,
                                                        const StyleTarget&, const LossWeights&,
                                                        PerceptualBreakdown*);

float perceptual_loss(const Network& features, const TensorF& stylized, const TensorF& content,
                      const StyleTarget& target, const LossWeights& w, PerceptualBreakdown* bd) {
  Graph<float> g;
  auto fb = bind_network<float>(g, features, false);
  auto loss = perceptual_loss_var<float>(g, fb, g.constant(stylized), content, target, w, bd);
  return loss.scalar();
}

float vanilla_kd_loss(const TensorF& teacher_out, const TensorF& student_out) {
  require(teacher_out.same_shape(student_out), Err::ShapeMismatch, "vanilla_kd_loss shapes");
  Graph<float> g;
  return g.mean_sq(g.sub_const(g.constant(student_out), teacher_out)).scalar();
}

float residual_loss(const TensorF& student_out, const ResidualTarget& target) {
  Graph<float> g;
  return residual_loss_var<float>(g, g.constant(student_out), target).scalar();
}

template <typename T>
typename Graph<T>::Var residual_loss_var(Graph<T>& g, typename Graph<T>::Var student_out,
                                         const ResidualTarget& target) {
  require(student_out.value().same_shape(cast_f<T>(target.delta_t)) &&
              target.delta_t.same_shape(target.baseline),
          Err::ShapeMismatch, "residual_loss shapes");
  // student - (baseline + dT), identical to dT - dS
  Tensor<T> combined = cast_f<T>(target.baseline);
  Tensor<T> dt = cast_f<T>(target.delta_t);
  kp::vadd(combined.size(), combined.data(), dt.data(), combined.data());
  return g.mean_sq(g.sub_const(student_out, combined));
}

template Graph<float>::Var residual_loss_var<float>(Graph<float>&, Graph<float>::Var,
                                                    const ResidualTarget&);
template Graph<double>::Var residual_loss_var<double>(Graph<double>&, Graph<double>::Var,
                                                      const ResidualTarget&);

std::vector<float> singular_values(const TensorF& X) {
  require(X.ndim() == 2, Err::ShapeMismatch, "singular_values: matrix input");
  require(X.all_finite(), Err::NonFinite, "singular_values: non-finite input");
  const int K = X.dim(0), L = X.dim(1);
  // the Gram path squares the conditioning, so the spectrum is formed in
  // double: float32 rounding would put a ~1e-4 floor under gamma_1/gamma_0
  // and defeat numeric-rank detection at eps_rank
  TensorD Xd = X.cast<double>();
  TensorD gramm({K, K});
  kp::gemm_nt(K, K, L, Xd.data(), Xd.data(), gramm.data(), false);
  std::vector<double> ev;
  TensorD U;
  jacobi_eigh(gramm, ev, U);
  std::vector<float> out(ev.size());
  for (size_t i = 0; i < ev.size(); ++i)
    out[i] = ev[i] > 0.0 ? static_cast<float>(std::sqrt(ev[i])) : 0.f;
  return out;
}

float nuclear_norm_value(const TensorF& X) {
  float total = 0.f;
  for (float s : singular_values(X)) total += s;
  return total;
}

int matrix_rank(const TensorF& X, float eps_rank) {
  const std::vector<float> sv = singular_values(X);
  if (sv.empty() || sv[0] <= 0.f) return 0;
  int r = 0;
  for (float s : sv)
    if (s > sv[0] * eps_rank) ++r;
  return r;
}

RankMatrix make_rank_matrix(TensorF X) {
  RankMatrix rm;
  rm.spectrum = singular_values(X);
  rm.X = std::move(X);
  rm.nuclear = 0.f;
  for (float s : rm.spectrum) rm.nuclear += s;
  rm.numeric_rank = 0;
  if (!rm.spectrum.empty() && rm.spectrum[0] > 0.f)
    for (float s : rm.spectrum)
      if (s > rm.spectrum[0] * kEpsRank) ++rm.numeric_rank;
  return rm;
}

namespace {

// conjunction of all chain masks -> one mask shared by every row
TensorF common_anchor_mask(const std::vector<AnchorWarp>& warps) {
  TensorF common = warps[0].mask.m;
  for (size_t i = 1; i < warps.size(); ++i)
    for (int64_t j = 0; j < common.size(); ++j)
      common[j] = std::min(common[j], warps[i].mask.m[j]);
  return common;
}

}  // namespace

RankMatrix build_rank_matrix(const std::vector<TensorF>& frames, const TrainingTuple& tup) {
  require(static_cast<int>(frames.size()) == tup.k(), Err::ShapeMismatch,
          "build_rank_matrix: frame count does not match tuple");
  require(tup.k() >= 2, Err::GeometryMismatch, "build_rank_matrix: K >= 2");
  for (const TensorF& f : frames)
    require(f.same_shape(tup.frames[0]), Err::ShapeMismatch, "build_rank_matrix: frame shape");
  const std::vector<AnchorWarp> warps = anchor_warps(tup);
  const TensorF common = common_anchor_mask(warps);
  const int K = tup.k();
  const int64_t L = frames[0].size();
  TensorF X({K, static_cast<int>(L)});
  const int C = frames[0].dim(0), H = frames[0].dim(1), W = frames[0].dim(2);
  for (int i = 0; i < K; ++i) {
    WarpResult wr = warp_backward(frames[static_cast<size_t>(i)], warps[static_cast<size_t>(i)].flow);
    float* row = X.data() + static_cast<int64_t>(i) * L;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          row[(static_cast<int64_t>(c) * H + y) * W + x] =
              common.at(y, x) * wr.image.at(c, y, x);
  }
  return make_rank_matrix(std::move(X));
}

float lowrank_loss(const RankMatrix& x_s, const RankMatrix& anchor) {
  require(x_s.X.same_shape(anchor.X), Err::GeometryMismatch,
          "lowrank_loss: matrices built over different tuple geometry");
  const float d = anchor.nuclear - x_s.nuclear;
  return d * d;
}

float temporal_loss(const TensorF& cur, const TensorF& prev, const FlowField& flow,
                    const OcclusionMask& mask) {
  Graph<float> g;
  return temporal_loss_var<float>(g, g.constant(cur), g.constant(prev), flow.u, flow.v, mask.m)
      .scalar();
}

template <typename T>
typename Graph<T>::Var temporal_loss_var(Graph<T>& g, typename Graph<T>::Var cur,
                                         typename Graph<T>::Var prev, const Tensor<T>& u,
                                         const Tensor<T>& v, const Tensor<T>& mask) {
  require(cur.value().same_shape(prev.value()), Err::ShapeMismatch, "temporal_loss shapes");
  Tensor<T> validity;
  auto warped = g.warp(prev, g.constant(u), g.constant(v), &validity);
  // mask AND validity, broadcast over channels
  const int C = cur.value().dim(0), H = cur.value().dim(1), W = cur.value().dim(2);
  require(mask.dim(0) == H && mask.dim(1) == W, Err::ShapeMismatch, "temporal_loss mask");
  Tensor<T> m3({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) m3.at(c, y, x) = mask.at(y, x) * validity.at(y, x);
  return g.mean_sq(g.mul_const(g.sub(cur, warped), std::move(m3)));
}

template Graph<float>::Var temporal_loss_var<float>(Graph<float>&, Graph<float>::Var,
                                                    Graph<float>::Var, const TensorF&,
                                                    const TensorF&, const TensorF&);
template Graph<double>::Var temporal_loss_var<double>(Graph<double>&, Graph<double>::Var,
                                                      Graph<double>::Var, const TensorD&,
                                                      const TensorD&, const TensorD&);

float LossBreakdown::recompose(const LossWeights& w, bool use_temporal, bool use_residual,
                               bool use_rank) const {
  float t = percep;
  if (use_residual) t += w.lambda_res * res;
  if (use_temporal) t += w.lambda_temp * temp;
  if (use_rank) t += w.lambda_rank * rank;
  return t;
}

Graph<float>::Var total_loss_var(Graph<float>& g, const TrainingTuple& tup,
                                 const std::vector<Graph<float>::Var>& student_outs,
                                 const BoundNetwork<float>& features, const StyleTarget& style,
                                 const std::vector<ResidualTarget>& residual_targets,
                                 float anchor_nuclear, const LossWeights& w, bool use_temporal,
                                 bool use_residual, bool use_rank, LossBreakdown* bd) {
  const int K = tup.k();
  require(static_cast<int>(student_outs.size()) == K, Err::ShapeMismatch,
          "total_loss: need K student outputs");
  if (use_residual)
    require(static_cast<int>(residual_targets.size()) == K, Err::ShapeMismatch,
            "total_loss: need K residual targets");
  LossBreakdown local;

  std::vector<Graph<float>::Var> terms;
  std::vector<float> weights;

  for (int t = 0; t < K; ++t) {
    PerceptualBreakdown pb;
    auto percep = perceptual_loss_var<float>(g, features, student_outs[static_cast<size_t>(t)],
                                             tup.frames[static_cast<size_t>(t)], style, w, &pb);
    terms.push_back(percep);
    weights.push_back(1.f);
    local.content += pb.content;
    local.style += pb.style;
    local.tv += pb.tv;
    local.percep += pb.total;
    if (use_residual) {
      auto res = residual_loss_var<float>(g, student_outs[static_cast<size_t>(t)],
                                          residual_targets[static_cast<size_t>(t)]);
      terms.push_back(res);
      weights.push_back(w.lambda_res);
      local.res += res.scalar();
    }
  }
  if (use_temporal) {
    for (int t = 1; t < K; ++t) {
      auto lt = temporal_loss_var<float>(g, student_outs[static_cast<size_t>(t)],
                                         student_outs[static_cast<size_t>(t - 1)],
                                         tup.flows[static_cast<size_t>(t - 1)].u,
                                         tup.flows[static_cast<size_t>(t - 1)].v,
                                         tup.masks[static_cast<size_t>(t - 1)].m);
      terms.push_back(lt);
      weights.push_back(w.lambda_temp);
      local.temp += lt.scalar();
    }
  }
  if (use_rank) {
    const std::vector<AnchorWarp> warps = anchor_warps(tup);
    TensorF common2d = [&] {
      TensorF c = warps[0].mask.m;
      for (size_t i = 1; i < warps.size(); ++i)
        for (int64_t j = 0; j < c.size(); ++j) c[j] = std::min(c[j], warps[i].mask.m[j]);
      return c;
    }();
    const int C = tup.frames[0].dim(0), H = tup.frames[0].dim(1), W = tup.frames[0].dim(2);
    TensorF common3d({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) common3d.at(c, y, x) = common2d.at(y, x);
    std::vector<Graph<float>::Var> rows;
    for (int t = 0; t < K; ++t) {
      auto warped = warp_var(g, student_outs[static_cast<size_t>(t)],
                             warps[static_cast<size_t>(t)].flow);
      rows.push_back(g.mul_const(warped, common3d));
    }
    auto nuc = g.nuclear_norm(g.stack_rows(rows));
    local.student_nuclear = nuc.scalar();
    local.anchor_nuclear = anchor_nuclear;
    // (anchor - nuc)^2 with the anchor constant
    TensorF anchor_t({1});
    anchor_t[0] = anchor_nuclear;
    auto diff = g.sub_const(nuc, anchor_t);
    auto rank_term = g.mean_sq(diff);  // scalar: just diff^2
    terms.push_back(rank_term);
    weights.push_back(w.lambda_rank);
    local.rank = rank_term.scalar();
  }

  auto total = g.wsum(terms, weights);
  local.total = total.scalar();
  if (bd) *bd = local;
  return total;
}

}  // namespace flowkd
