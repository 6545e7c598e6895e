#include "flowkd/distiller.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "flowkd/error.hpp"
#include "flowkd/image_io.hpp"
#include "flowkd/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace flowkd {

void TrainConfig::validate() const {
  require(epochs >= 1, Err::ConfigInvalid, "epochs must be >= 1");
  require(batch_size >= 1, Err::ConfigInvalid, "batch_size must be >= 1");
  require(lr_decay_factor > 1.f, Err::ConfigInvalid, "lr_decay_factor must be > 1");
  require(lr_decay_every_iters >= 1, Err::ConfigInvalid, "lr_decay_every_iters must be >= 1");
  require(base_lr > 0.f, Err::ConfigInvalid, "base_lr must be positive");
  require(tuples_per_epoch >= 1, Err::ConfigInvalid, "tuples_per_epoch must be >= 1");
  require(crop_width >= 8 && crop_width % 4 == 0 && crop_height >= 8 && crop_height % 4 == 0,
          Err::ConfigInvalid, "crop sides must be >= 8 and divisible by 4");
  weights.validate();
}

float lr_at(const TrainConfig& cfg, int64_t iter) {
  const double steps = static_cast<double>(iter / cfg.lr_decay_every_iters);
  return static_cast<float>(static_cast<double>(cfg.base_lr) *
                            std::pow(1.0 / static_cast<double>(cfg.lr_decay_factor), steps));
}

Corpus load_corpus(const TrainConfig& cfg) {
  Corpus c;
  require(fs::is_directory(cfg.dataset_dir), Err::DependencyMissing,
          "dataset_dir missing: " + cfg.dataset_dir + " (produce it with the synth command)");
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(cfg.dataset_dir))
    if (e.is_directory()) dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  require(!dirs.empty(), Err::DependencyMissing, "no sequences under " + cfg.dataset_dir);
  for (const std::string& d : dirs) c.train.push_back(load_sequence_dir(d));

  if (!cfg.eval_dir.empty()) {
    require(fs::is_directory(cfg.eval_dir), Err::DependencyMissing,
            "eval_dir missing: " + cfg.eval_dir + " (produce it with the synth command)");
    std::vector<std::string> edirs;
    for (const auto& e : fs::directory_iterator(cfg.eval_dir))
      if (e.is_directory()) edirs.push_back(e.path().string());
    std::sort(edirs.begin(), edirs.end());
    for (const std::string& d : edirs) c.eval_scenes.push_back(load_sequence_dir(d));
  }

  require(!cfg.style_image.empty() && fs::exists(cfg.style_image), Err::DependencyMissing,
          "style_image missing: " + cfg.style_image + " (produce it with the synth command)");
  c.style_image = read_png_rgb(cfg.style_image);

  if (!cfg.feature_checkpoint.empty()) {
    c.features = load_checkpoint_as(cfg.feature_checkpoint, Arch::features);
  } else {
    c.features = make_network(Arch::features, 1.f, cfg.feature_seed);
  }
  c.style = make_style_target(c.features, c.style_image);
  return c;
}

void Adam::step(Network& net, const std::vector<TensorF>& grads, float lr) {
  require(grads.size() == net.params.size(), Err::ShapeMismatch, "Adam: gradient count");
  if (m_.empty()) {
    for (const NamedTensor& p : net.params) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }
  ++t_;
  const float b1t = 1.f - std::pow(beta1_, static_cast<float>(t_));
  const float b2t = 1.f - std::pow(beta2_, static_cast<float>(t_));
  for (size_t i = 0; i < net.params.size(); ++i) {
    TensorF& p = net.params[i].value;
    const TensorF& g = grads[i];
    require(g.same_shape(p), Err::ShapeMismatch, "Adam: gradient shape");
    TensorF& m = m_[i];
    TensorF& v = v_[i];
    for (int64_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.f - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.f - beta2_) * g[j] * g[j];
      const float mhat = m[j] / b1t;
      const float vhat = v[j] / b2t;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

RunLogger::RunLogger(const std::string& path) : path_(path) {
  if (!path_.empty()) {
    fs::create_directories(fs::path(path_).parent_path());
    std::ofstream out(path_, std::ios::trunc);  // start fresh
  }
}

void RunLogger::line(const std::string& json_line) {
  lines_.push_back(json_line);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    out << json_line << "\n";
  }
}

namespace {

json breakdown_json(const LossBreakdown& b) {
  return json{{"total", b.total},       {"percep", b.percep},
              {"content", b.content},   {"style", b.style},
              {"tv", b.tv},             {"res", b.res},
              {"temp", b.temp},         {"rank", b.rank},
              {"student_nuclear", b.student_nuclear}, {"anchor_nuclear", b.anchor_nuclear}};
}

void log_iter(RunLogger* log, int64_t iter, float lr, const LossBreakdown& b) {
  if (!log) return;
  json j{{"event", "iter"}, {"iter", iter}, {"lr", lr}, {"loss", breakdown_json(b)}};
  log->line(j.dump());
}

void log_epoch(RunLogger* log, int epoch, double val_estab) {
  if (!log) return;
  json j{{"event", "epoch"}, {"epoch", epoch}, {"val_estab", val_estab}};
  log->line(j.dump());
}

void check_finite_loss(const LossBreakdown& b, int64_t iter) {
  require(std::isfinite(b.total), Err::DivergedLoss,
          "non-finite total loss at iter " + std::to_string(iter) + " (percep=" +
              std::to_string(b.percep) + ", res=" + std::to_string(b.res) + ", temp=" +
              std::to_string(b.temp) + ", rank=" + std::to_string(b.rank) + ")");
}

struct CropRect {
  int x0 = 0, y0 = 0, w = 0, h = 0;
};

CropRect pick_crop(const TrainingTuple& t, int cw, int ch, Rng& rng) {
  const int H = t.frames[0].dim(1), W = t.frames[0].dim(2);
  require(cw <= W && ch <= H, Err::ConfigInvalid, "crop larger than frames");
  CropRect r;
  r.w = cw;
  r.h = ch;
  r.x0 = W == cw ? 0 : static_cast<int>(rng.uniform_int(0, W - cw));
  r.y0 = H == ch ? 0 : static_cast<int>(rng.uniform_int(0, H - ch));
  return r;
}

TensorF crop_chw(const TensorF& t, const CropRect& r) {
  TensorF out({t.dim(0), r.h, r.w});
  for (int c = 0; c < t.dim(0); ++c)
    for (int y = 0; y < r.h; ++y)
      for (int x = 0; x < r.w; ++x) out.at(c, y, x) = t.at(c, r.y0 + y, r.x0 + x);
  return out;
}

double validation_estab(const Network& net, const Corpus& corpus) {
  if (corpus.eval_scenes.empty()) return 0.0;
  StabilityReport rep =
      evaluate_scenes(arch_name(net.arch), network_stylizer(net), corpus.eval_scenes);
  return rep.sum;
}

std::vector<TensorF> collect_grads(const BoundNetwork<float>& bn) {
  std::vector<TensorF> grads;
  grads.reserve(bn.params.size());
  for (const auto& p : bn.params) grads.push_back(p.grad());
  return grads;
}

}  // namespace

TrainResult train_baseline(const TrainConfig& cfg, const Corpus& corpus, bool use_temporal,
                           Arch arch, RunLogger* log) {
  cfg.validate();
  require(arch == Arch::student || arch == Arch::teacher_noflow, Err::ArchMismatch,
          "train_baseline trains a frame-local net");
  Network net = make_network(arch, cfg.width_multiplier, cfg.seed);
  Adam adam;
  Rng root(cfg.seed);
  TrainResult result;
  int64_t iter = 0;
  const int K = cfg.weights.k;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = root.fork(static_cast<uint64_t>(epoch));
    auto tuples = sample_tuples_corpus(corpus.train, K, cfg.tuples_per_epoch,
                                       erng.next_u64());
    for (auto& tup : tuples) {
      const CropRect r = pick_crop(tup, cfg.crop_width, cfg.crop_height, erng);
      const TrainingTuple ct = crop_tuple(tup, r.x0, r.y0, r.w, r.h);
      const float lr = lr_at(cfg, iter);

      Graph<float> g;
      auto bn = bind_network<float>(g, net, true);
      auto fb = bind_network<float>(g, corpus.features, false);
      std::vector<Graph<float>::Var> outs;
      for (int t = 0; t < K; ++t)
        outs.push_back(trunk_forward<float>(g, bn, g.constant(ct.frames[static_cast<size_t>(t)])));
      LossBreakdown bd;
      auto total = total_loss_var(g, ct, outs, fb, corpus.style, {}, 0.f, cfg.weights,
                                  use_temporal, /*use_residual=*/false, /*use_rank=*/false, &bd);
      check_finite_loss(bd, iter);
      g.backward(total);
      adam.step(net, collect_grads(bn), lr);
      if (iter == 0) result.iter0_total = bd.total;
      result.iters.push_back({iter, lr, bd});
      log_iter(log, iter, lr, bd);
      ++iter;
    }
    const double val = validation_estab(net, corpus);
    result.epoch_val_estab.push_back(val);
    log_epoch(log, epoch, val);
  }
  net.checkpoint_id = compute_checkpoint_id(net);
  result.final_val_estab = result.epoch_val_estab.empty() ? 0.0 : result.epoch_val_estab.back();
  result.net = std::move(net);
  return result;
}

TeacherPair train_teacher(const TrainConfig& cfg, const Corpus& corpus, RunLogger* log) {
  cfg.validate();
  TrainConfig tcfg = cfg;
  if (cfg.teacher_epochs > 0) tcfg.epochs = cfg.teacher_epochs;

  // flow-free teacher: the shared frame-local recipe on the teacher trunk
  TrainConfig nfcfg = tcfg;
  nfcfg.width_multiplier = cfg.teacher_width_multiplier;
  nfcfg.seed = cfg.seed + 101;
  TrainResult noflow = train_baseline(nfcfg, corpus, /*use_temporal=*/false, Arch::teacher_noflow,
                                      log);

  // flow teacher: recurrent 7-channel conditioning, perceptual + temporal
  Network net = make_network(Arch::teacher_flow, cfg.teacher_width_multiplier, cfg.seed + 202);
  Adam adam;
  Rng root(cfg.seed + 202);
  const int K = cfg.weights.k;
  int64_t iter = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    Rng erng = root.fork(static_cast<uint64_t>(epoch));
    auto tuples = sample_tuples_corpus(corpus.train, K, tcfg.tuples_per_epoch, erng.next_u64());
    for (auto& tup : tuples) {
      const CropRect r = pick_crop(tup, tcfg.crop_width, tcfg.crop_height, erng);
      const TrainingTuple ct = crop_tuple(tup, r.x0, r.y0, r.w, r.h);
      const float lr = lr_at(tcfg, iter);

      Graph<float> g;
      auto bn = bind_network<float>(g, net, true);
      auto fb = bind_network<float>(g, corpus.features, false);

      std::vector<Graph<float>::Var> outs;
      TensorF prev_value;
      for (int t = 0; t < K; ++t) {
        // previous output enters as data: truncated backpropagation through time
        TensorF input =
            t == 0 ? assemble_teacher_input(ct.frames[0], nullptr, nullptr, nullptr)
                   : assemble_teacher_input(ct.frames[static_cast<size_t>(t)], &prev_value,
                                            &ct.flows[static_cast<size_t>(t - 1)],
                                            &ct.masks[static_cast<size_t>(t - 1)]);
        auto y = trunk_forward<float>(g, bn, g.constant(input));
        prev_value = y.value();
        outs.push_back(y);
      }

      LossBreakdown bd;
      std::vector<Graph<float>::Var> terms;
      std::vector<float> weights;
      for (int t = 0; t < K; ++t) {
        PerceptualBreakdown pb;
        auto percep = perceptual_loss_var<float>(g, fb, outs[static_cast<size_t>(t)],
                                                 ct.frames[static_cast<size_t>(t)], corpus.style,
                                                 cfg.weights, &pb);
        terms.push_back(percep);
        weights.push_back(1.f);
        bd.content += pb.content;
        bd.style += pb.style;
        bd.tv += pb.tv;
        bd.percep += pb.total;
      }
      for (int t = 1; t < K; ++t) {
        auto lt = temporal_loss_var<float>(
            g, outs[static_cast<size_t>(t)],
            g.constant(outs[static_cast<size_t>(t - 1)].value()),
            ct.flows[static_cast<size_t>(t - 1)].u, ct.flows[static_cast<size_t>(t - 1)].v,
            ct.masks[static_cast<size_t>(t - 1)].m);
        terms.push_back(lt);
        weights.push_back(cfg.weights.lambda_temp);
        bd.temp += lt.scalar();
      }
      auto total = g.wsum(terms, weights);
      bd.total = total.scalar();
      check_finite_loss(bd, iter);
      g.backward(total);
      adam.step(net, collect_grads(bn), lr);
      log_iter(log, iter, lr, bd);
      ++iter;
    }
    log_epoch(log, epoch, validation_estab(net, corpus));
  }
  net.checkpoint_id = compute_checkpoint_id(net);

  TeacherPair pair;
  pair.teacher_flow = std::move(net);
  pair.teacher_flow.frozen = true;
  pair.teacher_noflow = std::move(noflow.net);
  pair.teacher_noflow.frozen = true;
  return pair;
}

FrozenSet prepare_frozen(const TrainConfig& cfg, const Corpus& corpus) {
  FrozenSet out;
  const bool have_teacher =
      !cfg.teacher_checkpoint.empty() && fs::exists(cfg.teacher_checkpoint);
  const bool have_noflow =
      !cfg.teacher_noflow_checkpoint.empty() && fs::exists(cfg.teacher_noflow_checkpoint);
  const bool have_baseline =
      !cfg.baseline_checkpoint.empty() && fs::exists(cfg.baseline_checkpoint);

  if (have_teacher && have_noflow) {
    out.teacher_flow = load_checkpoint_as(cfg.teacher_checkpoint, Arch::teacher_flow);
    out.teacher_noflow = load_checkpoint_as(cfg.teacher_noflow_checkpoint, Arch::teacher_noflow);
  } else {
    require(cfg.auto_build, Err::MissingCheckpoint,
            "teacher checkpoints missing and auto_build disabled (run train-teacher first)");
    TeacherPair pair = train_teacher(cfg, corpus);
    out.teacher_flow = std::move(pair.teacher_flow);
    out.teacher_noflow = std::move(pair.teacher_noflow);
    if (!cfg.teacher_checkpoint.empty()) save_checkpoint(out.teacher_flow, cfg.teacher_checkpoint);
    if (!cfg.teacher_noflow_checkpoint.empty())
      save_checkpoint(out.teacher_noflow, cfg.teacher_noflow_checkpoint);
  }
  if (have_baseline) {
    out.baseline = load_checkpoint_as(cfg.baseline_checkpoint, Arch::student);
  } else {
    require(cfg.auto_build, Err::MissingCheckpoint,
            "baseline checkpoint missing and auto_build disabled (run train-baseline first)");
    // the from-scratch recipe: perceptual terms only
    out.baseline = train_baseline(cfg, corpus, /*use_temporal=*/false).net;
    if (!cfg.baseline_checkpoint.empty()) save_checkpoint(out.baseline, cfg.baseline_checkpoint);
  }
  out.teacher_flow.frozen = true;
  out.teacher_noflow.frozen = true;
  out.baseline.frozen = true;
  return out;
}

const CachedFrame& TeacherCache::get(const std::string& seq_id, int frame) const {
  auto it = entries.find(seq_id);
  require(it != entries.end(), Err::CacheMiss, "no cache entry for sequence " + seq_id);
  require(frame >= 0 && frame < static_cast<int>(it->second.size()), Err::CacheMiss,
          "no cached frame " + std::to_string(frame) + " in " + seq_id);
  return it->second[static_cast<size_t>(frame)];
}

std::string cache_key(const FrozenSet& frozen) {
  return frozen.teacher_flow.checkpoint_id + "|" + frozen.teacher_noflow.checkpoint_id + "|" +
         frozen.baseline.checkpoint_id;
}

namespace {

constexpr char kCacheMagic[8] = {'F', 'K', 'D', 'C', 'A', 'C', 'H', '\0'};

void write_tensor(std::vector<unsigned char>& buf, const TensorF& t) {
  auto push_u32 = [&](uint32_t v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + 4);
  };
  push_u32(static_cast<uint32_t>(t.shape().size()));
  for (int d : t.shape()) push_u32(static_cast<uint32_t>(d));
  const auto* p = reinterpret_cast<const unsigned char*>(t.data());
  buf.insert(buf.end(), p, p + t.size() * 4);
}

TensorF read_tensor(const unsigned char*& p, const unsigned char* end) {
  auto read_u32 = [&]() {
    require(p + 4 <= end, Err::CacheCorrupt, "cache truncated");
    uint32_t v;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  };
  const uint32_t nd = read_u32();
  std::vector<int> shape;
  for (uint32_t i = 0; i < nd; ++i) shape.push_back(static_cast<int>(read_u32()));
  const int64_t count = Tensor<float>::count(shape);
  require(p + count * 4 <= end, Err::CacheCorrupt, "cache truncated");
  std::vector<float> data(static_cast<size_t>(count));
  std::memcpy(data.data(), p, static_cast<size_t>(count) * 4);
  p += count * 4;
  return TensorF::from(shape, std::move(data));
}

bool try_load_cache_file(const std::string& path, const std::string& key,
                         std::vector<CachedFrame>& frames) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 16) return false;
  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size() - 4));
  // checksum mismatch -> treat as corrupt and rebuild
  if (static_cast<uint32_t>(crc) != stored_crc) return false;

  const unsigned char* p = bytes.data();
  const unsigned char* end = bytes.data() + bytes.size() - 4;
  if (std::memcmp(p, kCacheMagic, 8) != 0) return false;
  p += 8;
  auto read_u32 = [&]() {
    uint32_t v;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  };
  const uint32_t key_len = read_u32();
  if (p + key_len > end) return false;
  std::string file_key(reinterpret_cast<const char*>(p), key_len);
  p += key_len;
  if (file_key != key) return false;  // frozen checkpoints changed: invalidate
  const uint32_t n = read_u32();
  frames.clear();
  for (uint32_t i = 0; i < n; ++i) {
    CachedFrame f;
    f.delta_t = read_tensor(p, end);
    f.baseline = read_tensor(p, end);
    f.teacher_out = read_tensor(p, end);
    frames.push_back(std::move(f));
  }
  return true;
}

void save_cache_file(const std::string& path, const std::string& key,
                     const std::vector<CachedFrame>& frames) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kCacheMagic, kCacheMagic + 8);
  auto push_u32 = [&](uint32_t v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + 4);
  };
  push_u32(static_cast<uint32_t>(key.size()));
  buf.insert(buf.end(), key.begin(), key.end());
  push_u32(static_cast<uint32_t>(frames.size()));
  for (const CachedFrame& f : frames) {
    write_tensor(buf, f.delta_t);
    write_tensor(buf, f.baseline);
    write_tensor(buf, f.teacher_out);
  }
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, buf.data(), static_cast<uInt>(buf.size()));
  push_u32(static_cast<uint32_t>(crc));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace

TeacherCache cache_teacher_outputs(const TrainConfig& cfg, const Corpus& corpus,
                                   const FrozenSet& frozen) {
  TeacherCache cache;
  cache.key = cache_key(frozen);
  if (!cfg.cache_dir.empty()) fs::create_directories(cfg.cache_dir);
  for (const FrameSequence& seq : corpus.train) {
    const std::string path =
        cfg.cache_dir.empty() ? "" : (fs::path(cfg.cache_dir) / (seq.source_id + ".tc")).string();
    std::vector<CachedFrame> frames;
    if (!path.empty() && try_load_cache_file(path, cache.key, frames)) {
      cache.entries[seq.source_id] = std::move(frames);
      continue;
    }
    const std::vector<TensorF> teacher_outs = stylize_sequence(frozen.teacher_flow, seq);
    for (int t = 0; t < seq.num_frames(); ++t) {
      CachedFrame f;
      f.teacher_out = teacher_outs[static_cast<size_t>(t)];
      const TensorF noflow_out =
          teacher_noflow_forward(frozen.teacher_noflow, seq.frames[static_cast<size_t>(t)]);
      f.delta_t = TensorF(f.teacher_out.shape());
      kernels::active().vsub(f.delta_t.size(), f.teacher_out.data(), noflow_out.data(),
                             f.delta_t.data());
      f.baseline = student_forward(frozen.baseline, seq.frames[static_cast<size_t>(t)]);
      frames.push_back(std::move(f));
    }
    if (!path.empty()) save_cache_file(path, cache.key, frames);
    cache.entries[seq.source_id] = std::move(frames);
  }
  return cache;
}

TrainResult distill(const TrainConfig& cfg, const Corpus& corpus, const FrozenSet& frozen,
                    const TeacherCache& cache, RunLogger* log) {
  cfg.validate();
  require(cache.key == cache_key(frozen), Err::CacheMiss,
          "teacher cache was built against different frozen checkpoints");
  Network net = make_network(Arch::student, cfg.width_multiplier, cfg.seed);
  Adam adam;
  Rng root(cfg.seed);
  TrainResult result;
  const int K = cfg.weights.k;
  const bool use_residual = cfg.weights.lambda_res > 0.f;
  const bool use_rank = cfg.weights.lambda_rank > 0.f;
  int64_t iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = root.fork(static_cast<uint64_t>(epoch));
    auto tuples = sample_tuples_corpus(corpus.train, K, cfg.tuples_per_epoch, erng.next_u64());
    for (auto& tup : tuples) {
      const CropRect r = pick_crop(tup, cfg.crop_width, cfg.crop_height, erng);
      const TrainingTuple ct = crop_tuple(tup, r.x0, r.y0, r.w, r.h);
      const float lr = lr_at(cfg, iter);

      std::vector<ResidualTarget> targets;
      std::vector<TensorF> teacher_crop;
      if (use_residual || cfg.rank_anchor == RankAnchor::teacher) {
        for (int t = 0; t < K; ++t) {
          const CachedFrame& cf = cache.get(tup.source_id, tup.start + t);
          if (use_residual)
            targets.push_back({crop_chw(cf.delta_t, r), crop_chw(cf.baseline, r)});
          if (cfg.rank_anchor == RankAnchor::teacher)
            teacher_crop.push_back(crop_chw(cf.teacher_out, r));
        }
      }

      float anchor_nuclear = 0.f;
      if (use_rank) {
        const RankMatrix anchor =
            cfg.rank_anchor == RankAnchor::input
                ? build_rank_matrix(ct.frames, ct)
                : build_rank_matrix(teacher_crop, ct);
        anchor_nuclear = anchor.nuclear;
      }

      Graph<float> g;
      auto bn = bind_network<float>(g, net, true);
      auto fb = bind_network<float>(g, corpus.features, false);
      std::vector<Graph<float>::Var> outs;
      for (int t = 0; t < K; ++t)
        outs.push_back(trunk_forward<float>(g, bn, g.constant(ct.frames[static_cast<size_t>(t)])));
      LossBreakdown bd;
      auto total = total_loss_var(g, ct, outs, fb, corpus.style, targets, anchor_nuclear,
                                  cfg.weights, cfg.use_temporal, use_residual, use_rank, &bd);
      check_finite_loss(bd, iter);
      g.backward(total);
      adam.step(net, collect_grads(bn), lr);
      if (iter == 0) result.iter0_total = bd.total;
      result.iters.push_back({iter, lr, bd});
      log_iter(log, iter, lr, bd);
      ++iter;
    }
    const double val = validation_estab(net, corpus);
    result.epoch_val_estab.push_back(val);
    log_epoch(log, epoch, val);
  }
  net.checkpoint_id = compute_checkpoint_id(net);
  result.final_val_estab = result.epoch_val_estab.empty() ? 0.0 : result.epoch_val_estab.back();
  result.net = std::move(net);
  return result;
}

std::string params_checksum(const Network& net) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const NamedTensor& t : net.params)
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.value.data()),
                static_cast<uInt>(t.value.size() * 4));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

}  // namespace flowkd
