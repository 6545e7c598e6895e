#include "flowkd/videodata.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

#include "flowkd/error.hpp"
#include "flowkd/image_io.hpp"
#include "flowkd/rng.hpp"

namespace fs = std::filesystem;

namespace flowkd {

namespace {
constexpr float kFloMagic = 202021.25f;

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

// smoothed per-channel value noise in [lo, hi]
TensorF noise_texture(int c, int h, int w, Rng& rng, float lo, float hi) {
  TensorF t({c, h, w});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  // two 3x3 box blur passes per channel
  for (int pass = 0; pass < 2; ++pass) {
    TensorF s = t;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float acc = 0.f;
          int cnt = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              acc += s.at(ch, yy, xx);
              ++cnt;
            }
          t.at(ch, y, x) = acc / static_cast<float>(cnt);
        }
  }
  float mn = 1e9f, mx = -1e9f;
  for (int64_t i = 0; i < t.size(); ++i) {
    mn = std::min(mn, t[i]);
    mx = std::max(mx, t[i]);
  }
  const float span = mx > mn ? mx - mn : 1.f;
  for (int64_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * (t[i] - mn) / span;
  return t;
}

std::vector<std::string> sorted_files(const fs::path& dir, const std::string& ext) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

void FrameSequence::validate() const {
  require(!frames.empty(), Err::ShapeMismatch, "sequence has no frames");
  const int h = height(), w = width();
  for (const TensorF& f : frames) {
    require(f.ndim() == 3 && f.dim(0) == 3 && f.dim(1) == h && f.dim(2) == w, Err::ShapeMismatch,
            "frame shape mismatch in " + source_id);
    for (int64_t i = 0; i < f.size(); ++i)
      require(std::isfinite(f[i]) && f[i] >= 0.f && f[i] <= 1.f, Err::NonFinite,
              "frame value outside [0,1] in " + source_id);
  }
  require(flows.size() == frames.size() - 1 && masks.size() == flows.size(), Err::CountMismatch,
          "flows/masks count must be frames-1 in " + source_id);
  for (const FlowField& f : flows)
    require(f.u.dim(0) == h && f.u.dim(1) == w && f.v.same_shape(f.u), Err::ShapeMismatch,
            "flow shape mismatch");
  for (const OcclusionMask& m : masks) {
    require(m.m.dim(0) == h && m.m.dim(1) == w, Err::ShapeMismatch, "mask shape mismatch");
    for (int64_t i = 0; i < m.m.size(); ++i)
      require(m.m[i] == 0.f || m.m[i] == 1.f, Err::ShapeMismatch, "mask not binary");
  }
  if (!reverse_flows.empty())
    require(reverse_flows.size() == flows.size() && reverse_masks.size() == flows.size(),
            Err::CountMismatch, "reverse flow/mask count mismatch");
}

FlowField read_flo(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, Err::UnreadableFile, "cannot open " + path);
  float magic = 0.f;
  int32_t w = 0, h = 0;
  require(std::fread(&magic, 4, 1, fp.get()) == 1, Err::TruncatedFile, path);
  require(magic == kFloMagic, Err::BadMagic, "not a .flo file: " + path);
  require(std::fread(&w, 4, 1, fp.get()) == 1 && std::fread(&h, 4, 1, fp.get()) == 1,
          Err::TruncatedFile, path);
  require(w > 0 && h > 0 && w < 100000 && h < 100000, Err::TruncatedFile,
          "implausible dimensions in " + path);
  std::vector<float> payload(static_cast<size_t>(w) * h * 2);
  const size_t got = std::fread(payload.data(), 4, payload.size(), fp.get());
  require(got == payload.size(), Err::TruncatedFile, "payload short in " + path);
  // exactly 12 + 8*W*H bytes
  require(std::fgetc(fp.get()) == EOF, Err::TruncatedFile, "trailing bytes in " + path);

  FlowField f{TensorF({h, w}), TensorF({h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      f.u.at(y, x) = payload[(static_cast<size_t>(y) * w + x) * 2];
      f.v.at(y, x) = payload[(static_cast<size_t>(y) * w + x) * 2 + 1];
    }
  return f;
}

void write_flo(const std::string& path, const FlowField& flow) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, Err::UnreadableFile, "cannot write " + path);
  const int32_t w = flow.width(), h = flow.height();
  std::fwrite(&kFloMagic, 4, 1, fp.get());
  std::fwrite(&w, 4, 1, fp.get());
  std::fwrite(&h, 4, 1, fp.get());
  std::vector<float> payload(static_cast<size_t>(w) * h * 2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      payload[(static_cast<size_t>(y) * w + x) * 2] = flow.u.at(y, x);
      payload[(static_cast<size_t>(y) * w + x) * 2 + 1] = flow.v.at(y, x);
    }
  require(std::fwrite(payload.data(), 4, payload.size(), fp.get()) == payload.size(),
          Err::UnreadableFile, "short write to " + path);
}

FrameSequence synth_sequence(const SceneSpec& spec) {
  require(spec.num_frames >= 2, Err::SequenceTooShort, "synth needs at least 2 frames");
  const int W = spec.width, H = spec.height;
  Rng rng(spec.seed);

  std::vector<SpriteSpec> sprites = spec.sprites;
  if (sprites.empty()) {
    for (int i = 0; i < spec.num_sprites; ++i) {
      SpriteSpec s;
      s.w = static_cast<int>(rng.uniform_int(std::max(4, W / 8), std::max(5, W / 3)));
      s.h = static_cast<int>(rng.uniform_int(std::max(4, H / 8), std::max(5, H / 3)));
      s.x0 = static_cast<int>(rng.uniform_int(0, std::max(0, W - s.w)));
      s.y0 = static_cast<int>(rng.uniform_int(0, std::max(0, H - s.h)));
      while (s.vx == 0 && s.vy == 0) {
        s.vx = static_cast<int>(rng.uniform_int(-spec.max_speed, spec.max_speed));
        s.vy = static_cast<int>(rng.uniform_int(-spec.max_speed, spec.max_speed));
      }
      sprites.push_back(s);
    }
  }
  for (const SpriteSpec& s : sprites)
    require(s.w <= W && s.h <= H && s.w > 0 && s.h > 0, Err::SpriteTooLarge,
            "sprite does not fit the frame");

  TensorF background = noise_texture(3, H, W, rng, 0.08f, 0.55f);
  std::vector<TensorF> textures;
  for (size_t i = 0; i < sprites.size(); ++i)
    textures.push_back(noise_texture(3, sprites[i].h, sprites[i].w, rng, 0.35f, 0.95f));

  // owner[t](y,x): 0 = background, i+1 = sprite i (later sprites on top)
  auto render = [&](int t, TensorF& frame, std::vector<int>& owner) {
    frame = background;
    owner.assign(static_cast<size_t>(H) * W, 0);
    for (size_t i = 0; i < sprites.size(); ++i) {
      const SpriteSpec& s = sprites[i];
      const int px = s.x0 + t * s.vx, py = s.y0 + t * s.vy;
      for (int
               yy = std::max(0, py);
           yy < std::min(H, py + s.h); ++yy)
        for (int xx = std::max(0, px); xx < std::min(W, px + s.w); ++xx) {
          owner[static_cast<size_t>(yy) * W + xx] = static_cast<int>(i) + 1;
          for (int c = 0; c < 3; ++c) frame.at(c, yy, xx) = textures[i].at(c, yy - py, xx - px);
        }
    }
  };

  FrameSequence seq;
  seq.source_id = "synth-" + std::to_string(spec.seed);
  std::vector<std::vector<int>> owners(static_cast<size_t>(spec.num_frames));
  for (int t = 0; t < spec.num_frames; ++t) {
    TensorF frame;
    render(t, frame, owners[static_cast<size_t>(t)]);
    seq.frames.push_back(std::move(frame));
  }

  auto velocity_of = [&](int owner_id) {
    if (owner_id == 0) return std::pair<int, int>{0, 0};
    const SpriteSpec& s = sprites[static_cast<size_t>(owner_id - 1)];
    return std::pair<int, int>{s.vx, s.vy};
  };

  for (int t = 0; t + 1 < spec.num_frames; ++t) {
    const std::vector<int>& own_prev = owners[static_cast<size_t>(t)];
    const std::vector<int>& own_next = owners[static_cast<size_t>(t + 1)];
    FlowField flow{TensorF({H, W}), TensorF({H, W})};
    OcclusionMask mask{TensorF({H, W})};
    FlowField rflow{TensorF({H, W}), TensorF({H, W})};
    OcclusionMask rmask{TensorF({H, W})};
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        // forward step geometry: frame t+1 pixel looks back into frame t
        {
          const int o = own_next[static_cast<size_t>(y) * W + x];
          auto [vx, vy] = velocity_of(o);
          flow.u.at(y, x) = static_cast<float>(-vx);
          flow.v.at(y, x) = static_cast<float>(-vy);
          const int sx = x - vx, sy = y - vy;
          const bool traceable = sx >= 0 && sx < W && sy >= 0 && sy < H &&
                                 own_prev[static_cast<size_t>(sy) * W + sx] == o;
          mask.m.at(y, x) = traceable ? 1.f : 0.f;
        }
        // reverse geometry: frame t pixel looks forward into frame t+1
        {
          const int o = own_prev[static_cast<size_t>(y) * W + x];
          auto [vx, vy] = velocity_of(o);
          rflow.u.at(y, x) = static_cast<float>(vx);
          rflow.v.at(y, x) = static_cast<float>(vy);
          const int dx = x + vx, dy = y + vy;
          const bool visible = dx >= 0 && dx < W && dy >= 0 && dy < H &&
                               own_next[static_cast<size_t>(dy) * W + dx] == o;
          rmask.m.at(y, x) = visible ? 1.f : 0.f;
        }
      }
    seq.flows.push_back(std::move(flow));
    seq.masks.push_back(std::move(mask));
    seq.reverse_flows.push_back(std::move(rflow));
    seq.reverse_masks.push_back(std::move(rmask));
  }
  return seq;
}

TrainingTuple make_tuple(const FrameSequence& seq, int start, int K) {
  require(K >= 2, Err::SequenceTooShort, "tuple needs K >= 2");
  require(start >= 0 && start + K <= seq.num_frames(), Err::IndexOutOfRange, "tuple start");
  TrainingTuple t;
  t.anchor = K / 2;
  t.source_id = seq.source_id;
  t.start = start;
  for (int i = 0; i < K; ++i) t.frames.push_back(seq.frames[static_cast<size_t>(start + i)]);
  for (int i = 0; i + 1 < K; ++i) {
    t.flows.push_back(seq.flows[static_cast<size_t>(start + i)]);
    t.masks.push_back(seq.masks[static_cast<size_t>(start + i)]);
    if (seq.has_reverse()) {
      t.reverse_flows.push_back(seq.reverse_flows[static_cast<size_t>(start + i)]);
      t.reverse_masks.push_back(seq.reverse_masks[static_cast<size_t>(start + i)]);
    }
  }
  return t;
}

std::vector<TrainingTuple> sample_tuples(const FrameSequence& seq, int K, int count,
                                         uint64_t seed) {
  require(seq.num_frames() >= K, Err::SequenceTooShort,
          "sequence shorter than K=" + std::to_string(K));
  Rng rng(seed);
  std::vector<TrainingTuple> out;
  out.reserve(static_cast<size_t>(count));
  const int hi = seq.num_frames() - K;
  for (int i = 0; i < count; ++i)
    out.push_back(make_tuple(seq, static_cast<int>(rng.uniform_int(0, hi)), K));
  return out;
}

std::vector<TrainingTuple> sample_tuples_corpus(const std::vector<FrameSequence>& corpus, int K,
                                                int count, uint64_t seed) {
  require(!corpus.empty(), Err::SequenceTooShort, "empty corpus");
  for (const FrameSequence& s : corpus)
    require(s.num_frames() >= K, Err::SequenceTooShort, "sequence shorter than K");
  Rng rng(seed);
  std::vector<TrainingTuple> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto& seq = corpus[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(corpus.size()) - 1))];
    out.push_back(make_tuple(seq, static_cast<int>(rng.uniform_int(0, seq.num_frames() - K)), K));
  }
  return out;
}

namespace {

TensorF crop3(const TensorF& t, int x0, int y0, int w, int h) {
  TensorF out({t.dim(0), h, w});
  for (int c = 0; c < t.dim(0); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = t.at(c, y0 + y, x0 + x);
  return out;
}

TensorF crop2(const TensorF& t, int x0, int y0, int w, int h) {
  TensorF out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = t.at(y0 + y, x0 + x);
  return out;
}

}  // namespace

TrainingTuple crop_tuple(const TrainingTuple& t, int x0, int y0, int w, int h) {
  require(x0 >= 0 && y0 >= 0 && x0 + w <= t.frames[0].dim(2) && y0 + h <= t.frames[0].dim(1),
          Err::IndexOutOfRange, "crop outside frame");
  TrainingTuple out;
  out.anchor = t.anchor;
  out.source_id = t.source_id;
  out.start = t.start;
  for (const TensorF& f : t.frames) out.frames.push_back(crop3(f, x0, y0, w, h));
  for (size_t i = 0; i < t.flows.size(); ++i) {
    out.flows.push_back({crop2(t.flows[i].u, x0, y0, w, h), crop2(t.flows[i].v, x0, y0, w, h)});
    out.masks.push_back({crop2(t.masks[i].m, x0, y0, w, h)});
    if (t.has_reverse()) {
      out.reverse_flows.push_back(
          {crop2(t.reverse_flows[i].u, x0, y0, w, h), crop2(t.reverse_flows[i].v, x0, y0, w, h)});
      out.reverse_masks.push_back({crop2(t.reverse_masks[i].m, x0, y0, w, h)});
    }
  }
  return out;
}

FrameSequence load_sequence_dir(const std::string& dir) {
  const fs::path root(dir);
  require(fs::is_directory(root), Err::UnreadableFile, "not a directory: " + dir);
  auto frame_files = sorted_files(root / "frames", ".png");
  auto flow_files = sorted_files(root / "flow", ".flo");
  auto mask_files = sorted_files(root / "occlusions", ".png");
  require(!frame_files.empty(), Err::UnreadableFile, "no frames in " + dir);
  require(flow_files.size() == frame_files.size() - 1, Err::CountMismatch,
          "want frames-1 flow files, got " + std::to_string(flow_files.size()));
  require(mask_files.size() == flow_files.size(), Err::CountMismatch,
          "want frames-1 occlusion files, got " + std::to_string(mask_files.size()));

  FrameSequence seq;
  seq.source_id = root.filename().string();
  for (const auto& f : frame_files) seq.frames.push_back(read_png_rgb(f));
  for (const auto& f : flow_files) seq.flows.push_back(read_flo(f));
  for (const auto& f : mask_files) {
    TensorF g = read_png_gray(f);
    // 0 = occluded, 255 = traceable on disk; threshold at 128
    for (int64_t i = 0; i < g.size(); ++i) g[i] = g[i] >= 128.f / 255.f ? 1.f : 0.f;
    seq.masks.push_back({std::move(g)});
  }

  auto rflow_files = sorted_files(root / "flow_rev", ".flo");
  auto rmask_files = sorted_files(root / "occlusions_rev", ".png");
  if (!rflow_files.empty() || !rmask_files.empty()) {
    require(rflow_files.size() == seq.flows.size() && rmask_files.size() == seq.flows.size(),
            Err::CountMismatch, "reverse flow/mask file count mismatch in " + dir);
    for (const auto& f : rflow_files) seq.reverse_flows.push_back(read_flo(f));
    for (const auto& f : rmask_files) {
      TensorF g = read_png_gray(f);
      for (int64_t i = 0; i < g.size(); ++i) g[i] = g[i] >= 128.f / 255.f ? 1.f : 0.f;
      seq.reverse_masks.push_back({std::move(g)});
    }
  }
  seq.validate();
  return seq;
}

void save_sequence_dir(const FrameSequence& seq, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "frames");
  fs::create_directories(root / "flow");
  fs::create_directories(root / "occlusions");
  if (seq.has_reverse()) {
    fs::create_directories(root / "flow_rev");
    fs::create_directories(root / "occlusions_rev");
  }
  char name[32];
  for (size_t i = 0; i < seq.frames.size(); ++i) {
    std::snprintf(name, sizeof name, "frame_%04zu.png", i);
    write_png_rgb((root / "frames" / name).string(), seq.frames[i]);
  }
  for (size_t i = 0; i < seq.flows.size(); ++i) {
    std::snprintf(name, sizeof name, "flow_%04zu.flo", i);
    write_flo((root / "flow" / name).string(), seq.flows[i]);
    std::snprintf(name, sizeof name, "occ_%04zu.png", i);
    write_png_gray((root / "occlusions" / name).string(), seq.masks[i].m);
    if (seq.has_reverse()) {
      std::snprintf(name, sizeof name, "flow_%04zu.flo", i);
      write_flo((root / "flow_rev" / name).string(), seq.reverse_flows[i]);
      std::snprintf(name, sizeof name, "occ_%04zu.png", i);
      write_png_gray((root / "occlusions_rev" / name).string(), seq.reverse_masks[i].m);
    }
  }
}

}  // namespace flowkd
