#include "flowkd/networks.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include "flowkd/error.hpp"
#include "flowkd/rng.hpp"

namespace flowkd {

namespace {

constexpr char kMagic[8] = {'F', 'K', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

int round_to4(double x) {
  int r = static_cast<int>(std::lround(x / 4.0)) * 4;
  return std::max(4, r);
}

TensorF he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  TensorF t(std::move(shape));
  const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = stddev * static_cast<float>(rng.normal());
  return t;
}

void add_conv_block(std::vector<NamedTensor>& out, const std::string& name, int oc, int ic, int k,
                    Rng& rng, bool with_norm) {
  out.push_back({name + ".w", he_normal({oc, ic, k, k}, ic * k * k, rng)});
  out.push_back({name + ".b", TensorF({oc})});
  if (with_norm) {
    out.push_back({name + ".g", TensorF({oc}, 1.f)});
    out.push_back({name + ".be", TensorF({oc})});
  }
}

struct ByteWriter {
  std::vector<unsigned char> bytes;
  void raw(const void* p, size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct ByteReader {
  const unsigned char* p;
  const unsigned char* end;
  void raw(void* out, size_t n) {
    require(p + n <= end, Err::CorruptFile, "checkpoint truncated");
    std::memcpy(out, p, n);
    p += n;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    raw(&v, 8);
    return v;
  }
  float f32() {
    float v;
    raw(&v, 4);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    require(p + n <= end, Err::CorruptFile, "checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    return s;
  }
};

void serialize_body(const Network& net, ByteWriter& w) {
  w.raw(kMagic, 8);
  w.u32(kVersion);
  w.bytes.push_back(static_cast<unsigned char>(net.arch));
  w.f32(net.width_multiplier);
  w.u64(net.init_seed);
  w.str(net.checkpoint_id);
  w.u32(static_cast<uint32_t>(net.params.size()));
  for (const NamedTensor& t : net.params) {
    w.str(t.name);
    w.u32(static_cast<uint32_t>(t.value.shape().size()));
    for (int d : t.value.shape()) w.u32(static_cast<uint32_t>(d));
    w.u64(static_cast<uint64_t>(t.value.size()));
    w.raw(t.value.data(), static_cast<size_t>(t.value.size()) * 4);
  }
}

}  // namespace

const char* arch_name(Arch a) {
  switch (a) {
    case Arch::student: return "student";
    case Arch::teacher_flow: return "teacher-flow";
    case Arch::teacher_noflow: return "teacher-noflow";
    case Arch::features: return "features";
  }
  return "?";
}

const TensorF& Network::param(const std::string& name) const {
  for (const NamedTensor& t : params)
    if (t.name == name) return t.value;
  fail(Err::UnknownLayer, "no parameter named " + name);
}

TrunkPlan trunk_plan(float wm) {
  TrunkPlan p;
  p.c1 = round_to4(32.0 * wm);
  p.c2 = round_to4(64.0 * wm);
  p.c3 = round_to4(128.0 * wm);
  p.res_blocks = std::max(1, static_cast<int>(std::lround(5.0 * wm)));
  p.stem_kernel = wm >= 0.75f ? 9 : 5;
  return p;
}

Network make_network(Arch arch, float width_multiplier, uint64_t seed) {
  Network net;
  net.arch = arch;
  net.width_multiplier = width_multiplier;
  net.init_seed = seed;
  Rng rng(seed);
  if (arch == Arch::features) {
    // fixed random conv stack; a pretrained checkpoint can replace it
    add_conv_block(net.params, "f1", 16, 3, 3, rng, false);
    add_conv_block(net.params, "f2", 32, 16, 3, rng, false);
    add_conv_block(net.params, "f3", 64, 32, 3, rng, false);
    add_conv_block(net.params, "f4", 64, 64, 3, rng, false);
    net.frozen = true;
  } else {
    const TrunkPlan p = trunk_plan(width_multiplier);
    const int in_c = arch == Arch::teacher_flow ? 7 : 3;
    add_conv_block(net.params, "enc0", p.c1, in_c, p.stem_kernel, rng, true);
    add_conv_block(net.params, "enc1", p.c2, p.c1, 3, rng, true);
    add_conv_block(net.params, "enc2", p.c3, p.c2, 3, rng, true);
    for (int i = 0; i < p.res_blocks; ++i) {
      add_conv_block(net.params, "res" + std::to_string(i) + ".c0", p.c3, p.c3, 3, rng, true);
      add_conv_block(net.params, "res" + std::to_string(i) + ".c1", p.c3, p.c3, 3, rng, true);
    }
    add_conv_block(net.params, "dec0", p.c2, p.c3, 3, rng, true);
    add_conv_block(net.params, "dec1", p.c1, p.c2, 3, rng, true);
    add_conv_block(net.params, "out", 3, p.c1, p.stem_kernel, rng, false);
  }
  net.checkpoint_id = compute_checkpoint_id(net);
  return net;
}

std::string compute_checkpoint_id(const Network& net) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const uint8_t a = static_cast<uint8_t>(net.arch);
  crc = crc32(crc, &a, 1);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(&net.width_multiplier), 4);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(&net.init_seed), 8);
  for (const NamedTensor& t : net.params) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.name.data()),
                static_cast<uInt>(t.name.size()));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.value.data()),
                static_cast<uInt>(t.value.size() * 4));
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

template <typename T>
BoundNetwork<T> bind_network(Graph<T>& g, const Network& net, bool trainable) {
  require(!(trainable && net.frozen), Err::ArchMismatch,
          "frozen network cannot be bound as trainable");
  BoundNetwork<T> bn;
  bn.net = &net;
  for (const NamedTensor& t : net.params) {
    if constexpr (std::is_same_v<T, float>) {
      bn.params.push_back(g.leaf(t.value, trainable));
    } else {
      bn.params.push_back(g.leaf(t.value.template cast<T>(), trainable));
    }
  }
  return bn;
}

namespace {

template <typename T>
typename Graph<T>::Var conv_in_relu(Graph<T>& g, const BoundNetwork<T>& bn,
                                    const std::string& name, typename Graph<T>::Var x, int stride,
                                    bool with_relu) {
  auto h = g.conv2d(x, bn.param(name + ".w"), bn.param(name + ".b"), stride, Pad::reflect);
  h = g.instance_norm(h, bn.param(name + ".g"), bn.param(name + ".be"));
  return with_relu ? g.relu(h) : h;
}

}  // namespace

template <typename T>
typename Graph<T>::Var trunk_forward(Graph<T>& g, const BoundNetwork<T>& bn,
                                     typename Graph<T>::Var x) {
  const Network& net = *bn.net;
  require(net.arch != Arch::features, Err::ArchMismatch, "trunk_forward on feature net");
  require(x.value().ndim() == 3 && x.value().dim(0) == net.in_channels(), Err::ShapeMismatch,
          "trunk input channels");
  require(x.value().dim(1) % 4 == 0 && x.value().dim(2) % 4 == 0, Err::ShapeMismatch,
          "trunk input H and W must be divisible by 4");
  const TrunkPlan p = trunk_plan(net.width_multiplier);
  auto h = conv_in_relu(g, bn, "enc0", x, 1, true);
  h = conv_in_relu(g, bn, "enc1", h, 2, true);
  h = conv_in_relu(g, bn, "enc2", h, 2, true);
  for (int i = 0; i < p.res_blocks; ++i) {
    const std::string rn = "res" + std::to_string(i);
    auto r = conv_in_relu(g, bn, rn + ".c0", h, 1, true);
    r = conv_in_relu(g, bn, rn + ".c1", r, 1, false);
    h = g.add(h, r);
  }
  h = conv_in_relu(g, bn, "dec0", g.upsample_nearest2(h), 1, true);
  h = conv_in_relu(g, bn, "dec1", g.upsample_nearest2(h), 1, true);
  auto y = g.conv2d(h, bn.param("out.w"), bn.param("out.b"), 1, Pad::reflect);
  return g.sigmoid(y);
}

const std::vector<std::string> kFeatureLayers = {"relu1", "relu2", "relu3", "relu4"};

template <typename T>
std::vector<std::pair<std::string, typename Graph<T>::Var>> feature_forward(
    Graph<T>& g, const BoundNetwork<T>& bn, typename Graph<T>::Var x,
    const std::vector<std::string>& layers) {
  require(bn.net->arch == Arch::features, Err::ArchMismatch, "feature_forward needs features net");
  require(bn.net->frozen, Err::ArchMismatch, "feature net must be frozen");
  for (const std::string& l : layers)
    require(std::find(kFeatureLayers.begin(), kFeatureLayers.end(), l) != kFeatureLayers.end(),
            Err::UnknownLayer, "unknown feature layer " + l);
  std::vector<std::pair<std::string, typename Graph<T>::Var>> out;
  auto h = x;
  const char* names[4] = {"f1", "f2", "f3", "f4"};
  for (int i = 0; i < 4; ++i) {
    const std::string blk = names[i];
    h = g.relu(g.conv2d(h, bn.param(blk + ".w"), bn.param(blk + ".b"), i == 0 ? 1 : 2, Pad::zero));
    const std::string tap = kFeatureLayers[static_cast<size_t>(i)];
    if (std::find(layers.begin(), layers.end(), tap) != layers.end()) out.emplace_back(tap, h);
  }
  // preserve requested order
  std::vector<std::pair<std::string, typename Graph<T>::Var>> ordered;
  for (const std::string& l : layers)
    for (auto& kv : out)
      if (kv.first == l) ordered.push_back(kv);
  return ordered;
}

template BoundNetwork<float> bind_network<float>(Graph<float>&, const Network&, bool);
template BoundNetwork<double> bind_network<double>(Graph<double>&, const Network&, bool);
template Graph<float>::Var trunk_forward<float>(Graph<float>&, const BoundNetwork<float>&,
                                                Graph<float>::Var);
template Graph<double>::Var trunk_forward<double>(Graph<double>&, const BoundNetwork<double>&,
                                                  Graph<double>::Var);
template std::vector<std::pair<std::string, Graph<float>::Var>> feature_forward<float>(
    Graph<float>&, const BoundNetwork<float>&, Graph<float>::Var,
    const std::vector<std::string>&);
template std::vector<std::pair<std::string, Graph<double>::Var>> feature_forward<double>(
    Graph<double>&, const BoundNetwork<double>&, Graph<double>::Var,
    const std::vector<std::string>&);

namespace {

TensorF run_trunk(const Network& net, const TensorF& input) {
  Graph<float> g;
  auto bn = bind_network(g, net, false);
  auto y = trunk_forward(g, bn, g.constant(input));
  TensorF out = y.value();
  require(out.all_finite(), Err::NonFiniteOutput, "non-finite stylized output");
  return out;
}

}  // namespace

TensorF student_forward(const Network& net, const TensorF& frame) {
  require(net.arch == Arch::student, Err::ArchMismatch, "student_forward needs a student net");
  return run_trunk(net, frame);
}

TensorF teacher_noflow_forward(const Network& net, const TensorF& frame) {
  require(net.arch == Arch::teacher_noflow, Err::ArchMismatch,
          "teacher_noflow_forward needs a teacher-noflow net");
  return run_trunk(net, frame);
}

TensorF assemble_teacher_input(const TensorF& frame, const TensorF* prev_stylized,
                               const FlowField* flow, const OcclusionMask* mask) {
  const int H = frame.dim(1), W = frame.dim(2);
  TensorF input({7, H, W});
  std::copy(frame.data(), frame.data() + frame.size(), input.data());
  if (prev_stylized) {
    require(flow != nullptr && mask != nullptr, Err::MissingFlow,
            "non-first frame needs flow and mask");
    TensorF warped(frame.shape());
    detail::warp_fwd(*prev_stylized, flow->u, flow->v, warped, static_cast<TensorF*>(nullptr));
    std::copy(warped.data(), warped.data() + warped.size(), input.data() + frame.size());
    std::copy(mask->m.data(), mask->m.data() + mask->m.size(),
              input.data() + 2 * frame.size());
  }
  return input;
}

TensorF teacher_forward(const Network& net, const TensorF& frame, const TensorF* prev_stylized,
                        const FlowField* flow, const OcclusionMask* mask) {
  require(net.arch == Arch::teacher_flow, Err::ArchMismatch, "teacher_forward needs teacher-flow");
  return run_trunk(net, assemble_teacher_input(frame, prev_stylized, flow, mask));
}

FeatureStack feature_extract(const Network& net, const TensorF& image,
                             const std::vector<std::string>& layers) {
  require(net.arch == Arch::features, Err::ArchMismatch, "feature_extract needs features net");
  Graph<float> g;
  auto bn = bind_network(g, net, false);
  auto maps = feature_forward(g, bn, g.constant(image), layers);
  FeatureStack fs;
  for (auto& kv : maps) fs.maps.push_back({kv.first, kv.second.value()});
  return fs;
}

std::vector<TensorF> stylize_sequence(const Network& net, const FrameSequence& seq) {
  std::vector<TensorF> out;
  out.reserve(seq.frames.size());
  if (net.arch == Arch::teacher_flow) {
    for (size_t t = 0; t < seq.frames.size(); ++t) {
      if (t == 0) {
        out.push_back(teacher_forward(net, seq.frames[0], nullptr, nullptr, nullptr));
      } else {
        out.push_back(teacher_forward(net, seq.frames[t], &out[t - 1], &seq.flows[t - 1],
                                      &seq.masks[t - 1]));
      }
    }
  } else {
    require(net.arch == Arch::student || net.arch == Arch::teacher_noflow, Err::ArchMismatch,
            "stylize_sequence needs a stylization net");
    for (const TensorF& f : seq.frames) out.push_back(run_trunk(net, f));
  }
  return out;
}

void save_checkpoint(const Network& net, const std::string& path) {
  ByteWriter w;
  serialize_body(net, w);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, w.bytes.data(), static_cast<uInt>(w.bytes.size()));
  w.u32(static_cast<uint32_t>(crc));
  FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, Err::UnreadableFile, "cannot write " + path);
  const size_t written = std::fwrite(w.bytes.data(), 1, w.bytes.size(), f);
  std::fclose(f);
  require(written == w.bytes.size(), Err::UnreadableFile, "short write to " + path);
}

Network load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, Err::MissingCheckpoint, "cannot open checkpoint " + path);
  std::fseek(f, 0, SEEK_END);
  const long size = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> bytes(static_cast<size_t>(size));
  const size_t got = std::fread(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  require(got == bytes.size() && size > 16, Err::CorruptFile, "checkpoint unreadable: " + path);

  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + size - 4, 4);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(size - 4));
  require(static_cast<uint32_t>(crc) == stored_crc, Err::CorruptFile,
          "checksum mismatch in " + path);

  ByteReader r{bytes.data(), bytes.data() + size - 4};
  char magic[8];
  r.raw(magic, 8);
  require(std::memcmp(magic, kMagic, 8) == 0, Err::CorruptFile, "bad checkpoint magic in " + path);
  const uint32_t version = r.u32();
  require(version == kVersion, Err::VersionMismatch,
          "checkpoint version " + std::to_string(version));

  Network net;
  unsigned char arch_byte;
  r.raw(&arch_byte, 1);
  require(arch_byte <= 3, Err::CorruptFile, "bad arch byte");
  net.arch = static_cast<Arch>(arch_byte);
  net.width_multiplier = r.f32();
  net.init_seed = r.u64();
  net.checkpoint_id = r.str();
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.str();
    const uint32_t nd = r.u32();
    std::vector<int> shape;
    for (uint32_t d = 0; d < nd; ++d) shape.push_back(static_cast<int>(r.u32()));
    const uint64_t count = r.u64();
    require(Tensor<float>::count(shape) == static_cast<int64_t>(count), Err::CorruptFile,
            "tensor size mismatch");
    std::vector<float> data(count);
    r.raw(data.data(), count * 4);
    t.value = TensorF::from(shape, std::move(data));
    net.params.push_back(std::move(t));
  }
  net.frozen = net.arch == Arch::features;
  return net;
}

Network load_checkpoint_as(const std::string& path, Arch expected) {
  Network net = load_checkpoint(path);
  require(net.arch == expected, Err::ArchMismatch,
          std::string("checkpoint is ") + arch_name(net.arch) + ", expected " +
              arch_name(expected));
  return net;
}

}  // namespace flowkd
