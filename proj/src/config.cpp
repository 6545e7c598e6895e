#include "flowkd/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "flowkd/error.hpp"

namespace flowkd {

const char* profile_name(Profile p) { return p == Profile::desk ? "desk" : "paper"; }

namespace {

struct KeyEntry {
  std::string key;
  std::string desc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

int to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int x = std::stoi(v, &pos);
    require(pos == v.size(), Err::ConfigInvalid, key + ": not an integer: '" + v + "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Err::ConfigInvalid, key + ": not an integer: '" + v + "'");
  }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t x = std::stoull(v, &pos);
    require(pos == v.size(), Err::ConfigInvalid, key + ": not an integer: '" + v + "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Err::ConfigInvalid, key + ": not an integer: '" + v + "'");
  }
}

float to_float(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    float x = std::stof(v, &pos);
    require(pos == v.size(), Err::ConfigInvalid, key + ": not a number: '" + v + "'");
    return x;
  } catch (const Error&) {
    throw;
  } catch (...) {
    fail(Err::ConfigInvalid, key + ": not a number: '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(Err::ConfigInvalid, key + ": not a bool: '" + v + "'");
}

std::string fmt_float(float v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%g", static_cast<double>(v));
  return buf;
}

#define INT_KEY(name, field, desc)                                                   \
  {name, desc, [](RunConfig& c, const std::string& v) { c.field = to_int(name, v); }, \
   [](const RunConfig& c) { return std::to_string(c.field); }}
#define U64_KEY(name, field, desc)                                                   \
  {name, desc, [](RunConfig& c, const std::string& v) { c.field = to_u64(name, v); }, \
   [](const RunConfig& c) { return std::to_string(c.field); }}
#define FLT_KEY(name, field, desc)                                                     \
  {name, desc, [](RunConfig& c, const std::string& v) { c.field = to_float(name, v); }, \
   [](const RunConfig& c) { return fmt_float(c.field); }}
#define BOOL_KEY(name, field, desc)                                                   \
  {name, desc, [](RunConfig& c, const std::string& v) { c.field = to_bool(name, v); }, \
   [](const RunConfig& c) { return c.field ? "true" : "false"; }}
#define STR_KEY(name, field, desc)                                        \
  {name, desc, [](RunConfig& c, const std::string& v) { c.field = v; },   \
   [](const RunConfig& c) { return c.field; }}

const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = {
      INT_KEY("epochs", train.epochs, "training epochs"),
      INT_KEY("batch_size", train.batch_size, "tuples per optimizer step"),
      FLT_KEY("base_lr", train.base_lr, "initial learning rate"),
      FLT_KEY("lr_decay_factor", train.lr_decay_factor, "lr divided by this on each decay"),
      INT_KEY("lr_decay_every_iters", train.lr_decay_every_iters, "iterations between decays"),
      U64_KEY("seed", train.seed, "RNG seed for init, sampling and crops"),
      INT_KEY("k", train.weights.k, "frames per training tuple"),
      FLT_KEY("lambda_content", train.weights.lambda_content, "content term weight"),
      FLT_KEY("lambda_style", train.weights.lambda_style, "style (Gram) term weight"),
      FLT_KEY("lambda_tv", train.weights.lambda_tv, "total-variation term weight"),
      FLT_KEY("lambda_res", train.weights.lambda_res, "residual distillation weight"),
      FLT_KEY("lambda_temp", train.weights.lambda_temp, "temporal consistency weight"),
      FLT_KEY("lambda_rank", train.weights.lambda_rank, "low-rank distillation weight"),
      BOOL_KEY("use_temporal", train.use_temporal, "include the temporal term"),
      {"rank_anchor", "nuclear-norm anchor: input or teacher",
       [](RunConfig& c, const std::string& v) {
         if (v == "input")
           c.train.rank_anchor = RankAnchor::input;
         else if (v == "teacher")
           c.train.rank_anchor = RankAnchor::teacher;
         else
           fail(Err::ConfigInvalid, "rank_anchor: must be 'input' or 'teacher', got '" + v + "'");
       },
       [](const RunConfig& c) {
         return c.train.rank_anchor == RankAnchor::input ? "input" : "teacher";
       }},
      INT_KEY("tuples_per_epoch", train.tuples_per_epoch, "sampled tuples per epoch"),
      INT_KEY("crop_width", train.crop_width, "training crop width"),
      INT_KEY("crop_height", train.crop_height, "training crop height"),
      FLT_KEY("width_multiplier", train.width_multiplier, "student channel scale"),
      FLT_KEY("teacher_width_multiplier", train.teacher_width_multiplier,
              "teacher channel scale"),
      INT_KEY("teacher_epochs", train.teacher_epochs, "teacher epochs (0: same as epochs)"),
      U64_KEY("feature_seed", train.feature_seed, "seed of the fixed random feature net"),
      STR_KEY("feature_checkpoint", train.feature_checkpoint,
              "optional pretrained feature-net checkpoint"),
      STR_KEY("dataset_dir", train.dataset_dir, "directory of training sequence dirs"),
      STR_KEY("eval_dir", train.eval_dir, "directory of evaluation sequence dirs"),
      STR_KEY("style_image", train.style_image, "style image path"),
      STR_KEY("teacher_checkpoint", train.teacher_checkpoint, "flow teacher checkpoint"),
      STR_KEY("teacher_noflow_checkpoint", train.teacher_noflow_checkpoint,
              "flow-free teacher checkpoint"),
      STR_KEY("baseline_checkpoint", train.baseline_checkpoint,
              "from-scratch student checkpoint"),
      STR_KEY("cache_dir", train.cache_dir, "teacher output cache directory"),
      BOOL_KEY("auto_build", train.auto_build, "train missing frozen artifacts on demand"),
      BOOL_KEY("deterministic", train.deterministic, "fixed-seed reproducible execution"),
      STR_KEY("out_dir", out_dir, "artifact output root"),
      STR_KEY("student_checkpoint", student_checkpoint, "distilled student output path"),
      STR_KEY("output_checkpoint", output_checkpoint, "explicit output path for train commands"),
      INT_KEY("synth_scenes", synth.synth_scenes, "synthetic training scenes"),
      INT_KEY("synth_eval_scenes", synth.synth_eval_scenes, "synthetic evaluation scenes"),
      INT_KEY("synth_frames", synth.synth_frames, "frames per synthetic scene"),
      INT_KEY("synth_width", synth.synth_width, "synthetic scene width"),
      INT_KEY("synth_height", synth.synth_height, "synthetic scene height"),
      INT_KEY("synth_sprites", synth.synth_sprites, "sprites per synthetic scene"),
      INT_KEY("synth_max_speed", synth.synth_max_speed, "max sprite speed, px/frame"),
      INT_KEY("bench_width", bench_width, "benchmark input width"),
      INT_KEY("bench_height", bench_height, "benchmark input height"),
      INT_KEY("bench_warmup", bench_warmup, "benchmark warmup iterations"),
      INT_KEY("bench_timed", bench_timed, "benchmark timed iterations"),
      BOOL_KEY("literal_norm", literal_norm, "e_stab: unsquared-norm reading"),
      BOOL_KEY("d_includes_channels", d_includes_channels, "e_stab: D counts channels"),
      BOOL_KEY("heatmaps", heatmaps, "emit temporal-error heatmap images"),
      STR_KEY("model_checkpoint", model_checkpoint, "checkpoint for eval/bench/stylize"),
      STR_KEY("model_name", model_name, "display name for reports"),
      STR_KEY("stylize_input", stylize_input, "frame directory to stylize"),
      STR_KEY("stylize_output", stylize_output, "stylized output directory"),
  };
  return table;
}

#undef INT_KEY
#undef U64_KEY
#undef FLT_KEY
#undef BOOL_KEY
#undef STR_KEY

}  // namespace

RunConfig default_config(Profile p) {
  RunConfig c;
  c.profile = p;
  if (p == Profile::paper) {
    c.train.epochs = 10;
    c.train.tuples_per_epoch = 2000;
    c.train.crop_width = 640;
    c.train.crop_height = 360;
    c.train.width_multiplier = 1.f;
    c.train.teacher_width_multiplier = 1.f;
    c.train.weights.k = 5;
    c.train.weights.lambda_content = 1.f;
    c.train.weights.lambda_style = 1e4f;
    c.train.weights.lambda_tv = 1e-5f;
    c.train.weights.lambda_res = 4e8f;
    c.train.weights.lambda_temp = 1e6f;
    c.train.weights.lambda_rank = 1e2f;
    c.synth.synth_width = 640;
    c.synth.synth_height = 360;
    c.synth.synth_frames = 24;
  } else {
    c.train.epochs = 5;
    c.train.tuples_per_epoch = 200;
    c.train.crop_width = 96;
    c.train.crop_height = 96;
    c.train.width_multiplier = 0.25f;
    c.train.teacher_width_multiplier = 0.5f;
    c.train.teacher_epochs = 2;
    c.train.weights.k = 5;
    c.train.weights.lambda_content = 1.f;
    c.train.weights.lambda_style = 1e4f;
    c.train.weights.lambda_tv = 1e-5f;
    // desk-scale weights, calibrated so each term moves the objective at the
    // synthetic corpus's loss magnitudes under mean reduction
    c.train.weights.lambda_res = 20.f;
    c.train.weights.lambda_temp = 40.f;
    c.train.weights.lambda_rank = 2e-4f;
  }
  return c;
}

void finalize_paths(RunConfig& cfg) {
  auto fill = [&](std::string& field, const std::string& rel) {
    if (field.empty()) field = cfg.out_dir + "/" + rel;
  };
  fill(cfg.train.dataset_dir, "dataset/train");
  fill(cfg.train.eval_dir, "dataset/eval");
  fill(cfg.train.style_image, "dataset/style.png");
  fill(cfg.train.teacher_checkpoint, "checkpoints/teacher_flow.ckpt");
  fill(cfg.train.teacher_noflow_checkpoint, "checkpoints/teacher_noflow.ckpt");
  fill(cfg.train.baseline_checkpoint, "checkpoints/baseline.ckpt");
  fill(cfg.train.cache_dir, "cache");
  fill(cfg.student_checkpoint, "checkpoints/student.ckpt");
}

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const KeyEntry& e : key_table()) {
    if (e.key == key) {
      e.set(cfg, value);
      return;
    }
  }
  fail(Err::ConfigInvalid, "unknown config key '" + key + "'");
}

void apply_set_expr(RunConfig& cfg, const std::string& expr) {
  const size_t eq = expr.find('=');
  require(eq != std::string::npos, Err::ConfigInvalid, "--set expects key=value, got '" + expr + "'");
  apply_kv(cfg, expr.substr(0, eq), expr.substr(eq + 1));
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig load_config_file(const std::string& path, Profile profile) {
  RunConfig cfg = default_config(profile);
  std::ifstream in(path);
  require(in.good(), Err::ConfigInvalid, "cannot read config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    const size_t eq = s.find('=');
    require(eq != std::string::npos, Err::ConfigInvalid,
            path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    apply_kv(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return cfg;
}

std::vector<std::pair<std::string, std::string>> config_kv(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("profile", profile_name(cfg.profile));
  for (const KeyEntry& e : key_table()) out.emplace_back(e.key, e.get(cfg));
  std::sort(out.begin(), out.end());
  return out;
}

std::string config_fingerprint(const RunConfig& cfg) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
  auto mix = [&](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [k, v] : config_kv(cfg)) {
    mix(k);
    mix("=");
    mix(v);
    mix("\n");
  }
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<KeyDoc> config_key_docs() {
  const RunConfig paper = default_config(Profile::paper);
  const RunConfig desk = default_config(Profile::desk);
  std::vector<KeyDoc> docs;
  for (const KeyEntry& e : key_table())
    docs.push_back({e.key, e.desc, e.get(paper), e.get(desk)});
  return docs;
}

std::string config_help_text() {
  std::ostringstream os;
  os << "Config keys (key = value file, or --set key=value):\n";
  for (const KeyDoc& d : config_key_docs()) {
    os << "  " << d.key << " - " << d.desc;
    if (d.paper_default == d.desk_default) {
      os << " [default: " << (d.desk_default.empty() ? "(empty)" : d.desk_default) << "]";
    } else {
      os << " [paper profile: " << (d.paper_default.empty() ? "(empty)" : d.paper_default)
         << " | desk profile: " << (d.desk_default.empty() ? "(empty)" : d.desk_default) << "]";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace flowkd
