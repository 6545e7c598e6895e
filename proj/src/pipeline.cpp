#include "flowkd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "flowkd/error.hpp"
#include "flowkd/image_io.hpp"
#include "flowkd/pipeline.hpp"
#include "flowkd/rng.hpp"
#include "flowkd/stability.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace flowkd::pipeline {

namespace {

json header_json(const char* command, const RunConfig& cfg) {
  json config;
  for (const auto& [k, v] : config_kv(cfg)) config[k] = v;
  return json{{"event", "header"},
              {"command", command},
              {"fingerprint", config_fingerprint(cfg)},
              {"config", config},
              {"optimizer", {{"type", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}}};
}

void print_header(const char* command, const RunConfig& cfg, RunLogger* log) {
  const std::string line = header_json(command, cfg).dump();
  std::cout << line << std::endl;
  if (log) log->line(line);
}

std::string log_path(const RunConfig& cfg, const std::string& name) {
  return cfg.out_dir + "/logs/" + name + ".jsonl";
}

void write_json_file(const std::string& path, const json& j) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << "\n";
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Err::DependencyMissing, "missing " + path);
  json j;
  in >> j;
  return j;
}

json report_to_json(const StabilityReport& r) {
  json scenes = json::array();
  for (const SceneStability& s : r.scenes) scenes.push_back({{"id", s.scene_id}, {"estab", s.estab}});
  json diag = json::array();
  for (const RankDiagnostic& d : r.rank_diagnostics)
    diag.push_back({{"scene", d.scene_id},
                    {"start", d.tuple_start},
                    {"nuclear", d.nuclear},
                    {"numeric_rank", d.numeric_rank}});
  return json{{"model", r.model_name},
              {"scenes", scenes},
              {"sum", r.sum},
              {"fps", r.fps},
              {"rank_diagnostics", diag},
              {"fingerprint", r.config_fingerprint}};
}

StabilityReport report_from_json(const json& j) {
  StabilityReport r;
  r.model_name = j.value("model", "?");
  for (const json& s : j.at("scenes"))
    r.scenes.push_back({s.at("id").get<std::string>(), s.at("estab").get<double>()});
  r.sum = j.at("sum").get<double>();
  r.fps = j.value("fps", 0.0);
  r.config_fingerprint = j.value("fingerprint", "");
  return r;
}

Network load_model(const std::string& path) {
  Network net = load_checkpoint(path);
  require(net.arch != Arch::features, Err::ArchMismatch, "feature net is not a stylizer");
  return net;
}

}  // namespace

TensorF make_style_image(int width, int height, uint64_t seed) {
  Rng rng(seed);
  TensorF img({3, height, width});
  const float fx = 6.283185f / static_cast<float>(width);
  const float fy = 6.283185f / static_cast<float>(height);
  const float p0 = static_cast<float>(rng.uniform(0, 6.28));
  const float p1 = static_cast<float>(rng.uniform(0, 6.28));
  const float p2 = static_cast<float>(rng.uniform(0, 6.28));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const float a = std::sin(3.f * fx * x + p0) * std::cos(2.f * fy * y + p1);
      const float b = std::sin(5.f * fx * x + 7.f * fy * y + p2);
      const float c = std::sin(2.f * fx * x - 3.f * fy * y + p0 + p1);
      img.at(0, y, x) = 0.5f + 0.45f * a;
      img.at(1, y, x) = 0.5f + 0.45f * b;
      img.at(2, y, x) = 0.5f + 0.45f * c;
    }
  // speckle so the Gram targets carry fine-scale statistics too
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const float n = static_cast<float>(rng.uniform(-0.08, 0.08));
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, y, x) = std::min(1.f, std::max(0.f, img.at(ch, y, x) + n));
    }
  return img;
}

int cmd_synth(RunConfig cfg) {
  finalize_paths(cfg);
  RunLogger log(log_path(cfg, "synth"));
  print_header("synth", cfg, &log);
  const SynthConfig& sc = cfg.synth;
  json manifest{{"fingerprint", config_fingerprint(cfg)}, {"train", json::array()},
                {"eval", json::array()}};
  for (int i = 0; i < sc.synth_scenes; ++i) {
    SceneSpec spec;
    spec.width = sc.synth_width;
    spec.height = sc.synth_height;
    spec.num_frames = sc.synth_frames;
    spec.num_sprites = sc.synth_sprites;
    spec.max_speed = sc.synth_max_speed;
    spec.seed = cfg.train.seed * 1000 + static_cast<uint64_t>(i);
    FrameSequence seq = synth_sequence(spec);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03d", i);
    seq.source_id = name;
    save_sequence_dir(seq, cfg.train.dataset_dir + "/" + name);
    manifest["train"].push_back(name);
  }
  for (int i = 0; i < sc.synth_eval_scenes; ++i) {
    SceneSpec spec;
    spec.width = sc.synth_width;
    spec.height = sc.synth_height;
    spec.num_frames = sc.synth_frames;
    spec.num_sprites = sc.synth_sprites;
    spec.max_speed = sc.synth_max_speed;
    spec.seed = cfg.train.seed * 1000 + 500000 + static_cast<uint64_t>(i);
    FrameSequence seq = synth_sequence(spec);
    char name[32];
    std::snprintf(name, sizeof name, "eval_%03d", i);
    seq.source_id = name;
    save_sequence_dir(seq, cfg.train.eval_dir + "/" + name);
    manifest["eval"].push_back(name);
  }
  write_png_rgb(cfg.train.style_image, make_style_image(128, 128, cfg.train.seed + 99));
  write_json_file(cfg.out_dir + "/dataset/manifest.json", manifest);
  std::cout << "synth: wrote " << sc.synth_scenes << " train + " << sc.synth_eval_scenes
            << " eval scenes under " << cfg.out_dir << "/dataset" << std::endl;
  return 0;
}

int cmd_train_baseline(RunConfig cfg) {
  finalize_paths(cfg);
  RunLogger log(log_path(cfg, cfg.train.use_temporal ? "train_baseline_temporal"
                                                     : "train_baseline"));
  print_header("train-baseline", cfg, &log);
  Corpus corpus = load_corpus(cfg.train);
  TrainResult res = train_baseline(cfg.train, corpus, cfg.train.use_temporal, Arch::student, &log);
  std::string out = cfg.output_checkpoint;
  if (out.empty())
    out = cfg.train.use_temporal ? cfg.out_dir + "/checkpoints/baseline_temporal.ckpt"
                                 : cfg.train.baseline_checkpoint;
  fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(res.net, out);
  std::cout << "train-baseline: val e_stab " << res.final_val_estab << ", checkpoint " << out
            << std::endl;
  return 0;
}

int cmd_train_teacher(RunConfig cfg) {
  finalize_paths(cfg);
  RunLogger log(log_path(cfg, "train_teacher"));
  print_header("train-teacher", cfg, &log);
  Corpus corpus = load_corpus(cfg.train);
  TeacherPair pair = train_teacher(cfg.train, corpus, &log);
  fs::create_directories(fs::path(cfg.train.teacher_checkpoint).parent_path());
  save_checkpoint(pair.teacher_flow, cfg.train.teacher_checkpoint);
  save_checkpoint(pair.teacher_noflow, cfg.train.teacher_noflow_checkpoint);
  std::cout << "train-teacher: wrote " << cfg.train.teacher_checkpoint << " and "
            << cfg.train.teacher_noflow_checkpoint << std::endl;
  return 0;
}

int cmd_cache(RunConfig cfg) {
  finalize_paths(cfg);
  RunLogger log(log_path(cfg, "cache"));
  print_header("cache", cfg, &log);
  Corpus corpus = load_corpus(cfg.train);
  FrozenSet frozen = prepare_frozen(cfg.train, corpus);
  TeacherCache cache = cache_teacher_outputs(cfg.train, corpus, frozen);
  std::cout << "cache: " << cache.entries.size() << " sequences cached under "
            << cfg.train.cache_dir << " (key " << cache.key << ")" << std::endl;
  return 0;
}

int cmd_distill(RunConfig cfg) {
  finalize_paths(cfg);
  RunLogger log(log_path(cfg, "distill"));
  // header goes out before dependency checks so the resolved config is always
  // visible in the run log
  print_header("distill", cfg, &log);
  Corpus corpus = load_corpus(cfg.train);
  FrozenSet frozen = prepare_frozen(cfg.train, corpus);
  TeacherCache cache = cache_teacher_outputs(cfg.train, corpus, frozen);

  const std::string frozen_sum_before = params_checksum(frozen.teacher_flow) + "|" +
                                        params_checksum(frozen.teacher_noflow) + "|" +
                                        params_checksum(frozen.baseline);
  TrainResult res = distill(cfg.train, corpus, frozen, cache, &log);
  const std::string frozen_sum_after = params_checksum(frozen.teacher_flow) + "|" +
                                       params_checksum(frozen.teacher_noflow) + "|" +
                                       params_checksum(frozen.baseline);
  require(frozen_sum_before == frozen_sum_after, Err::ArchMismatch,
          "frozen networks changed during distillation");

  std::string out = cfg.output_checkpoint.empty() ? cfg.student_checkpoint : cfg.output_checkpoint;
  fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(res.net, out);
  json summary{{"event", "summary"},
               {"iter0_total", res.iter0_total},
               {"final_val_estab", res.final_val_estab},
               {"checkpoint", out}};
  log.line(summary.dump());
  std::cout << summary.dump() << std::endl;
  return 0;
}

int cmd_stylize(RunConfig cfg) {
  finalize_paths(cfg);
  require(!cfg.model_checkpoint.empty(), Err::ConfigInvalid, "stylize needs model_checkpoint");
  require(!cfg.stylize_input.empty() && !cfg.stylize_output.empty(), Err::ConfigInvalid,
          "stylize needs stylize_input and stylize_output");
  Network net = load_model(cfg.model_checkpoint);
  FrameSequence seq;
  if (fs::is_directory(fs::path(cfg.stylize_input) / "frames")) {
    seq = load_sequence_dir(cfg.stylize_input);
  } else {
    // bare directory of frames: frame-local models only
    require(net.arch != Arch::teacher_flow, Err::MissingFlow,
            "flow teacher needs a sequence directory with flow/ and occlusions/");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(cfg.stylize_input))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    require(!files.empty(), Err::DependencyMissing, "no .png frames in " + cfg.stylize_input);
    for (const auto& f : files) seq.frames.push_back(read_png_rgb(f));
    seq.source_id = "stylize-input";
    for (size_t i = 0; i + 1 < seq.frames.size(); ++i) {
      seq.flows.push_back(
          {TensorF({seq.frames[0].dim(1), seq.frames[0].dim(2)}),
           TensorF({seq.frames[0].dim(1), seq.frames[0].dim(2)})});
      seq.masks.push_back({TensorF({seq.frames[0].dim(1), seq.frames[0].dim(2)}, 1.f)});
    }
  }
  const std::vector<TensorF> out = stylize_sequence(net, seq);
  fs::create_directories(cfg.stylize_output);
  char name[32];
  for (size_t i = 0; i < out.size(); ++i) {
    std::snprintf(name, sizeof name, "stylized_%04zu.png", i);
    write_png_rgb(cfg.stylize_output + "/" + name, out[i]);
  }
  std::cout << "stylize: wrote " << out.size() << " frames to " << cfg.stylize_output
            << std::endl;
  return 0;
}

int cmd_eval_stability(RunConfig cfg) {
  finalize_paths(cfg);
  require(!cfg.model_checkpoint.empty(), Err::ConfigInvalid, "eval-stability needs model_checkpoint");
  RunLogger log(log_path(cfg, "eval_stability"));
  print_header("eval-stability", cfg, &log);

  std::vector<FrameSequence> scenes;
  require(fs::is_directory(cfg.train.eval_dir), Err::DependencyMissing,
          "eval_dir missing: " + cfg.train.eval_dir + " (produce it with the synth command)");
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(cfg.train.eval_dir))
    if (e.is_directory()) dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) scenes.push_back(load_sequence_dir(d));

  std::string name = cfg.model_name;
  Stylizer stylizer;
  Network net;
  if (cfg.model_checkpoint == "identity") {
    stylizer = identity_stylizer();
    if (name.empty()) name = "identity";
  } else {
    net = load_model(cfg.model_checkpoint);
    stylizer = network_stylizer(net);
    if (name.empty()) name = arch_name(net.arch);
  }
  StabilityReport rep = evaluate_scenes(name, stylizer, scenes, cfg.estab_options());
  rep.config_fingerprint = config_fingerprint(cfg);

  if (cfg.heatmaps) {
    for (const FrameSequence& scene : scenes) {
      const std::vector<TensorF> out = stylizer(scene);
      const auto maps = temporal_error_heatmaps(out, scene.flows, scene.masks);
      const std::string dir = cfg.out_dir + "/reports/heatmaps/" + name + "/" + scene.source_id;
      fs::create_directories(dir);
      char fname[32];
      for (size_t i = 0; i < maps.size(); ++i) {
        std::snprintf(fname, sizeof fname, "pair_%04zu.png", i);
        write_png_gray(dir + "/" + fname, maps[i]);
      }
    }
  }

  write_json_file(cfg.out_dir + "/reports/" + name + ".json", report_to_json(rep));
  std::cout << render_report_table({rep});
  return 0;
}

int cmd_bench(RunConfig cfg) {
  finalize_paths(cfg);
  RunLogger log(log_path(cfg, "bench"));
  print_header("bench", cfg, &log);
  json entries = json::array();
  double student_fps = 0, teacher_fps = 0;
  const std::string student_path =
      cfg.model_checkpoint.empty() ? cfg.student_checkpoint : cfg.model_checkpoint;
  if (fs::exists(student_path)) {
    Network net = load_model(student_path);
    const double fps = fps_bench(net, cfg.bench_width, cfg.bench_height, cfg.bench_warmup,
                                 cfg.bench_timed, false);
    entries.push_back({{"model", arch_name(net.arch)}, {"path", student_path}, {"fps", fps}});
    if (net.arch == Arch::student) student_fps = fps;
    std::cout << "bench: " << arch_name(net.arch) << " " << fps << " fps" << std::endl;
  }
  if (fs::exists(cfg.train.teacher_checkpoint)) {
    Network net = load_checkpoint_as(cfg.train.teacher_checkpoint, Arch::teacher_flow);
    const double fps = fps_bench(net, cfg.bench_width, cfg.bench_height, cfg.bench_warmup,
                                 cfg.bench_timed, true);
    entries.push_back(
        {{"model", "teacher-flow"}, {"path", cfg.train.teacher_checkpoint}, {"fps", fps}});
    teacher_fps = fps;
    std::cout << "bench: teacher-flow " << fps << " fps (forward + warp + mask handling; flow "
              << "fields read from fixtures)" << std::endl;
  }
  require(!entries.empty(), Err::DependencyMissing,
          "bench found no checkpoints (model_checkpoint or teacher_checkpoint)");
  json out{{"fingerprint", config_fingerprint(cfg)},
           {"width", cfg.bench_width},
           {"height", cfg.bench_height},
           {"entries", entries}};
  if (student_fps > 0 && teacher_fps > 0) {
    out["student_over_teacher"] = student_fps / teacher_fps;
    std::cout << "bench: student/teacher throughput ratio " << student_fps / teacher_fps
              << std::endl;
  }
  write_json_file(cfg.out_dir + "/reports/bench.json", out);
  return 0;
}

int cmd_report(RunConfig cfg) {
  finalize_paths(cfg);
  const std::string dir = cfg.out_dir + "/reports";
  require(fs::is_directory(dir), Err::DependencyMissing,
          "no reports directory under " + cfg.out_dir + " (run eval-stability first)");
  std::vector<StabilityReport> reports;
  double bench_student = 0, bench_teacher = 0;
  if (fs::exists(dir + "/bench.json")) {
    json b = load_json_file(dir + "/bench.json");
    for (const json& e : b.at("entries")) {
      if (e.at("model") == "student") bench_student = e.at("fps").get<double>();
      if (e.at("model") == "teacher-flow") bench_teacher = e.at("fps").get<double>();
    }
  }
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json" &&
        e.path().filename() != "bench.json")
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  require(!files.empty(), Err::DependencyMissing,
          "no stability reports under " + dir + " (run eval-stability first)");
  for (const auto& f : files) {
    StabilityReport r = report_from_json(load_json_file(f));
    if (r.fps == 0) {
      if (r.model_name == "student" && bench_student > 0) r.fps = bench_student;
      if (r.model_name == "teacher-flow" && bench_teacher > 0) r.fps = bench_teacher;
    }
    reports.push_back(std::move(r));
  }
  const std::string table = render_report_table(reports);
  std::ofstream out(dir + "/report.txt", std::ios::trunc);
  out << table;
  std::cout << table;
  return 0;
}

}  // namespace flowkd::pipeline
