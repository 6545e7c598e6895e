#pragma once

#include <string>
#include <utility>
#include <vector>

#include "flowkd/distiller.hpp"

namespace flowkd {

enum class Profile { desk, paper };

const char* profile_name(Profile p);

struct SynthConfig {
  int synth_scenes = 6;
  int synth_eval_scenes = 2;
  int synth_frames = 24;
  int synth_width = 128;
  int synth_height = 96;
  int synth_sprites = 3;
  int synth_max_speed = 2;
};

// One config object for every subcommand. File format: `key = value` lines,
// '#' comments; unknown keys are rejected. Precedence: profile defaults, then
// the config file, then --set overrides.
struct RunConfig {
  Profile profile = Profile::desk;
  TrainConfig train;
  SynthConfig synth;
  std::string out_dir = "out";
  std::string student_checkpoint;  // distill output
  std::string output_checkpoint;   // explicit override for training commands
  // eval / bench
  int bench_width = 640;
  int bench_height = 320;
  int bench_warmup = 3;
  int bench_timed = 12;
  bool literal_norm = false;
  bool d_includes_channels = true;
  bool heatmaps = false;
  std::string model_checkpoint;  // eval/bench/stylize subject ("identity" allowed for eval)
  std::string model_name;
  std::string stylize_input;
  std::string stylize_output;

  EstabOptions estab_options() const {
    return EstabOptions{!literal_norm, d_includes_channels};
  }
};

RunConfig default_config(Profile p);

// Fill empty paths from out_dir (dataset/, checkpoints/, cache/).
void finalize_paths(RunConfig& cfg);

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_set_expr(RunConfig& cfg, const std::string& expr);  // "key=value"
RunConfig load_config_file(const std::string& path, Profile profile);

// canonical key/value dump (sorted), the basis of the fingerprint
std::vector<std::pair<std::string, std::string>> config_kv(const RunConfig& cfg);
std::string config_fingerprint(const RunConfig& cfg);

struct KeyDoc {
  std::string key;
  std::string desc;
  std::string paper_default;  // value under --profile paper
  std::string desk_default;   // value under --profile desk
};
std::vector<KeyDoc> config_key_docs();
std::string config_help_text();

}  // namespace flowkd
