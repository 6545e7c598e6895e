// flowkd: train and evaluate an optical-flow-free video stylization network by
// distilling a flow-conditioned teacher.

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "flowkd/config.hpp"
#include "flowkd/error.hpp"
#include "flowkd/pipeline.hpp"

using namespace flowkd;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string profile = "desk";
  std::string out_dir;
  std::vector<std::string> sets;
  int64_t seed = -1;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value config file");
  cmd->add_option("--profile", args.profile, "configuration profile: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", args.seed, "RNG seed override");
  cmd->add_option("--out", args.out_dir, "artifact output root");
  cmd->add_flag("--deterministic", args.deterministic,
                "force fixed-seed reproducible execution");
  cmd->add_option("--set", args.sets, "config override as key=value (repeatable)");
}

RunConfig build_config(const CommonArgs& args) {
  const Profile profile = args.profile == "paper" ? Profile::paper : Profile::desk;
  RunConfig cfg =
      args.config_path.empty() ? default_config(profile) : load_config_file(args.config_path, profile);
  for (const std::string& s : args.sets) apply_set_expr(cfg, s);
  if (args.seed >= 0) cfg.train.seed = static_cast<uint64_t>(args.seed);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.deterministic) cfg.train.deterministic = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowkd: optical-flow-free video stylization via teacher distillation"};
  app.require_subcommand(1);
  app.footer(config_help_text());

  struct Cmd {
    const char* name;
    const char* desc;
    int (*fn)(RunConfig);
  };
  const Cmd commands[] = {
      {"synth", "generate the synthetic dataset, ground-truth flows/masks and style image",
       pipeline::cmd_synth},
      {"train-baseline", "train the from-scratch student (perceptual, optionally temporal)",
       pipeline::cmd_train_baseline},
      {"train-teacher", "train the flow-conditioned and flow-free teachers",
       pipeline::cmd_train_teacher},
      {"cache", "cache frozen teacher/baseline outputs for distillation", pipeline::cmd_cache},
      {"distill", "train the student with the full distillation objective", pipeline::cmd_distill},
      {"stylize", "run a checkpoint over a frame directory", pipeline::cmd_stylize},
      {"eval-stability", "temporal stability evaluation over the eval scenes",
       pipeline::cmd_eval_stability},
      {"bench", "throughput benchmark (student vs teacher pipeline)", pipeline::cmd_bench},
      {"report", "render the combined stability/fps tables from logged runs",
       pipeline::cmd_report},
  };

  std::vector<CommonArgs> cmd_args(std::size(commands));
  std::vector<CLI::App*> subs;
  for (size_t i = 0; i < std::size(commands); ++i) {
    CLI::App* sub = app.add_subcommand(commands[i].name, commands[i].desc);
    add_common(sub, cmd_args[i]);
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  for (size_t i = 0; i < std::size(commands); ++i) {
    if (subs[i]->parsed()) {
      try {
        return commands[i].fn(build_config(cmd_args[i]));
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 3;
      }
    }
  }
  return 1;
}
