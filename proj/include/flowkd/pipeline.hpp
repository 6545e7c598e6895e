#pragma once

#include <string>

#include "flowkd/config.hpp"

namespace flowkd::pipeline {

// Subcommand bodies, shared by the CLI and the integration tests. Each writes
// its artifacts under cfg.out_dir with the config fingerprint embedded and
// returns a process exit status.
int cmd_synth(RunConfig cfg);
int cmd_train_baseline(RunConfig cfg);
int cmd_train_teacher(RunConfig cfg);
int cmd_cache(RunConfig cfg);
int cmd_distill(RunConfig cfg);
int cmd_stylize(RunConfig cfg);
int cmd_eval_stability(RunConfig cfg);
int cmd_bench(RunConfig cfg);
int cmd_report(RunConfig cfg);

// deterministic colorful test pattern used as the default style image
TensorF make_style_image(int width, int height, uint64_t seed);

}  // namespace flowkd::pipeline
