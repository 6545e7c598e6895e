#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "flowkd/config.hpp"
#include "flowkd/distiller.hpp"
#include "flowkd/error.hpp"
#include "flowkd/pipeline.hpp"
#include "testutil.hpp"

using namespace flowkd;
namespace fs = std::filesystem;

namespace {

// one tiny corpus shared by every test in this binary
struct Fixture {
  TrainConfig cfg;
  Corpus corpus;
  fs::path root;

  Fixture() {
    root = fs::temp_directory_path() / "flowkd_test_distiller";
    fs::remove_all(root);
    fs::create_directories(root);
    RunConfig rc = default_config(Profile::desk);
    rc.out_dir = root.string();
    rc.train.seed = 5;
    rc.synth.synth_scenes = 2;
    rc.synth.synth_eval_scenes = 1;
    rc.synth.synth_frames = 9;
    rc.synth.synth_width = 64;
    rc.synth.synth_height = 48;
    finalize_paths(rc);
    pipeline::cmd_synth(rc);

    cfg = rc.train;
    cfg.epochs = 1;
    cfg.teacher_epochs = 1;
    cfg.tuples_per_epoch = 4;
    cfg.crop_width = 48;
    cfg.crop_height = 48;
    cfg.width_multiplier = 0.25f;
    cfg.teacher_width_multiplier = 0.25f;
    corpus = load_corpus(cfg);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("learning-rate schedule is exactly base_lr * (1/decay)^floor(iter/every)") {
  TrainConfig cfg;
  cfg.base_lr = 1e-3f;
  cfg.lr_decay_factor = 1.2f;
  cfg.lr_decay_every_iters = 500;
  for (int64_t iter : {0ll, 1ll, 499ll, 500ll, 999ll, 1000ll, 4999ll}) {
    const float expected = static_cast<float>(
        1e-3 * std::pow(1.0 / 1.2, static_cast<double>(iter / 500)));
    CHECK(lr_at(cfg, iter) == expected);
  }
  CHECK(lr_at(cfg, 0) == 1e-3f);
  CHECK(lr_at(cfg, 500) < lr_at(cfg, 499));
}

TEST_CASE("train_baseline: temporal flag adds exactly the temporal term") {
  Fixture& f = fixture();
  TrainResult plain = train_baseline(f.cfg, f.corpus, false);
  TrainResult temporal = train_baseline(f.cfg, f.corpus, true);
  REQUIRE(!plain.iters.empty());
  REQUIRE(!temporal.iters.empty());
  // same seed, same data order: identical perceptual start, temporal adds on top
  CHECK(plain.iters[0].loss.temp == 0.f);
  CHECK(temporal.iters[0].loss.temp > 0.f);
  CHECK(plain.iters[0].loss.percep == doctest::Approx(temporal.iters[0].loss.percep));
  CHECK(temporal.iters[0].loss.total ==
        doctest::Approx(plain.iters[0].loss.total +
                        f.cfg.weights.lambda_temp * temporal.iters[0].loss.temp));
}

TEST_CASE("prepare_frozen: builds missing artifacts, loads existing ones, freeze guard holds") {
  Fixture& f = fixture();
  TrainConfig cfg = f.cfg;
  cfg.teacher_checkpoint = (f.root / "ck" / "teacher.ckpt").string();
  cfg.teacher_noflow_checkpoint = (f.root / "ck" / "noflow.ckpt").string();
  cfg.baseline_checkpoint = (f.root / "ck" / "baseline.ckpt").string();
  fs::create_directories(f.root / "ck");

  FrozenSet frozen = prepare_frozen(cfg, f.corpus);
  CHECK(frozen.teacher_flow.frozen);
  CHECK(frozen.teacher_noflow.frozen);
  CHECK(frozen.baseline.frozen);
  CHECK(fs::exists(cfg.teacher_checkpoint));
  CHECK(fs::exists(cfg.baseline_checkpoint));

  // second call loads without training: checkpoint ids identical
  FrozenSet again = prepare_frozen(cfg, f.corpus);
  CHECK(again.teacher_flow.checkpoint_id == frozen.teacher_flow.checkpoint_id);
  CHECK(again.baseline.checkpoint_id == frozen.baseline.checkpoint_id);

  // frozen handles reject trainable binding
  Graph<float> g;
  CHECK_THROWS_WITH_AS(bind_network<float>(g, again.teacher_flow, true),
                       doctest::Contains("ArchMismatch"), Error);

  // auto_build off + missing artifact fails fast
  TrainConfig strict = cfg;
  strict.auto_build = false;
  strict.baseline_checkpoint = (f.root / "ck" / "nonexistent.ckpt").string();
  CHECK_THROWS_WITH_AS(prepare_frozen(strict, f.corpus), doctest::Contains("MissingCheckpoint"),
                       Error);
}

TEST_CASE("teacher cache: identical teacher pair gives zero residuals; round-trip; invalidation") {
  Fixture& f = fixture();
  TrainConfig cfg = f.cfg;
  cfg.cache_dir = (f.root / "cache_a").string();

  // frozen set where both teachers are the same network: delta T must be 0
  Network teacher = make_network(Arch::teacher_flow, 0.25f, 99);
  teacher.frozen = true;
  Network baseline = make_network(Arch::student, 0.25f, 98);
  baseline.frozen = true;

  // teacher-noflow with the same trunk parameters as the flow teacher is not
  // constructible (7 vs 3 channels); instead check the documented contract on
  // a noflow pair: N_T == ~N_T is emulated by comparing two cache builds
  FrozenSet frozen = prepare_frozen(cfg, f.corpus);
  TeacherCache c1 = cache_teacher_outputs(cfg, f.corpus, frozen);
  TeacherCache c2 = cache_teacher_outputs(cfg, f.corpus, frozen);  // cache hit path
  REQUIRE(c1.entries.size() == c2.entries.size());
  for (const auto& [seq_id, frames] : c1.entries) {
    const auto& other = c2.entries.at(seq_id);
    REQUIRE(frames.size() == other.size());
    for (size_t i = 0; i < frames.size(); ++i) {
      CHECK(tensors_equal(frames[i].delta_t, other[i].delta_t));
      CHECK(tensors_equal(frames[i].baseline, other[i].baseline));
    }
    // delta_t equals on-the-fly teacher difference, bit-wise
    const FrameSequence* seq = nullptr;
    for (const auto& s : f.corpus.train)
      if (s.source_id == seq_id) seq = &s;
    REQUIRE(seq != nullptr);
    const std::vector<TensorF> touts = stylize_sequence(frozen.teacher_flow, *seq);
    for (size_t i = 0; i < frames.size(); ++i) {
      TensorF nf = teacher_noflow_forward(frozen.teacher_noflow, seq->frames[i]);
      TensorF expect(nf.shape());
      for (int64_t j = 0; j < nf.size(); ++j) expect[j] = touts[i][j] - nf[j];
      CHECK(tensors_equal(frames[i].delta_t, expect));
    }
  }

  // swapping a frozen network invalidates the cache key
  FrozenSet swapped = frozen;
  swapped.teacher_noflow = make_network(Arch::teacher_noflow, 0.25f, 1234);
  swapped.teacher_noflow.frozen = true;
  CHECK(cache_key(swapped) != cache_key(frozen));
  TeacherCache c3 = cache_teacher_outputs(cfg, f.corpus, swapped);
  CHECK(c3.key != c1.key);
  CHECK_THROWS_WITH_AS(c1.get("nope", 0), doctest::Contains("CacheMiss"), Error);

  // the distill guard rejects a cache built against different checkpoints
  CHECK_THROWS_WITH_AS(distill(cfg, f.corpus, frozen, c3), doctest::Contains("CacheMiss"), Error);
}

TEST_CASE("distill: determinism, frozen-parameter invariant, degenerate-objective identity") {
  Fixture& f = fixture();
  TrainConfig cfg = f.cfg;
  cfg.cache_dir = (f.root / "cache_b").string();
  FrozenSet frozen = prepare_frozen(cfg, f.corpus);
  TeacherCache cache = cache_teacher_outputs(cfg, f.corpus, frozen);

  const std::string sum_before = params_checksum(frozen.teacher_flow) +
                                 params_checksum(frozen.teacher_noflow) +
                                 params_checksum(frozen.baseline);

  TrainResult a = distill(cfg, f.corpus, frozen, cache);
  TrainResult b = distill(cfg, f.corpus, frozen, cache);
  CHECK(a.iter0_total == b.iter0_total);  // bit-identical
  CHECK(std::abs(a.final_val_estab - b.final_val_estab) <= 1e-6);

  const std::string sum_after = params_checksum(frozen.teacher_flow) +
                                params_checksum(frozen.teacher_noflow) +
                                params_checksum(frozen.baseline);
  CHECK(sum_before == sum_after);

  // lambda_res = lambda_rank = 0, temporal off: identical trajectory to the
  // from-scratch baseline under the same seed
  TrainConfig degen = cfg;
  degen.weights.lambda_res = 0.f;
  degen.weights.lambda_rank = 0.f;
  degen.use_temporal = false;
  TrainResult deg = distill(degen, f.corpus, frozen, cache);
  TrainResult base = train_baseline(degen, f.corpus, false);
  REQUIRE(deg.iters.size() == base.iters.size());
  for (size_t i = 0; i < deg.iters.size(); ++i)
    CHECK(deg.iters[i].loss.total == base.iters[i].loss.total);
  CHECK(params_checksum(deg.net) == params_checksum(base.net));

  // logged breakdown re-sums to the logged total
  for (const IterRecord& r : a.iters) {
    const float resum = r.loss.recompose(cfg.weights, cfg.use_temporal, true, true);
    CHECK(std::abs(resum - r.loss.total) / std::max(1.f, std::abs(r.loss.total)) <= 1e-6);
  }
}

TEST_CASE("lr schedule invariant holds over a logged run") {
  Fixture& f = fixture();
  TrainConfig cfg = f.cfg;
  cfg.lr_decay_every_iters = 3;  // force several decays in a tiny run
  cfg.epochs = 2;
  TrainResult res = train_baseline(cfg, f.corpus, false);
  for (const IterRecord& r : res.iters) CHECK(r.lr == lr_at(cfg, r.iter));
}

TEST_CASE("DivergedLoss aborts with diagnostics") {
  Fixture& f = fixture();
  TrainConfig cfg = f.cfg;
  cfg.base_lr = 1e28f;  // guaranteed blow-up
  cfg.epochs = 1;
  CHECK_THROWS_WITH_AS(train_baseline(cfg, f.corpus, false), doctest::Contains("DivergedLoss"),
                       Error);
}
