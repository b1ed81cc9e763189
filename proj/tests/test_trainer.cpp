#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "omnidet/trainer.hpp"

using namespace omnidet;
namespace fs = std::filesystem;

namespace {

Config tiny_config() {
  Config cfg;
  cfg.num_classes = 2;
  cfg.image_size = 32;
  cfg.lr = 1e-3;
  cfg.seed = 123;
  return cfg;
}

std::vector<Sample> tiny_batch(Granularity g, std::uint64_t seed, int n) {
  auto [manifest, images] = data::generate_synthetic(seed, n, 32, 2);
  std::vector<Sample> batch;
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.id = i;
    s.image = images[i];
    s.granularity = g;
    if (g == Granularity::FULL) s.boxes = manifest.records[i].boxes;
    if (g != Granularity::UNLABELED) s.image_labels = manifest.records[i].labels;
    batch.push_back(std::move(s));
  }
  return batch;
}

fs::path write_split(const std::string& name, std::uint64_t seed, int n, double r_full,
                     double r_weak, double r_unlabeled) {
  fs::path dir = fs::temp_directory_path() / ("omnidet_trainer_" + name);
  fs::remove_all(dir);
  auto [manifest, images] = data::generate_synthetic(seed, n, 32, 2, name);
  auto hidden = data::assign_granularity(manifest, r_full, r_weak, r_unlabeled, seed);
  data::write_dataset(dir.string(), manifest, images, hidden);
  return dir;
}

}  // namespace

TEST_CASE("config serialization") {
  SUBCASE("json round trip preserves every field") {
    Config cfg = tiny_config();
    cfg.lr = 3.5e-4;
    cfg.patience = 7;
    cfg.w_inter = 0.25;
    Config back = trainer::config_from_json(trainer::config_to_json(cfg));
    CHECK(trainer::config_to_json(back) == trainer::config_to_json(cfg));
  }
  SUBCASE("key=value file with comments") {
    fs::path p = fs::temp_directory_path() / "omnidet_test.cfg";
    std::ofstream(p) << "# training setup\nlr = 0.002\nnum_classes=4 # four\n\nsteps = 77\n";
    Config cfg = trainer::parse_config_file(p.string());
    CHECK(cfg.lr == 0.002);
    CHECK(cfg.num_classes == 4);
    CHECK(cfg.steps == 77);
    CHECK(cfg.gamma == 2.0);  // untouched default
  }
  SUBCASE("unknown keys and bad values are errors") {
    fs::path p = fs::temp_directory_path() / "omnidet_bad.cfg";
    std::ofstream(p) << "learning_rate = 0.1\n";
    CHECK_THROWS_WITH_AS(trainer::parse_config_file(p.string()),
                         doctest::Contains("learning_rate"), std::runtime_error);
    std::ofstream(p) << "lr = fast\n";
    CHECK_THROWS_AS(trainer::parse_config_file(p.string()), std::runtime_error);
    CHECK_THROWS_AS(trainer::parse_config_file("/nonexistent.cfg"), std::runtime_error);
  }
  SUBCASE("single overrides") {
    Config cfg;
    trainer::apply_override(cfg, "w_sfl", "0.5");
    CHECK(cfg.w_sfl == 0.5);
    trainer::apply_override(cfg, "n_unlabeled", "0");
    CHECK(cfg.n_unlabeled == 0);
    CHECK_THROWS_AS(trainer::apply_override(cfg, "nope", "1"), std::runtime_error);
    CHECK_THROWS_AS(trainer::apply_override(cfg, "lr", "abc"), std::runtime_error);
  }
}

TEST_CASE("train_step loss routing") {
  Config cfg = tiny_config();

  SUBCASE("fully supervised batch has zero distillation loss") {
    trainer::TrainState state(cfg);
    auto report = trainer::train_step(state, tiny_batch(Granularity::FULL, 1, 2));
    CHECK(report.sfl == 0.0);
    CHECK(std::isfinite(report.focal));
    CHECK(report.focal > 0.0);
    CHECK(report.bce > 0.0);  // FULL samples also feed the image-level loss
    CHECK(report.total ==
          doctest::Approx(report.focal + report.reg + report.bce + report.intra +
                          report.inter + report.sfl)
              .epsilon(1e-12));
    CHECK(state.step == 1);
  }
  SUBCASE("unlabeled batch touches only the distillation loss") {
    trainer::TrainState state(cfg);
    // Teacher equals student at initialization, so push the student away first.
    trainer::train_step(state, tiny_batch(Granularity::FULL, 1, 2));
    auto report = trainer::train_step(state, tiny_batch(Granularity::UNLABELED, 2, 2));
    CHECK(report.focal == 0.0);
    CHECK(report.reg == 0.0);
    CHECK(report.bce == 0.0);
    CHECK(report.intra == 0.0);
    CHECK(report.inter == 0.0);
    CHECK(report.sfl > 0.0);
  }
  SUBCASE("weak batch gets image-level and distillation losses but no box losses") {
    trainer::TrainState state(cfg);
    trainer::train_step(state, tiny_batch(Granularity::FULL, 1, 2));
    auto report = trainer::train_step(state, tiny_batch(Granularity::WEAK, 3, 2));
    CHECK(report.focal == 0.0);
    CHECK(report.reg == 0.0);
    CHECK(report.bce > 0.0);
    CHECK(report.sfl > 0.0);
  }
  SUBCASE("a step moves the student and the prototype bank") {
    trainer::TrainState state(cfg);
    Tensor before = state.student.parameters()[0]->val;
    trainer::train_step(state, tiny_batch(Granularity::FULL, 1, 2));
    CHECK(state.student.parameters()[0]->val.v != before.v);
    bool any_init = false;
    for (char f : state.bank.initialized) any_init |= f != 0;
    CHECK(any_init);
  }
}

TEST_CASE("supervised-only config reduces to plain focal+reg adam") {
  // With the auxiliary weights at zero, a train_step must match a hand-rolled
  // focal+smooth-l1 Adam update to machine precision.
  Config cfg = tiny_config();
  cfg.w_bce = cfg.w_intra = cfg.w_inter = cfg.w_sfl = 0.0;
  auto batch = tiny_batch(Granularity::FULL, 5, 2);

  trainer::TrainState state(cfg);
  trainer::train_step(state, batch);

  std::mt19937_64 rng(data::mix_seed(cfg.seed, 0x696e6974ULL));
  Detector ref(cfg, rng);
  AnchorSet anchors = build_anchors(32, 32, cfg.pyramid_levels, cfg.anchors_per_cell);
  for (const Var& p : ref.parameters()) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
  Var total = constant(Tensor::scalar(0.0));
  for (const Sample& s : batch) {
    PyramidOutputs out = ref.forward(s.image);
    AnchorTargets t = assign_targets(s.boxes, anchors);
    total = add(total, add(focal_loss(out.cls_probs, t, cfg.num_classes,
                                      cfg.anchors_per_cell, cfg.alpha, cfg.gamma),
                           smooth_l1_loss(out.reg_maps, t, cfg.anchors_per_cell)));
  }
  total = scale(total, 1.0 / batch.size());
  backward(total);
  auto& params = ref.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i]->val.size(); ++j) {
      double g = params[i]->grad[j];
      double m = (1 - cfg.adam_beta1) * g;
      double v = (1 - cfg.adam_beta2) * g * g;
      double mhat = m / (1 - cfg.adam_beta1);
      double vhat = v / (1 - cfg.adam_beta2);
      params[i]->val[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params[i]->val.size(); ++j)
      CHECK(state.student.parameters()[i]->val[j] ==
            doctest::Approx(params[i]->val[j]).epsilon(1e-12));
}

TEST_CASE("train_step streams are deterministic across identical states") {
  Config cfg = tiny_config();
  trainer::TrainState a(cfg), b(cfg);
  for (int step = 0; step < 3; ++step) {
    auto batch = tiny_batch(step % 2 ? Granularity::WEAK : Granularity::FULL, step, 2);
    CHECK(trainer::train_step(a, batch).csv_row() ==
          trainer::train_step(b, batch).csv_row());
  }
  for (std::size_t i = 0; i < a.student.parameters().size(); ++i)
    CHECK(a.student.parameters()[i]->val.v == b.student.parameters()[i]->val.v);
}

TEST_CASE("lr schedule") {
  Config cfg = tiny_config();
  cfg.patience = 2;
  trainer::TrainState state(cfg);
  state.lr = 1e-3;
  trainer::lr_schedule(state, 0.5);  // improvement
  CHECK(state.lr == 1e-3);
  CHECK(state.best_map == 0.5);
  trainer::lr_schedule(state, 0.5);  // flat: strike one
  CHECK(state.lr == 1e-3);
  trainer::lr_schedule(state, 0.49);  // strike two -> divide
  CHECK(state.lr == doctest::Approx(1e-4));
  CHECK(state.evals_since_improve == 0);
  trainer::lr_schedule(state, 0.6);  // recovery resets the clock
  CHECK(state.best_map == 0.6);
  CHECK(state.lr == doctest::Approx(1e-4));
  // Floor.
  state.lr = 2e-8;
  trainer::lr_schedule(state, 0.0);
  trainer::lr_schedule(state, 0.0);
  CHECK(state.lr == cfg.lr_floor);
}

TEST_CASE("checkpointing") {
  Config cfg = tiny_config();
  fs::path ckpt = fs::temp_directory_path() / "omnidet_test.ckpt";

  SUBCASE("round trip restores every tensor bitwise") {
    trainer::TrainState state(cfg);
    trainer::train_step(state, tiny_batch(Granularity::FULL, 1, 2));
    state.best_map = 0.25;
    trainer::save_checkpoint(state, ckpt.string());
    trainer::TrainState loaded = trainer::load_checkpoint(ckpt.string(), cfg);
    CHECK(loaded.step == state.step);
    CHECK(loaded.adam_t == state.adam_t);
    CHECK(loaded.best_map == 0.25);
    for (std::size_t i = 0; i < state.student.parameters().size(); ++i) {
      CHECK(loaded.student.parameters()[i]->val.v ==
            state.student.parameters()[i]->val.v);
      CHECK(loaded.teacher.model().parameters()[i]->val.v ==
            state.teacher.model().parameters()[i]->val.v);
      CHECK(loaded.adam_m[i].v == state.adam_m[i].v);
      CHECK(loaded.adam_v[i].v == state.adam_v[i].v);
    }
    CHECK(loaded.bank.prototypes.v == state.bank.prototypes.v);
    CHECK(loaded.bank.step == state.bank.step);
  }
  SUBCASE("config mismatch error names the field") {
    trainer::TrainState state(cfg);
    trainer::save_checkpoint(state, ckpt.string());
    Config other = cfg;
    other.lr = 9e-9;
    CHECK_THROWS_WITH_AS(trainer::load_checkpoint(ckpt.string(), other),
                         doctest::Contains("lr"), std::runtime_error);
  }
  SUBCASE("garbage file is rejected") {
    std::ofstream(ckpt) << "not a checkpoint";
    CHECK_THROWS_AS(trainer::load_checkpoint(ckpt.string(), cfg), std::runtime_error);
    CHECK_THROWS_AS(trainer::load_checkpoint("/nonexistent.ckpt", cfg),
                    std::runtime_error);
  }
}

TEST_CASE("resume equals an uninterrupted run exactly") {
  Config cfg = tiny_config();
  cfg.n_full = 1;
  cfg.n_weak = 1;
  cfg.n_unlabeled = 1;
  fs::path train_dir = write_split("resume_train", 61, 12, 0.5, 0.25, 0.25);
  trainer::LoadedSplit train = trainer::load_split(train_dir.string());
  fs::path ckpt = fs::temp_directory_path() / "omnidet_resume.ckpt";

  trainer::TrainState straight(cfg);
  auto full_run = trainer::run_training(straight, train, train_dir.string(), nullptr, "", 6);

  trainer::TrainState half(cfg);
  trainer::run_training(half, train, train_dir.string(), nullptr, "", 3);
  trainer::save_checkpoint(half, ckpt.string());
  trainer::TrainState resumed = trainer::load_checkpoint(ckpt.string(), cfg);
  auto tail_run = trainer::run_training(resumed, train, train_dir.string(), nullptr, "", 3);

  REQUIRE(full_run.reports.size() == 6);
  REQUIRE(tail_run.reports.size() == 3);
  for (int i = 0; i < 3; ++i)
    CHECK(tail_run.reports[i].csv_row() == full_run.reports[3 + i].csv_row());
  for (std::size_t i = 0; i < straight.student.parameters().size(); ++i) {
    CHECK(resumed.student.parameters()[i]->val.v ==
          straight.student.parameters()[i]->val.v);
    CHECK(resumed.teacher.model().parameters()[i]->val.v ==
          straight.teacher.model().parameters()[i]->val.v);
  }
  CHECK(resumed.bank.prototypes.v == straight.bank.prototypes.v);
}

TEST_CASE("run_training with validation logging") {
  Config cfg = tiny_config();
  cfg.n_full = 1;
  cfg.n_weak = 1;
  cfg.n_unlabeled = 1;
  cfg.eval_every = 2;
  fs::path train_dir = write_split("log_train", 71, 12, 0.5, 0.25, 0.25);
  fs::path val_dir = write_split("log_val", 72, 4, 1.0, 0.0, 0.0);
  trainer::LoadedSplit train = trainer::load_split(train_dir.string());
  trainer::LoadedSplit val = trainer::load_split(val_dir.string());

  trainer::TrainState state(cfg);
  std::ostringstream log;
  auto result =
      trainer::run_training(state, train, train_dir.string(), &val, val_dir.string(), 4, &log);
  CHECK(result.reports.size() == 4);
  REQUIRE(result.evals.size() == 2);
  CHECK(result.evals[0].step == 2);
  CHECK(result.evals[1].step == 4);
  for (const auto& e : result.evals) CHECK((e.map >= 0.0 && e.map <= 1.0));
  CHECK(result.final_map == result.evals.back().map);
  std::string text = log.str();
  CHECK(text.find(trainer::LossReport::csv_header()) != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);  // header + 4 rows
}

TEST_CASE("infer maps detections back to the native resolution") {
  Config cfg = tiny_config();
  cfg.image_size = 32;
  trainer::TrainState state(cfg);
  auto [manifest, images] = data::generate_synthetic(81, 1, 64, 2);
  auto dets = trainer::infer(state.student, state.anchors, images[0], 0.001);
  for (const auto& d : dets) {
    CHECK(d.x_min >= 0);
    CHECK(d.x_max <= 64.0 + 1e-9);
    CHECK(d.y_max <= 64.0 + 1e-9);
  }
}

TEST_CASE("evaluate_split scores hidden ground truth of weak samples") {
  Config cfg = tiny_config();
  fs::path dir = write_split("eval_split", 91, 8, 0.5, 0.5, 0.0);
  trainer::LoadedSplit split = trainer::load_split(dir.string());
  trainer::TrainState state(cfg);
  eval::EvalResult res = trainer::evaluate_split(state.student, state.anchors, split,
                                                 dir.string());
  long long total_gt = 0;
  {
    eval::SidecarGate gate;
    for (const auto& [id, boxes] : data::load_hidden_sidecar(dir.string()))
      total_gt += static_cast<long long>(boxes.size());
  }
  for (const auto& rec : split.manifest.records)
    total_gt += static_cast<long long>(rec.boxes.size());
  CHECK(res.n_gt == total_gt);
  CHECK((res.map >= 0.0 && res.map <= 1.0));
}
