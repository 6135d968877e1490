#include "sparsedit/trainer.hpp"

#include <doctest.h>

#include <filesystem>

using namespace sparsedit;

namespace {

TrainerConfig tiny_config() {
  TrainerConfig c;
  c.shape.grid = TokenGrid{4, 4, 4};
  c.shape.blocks = 2;
  c.shape.heads = 2;
  c.shape.d_k = 8;
  c.shape.mlp_hidden = 32;
  c.window = 5;
  c.threshold = 0.5;
  c.max_stage1_steps = 200;
  c.stage2_steps = 10;
  c.batch = 1;
  c.dataset_size = 8;
  c.eval_size = 2;
  c.sampling.factor = 4;
  c.sampling.stage1_period = 5;
  c.sampling.stage2_period = 5;
  c.calibration.lengths = {64};
  c.calibration.d_k = 8;
  return c;
}

}  // namespace

TEST_CASE("stage controller fires once on a full window below threshold") {
  StageController c(3, 0.1);
  CHECK_FALSE(c.push(0.01));
  CHECK_FALSE(c.push(0.01));
  CHECK(c.push(0.01));
  CHECK(c.fired());
  CHECK_FALSE(c.push(0.0));

  StageController d(2, 0.1);
  CHECK_FALSE(d.push(0.3));
  CHECK_FALSE(d.push(0.05));
  CHECK(d.rolling_mean() == doctest::Approx(0.175));
  CHECK(d.push(0.1));
  CHECK(d.fired());
}

TEST_CASE("stage controller threshold is strict") {
  StageController c(2, 0.5);
  CHECK_FALSE(c.push(0.5));
  CHECK_FALSE(c.push(0.5));
  CHECK(c.push(0.4));
}

TEST_CASE("trainer config JSON round trip and strict keys") {
  auto c = tiny_config();
  c.grouping = GroupDims{2, 2, 2};
  const auto back = TrainerConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.grouping == c.grouping);
  CHECK_THROWS_AS(TrainerConfig::from_json(R"({"windw": 3})"), ConfigError);
  CHECK_THROWS_AS(TrainerConfig::from_json(R"({"shape": {"headz": 3}})"), ConfigError);
  CHECK_THROWS_AS(TrainerConfig::from_json(R"({"window": 0})"), ConfigError);
  CHECK_THROWS_AS(TrainerConfig::from_json("{"), ConfigError);
}

TEST_CASE("predictor training never touches the model") {
  auto a_cfg = tiny_config();
  auto b_cfg = tiny_config();
  b_cfg.predictor.lr = 0.1;
  b_cfg.threshold = 1e-12;  // never switch
  a_cfg.threshold = 1e-12;
  Trainer a(a_cfg, calibrate(a_cfg.calibration));
  Trainer b(b_cfg, calibrate(b_cfg.calibration));
  for (int i = 0; i < 8; ++i) {
    a.step();
    b.step();
  }
  CHECK(a.model().params() == b.model().params());
  CHECK_FALSE(a.predictors()[0].w_q == b.predictors()[0].w_q);
}

TEST_CASE("tiny run switches stages and is deterministic") {
  const auto cfg = tiny_config();
  Trainer a(cfg, calibrate(cfg.calibration));
  REQUIRE(a.run_stage1());
  CHECK(a.stage() == 2);
  REQUIRE(a.transition_iteration().has_value());
  const auto switch_at = *a.transition_iteration();
  for (const auto& r : a.history()) CHECK(r.stage == (r.iteration <= switch_at ? 1 : 2));
  a.run_stage2(cfg.stage2_steps);
  CHECK(std::isfinite(a.eval_loss(true)));
  CHECK(std::isfinite(a.eval_loss(false)));

  Trainer b(cfg, calibrate(cfg.calibration));
  b.run();
  CHECK(b.transition_iteration() == a.transition_iteration());
  CHECK(b.model().params() == a.model().params());
  REQUIRE(b.history().size() == a.history().size());
  for (std::size_t i = 0; i < a.history().size(); ++i) CHECK(a.history()[i].task_loss == b.history()[i].task_loss);
}

TEST_CASE("dense reference branch ignores the dispatcher") {
  const auto cfg = tiny_config();
  Trainer a(cfg, calibrate(cfg.calibration));
  REQUIRE(a.run_stage1());
  Trainer ref = a;
  ref.set_allow_sparse(false);
  ref.run_stage2(5);
  for (int b = 0; b < cfg.shape.blocks; ++b) CHECK_FALSE(ref.block_sparse(b));
  for (const auto& r : ref.history()) CHECK(r.sparse_blocks == 0);
}

TEST_CASE("outputs and checkpoint") {
  const auto cfg = tiny_config();
  Trainer t(cfg, calibrate(cfg.calibration));
  t.run();
  const auto dir = std::filesystem::temp_directory_path() / "sparsedit_trainer_out";
  std::filesystem::remove_all(dir);
  t.write_outputs(dir.string());
  for (const char* f : {"loss.csv", "sparsity.csv", "profile.json", "decisions.json", "config.json", "cost_table.csv"})
    CHECK(std::filesystem::exists(dir / f));
  const auto back = load_toy_checkpoint(dir.string());
  CHECK(back.params() == t.model().params());
  std::filesystem::remove_all(dir);
}
