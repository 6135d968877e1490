#pragma once

// Two-stage training of the toy DiT. Stage 1 trains everything with dense
// attention while per-head low-rank predictors learn to track Q K^T; once the
// rolling predictor loss drops below a threshold the run switches to stage 2,
// where the dispatcher turns on predictor-selected sparse attention per block.

#include "sparsedit/dispatcher.hpp"
#include "sparsedit/grouping.hpp"
#include "sparsedit/predictor.hpp"
#include "sparsedit/profiler.hpp"
#include "sparsedit/toy_dit.hpp"

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sparsedit {

struct TrainerConfig {
  ToyDiTShape shape;
  double lr = 5e-4;
  std::uint64_t seed = 0;
  double theta = 0.9;
  double threshold = 0.01;  // stage-1 predictor loss threshold
  int window = 100;
  int batch = 2;
  int max_stage1_steps = 5000;
  int stage2_steps = 200;
  PredictorConfig predictor;
  SampleConfig sampling;  // stage-2 predictor refreshes share stage2_period
  int predictor_row_factor = 4;  // predictor trains on ceil(S / factor) sampled query rows
  double profile_alpha = 0.1;
  int dataset_size = 64;
  int eval_size = 8;
  bool allow_sparse = true;  // false gives the dense reference run
  std::uint64_t mem_budget = 1ull << 30;
  CalibrationConfig calibration;
  std::optional<GroupDims> grouping;

  TrainerConfig();
  void validate() const;
  std::string to_json() const;
  static TrainerConfig from_json(const std::string& text);
};

/// Rolling-window rule for the 1 -> 2 switch: fires the first time a full
/// window of block-averaged predictor losses has mean below the threshold.
class StageController {
 public:
  StageController(int window, double threshold);
  /// Returns true exactly once, on the qualifying push.
  bool push(double loss);
  [[nodiscard]] bool fired() const { return fired_; }
  [[nodiscard]] double rolling_mean() const;

 private:
  std::size_t window_;
  double threshold_;
  std::deque<double> buf_;
  double sum_ = 0.0;
  bool fired_ = false;
};

struct IterationRecord {
  std::int64_t iteration = 0;
  int stage = 1;
  double task_loss = 0.0;
  std::optional<double> predictor_loss;  // block-averaged, when trained this step
  int sparse_blocks = 0;
};

struct ProfileSample {
  std::int64_t iteration = 0;
  int block = 0;
  int head = 0;
  double sample = 0.0;
  double ema = 0.0;
};

class Trainer {
 public:
  Trainer(TrainerConfig cfg, CostProfileTable table);

  /// One iteration in the current stage.
  void step();
  void stage1_step();
  void stage2_step();

  /// Steps until stage 2 has run `stage2_steps` iterations or stage 1 gives up.
  void run();
  /// Stage-1 steps until the switch fires (or the step cap is hit); true on switch.
  bool run_stage1();
  void run_stage2(int steps);

  /// Mean flow-matching loss on the fixed evaluation set. With `dispatch`
  /// the current per-block sparse/dense choice is used, otherwise dense.
  [[nodiscard]] double eval_loss(bool dispatch) const;

  [[nodiscard]] int stage() const { return stage_; }
  [[nodiscard]] std::int64_t iteration() const { return iteration_; }
  [[nodiscard]] std::optional<std::int64_t> transition_iteration() const { return transition_; }
  [[nodiscard]] const ToyDiT& model() const { return model_; }
  [[nodiscard]] const TrainerConfig& config() const { return cfg_; }
  [[nodiscard]] const std::vector<IterationRecord>& history() const { return history_; }
  [[nodiscard]] const std::vector<ProfileSample>& profile_series() const { return series_; }
  [[nodiscard]] const SparsityProfile& profile() const { return profile_; }
  [[nodiscard]] const Dispatcher& dispatcher() const { return dispatcher_; }
  [[nodiscard]] const std::vector<PredictorParams>& predictors() const { return predictors_; }
  [[nodiscard]] bool block_sparse(int block) const;
  void set_allow_sparse(bool on) { cfg_.allow_sparse = on; }

  /// Trains every block's predictors once on the given forward cache and
  /// returns the block-averaged loss. Reads activations only.
  double train_predictors(const ForwardCache& cache);

  /// Per-head index sets for `block` from its input, at the profiled k.
  std::vector<CriticalIndexSet> estimate_block(int block, const MatrixXd& h_in) const;

  /// loss.csv, sparsity.csv, profile.json, decisions.json, config.json and a
  /// checkpoint directory.
  void write_outputs(const std::string& dir) const;

 private:
  void iterate();
  void profile_blocks(const ForwardCache& cache);
  void update_dispatch();
  PredictorParams& predictor(int block, int head);
  [[nodiscard]] const PredictorParams& predictor(int block, int head) const;

  TrainerConfig cfg_;
  ToyDiT model_;
  Adam adam_;
  std::vector<PredictorParams> predictors_;  // block-major
  SparsityProfile profile_;
  Dispatcher dispatcher_;
  StageController controller_;
  std::mt19937_64 rng_;
  std::vector<MatrixXd> dataset_;
  struct EvalItem {
    MatrixXd x_t, velocity;
    double t;
  };
  std::vector<EvalItem> eval_;
  std::optional<VoxelGroupPlan> groups_;
  int stage_ = 1;
  std::int64_t iteration_ = 0;
  std::int64_t stage2_done_ = 0;
  std::optional<std::int64_t> transition_;
  std::vector<IterationRecord> history_;
  std::vector<ProfileSample> series_;
};

/// Rebuilds the model saved by write_outputs (config.json plus checkpoint/).
/// Missing or malformed files raise ConfigError.
ToyDiT load_toy_checkpoint(const std::string& dir);

}  // namespace sparsedit
