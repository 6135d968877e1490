#pragma once

// Low-rank sparsity predictor: two d x d_lr projections whose product
// Q_lr K_lr^T tracks Q K^T closely enough to rank keys per query. Trained with
// a cosine + relative-norm loss on sampled query rows, using analytic gradients
// and Adam.

#include "sparsedit/index_set.hpp"
#include "sparsedit/selection.hpp"
#include "sparsedit/types.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sparsedit {

struct PredictorConfig {
  int d_lr = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double cos_weight = 0.95;
  double norm_weight = 0.05;
  double norm_floor = 1e-12;  // denominator floor for the relative norm term
  double init_std = -1.0;     // <= 0 selects 1/sqrt(d)
};

struct PredictorParams {
  MatrixXd w_q;  // d x d_lr
  MatrixXd w_k;  // d x d_lr
  MatrixXd m_q, v_q, m_k, v_k;
  std::int64_t step = 0;
  PredictorConfig config;

  [[nodiscard]] Eigen::Index input_dim() const { return w_q.rows(); }
  [[nodiscard]] Eigen::Index rank() const { return w_q.cols(); }

  static PredictorParams init(Eigen::Index d, const PredictorConfig& cfg, std::uint64_t seed);
  static PredictorParams from_weights(MatrixXd w_q, MatrixXd w_k, const PredictorConfig& cfg = {});
};

struct PredictorLossReport {
  double cos_loss = 0.0;
  double norm_loss = 0.0;
  double total = 0.0;
};

/// X W.
MatrixXd project(const MatrixXd& x, const MatrixXd& w);

/// cos_loss = 1 - mean row cosine (zero target rows contribute 0);
/// norm_loss = |A_hat - A|_F / max(|A|_F, floor); total = weighted sum.
PredictorLossReport predictor_loss(const MatrixXd& a_hat, const MatrixXd& target,
                                   const PredictorConfig& cfg = {});

/// Loss together with dL/dA_hat.
PredictorLossReport predictor_loss_grad(const MatrixXd& a_hat, const MatrixXd& target,
                                        const PredictorConfig& cfg, MatrixXd& grad);

struct PredictorGradients {
  MatrixXd g_q;
  MatrixXd g_k;
  PredictorLossReport loss;
};

/// Gradients of the loss between (X_rows W_q)(X W_k)^T and `target`
/// (one target row per entry of `rows`).
PredictorGradients predictor_gradients(const PredictorParams& params, const MatrixXd& x,
                                       std::span<const Eigen::Index> rows, const MatrixXd& target);

struct TrainStepReport {
  PredictorLossReport loss;
  bool skipped = false;  // non-finite gradient; parameters untouched
};

/// One Adam step. `x` is read-only: the main model is never touched.
TrainStepReport train_step(PredictorParams& params, const MatrixXd& x,
                           std::span<const Eigen::Index> rows, const MatrixXd& target);
/// All rows of `x` as queries.
TrainStepReport train_step(PredictorParams& params, const MatrixXd& x, const MatrixXd& target);

/// Top-k keys per query of (X W_q)(X W_k)^T. When `query_rows` is given only
/// those rows are estimated (e.g. group proxies).
CriticalIndexSet estimate_critical(const PredictorParams& params, const MatrixXd& x, Eigen::Index k,
                                   const SelectionOptions& opt = {},
                                   std::optional<std::span<const Eigen::Index>> query_rows = std::nullopt);
CriticalIndexSet estimate_critical(const PredictorParams& params, const MatrixXd& x,
                                   std::span<const Eigen::Index> k_per_query,
                                   const SelectionOptions& opt = {});
CriticalIndexSet estimate_critical_at_sparsity(const PredictorParams& params, const MatrixXd& x,
                                               double sparsity, const SelectionOptions& opt = {});

struct PredictionAccuracy {
  double recall = 0.0;          // mean |est & oracle| / |oracle|
  double score_coverage = 0.0;  // mean mass(est) / mass(oracle)
};

PredictionAccuracy prediction_accuracy(const CriticalIndexSet& estimated, const CriticalIndexSet& oracle,
                                       const MatrixXd& scores);

struct PredictorCheckpointMeta {
  int block = 0;
  int head = 0;
  std::vector<double> loss_history;
};

/// Writes <prefix>.wq.bin, <prefix>.wk.bin (tensor format) and <prefix>.json.
void save_predictor(const std::string& prefix, const PredictorParams& params,
                    const PredictorCheckpointMeta& meta);
PredictorParams load_predictor(const std::string& prefix, PredictorCheckpointMeta* meta = nullptr);

}  // namespace sparsedit
