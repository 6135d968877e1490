#include "sparsedit/predictor.hpp"

#include "sparsedit/tensor_io.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace sparsedit {

namespace {

MatrixXd gather_rows(const MatrixXd& x, std::span<const Eigen::Index> rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < x.rows(), "predictor: sampled row out of range");
    out.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
  }
  return out;
}

std::vector<Eigen::Index> all_rows(Eigen::Index n) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  return rows;
}

void adam_update(MatrixXd& w, MatrixXd& m, MatrixXd& v, const MatrixXd& g, const PredictorConfig& c,
                 std::int64_t step) {
  m = c.beta1 * m + (1.0 - c.beta1) * g;
  v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  w.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.adam_eps);
}

}  // namespace

PredictorParams PredictorParams::init(Eigen::Index d, const PredictorConfig& cfg, std::uint64_t seed) {
  require(d > 0 && cfg.d_lr > 0, "PredictorParams: dimensions must be positive");
  std::mt19937_64 rng(seed);
  const double std_dev = cfg.init_std > 0.0 ? cfg.init_std : 1.0 / std::sqrt(static_cast<double>(d));
  std::normal_distribution<double> nd(0.0, std_dev);
  MatrixXd wq(d, cfg.d_lr), wk(d, cfg.d_lr);
  for (Eigen::Index i = 0; i < wq.size(); ++i) wq.data()[i] = nd(rng);
  for (Eigen::Index i = 0; i < wk.size(); ++i) wk.data()[i] = nd(rng);
  return from_weights(std::move(wq), std::move(wk), cfg);
}

PredictorParams PredictorParams::from_weights(MatrixXd w_q, MatrixXd w_k, const PredictorConfig& cfg) {
  require(w_q.rows() == w_k.rows() && w_q.cols() == w_k.cols(), "PredictorParams: W_q and W_k shapes differ");
  require(w_q.allFinite() && w_k.allFinite(), "PredictorParams: non-finite weights");
  PredictorParams p;
  p.config = cfg;
  p.config.d_lr = static_cast<int>(w_q.cols());
  p.m_q = p.v_q = MatrixXd::Zero(w_q.rows(), w_q.cols());
  p.m_k = p.v_k = MatrixXd::Zero(w_k.rows(), w_k.cols());
  p.w_q = std::move(w_q);
  p.w_k = std::move(w_k);
  return p;
}

MatrixXd project(const MatrixXd& x, const MatrixXd& w) {
  require(x.cols() == w.rows(), "project: X columns must equal W rows");
  return x * w;
}

PredictorLossReport predictor_loss_grad(const MatrixXd& a_hat, const MatrixXd& target,
                                        const PredictorConfig& cfg, MatrixXd& grad) {
  require(a_hat.rows() == target.rows() && a_hat.cols() == target.cols(),
          "predictor_loss: shapes differ");
  require(a_hat.rows() > 0 && a_hat.cols() > 0, "predictor_loss: empty input");
  const auto rows = static_cast<double>(a_hat.rows());
  grad = MatrixXd::Zero(a_hat.rows(), a_hat.cols());
  PredictorLossReport rep;

  double cos_acc = 0.0;
  for (Eigen::Index r = 0; r < a_hat.rows(); ++r) {
    const double tn = target.row(r).norm();
    if (tn == 0.0) continue;  // degenerate row: loss 0
    const double an = a_hat.row(r).norm();
    if (an == 0.0) {
      cos_acc += 1.0;  // cosine taken as 0, no usable direction
      continue;
    }
    const double c = a_hat.row(r).dot(target.row(r)) / (an * tn);
    cos_acc += 1.0 - c;
    grad.row(r) -= (cfg.cos_weight / rows) * (target.row(r) / (an * tn) - c * a_hat.row(r) / (an * an));
  }
  rep.cos_loss = cos_acc / rows;

  const MatrixXd diff = a_hat - target;
  const double dn = diff.norm();
  const double denom = std::max(target.norm(), cfg.norm_floor);
  rep.norm_loss = dn / denom;
  if (dn > 0.0) grad += (cfg.norm_weight / (dn * denom)) * diff;

  rep.total = cfg.cos_weight * rep.cos_loss + cfg.norm_weight * rep.norm_loss;
  return rep;
}

PredictorLossReport predictor_loss(const MatrixXd& a_hat, const MatrixXd& target, const PredictorConfig& cfg) {
  MatrixXd unused;
  return predictor_loss_grad(a_hat, target, cfg, unused);
}

PredictorGradients predictor_gradients(const PredictorParams& params, const MatrixXd& x,
                                       std::span<const Eigen::Index> rows, const MatrixXd& target) {
  require(x.cols() == params.input_dim(), "predictor: input width does not match parameters");
  require(target.rows() == static_cast<Eigen::Index>(rows.size()) && target.cols() == x.rows(),
          "predictor: target must be |rows| x S");
  const MatrixXd xs = gather_rows(x, rows);
  const MatrixXd q_lr = xs * params.w_q;
  const MatrixXd k_lr = x * params.w_k;
  const MatrixXd a_hat = q_lr * k_lr.transpose();
  MatrixXd g_a;
  PredictorGradients out;
  out.loss = predictor_loss_grad(a_hat, target, params.config, g_a);
  out.g_q = xs.transpose() * (g_a * k_lr);
  out.g_k = x.transpose() * (g_a.transpose() * q_lr);
  return out;
}

TrainStepReport train_step(PredictorParams& params, const MatrixXd& x, std::span<const Eigen::Index> rows,
                           const MatrixXd& target) {
  TrainStepReport rep;
  PredictorGradients g = predictor_gradients(params, x, rows, target);
  rep.loss = g.loss;
  if (!g.g_q.allFinite() || !g.g_k.allFinite() || !std::isfinite(g.loss.total)) {
    rep.skipped = true;
    return rep;
  }
  ++params.step;
  adam_update(params.w_q, params.m_q, params.v_q, g.g_q, params.config, params.step);
  adam_update(params.w_k, params.m_k, params.v_k, g.g_k, params.config, params.step);
  return rep;
}

TrainStepReport train_step(PredictorParams& params, const MatrixXd& x, const MatrixXd& target) {
  const auto rows = all_rows(x.rows());
  return train_step(params, x, rows, target);
}

CriticalIndexSet estimate_critical(const PredictorParams& params, const MatrixXd& x, Eigen::Index k,
                                   const SelectionOptions& opt,
                                   std::optional<std::span<const Eigen::Index>> query_rows) {
  require(k >= 1, "estimate_critical: k must be >= 1");
  require(x.cols() == params.input_dim(), "estimate_critical: input width does not match parameters");
  const MatrixXd k_lr = x * params.w_k;
  const MatrixXd q_lr = query_rows ? MatrixXd(gather_rows(x, *query_rows) * params.w_q) : MatrixXd(x * params.w_q);
  return streaming_topk(q_lr, k_lr, k, opt).to_index_set();
}

CriticalIndexSet estimate_critical(const PredictorParams& params, const MatrixXd& x,
                                   std::span<const Eigen::Index> k_per_query, const SelectionOptions& opt) {
  require(x.cols() == params.input_dim(), "estimate_critical: input width does not match parameters");
  const MatrixXd q_lr = x * params.w_q;
  const MatrixXd k_lr = x * params.w_k;
  return streaming_topk(q_lr, k_lr, k_per_query, opt).to_index_set();
}

CriticalIndexSet estimate_critical_at_sparsity(const PredictorParams& params, const MatrixXd& x,
                                               double sparsity, const SelectionOptions& opt) {
  return estimate_critical(params, x, k_from_sparsity(sparsity, x.rows()), opt);
}

PredictionAccuracy prediction_accuracy(const CriticalIndexSet& estimated, const CriticalIndexSet& oracle,
                                       const MatrixXd& scores) {
  require(estimated.rows.size() == oracle.rows.size(), "prediction_accuracy: query counts differ");
  require(estimated.num_keys == oracle.num_keys, "prediction_accuracy: key counts differ");
  require(scores.rows() == static_cast<Eigen::Index>(oracle.rows.size()) && scores.cols() == oracle.num_keys,
          "prediction_accuracy: score matrix shape mismatch");
  PredictionAccuracy acc;
  std::size_t counted = 0;
  for (std::size_t q = 0; q < oracle.rows.size(); ++q) {
    const auto& est = estimated.rows[q];
    const auto& orc = oracle.rows[q];
    if (orc.empty()) continue;
    std::size_t common = 0;
    std::size_t i = 0, j = 0;
    while (i < est.size() && j < orc.size()) {
      if (est[i] == orc[j]) {
        ++common;
        ++i;
        ++j;
      } else if (est[i] < orc[j]) {
        ++i;
      } else {
        ++j;
      }
    }
    double m_est = 0.0, m_orc = 0.0;
    for (KvIndex e : est) m_est += scores(static_cast<Eigen::Index>(q), e);
    for (KvIndex o : orc) m_orc += scores(static_cast<Eigen::Index>(q), o);
    acc.recall += static_cast<double>(common) / static_cast<double>(orc.size());
    acc.score_coverage += m_orc > 0.0 ? m_est / m_orc : 1.0;
    ++counted;
  }
  if (counted > 0) {
    acc.recall /= static_cast<double>(counted);
    acc.score_coverage /= static_cast<double>(counted);
  }
  return acc;
}

void save_predictor(const std::string& prefix, const PredictorParams& params,
                    const PredictorCheckpointMeta& meta) {
  save_tensor(prefix + ".wq.bin", params.w_q);
  save_tensor(prefix + ".wk.bin", params.w_k);
  nlohmann::json j;
  j["block"] = meta.block;
  j["head"] = meta.head;
  j["d"] = params.input_dim();
  j["d_lr"] = params.rank();
  j["step"] = params.step;
  j["lr"] = params.config.lr;
  j["loss_weights"] = {params.config.cos_weight, params.config.norm_weight};
  j["loss_history"] = meta.loss_history;
  std::ofstream os(prefix + ".json");
  if (!os) throw std::runtime_error("save_predictor: cannot open " + prefix + ".json");
  os << j.dump(2) << '\n';
}

PredictorParams load_predictor(const std::string& prefix, PredictorCheckpointMeta* meta) {
  std::ifstream is(prefix + ".json");
  if (!is) throw ConfigError("load_predictor: missing " + prefix + ".json");
  std::stringstream ss;
  ss << is.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("load_predictor: ") + e.what());
  }
  PredictorConfig cfg;
  cfg.lr = j.value("lr", cfg.lr);
  if (j.contains("loss_weights")) {
    cfg.cos_weight = j["loss_weights"][0].get<double>();
    cfg.norm_weight = j["loss_weights"][1].get<double>();
  }
  PredictorParams p = PredictorParams::from_weights(load_tensor(prefix + ".wq.bin"),
                                                    load_tensor(prefix + ".wk.bin"), cfg);
  require(p.input_dim() == j.at("d").get<Eigen::Index>() && p.rank() == j.at("d_lr").get<Eigen::Index>(),
          "load_predictor: metadata does not match stored matrices");
  p.step = j.value("step", std::int64_t{0});
  if (meta) {
    meta->block = j.value("block", 0);
    meta->head = j.value("head", 0);
    meta->loss_history = j.value("loss_history", std::vector<double>{});
  }
  return p;
}

}  // namespace sparsedit
