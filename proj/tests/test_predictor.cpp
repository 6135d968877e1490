#include "oracles.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/predictor.hpp"

#include <doctest.h>

#include <filesystem>

using namespace sparsedit;

namespace {

double loss_at(const MatrixXd& wq, const MatrixXd& wk, const MatrixXd& x, const std::vector<Eigen::Index>& rows,
               const MatrixXd& target) {
  MatrixXd xr(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) xr.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
  return predictor_loss((xr * wq) * (x * wk).transpose(), target).total;
}

}  // namespace

TEST_CASE("predictor loss values") {
  std::mt19937_64 rng(41);
  const MatrixXd a = oracle::random_matrix(5, 6, rng);
  const auto same = predictor_loss(a, a);
  CHECK(same.total == doctest::Approx(0.0).epsilon(1e-12));
  const auto flipped = predictor_loss(-a, a);
  CHECK(flipped.cos_loss == doctest::Approx(2.0));
  CHECK(flipped.norm_loss == doctest::Approx(2.0));
  PredictorConfig cfg;
  CHECK(flipped.total == doctest::Approx(cfg.cos_weight * 2.0 + cfg.norm_weight * 2.0));
  const auto scaled = predictor_loss(2.0 * a, a);
  CHECK(scaled.cos_loss == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(scaled.norm_loss == doctest::Approx(1.0));
}

TEST_CASE("zero target rows contribute nothing to the cosine term") {
  MatrixXd a(2, 2), t(2, 2);
  a << 1, 0, 3, 4;
  t << 1, 0, 0, 0;
  CHECK(predictor_loss(a, t).cos_loss == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("analytic predictor gradients match finite differences") {
  std::mt19937_64 rng(42);
  for (int t = 0; t < 10; ++t) {
    const MatrixXd x = oracle::random_matrix(8, 6, rng);
    const MatrixXd target = oracle::random_matrix(8, 8, rng);
    PredictorConfig cfg;
    cfg.d_lr = 2;
    const auto p = PredictorParams::init(6, cfg, static_cast<std::uint64_t>(t));
    std::vector<Eigen::Index> rows(8);
    std::iota(rows.begin(), rows.end(), Eigen::Index{0});
    const auto g = predictor_gradients(p, x, rows, target);
    const MatrixXd fq = oracle::finite_difference([&](const MatrixXd& w) { return loss_at(w, p.w_k, x, rows, target); },
                                                  p.w_q, 1e-6);
    const MatrixXd fk = oracle::finite_difference([&](const MatrixXd& w) { return loss_at(p.w_q, w, x, rows, target); },
                                                  p.w_k, 1e-6);
    CHECK((g.g_q - fq).norm() / std::max(fq.norm(), 1e-12) < 1e-5);
    CHECK((g.g_k - fk).norm() / std::max(fk.norm(), 1e-12) < 1e-5);
  }
}

TEST_CASE("gradients with sampled query rows") {
  std::mt19937_64 rng(43);
  const MatrixXd x = oracle::random_matrix(10, 5, rng);
  const std::vector<Eigen::Index> rows{1, 4, 9};
  const MatrixXd target = oracle::random_matrix(3, 10, rng);
  PredictorConfig cfg;
  cfg.d_lr = 3;
  const auto p = PredictorParams::init(5, cfg, 1);
  const auto g = predictor_gradients(p, x, rows, target);
  const MatrixXd fq =
      oracle::finite_difference([&](const MatrixXd& w) { return loss_at(w, p.w_k, x, rows, target); }, p.w_q, 1e-6);
  CHECK((g.g_q - fq).norm() / fq.norm() < 1e-5);
  CHECK(g.loss.total == doctest::Approx(loss_at(p.w_q, p.w_k, x, rows, target)));
}

TEST_CASE("train_step lowers the loss and leaves the input untouched") {
  std::mt19937_64 rng(44);
  const MatrixXd x = oracle::random_matrix(32, 8, rng);
  const MatrixXd a = oracle::random_matrix(8, 2, rng), b = oracle::random_matrix(8, 2, rng);
  const MatrixXd target = (x * a) * (x * b).transpose();
  PredictorConfig cfg;
  cfg.d_lr = 4;
  cfg.lr = 1e-2;
  auto p = PredictorParams::init(8, cfg, 3);
  const MatrixXd x_before = x;
  const double first = train_step(p, x, target).loss.total;
  double last = first;
  for (int i = 0; i < 300; ++i) last = train_step(p, x, target).loss.total;
  CHECK(last < 0.5 * first);
  CHECK(p.step == 301);
  CHECK(x == x_before);
}

TEST_CASE("non-finite gradients skip the step") {
  PredictorConfig cfg;
  cfg.d_lr = 1;
  auto p = PredictorParams::init(2, cfg, 0);
  const auto before = p.w_q;
  MatrixXd x = MatrixXd::Ones(2, 2);
  MatrixXd target = MatrixXd::Ones(2, 2);
  target(0, 0) = std::numeric_limits<double>::infinity();
  const auto rep = train_step(p, x, target);
  CHECK(rep.skipped);
  CHECK(p.w_q == before);
}

TEST_CASE("estimate_critical is top-k of the low-rank product") {
  std::mt19937_64 rng(45);
  const MatrixXd x = oracle::random_matrix(40, 6, rng);
  PredictorConfig cfg;
  cfg.d_lr = 3;
  const auto p = PredictorParams::init(6, cfg, 8);
  const auto got = estimate_critical(p, x, 7);
  CHECK(got.rows == oracle::topk(x * p.w_q, x * p.w_k, 7));
  const std::vector<Eigen::Index> rows{3, 17};
  const auto sub = estimate_critical(p, x, 5, {}, std::span<const Eigen::Index>(rows));
  REQUIRE(sub.rows.size() == 2);
  CHECK(sub.rows[1] == oracle::topk((x * p.w_q).row(17), x * p.w_k, 5)[0]);
  CHECK(estimate_critical_at_sparsity(p, x, 0.9).rows == oracle::topk(x * p.w_q, x * p.w_k, 4));
}

TEST_CASE("prediction accuracy") {
  CriticalIndexSet a, b;
  a.num_keys = b.num_keys = 4;
  a.rows = {{0, 1}, {2}};
  b.rows = {{0, 3}, {2}};
  MatrixXd s(2, 4);
  s << 0.4, 0.3, 0.2, 0.1, 0.1, 0.1, 0.7, 0.1;
  const auto acc = prediction_accuracy(a, b, s);
  CHECK(acc.recall == doctest::Approx(0.75));
  CHECK(acc.score_coverage == doctest::Approx((0.7 / 0.5 + 1.0) / 2));
  CHECK(prediction_accuracy(b, b, s).recall == 1.0);
}

TEST_CASE("predictor checkpoints round trip") {
  PredictorConfig cfg;
  cfg.d_lr = 2;
  auto p = PredictorParams::init(5, cfg, 4);
  p.step = 12;
  const auto prefix = (std::filesystem::temp_directory_path() / "sparsedit_pred").string();
  save_predictor(prefix, p, {1, 2, {0.5, 0.25}});
  PredictorCheckpointMeta meta;
  const auto back = load_predictor(prefix, &meta);
  CHECK(back.w_q == p.w_q);
  CHECK(back.w_k == p.w_k);
  CHECK(meta.block == 1);
  CHECK(meta.head == 2);
  CHECK(meta.loss_history == std::vector<double>{0.5, 0.25});
  for (const char* ext : {".wq.bin", ".wk.bin", ".json"}) std::filesystem::remove(prefix + ext);
}
