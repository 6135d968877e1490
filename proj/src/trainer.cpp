#include "sparsedit/trainer.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/selection.hpp"
#include "sparsedit/synthetic.hpp"
#include "sparsedit/tensor_io.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace sparsedit {

namespace {

using nlohmann::json;

constexpr std::uint64_t kDataStream = 0x9e3779b97f4a7c15ull;
constexpr std::uint64_t kEvalStream = 0xbf58476d1ce4e5b9ull;

json shape_json(const ToyDiTShape& s) {
  return {{"grid", json::array({s.grid.frames, s.grid.height, s.grid.width})},
          {"channels", s.channels},
          {"blocks", s.blocks},
          {"heads", s.heads},
          {"d_k", s.d_k},
          {"mlp_hidden", s.mlp_hidden},
          {"qk_scale", s.qk_scale},
          {"qk_decay", s.qk_decay}};
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw InvalidInput("cannot write " + path.string());
  os << text;
}

}  // namespace

TrainerConfig::TrainerConfig() {
  shape.qk_scale = 6.0;
  predictor.d_lr = 4;
  predictor.lr = 1e-2;
  sampling.stage1_period = 20;
  sampling.stage2_period = 20;
  calibration.lengths = {512};
  calibration.d_k = shape.d_k;
  calibration.d_lr = predictor.d_lr;
  calibration.gather_efficiency = 0.4;
  calibration.compare_time = 1e-10;
}

void TrainerConfig::validate() const {
  shape.validate();
  require(lr > 0 && std::isfinite(lr), "trainer: lr must be positive");
  require(theta > 0 && theta <= 1, "trainer: theta must be in (0, 1]");
  require(threshold > 0, "trainer: threshold must be positive");
  require(window >= 1, "trainer: window must be >= 1");
  require(batch >= 1, "trainer: batch must be >= 1");
  require(max_stage1_steps >= 0 && stage2_steps >= 0, "trainer: step counts must be non-negative");
  require(predictor.d_lr >= 1 && predictor.d_lr <= shape.d_model(), "trainer: predictor rank out of range");
  require(predictor.lr > 0, "trainer: predictor lr must be positive");
  require(sampling.factor >= 1 && sampling.stage1_period >= 1 && sampling.stage2_period >= 1,
          "trainer: sampling factor and periods must be >= 1");
  require(predictor_row_factor >= 1, "trainer: predictor_row_factor must be >= 1");
  require(profile_alpha > 0 && profile_alpha <= 1, "trainer: profile_alpha must be in (0, 1]");
  require(dataset_size >= 1 && eval_size >= 1, "trainer: dataset and eval sizes must be >= 1");
  if (grouping) require(grouping->t >= 1 && grouping->h >= 1 && grouping->w >= 1, "trainer: bad group dims");
}

std::string TrainerConfig::to_json() const {
  json j{{"shape", shape_json(shape)},
         {"lr", lr},
         {"seed", seed},
         {"theta", theta},
         {"threshold", threshold},
         {"window", window},
         {"batch", batch},
         {"max_stage1_steps", max_stage1_steps},
         {"stage2_steps", stage2_steps},
         {"predictor", {{"d_lr", predictor.d_lr}, {"lr", predictor.lr}}},
         {"sampling",
          {{"factor", sampling.factor},
           {"seed", sampling.seed},
           {"stage1_period", sampling.stage1_period},
           {"stage2_period", sampling.stage2_period}}},
         {"predictor_row_factor", predictor_row_factor},
         {"profile_alpha", profile_alpha},
         {"dataset_size", dataset_size},
         {"eval_size", eval_size},
         {"allow_sparse", allow_sparse},
         {"mem_budget", mem_budget},
         {"calibration", json::parse(calibration_to_json(calibration))}};
  j["grouping"] = grouping ? json{grouping->t, grouping->h, grouping->w} : json(nullptr);
  return j.dump(2);
}

TrainerConfig TrainerConfig::from_json(const std::string& text) {
  TrainerConfig c;
  try {
    const json j = json::parse(text);
    check_keys(j,
               {"shape", "lr", "seed", "theta", "threshold", "window", "batch", "max_stage1_steps", "stage2_steps",
                "predictor", "sampling", "predictor_row_factor", "profile_alpha", "dataset_size", "eval_size", "allow_sparse", "mem_budget",
                "calibration", "grouping"},
               "trainer config");
    if (j.contains("shape")) {
      const json& s = j.at("shape");
      check_keys(s, {"grid", "channels", "blocks", "heads", "d_k", "mlp_hidden", "qk_scale", "qk_decay"}, "shape");
      if (s.contains("grid")) {
        const auto g = s.at("grid").get<std::vector<int>>();
        if (g.size() != 3) throw ConfigError("shape.grid needs 3 entries");
        c.shape.grid = TokenGrid{g[0], g[1], g[2]};
      }
      read_opt(s, "channels", c.shape.channels);
      read_opt(s, "blocks", c.shape.blocks);
      read_opt(s, "heads", c.shape.heads);
      read_opt(s, "d_k", c.shape.d_k);
      read_opt(s, "mlp_hidden", c.shape.mlp_hidden);
      read_opt(s, "qk_scale", c.shape.qk_scale);
      read_opt(s, "qk_decay", c.shape.qk_decay);
      c.calibration.d_k = c.shape.d_k;
    }
    read_opt(j, "lr", c.lr);
    read_opt(j, "seed", c.seed);
    read_opt(j, "theta", c.theta);
    read_opt(j, "threshold", c.threshold);
    read_opt(j, "window", c.window);
    read_opt(j, "batch", c.batch);
    read_opt(j, "max_stage1_steps", c.max_stage1_steps);
    read_opt(j, "stage2_steps", c.stage2_steps);
    if (j.contains("predictor")) {
      const json& p = j.at("predictor");
      check_keys(p, {"d_lr", "lr"}, "predictor");
      read_opt(p, "d_lr", c.predictor.d_lr);
      read_opt(p, "lr", c.predictor.lr);
      c.calibration.d_lr = c.predictor.d_lr;
    }
    if (j.contains("sampling")) {
      const json& s = j.at("sampling");
      check_keys(s, {"factor", "seed", "stage1_period", "stage2_period"}, "sampling");
      read_opt(s, "factor", c.sampling.factor);
      read_opt(s, "seed", c.sampling.seed);
      read_opt(s, "stage1_period", c.sampling.stage1_period);
      read_opt(s, "stage2_period", c.sampling.stage2_period);
    }
    read_opt(j, "predictor_row_factor", c.predictor_row_factor);
    read_opt(j, "profile_alpha", c.profile_alpha);
    read_opt(j, "dataset_size", c.dataset_size);
    read_opt(j, "eval_size", c.eval_size);
    read_opt(j, "allow_sparse", c.allow_sparse);
    read_opt(j, "mem_budget", c.mem_budget);
    if (j.contains("calibration")) {
      // Shape-derived defaults apply unless the block sets them.
      json k = json::parse(calibration_to_json(c.calibration));
      k.update(j.at("calibration"));
      c.calibration = calibration_from_json(k.dump());
    }
    if (j.contains("grouping") && !j.at("grouping").is_null()) {
      const auto g = j.at("grouping").get<std::vector<int>>();
      if (g.size() != 3) throw ConfigError("grouping needs 3 entries");
      c.grouping = GroupDims{g[0], g[1], g[2]};
    }
    c.validate();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("trainer config: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  return c;
}

StageController::StageController(int window, double threshold)
    : window_(static_cast<std::size_t>(window)), threshold_(threshold) {
  require(window >= 1, "StageController: window must be >= 1");
}

bool StageController::push(double loss) {
  if (fired_) return false;
  buf_.push_back(loss);
  sum_ += loss;
  if (buf_.size() > window_) {
    sum_ -= buf_.front();
    buf_.pop_front();
  }
  if (buf_.size() == window_ && rolling_mean() < threshold_) fired_ = true;
  return fired_;
}

double StageController::rolling_mean() const {
  if (buf_.empty()) return std::numeric_limits<double>::infinity();
  // Recomputed so long runs do not accumulate drift from the running sum.
  double s = 0.0;
  for (double v : buf_) s += v;
  return s / static_cast<double>(buf_.size());
}

Trainer::Trainer(TrainerConfig cfg, CostProfileTable table)
    : cfg_((cfg.validate(), std::move(cfg))),
      model_(cfg_.shape, cfg_.seed),
      adam_(model_.params(), cfg_.lr),
      profile_(cfg_.profile_alpha),
      dispatcher_(std::move(table), cfg_.mem_budget),
      controller_(cfg_.window, cfg_.threshold),
      rng_(cfg_.seed ^ kDataStream) {
  const auto& s = cfg_.shape;
  predictors_.reserve(static_cast<std::size_t>(s.blocks * s.heads));
  for (int b = 0; b < s.blocks; ++b)
    for (int h = 0; h < s.heads; ++h)
      predictors_.push_back(PredictorParams::init(s.d_model(), cfg_.predictor,
                                                  cfg_.seed * 7919u + static_cast<std::uint64_t>(b * s.heads + h) + 1));
  for (int i = 0; i < cfg_.dataset_size; ++i) dataset_.push_back(smooth_field(s.grid, s.channels, 4, 2, 0.05, rng_));

  std::mt19937_64 eval_rng(cfg_.seed ^ kEvalStream);
  for (int i = 0; i < cfg_.eval_size; ++i) {
    const MatrixXd data = smooth_field(s.grid, s.channels, 4, 2, 0.05, eval_rng);
    const MatrixXd noise = gaussian_matrix(s.grid.size(), s.channels, 1.0, eval_rng);
    const double t = (i + 0.5) / cfg_.eval_size;
    auto fs = make_flow_sample(data, noise, t);
    eval_.push_back({std::move(fs.x_t), std::move(fs.velocity), t});
  }
  if (cfg_.grouping) groups_ = build_groups(s.grid, *cfg_.grouping);
}

PredictorParams& Trainer::predictor(int block, int head) {
  return predictors_[static_cast<std::size_t>(block * cfg_.shape.heads + head)];
}
const PredictorParams& Trainer::predictor(int block, int head) const {
  return predictors_[static_cast<std::size_t>(block * cfg_.shape.heads + head)];
}

bool Trainer::block_sparse(int block) const {
  return cfg_.allow_sparse && stage_ == 2 && dispatcher_.enabled(block);
}

std::vector<CriticalIndexSet> Trainer::estimate_block(int block, const MatrixXd& h_in) const {
  const Eigen::Index S = h_in.rows();
  std::vector<CriticalIndexSet> sets;
  sets.reserve(static_cast<std::size_t>(cfg_.shape.heads));
  for (int h = 0; h < cfg_.shape.heads; ++h) {
    const double s = profile_.has(block, h) ? profile_.ema(block, h) : 0.0;
    const Eigen::Index k = k_from_sparsity(s, S);
    if (groups_) {
      const auto proxies = proxy_rows(*groups_);
      const auto g = estimate_critical(predictor(block, h), h_in, k, {}, std::span<const Eigen::Index>(proxies));
      sets.push_back(expand_group_indices(*groups_, g));
    } else {
      sets.push_back(estimate_critical(predictor(block, h), h_in, k));
    }
  }
  return sets;
}

double Trainer::train_predictors(const ForwardCache& cache) {
  const auto& s = cfg_.shape;
  SampleConfig rows_cfg = cfg_.sampling;
  rows_cfg.factor = cfg_.predictor_row_factor;
  double total = 0.0;
  int counted = 0;
  for (int b = 0; b < s.blocks; ++b) {
    const BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];
    const auto rows = sample_queries(bc.h_in.rows(), rows_cfg,
                                     static_cast<std::uint64_t>(iteration_) * 131u + static_cast<std::uint64_t>(b));
    for (int h = 0; h < s.heads; ++h) {
      const MatrixXd q = model_.head_slice(bc.q, h);
      const MatrixXd k = model_.head_slice(bc.k, h);
      MatrixXd q_rows(static_cast<Eigen::Index>(rows.size()), q.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) q_rows.row(static_cast<Eigen::Index>(r)) = q.row(rows[r]);
      const MatrixXd target = q_rows * k.transpose();
      const auto rep = train_step(predictor(b, h), bc.h_in, rows, target);
      if (!std::isfinite(rep.loss.total)) throw NumericalFailure("predictor loss is not finite");
      total += rep.loss.total;
      ++counted;
    }
  }
  return total / counted;
}

void Trainer::profile_blocks(const ForwardCache& cache) {
  const auto& s = cfg_.shape;
  for (int b = 0; b < s.blocks; ++b) {
    const BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];
    std::vector<MatrixXd> qh, kh;
    for (int h = 0; h < s.heads; ++h) {
      qh.push_back(model_.head_slice(bc.q, h));
      kh.push_back(model_.head_slice(bc.k, h));
    }
    const auto samples = measure_block_sparsity(
        qh, kh, cfg_.theta, cfg_.sampling,
        (static_cast<std::uint64_t>(iteration_) << 8) ^ static_cast<std::uint64_t>(b) ^ 0x5bd1e995ull);
    profile_.update_block(b, samples, iteration_);
    for (int h = 0; h < s.heads; ++h)
      series_.push_back({iteration_, b, h, samples[static_cast<std::size_t>(h)], profile_.ema(b, h)});
  }
}

void Trainer::update_dispatch() {
  const auto& s = cfg_.shape;
  for (int b = 0; b < s.blocks; ++b) {
    const auto ema = profile_.block_ema(b);
    double mean = 0.0;
    for (double e : ema) mean += e;
    mean /= static_cast<double>(ema.size());
    dispatcher_.update(b, mean, s.grid.size(), iteration_);
  }
}

void Trainer::iterate() {
  const auto& s = cfg_.shape;
  const int stage_now = stage_;
  const bool sparse_any = stage_now == 2 && cfg_.allow_sparse;
  AttentionSelector select;
  if (sparse_any)
    select = [this](int block, const MatrixXd& h_in) -> BlockAttention {
      if (!block_sparse(block)) return std::nullopt;
      return estimate_block(block, h_in);
    };

  std::uniform_int_distribution<int> pick(0, cfg_.dataset_size - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ParamSet grads = model_.params().zeros_like();
  ForwardCache first;
  double loss = 0.0;
  for (int i = 0; i < cfg_.batch; ++i) {
    const MatrixXd& data = dataset_[static_cast<std::size_t>(pick(rng_))];
    const MatrixXd noise = gaussian_matrix(s.grid.size(), s.channels, 1.0, rng_);
    const auto fs = make_flow_sample(data, noise, unit(rng_));
    ForwardCache cache;
    const MatrixXd out = model_.forward(fs.x_t, fs.t, select, &cache);
    loss += flow_matching_loss(out, fs.velocity);
    model_.backward(cache, flow_matching_grad(out, fs.velocity) / cfg_.batch, grads);
    if (i == 0) first = std::move(cache);
  }
  loss /= cfg_.batch;
  if (!std::isfinite(loss)) throw NumericalFailure("task loss is not finite at iteration " + std::to_string(iteration_));

  IterationRecord rec;
  rec.iteration = iteration_;
  rec.stage = stage_now;
  rec.task_loss = loss;
  for (int b = 0; b < s.blocks; ++b) rec.sparse_blocks += first.blocks[static_cast<std::size_t>(b)].sparse ? 1 : 0;

  const int period = stage_now == 1 ? cfg_.sampling.stage1_period : cfg_.sampling.stage2_period;
  const bool on_period = iteration_ % period == 0;
  if (stage_now == 1 || on_period) rec.predictor_loss = train_predictors(first);
  if (on_period) profile_blocks(first);

  if (stage_now == 1 && rec.predictor_loss && controller_.push(*rec.predictor_loss)) {
    if (!on_period) profile_blocks(first);
    stage_ = 2;
    transition_ = iteration_;
    update_dispatch();
  } else if (stage_now == 2 && on_period) {
    update_dispatch();
  }

  adam_.step(model_.params(), grads);
  history_.push_back(rec);
  if (stage_now == 2) ++stage2_done_;
  ++iteration_;
}

void Trainer::step() { iterate(); }

void Trainer::stage1_step() {
  require(stage_ == 1, "stage1_step: trainer is in stage 2");
  iterate();
}

void Trainer::stage2_step() {
  require(stage_ == 2, "stage2_step: trainer is in stage 1");
  iterate();
}

bool Trainer::run_stage1() {
  while (stage_ == 1 && iteration_ < cfg_.max_stage1_steps) iterate();
  return stage_ == 2;
}

void Trainer::run_stage2(int steps) {
  require(stage_ == 2, "run_stage2: trainer is in stage 1");
  for (int i = 0; i < steps; ++i) iterate();
}

void Trainer::run() {
  if (run_stage1()) run_stage2(cfg_.stage2_steps - static_cast<int>(stage2_done_));
}

double Trainer::eval_loss(bool dispatch) const {
  AttentionSelector select;
  if (dispatch && stage_ == 2 && cfg_.allow_sparse)
    select = [this](int block, const MatrixXd& h_in) -> BlockAttention {
      if (!block_sparse(block)) return std::nullopt;
      return estimate_block(block, h_in);
    };
  double total = 0.0;
  for (const auto& e : eval_) total += flow_matching_loss(model_.forward(e.x_t, e.t, select), e.velocity);
  return total / static_cast<double>(eval_.size());
}

void Trainer::write_outputs(const std::string& dir) const {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  fs::create_directories(root / "checkpoint");

  std::ostringstream loss;
  loss << std::setprecision(10) << "iteration,stage,task_loss,predictor_loss,sparse_blocks\n";
  for (const auto& r : history_) {
    loss << r.iteration << ',' << r.stage << ',' << r.task_loss << ',';
    if (r.predictor_loss) loss << *r.predictor_loss;
    loss << ',' << r.sparse_blocks << '\n';
  }
  write_file(root / "loss.csv", loss.str());

  std::ostringstream sp;
  sp << std::setprecision(10) << "iteration,block,head,sample,ema\n";
  for (const auto& p : series_)
    sp << p.iteration << ',' << p.block << ',' << p.head << ',' << p.sample << ',' << p.ema << '\n';
  write_file(root / "sparsity.csv", sp.str());
  write_file(root / "profile.json", profile_.to_json());

  json dec{{"transition_iteration", transition_ ? json(*transition_) : json(nullptr)},
           {"stage", stage_},
           {"iterations", iteration_}};
  json flips = json::array();
  for (const auto& t : dispatcher_.transitions())
    flips.push_back(
        {{"iteration", t.iteration}, {"block", t.block}, {"enabled", t.enabled}, {"reason", to_string(t.reason)}});
  dec["dispatch"] = flips;
  write_file(root / "decisions.json", dec.dump(2));
  write_file(root / "config.json", cfg_.to_json());
  write_file(root / "cost_table.csv", dispatcher_.table().to_csv());

  const auto& params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i)
    save_tensor((root / "checkpoint" / (params.names[i] + ".bin")).string(), params.values[i]);
  for (int b = 0; b < cfg_.shape.blocks; ++b)
    for (int h = 0; h < cfg_.shape.heads; ++h) {
      PredictorCheckpointMeta meta{b, h, {}};
      save_predictor((root / "checkpoint" / ("pred_b" + std::to_string(b) + "_h" + std::to_string(h))).string(),
                     predictor(b, h), meta);
    }
}

ToyDiT load_toy_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream is(root / "config.json");
  if (!is) throw ConfigError("checkpoint: cannot read " + (root / "config.json").string());
  std::stringstream ss;
  ss << is.rdbuf();
  const TrainerConfig cfg = TrainerConfig::from_json(ss.str());
  ToyDiT model(cfg.shape, cfg.seed);
  auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const fs::path path = root / "checkpoint" / (params.names[i] + ".bin");
    if (!fs::exists(path)) throw ConfigError("checkpoint: missing " + path.string());
    MatrixXd m;
    try {
      m = load_tensor(path.string());
    } catch (const std::exception& e) {
      throw ConfigError("checkpoint: " + std::string(e.what()));
    }
    if (m.rows() != params.values[i].rows() || m.cols() != params.values[i].cols())
      throw ConfigError("checkpoint: shape mismatch for " + params.names[i]);
    params.values[i] = std::move(m);
  }
  return model;
}

}  // namespace sparsedit
