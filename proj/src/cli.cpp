#include "sparsedit/cli.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/cp_model.hpp"
#include "sparsedit/cp_sim.hpp"
#include "sparsedit/dispatcher.hpp"
#include "sparsedit/grouping.hpp"
#include "sparsedit/profiler.hpp"
#include "sparsedit/synthetic.hpp"
#include "sparsedit/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <utility>

#ifndef SPARSEDIT_VERSION
#define SPARSEDIT_VERSION "0.0.0"
#endif

namespace sparsedit::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string read_text(const std::string& path, const char* what) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError(std::string("cannot read ") + what + " '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

/// Writes files under the output directory.
class OutDir {
 public:
  explicit OutDir(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }
  void write(const std::string& name, const std::string& text) const {
    const fs::path p = root_ / name;
    fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << text;
  }
  [[nodiscard]] const fs::path& root() const { return root_; }

 private:
  fs::path root_;
};

/// "x,y,series" rows for plotting.
class Series {
 public:
  void add(double x, double y, const std::string& label) { rows_ << x << ',' << y << ',' << label << '\n'; }
  [[nodiscard]] std::string str() const { return "x,y,series\n" + rows_.str(); }
  Series() { rows_ << std::setprecision(12); }

 private:
  std::ostringstream rows_;
};

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

// ---- analyze ---------------------------------------------------------------

ToyDiT analysis_model(const json& m) {
  check_keys(m, {"kind", "checkpoint", "shape", "seed"}, "analyze.model");
  const auto kind = get_or<std::string>(m, "kind", "toy");
  if (kind == "checkpoint") {
    if (!m.contains("checkpoint")) throw ConfigError("analyze.model: kind 'checkpoint' needs 'checkpoint'");
    return load_toy_checkpoint(m.at("checkpoint").get<std::string>());
  }
  json shape_cfg = json::object();
  if (m.contains("shape")) shape_cfg["shape"] = m.at("shape");
  ToyDiTShape shape = TrainerConfig::from_json(shape_cfg.dump()).shape;
  if (kind == "uniform") shape.qk_scale = 0.0;
  else if (kind != "toy") throw ConfigError("analyze.model: kind must be toy, uniform or checkpoint");
  return ToyDiT(shape, get_or<std::uint64_t>(m, "seed", 0));
}

double top_mass(const MatrixXd& probs, Eigen::Index kept) {
  double total = 0.0;
  std::vector<double> row(static_cast<std::size_t>(probs.cols()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    for (Eigen::Index c = 0; c < probs.cols(); ++c) row[static_cast<std::size_t>(c)] = probs(r, c);
    std::partial_sort(row.begin(), row.begin() + kept, row.end(), std::greater<>());
    double m = 0.0;
    for (Eigen::Index i = 0; i < kept; ++i) m += row[static_cast<std::size_t>(i)];
    total += m;
  }
  return total / static_cast<double>(probs.rows());
}

bool within(const TokenGrid& g, Eigen::Index a, Eigen::Index b, int radius) {
  const auto coords = [&](Eigen::Index i) {
    const Eigen::Index plane = static_cast<Eigen::Index>(g.height) * g.width;
    return std::array<Eigen::Index, 3>{i / plane, (i % plane) / g.width, i % g.width};
  };
  const auto ca = coords(a), cb = coords(b);
  for (int d = 0; d < 3; ++d)
    if (std::abs(ca[static_cast<std::size_t>(d)] - cb[static_cast<std::size_t>(d)]) > radius) return false;
  return true;
}

json cmd_analyze(const json& cfg, const OutDir& out) {
  check_keys(cfg, {"model", "samples", "theta", "fractions", "sample_factor", "locality_radius", "group",
                   "group_samples", "seed"},
             "analyze");
  const ToyDiT model = analysis_model(get_or<json>(cfg, "model", json::object()));
  const auto& shape = model.shape();
  const int samples = get_or(cfg, "samples", 2);
  const double theta = get_or(cfg, "theta", 0.9);
  const auto fractions = get_or<std::vector<double>>(cfg, "fractions", {0.01, 0.05, 0.1, 0.2, 0.5});
  const int radius = get_or(cfg, "locality_radius", 1);
  const auto gdims = get_or<std::vector<int>>(cfg, "group", {2, 2, 2});
  const int group_samples = get_or(cfg, "group_samples", 32);
  const auto seed = get_or<std::uint64_t>(cfg, "seed", 0);
  SampleConfig sc;
  sc.factor = get_or(cfg, "sample_factor", 16);
  sc.seed = seed;
  if (samples < 1 || theta <= 0 || theta > 1 || radius < 0 || gdims.size() != 3 || group_samples < 1 || sc.factor < 1)
    throw ConfigError("analyze: samples >= 1, theta in (0, 1], radius >= 0, group of 3 dims required");
  for (double f : fractions)
    if (!(f > 0 && f <= 1)) throw ConfigError("analyze: fractions must lie in (0, 1]");
  const GroupDims dims{gdims[0], gdims[1], gdims[2]};

  const Eigen::Index S = shape.grid.size();
  const int B = shape.blocks, H = shape.heads;
  std::vector<double> sparsity(static_cast<std::size_t>(B * H), 0.0), local(sparsity), local_base(sparsity);
  std::vector<std::vector<double>> mass(static_cast<std::size_t>(B * H), std::vector<double>(fractions.size(), 0.0));
  std::vector<double> overlap(static_cast<std::size_t>(B), 0.0);
  bool overlap_ok = true;

  std::mt19937_64 rng(seed);
  for (int s = 0; s < samples; ++s) {
    const MatrixXd data = smooth_field(shape.grid, shape.channels, 4, 2, 0.05, rng);
    const MatrixXd noise = gaussian_matrix(S, shape.channels, 1.0, rng);
    const auto fsample = make_flow_sample(data, noise, (s + 0.5) / samples);
    ForwardCache cache;
    model.forward(fsample.x_t, fsample.t, std::vector<BlockAttention>{}, &cache);
    for (int b = 0; b < B; ++b) {
      const BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];
      const auto rows = sample_queries(S, sc, static_cast<std::uint64_t>(s * B + b));
      std::vector<MatrixXd> qh, kh;
      for (int h = 0; h < H; ++h) {
        qh.push_back(model.head_slice(bc.q, h));
        kh.push_back(model.head_slice(bc.k, h));
        MatrixXd q_rows(static_cast<Eigen::Index>(rows.size()), shape.d_k);
        for (std::size_t r = 0; r < rows.size(); ++r) q_rows.row(static_cast<Eigen::Index>(r)) = qh.back().row(rows[r]);
        const MatrixXd probs = attention_scores(q_rows, kh.back());
        const auto crit = critical_kv_oracle(probs, theta);
        const std::size_t i = static_cast<std::size_t>(b * H + h);
        sparsity[i] += head_sparsity(crit, S) / samples;
        for (std::size_t f = 0; f < fractions.size(); ++f) {
          const Eigen::Index kept = std::max<Eigen::Index>(1, std::llround(fractions[f] * static_cast<double>(S)));
          mass[i][f] += top_mass(probs, kept) / samples;
        }
        double frac = 0.0, base = 0.0;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          std::size_t near = 0;
          for (KvIndex key : crit.rows[r]) near += within(shape.grid, rows[r], key, radius) ? 1 : 0;
          frac += static_cast<double>(near) / static_cast<double>(crit.rows[r].size());
          std::size_t hood = 0;
          for (Eigen::Index key = 0; key < S; ++key) hood += within(shape.grid, rows[r], key, radius) ? 1 : 0;
          base += static_cast<double>(hood) / static_cast<double>(S);
        }
        local[i] += frac / static_cast<double>(rows.size()) / samples;
        local_base[i] += base / static_cast<double>(rows.size()) / samples;
      }
      const auto cal = calibrate_group_size(qh, kh, shape.grid, CriticalRule::by_theta(theta), 1.0,
                                            seed + static_cast<std::uint64_t>(s * B + b), group_samples, {dims});
      if (cal.candidates.empty()) overlap_ok = false;
      else overlap[static_cast<std::size_t>(b)] += cal.candidates.front().mean_overlap / samples;
    }
  }

  json report{{"theta", theta},
              {"samples", samples},
              {"tokens", S},
              {"fractions", fractions},
              {"locality_radius", radius},
              {"group", gdims}};
  json blocks = json::array();
  Series mass_csv, sparsity_csv, overlap_csv, locality_csv;
  for (int b = 0; b < B; ++b) {
    json heads = json::array();
    for (int h = 0; h < H; ++h) {
      const std::size_t i = static_cast<std::size_t>(b * H + h);
      const std::string label = "b" + std::to_string(b) + "h" + std::to_string(h);
      heads.push_back({{"head", h},
                       {"sparsity", sparsity[i]},
                       {"top_mass", mass[i]},
                       {"locality", local[i]},
                       {"locality_baseline", local_base[i]}});
      for (std::size_t f = 0; f < fractions.size(); ++f) mass_csv.add(fractions[f], mass[i][f], label);
      sparsity_csv.add(b, sparsity[i], "h" + std::to_string(h));
      locality_csv.add(local_base[i], local[i], label);
    }
    json blk{{"block", b}, {"heads", heads}};
    blk["group_overlap"] = overlap_ok ? json(overlap[static_cast<std::size_t>(b)]) : json(nullptr);
    if (overlap_ok) overlap_csv.add(dims.member_count(), overlap[static_cast<std::size_t>(b)], "b" + std::to_string(b));
    blocks.push_back(blk);
  }
  report["blocks"] = blocks;
  out.write("analysis.json", report.dump(2));
  out.write("top_mass.csv", mass_csv.str());
  out.write("sparsity.csv", sparsity_csv.str());
  out.write("locality.csv", locality_csv.str());
  out.write("group_overlap.csv", overlap_csv.str());
  return report;
}

// ---- calibrate ---------------------------------------------------------------

void cmd_calibrate(const json& cfg, const OutDir& out) {
  const CalibrationConfig cal = calibration_from_json(cfg.dump());
  const CostProfileTable table = calibrate(cal);
  out.write("cost_table.csv", table.to_csv());
  Series cross;
  json j = json::array();
  for (auto len : table.lengths()) {
    const auto b = table.crossover_bucket(len);
    j.push_back({{"length", len}, {"crossover", b ? json(bucket_sparsity(*b)) : json(nullptr)}});
    if (b) cross.add(static_cast<double>(len), bucket_sparsity(*b), "crossover");
  }
  out.write("crossover.json", j.dump(2));
  out.write("crossover.csv", cross.str());
}

// ---- train ---------------------------------------------------------------------

void cmd_train(const json& cfg, const OutDir& out) {
  check_keys(cfg, {"trainer", "reference"}, "train");
  const TrainerConfig tc = TrainerConfig::from_json(get_or<json>(cfg, "trainer", json::object()).dump());
  const bool reference = get_or(cfg, "reference", false);
  Trainer trainer(tc, calibrate(tc.calibration));

  json summary;
  const bool switched = trainer.run_stage1();
  summary["transitioned"] = switched;
  summary["transition_iteration"] = trainer.transition_iteration() ? json(*trainer.transition_iteration()) : json(nullptr);
  std::optional<Trainer> dense;
  if (switched) {
    if (reference) {
      dense.emplace(trainer);
      dense->set_allow_sparse(false);
    }
    trainer.run_stage2(tc.stage2_steps);
    if (dense) dense->run_stage2(tc.stage2_steps);
  }
  summary["iterations"] = trainer.iteration();
  summary["final_eval_loss"] = trainer.eval_loss(true);
  json sparse_blocks = json::array();
  for (int b = 0; b < tc.shape.blocks; ++b) sparse_blocks.push_back(trainer.block_sparse(b));
  summary["sparse_blocks"] = sparse_blocks;
  if (dense) {
    const double ref = dense->eval_loss(false);
    summary["reference_eval_loss"] = ref;
    summary["relative_gap"] = std::abs(trainer.eval_loss(true) - ref) / ref;
  }
  trainer.write_outputs(out.root().string());
  out.write("summary.json", summary.dump(2));

  Series series;
  for (const auto& r : trainer.history()) {
    series.add(static_cast<double>(r.iteration), r.task_loss, "task_loss");
    if (r.predictor_loss) series.add(static_cast<double>(r.iteration), *r.predictor_loss, "predictor_loss");
  }
  for (const auto& p : trainer.profile_series())
    series.add(static_cast<double>(p.iteration), p.ema,
               "sparsity_b" + std::to_string(p.block) + "h" + std::to_string(p.head));
  out.write("series.csv", series.str());
}

// ---- plan ----------------------------------------------------------------------

/// Per-block head sparsities from either a trainer profile ({"entries": ...})
/// or {"sparsity": [...]} (block 0).
std::map<int, std::vector<double>> read_profile(const std::string& text) {
  const json j = parse_json(text, "profile");
  std::map<int, std::vector<double>> blocks;
  if (j.contains("entries")) {
    const SparsityProfile p = SparsityProfile::from_json(text);
    for (const auto& [key, _] : p.entries()) blocks[key.first];
    for (auto& [b, v] : blocks) v = p.block_ema(b);
  } else if (j.contains("sparsity")) {
    blocks[0] = j.at("sparsity").get<std::vector<double>>();
  } else {
    throw ConfigError("profile: expected 'entries' or 'sparsity'");
  }
  for (const auto& [b, v] : blocks) {
    if (v.empty()) throw ConfigError("profile: block " + std::to_string(b) + " has no heads");
    for (double s : v)
      if (!(s >= 0 && s <= 1)) throw ConfigError("profile: sparsity must lie in [0, 1]");
  }
  return blocks;
}

AlphaProvider plan_alpha(const json& cfg) {
  const double uniform = get_or(cfg, "alpha", 1.0);
  if (!(uniform >= 0 && uniform <= 1)) throw ConfigError("plan: alpha must lie in [0, 1]");
  std::map<int, AlphaMatrix> given;
  if (cfg.contains("alpha_matrices")) {
    for (const auto& [key, rows] : cfg.at("alpha_matrices").items()) {
      const int gs = std::stoi(key);
      const auto m = rows.get<std::vector<std::vector<double>>>();
      if (gs < 1 || static_cast<int>(m.size()) != gs) throw ConfigError("plan: alpha matrix size must equal g_s");
      AlphaMatrix a(gs, gs);
      for (int i = 0; i < gs; ++i) {
        if (static_cast<int>(m[static_cast<std::size_t>(i)].size()) != gs) throw ConfigError("plan: alpha matrix must be square");
        for (int c = 0; c < gs; ++c) {
          const double v = m[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
          if (!(v >= 0 && v <= 1)) throw ConfigError("plan: alpha entries must lie in [0, 1]");
          a(i, c) = i == c ? 0.0 : v;
        }
      }
      given.emplace(gs, a);
    }
  }
  const AlphaProvider fallback = uniform_alpha(uniform);
  return [given, fallback](int g_s, const std::vector<int>& heads) {
    const auto it = given.find(g_s);
    return it != given.end() ? it->second : fallback(g_s, heads);
  };
}

void cmd_plan(const json& cfg, const std::string& profile_text, const std::string& cluster_text, const OutDir& out) {
  check_keys(cfg, {"seq", "head_dim", "alpha", "alpha_matrices", "blocks", "seed"}, "plan");
  if (profile_text.empty()) throw ConfigError("plan: --profile is required");
  if (cluster_text.empty()) throw ConfigError("plan: --cluster is required");
  const ClusterSpec cluster = ClusterSpec::from_json(cluster_text);
  const auto profile = read_profile(profile_text);
  Workload w;
  w.seq = get_or<std::int64_t>(cfg, "seq", 512);
  w.head_dim = get_or(cfg, "head_dim", 16);
  if (w.seq < 1 || w.head_dim < 1) throw ConfigError("plan: seq and head_dim must be positive");
  const AlphaProvider alpha = plan_alpha(cfg);

  std::vector<int> blocks;
  if (cfg.contains("blocks")) blocks = cfg.at("blocks").get<std::vector<int>>();
  else
    for (const auto& [b, _] : profile) blocks.push_back(b);

  json plans = json::array();
  for (int b : blocks) {
    const auto it = profile.find(b);
    if (it == profile.end()) throw ConfigError("plan: block " + std::to_string(b) + " not in profile");
    w.sparsity = it->second;
    const HybridSolution sol = solve_hybrid(w, alpha, cluster);
    plans.push_back({{"block", b}, {"config", json::parse(cp_config_to_json(sol.best))}});
    out.write("evaluation_b" + std::to_string(b) + ".csv", evaluation_table_csv(sol));
  }
  out.write("plan.json", json{{"plans", plans}}.dump(2));
}

// ---- simulate --------------------------------------------------------------------

void cmd_simulate(const json& cfg, const OutDir& out) {
  check_keys(cfg,
             {"heads", "seq", "head_dim", "seed", "qk_scale", "theta", "sparsity", "cluster", "g_h", "g_s", "placement",
              "tol"},
             "simulate");
  const int H = get_or(cfg, "heads", 4);
  const Eigen::Index S = get_or<Eigen::Index>(cfg, "seq", 64);
  const int D = get_or(cfg, "head_dim", 8);
  const double qk_scale = get_or(cfg, "qk_scale", 2.0);
  const double theta = get_or(cfg, "theta", 0.9);
  const double tol = get_or(cfg, "tol", 1e-6);
  if (H < 1 || S < 1 || D < 1 || theta <= 0 || theta > 1) throw ConfigError("simulate: bad dimensions or theta");
  if (!cfg.contains("cluster")) throw ConfigError("simulate: 'cluster' is required");
  const ClusterSpec cluster = ClusterSpec::from_json(cfg.at("cluster").dump());
  std::vector<double> target;
  if (cfg.contains("sparsity")) {
    target = cfg.at("sparsity").get<std::vector<double>>();
    if (static_cast<int>(target.size()) != H) throw ConfigError("simulate: one sparsity per head");
  }

  std::mt19937_64 rng(get_or<std::uint64_t>(cfg, "seed", 0));
  std::vector<MatrixXd> q, k, v;
  std::vector<CriticalIndexSet> idx;
  for (int h = 0; h < H; ++h) {
    q.push_back(gaussian_matrix(S, D, qk_scale, rng));
    k.push_back(gaussian_matrix(S, D, 1.0, rng));
    v.push_back(gaussian_matrix(S, D, 1.0, rng));
    const MatrixXd probs = attention_scores(q.back(), k.back());
    idx.push_back(target.empty()
                      ? critical_kv_oracle(probs, theta)
                      : critical_sets(probs, CriticalRule::by_topk(k_from_sparsity(target[static_cast<std::size_t>(h)], S))));
  }

  Workload w;
  w.seq = S;
  w.head_dim = D;
  for (const auto& s : idx) w.sparsity.push_back(head_sparsity(s, S));
  const AlphaProvider alpha = indices_alpha(idx);
  CPConfig config;
  if (cfg.contains("g_h") || cfg.contains("g_s")) {
    const int g_h = get_or(cfg, "g_h", 1), g_s = get_or(cfg, "g_s", 1);
    if (g_h < 1 || g_s < 1 || g_h * g_s != cluster.devices || g_h > H)
      throw ConfigError("simulate: need g_h * g_s = devices and 1 <= g_h <= heads");
    config = build_config(g_h, g_s, w, alpha, cluster);
    Placement p = choose_placement(config, cluster);
    if (cfg.contains("placement")) {
      const auto name = cfg.at("placement").get<std::string>();
      if (name == "hcp_first") p = Placement::kHcpFirst;
      else if (name == "scp_first") p = Placement::kScpFirst;
      else throw ConfigError("simulate: placement must be hcp_first or scp_first");
    }
    apply_placement(config, p, cluster);
  } else {
    config = solve_hybrid(w, alpha, cluster).best;
  }

  const SimPlan plan = SimPlan::from_config(config);
  const SimResult result = run_hybrid_sparse_cp(q, k, v, idx, plan, cluster.elem_width);
  std::vector<MatrixXd> reference;
  for (int h = 0; h < H; ++h) reference.push_back(sparse_attention(q[static_cast<std::size_t>(h)], k[static_cast<std::size_t>(h)], v[static_cast<std::size_t>(h)], idx[static_cast<std::size_t>(h)]));
  const auto ledger = check_ledger(result, plan, idx, D, cluster.elem_width);
  const auto eq = verify_equivalence(result.output, reference, tol);

  out.write("cp_config.json", cp_config_to_json(config));
  out.write("ledger.json", result.log.to_json(plan.devices()));
  out.write("ledger_check.json", json{{"ok", ledger.ok}, {"mismatches", ledger.mismatches}}.dump(2));
  out.write("equivalence.json", eq.to_json());
  std::ostringstream dev;
  dev << "rank,hcp_pos,scp_idx,chunk,heads,resident_qkvo_bytes,resident_remote_kv_bytes\n";
  for (const auto& d : result.devices)
    dev << d.rank << ',' << d.hcp_pos << ',' << d.scp_idx << ',' << d.chunk << ',' << d.heads << ','
        << d.resident_qkvo_bytes << ',' << d.resident_remote_kv_bytes << '\n';
  out.write("devices.csv", dev.str());
  if (!ledger.ok) throw VerificationFailure("ledger disagrees with the closed forms: " + ledger.mismatches.front());
  if (!eq.pass) throw VerificationFailure("simulated output differs from the single-device result");
}

// ---- layering, manifest ------------------------------------------------------------

json parse_env_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return json(raw);
  }
}

struct EnvLayer {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out;
  std::vector<std::pair<std::vector<std::string>, json>> overrides;
};

EnvLayer read_env(const std::vector<std::string>& env) {
  EnvLayer layer;
  const std::string prefix = kEnvPrefix;
  const std::string cfg_prefix = prefix + "CFG__";
  for (const auto& entry : env) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos || entry.rfind(prefix, 0) != 0) continue;
    const std::string name = entry.substr(0, eq), value = entry.substr(eq + 1);
    try {
      if (name == prefix + "SEED") layer.seed = std::stoull(value);
      else if (name == prefix + "THREADS") layer.threads = std::stoi(value);
      else if (name == prefix + "OUT") layer.out = value;
      else if (name.rfind(cfg_prefix, 0) == 0) {
        std::vector<std::string> path;
        std::string rest = name.substr(cfg_prefix.size());
        for (std::size_t pos; (pos = rest.find("__")) != std::string::npos; rest = rest.substr(pos + 2))
          path.push_back(rest.substr(0, pos));
        path.push_back(rest);
        layer.overrides.emplace_back(path, parse_env_value(value));
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad value in " + name);
    }
  }
  return layer;
}

void set_path(json& j, const std::vector<std::string>& path, const json& value) {
  json* cur = &j;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!cur->is_object()) throw ConfigError("env override: '" + path[i] + "' is not an object");
    cur = &(*cur)[path[i]];
    if (cur->is_null()) *cur = json::object();
  }
  if (!cur->is_object()) throw ConfigError("env override: parent of '" + path.back() + "' is not an object");
  (*cur)[path.back()] = value;
}

/// Where the seed lives in each command's config.
json* seed_slot(json& cfg, const std::string& command) {
  if (command == "train") {
    if (!cfg.contains("trainer")) cfg["trainer"] = json::object();
    return &cfg["trainer"]["seed"];
  }
  return &cfg["seed"];
}

json versions() {
  return {{"sparsedit", SPARSEDIT_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION}};
}

json hash_outputs(const fs::path& root) {
  std::vector<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    if (rel != "manifest.json") names.push_back(rel);
  }
  std::sort(names.begin(), names.end());
  json files = json::array();
  for (const auto& n : names) files.push_back({{"file", n}, {"fnv1a64", file_hash((root / n).string())}});
  return files;
}

const std::set<std::string> kCommands{"analyze", "calibrate", "train", "plan", "simulate"};

void execute(const std::string& command, const json& cfg, const json& inputs, const OutDir& out, int threads) {
  Eigen::setNbThreads(threads);
  if (command == "analyze") cmd_analyze(cfg, out);
  else if (command == "calibrate") cmd_calibrate(cfg, out);
  else if (command == "train") cmd_train(cfg, out);
  else if (command == "plan")
    cmd_plan(cfg, get_or<std::string>(inputs, "profile", ""), get_or<std::string>(inputs, "cluster", ""), out);
  else if (command == "simulate") cmd_simulate(cfg, out);
  else throw ConfigError("unknown command '" + command + "'");
}

}  // namespace

std::string file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 14];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string run_command(Options opt, const std::vector<std::string>& env) {
  if (!kCommands.count(opt.command)) throw ConfigError("unknown command '" + opt.command + "'");
  json cfg = opt.config_path.empty() ? json::object()
                                     : parse_json(read_text(opt.config_path, "config"), "config " + opt.config_path);
  if (!cfg.is_object()) throw ConfigError("config must be a JSON object");

  const EnvLayer layer = read_env(env);
  for (const auto& [path, value] : layer.overrides) set_path(cfg, path, value);
  std::optional<std::uint64_t> seed = opt.seed ? opt.seed : layer.seed;
  if (seed) *seed_slot(cfg, opt.command) = *seed;
  if (layer.threads && opt.threads == 1) opt.threads = *layer.threads;
  if (layer.out && opt.out == "out") opt.out = *layer.out;
  if (opt.threads < 1) throw ConfigError("--threads must be >= 1");

  json inputs = json::object();
  if (!opt.profile_path.empty()) inputs["profile"] = read_text(opt.profile_path, "profile");
  if (!opt.cluster_path.empty()) inputs["cluster"] = read_text(opt.cluster_path, "cluster");

  const OutDir out{fs::path(opt.out)};
  execute(opt.command, cfg, inputs, out, opt.threads);

  json manifest{{"command", opt.command},
                {"config_path", opt.config_path},
                {"seed", seed ? json(*seed) : json(nullptr)},
                {"out", opt.out},
                {"threads", opt.threads},
                {"profile_path", opt.profile_path},
                {"cluster_path", opt.cluster_path},
                {"config", cfg},
                {"inputs", inputs},
                {"versions", versions()},
                {"outputs", hash_outputs(out.root())}};
  const std::string text = manifest.dump(2);
  out.write("manifest.json", text);
  return text;
}

void replay(const std::string& manifest_path, const std::string& out_dir) {
  const json m = parse_json(read_text(manifest_path, "manifest"), "manifest");
  json recorded, cfg, inputs;
  std::string command;
  int threads = 1;
  try {
    command = m.at("command").get<std::string>();
    cfg = m.at("config");
    inputs = m.at("inputs");
    recorded = m.at("outputs");
    threads = m.at("threads").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  if (fs::exists(out_dir) && fs::equivalent(fs::absolute(out_dir), fs::absolute(fs::path(manifest_path).parent_path())))
    throw ConfigError("replay: --out must differ from the manifest's directory");
  const OutDir out{fs::path(out_dir)};
  execute(command, cfg, inputs, out, threads);
  const json now = hash_outputs(out.root());
  if (now != recorded) {
    std::string diff;
    std::map<std::string, std::string> a, b;
    for (const auto& f : recorded) a[f.at("file")] = f.at("fnv1a64");
    for (const auto& f : now) b[f.at("file")] = f.at("fnv1a64");
    for (const auto& [name, h] : a)
      if (!b.count(name) || b[name] != h) diff += " " + name;
    for (const auto& [name, _] : b)
      if (!a.count(name)) diff += " +" + name;
    throw ReplayMismatch("replay differs:" + diff);
  }
}

int main_entry(int argc, char** argv, char** envp) {
  CLI::App app{"Dynamic sparse attention training toolkit: analysis, calibration, training, CP planning and simulation"};
  app.require_subcommand(1);
  Options opt;
  std::string seed_text;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file");
    sub->add_option("--seed", seed_text, "RNG seed, overrides the config");
    sub->add_option("--out", opt.out, "output directory")->capture_default_str();
    sub->add_option("--threads", opt.threads, "worker threads")->capture_default_str();
  };
  const std::pair<const char*, const char*> commands[] = {
      {"analyze", "attention sparsity, locality and group overlap statistics"},
      {"calibrate", "dense vs sparse cost table and crossover sparsity"},
      {"train", "two-stage training of the toy model"},
      {"simulate", "run hybrid sparse CP on one process and check bytes and outputs"}};
  for (const auto& [name, about] : commands) add_common(app.add_subcommand(name, about));
  auto* plan = app.add_subcommand("plan", "hybrid CP plan from a sparsity profile and a cluster");
  add_common(plan);
  plan->add_option("--profile", opt.profile_path, "sparsity profile JSON")->required();
  plan->add_option("--cluster", opt.cluster_path, "cluster spec JSON")->required();
  std::string manifest_path, replay_out;
  auto* rep = app.add_subcommand("replay", "rerun a manifest and compare output hashes");
  rep->add_option("manifest", manifest_path, "manifest.json")->required();
  rep->add_option("--out", replay_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  std::vector<std::string> env;
  for (char** e = envp; e && *e; ++e) env.emplace_back(*e);
  try {
    if (rep->parsed()) {
      replay(manifest_path, replay_out);
      std::cout << "replay: outputs identical\n";
      return kOk;
    }
    opt.command = app.get_subcommands().front()->get_name();
    if (!seed_text.empty()) {
      try {
        opt.seed = std::stoull(seed_text);
      } catch (const std::logic_error&) {
        throw ConfigError("--seed must be a non-negative integer");
      }
    }
    run_command(opt, env);
    std::cout << opt.command << ": wrote " << opt.out << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfigError;
  } catch (const Infeasible& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return kVerificationFailed;
  } catch (const ReplayMismatch& e) {
    std::cerr << e.what() << "\n";
    return kReplayMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace sparsedit::cli
