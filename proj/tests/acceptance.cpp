// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// to run a subset.
#include "oracles.hpp"

#include "sparsedit/attention.hpp"
#include "sparsedit/cli.hpp"
#include "sparsedit/cp_model.hpp"
#include "sparsedit/cp_sim.hpp"
#include "sparsedit/predictor.hpp"
#include "sparsedit/selection.hpp"
#include "sparsedit/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

using namespace sparsedit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Eigen::Index draw(std::mt19937_64& rng, Eigen::Index lo, Eigen::Index hi) {
  return lo + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

Outcome c1_topk() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  int bad_stream = 0, bad_two = 0;
  for (int t = 0; t < 500; ++t) {
    const Eigen::Index s = draw(rng, 1, 256), r = draw(rng, 1, 16);
    const Eigen::Index k = draw(rng, 1, std::min<Eigen::Index>(s, 64));
    const MatrixXd q = oracle::random_matrix(draw(rng, 1, 64), r, rng);
    const MatrixXd kk = oracle::random_matrix(s, r, rng);
    if (streaming_topk(q, kk, k).indices != oracle::topk(q, kk, k)) ++bad_stream;
  }
  for (int t = 0; t < 500; ++t) {
    const Eigen::Index s = draw(rng, 1, 256), r = draw(rng, 1, 16);
    const Eigen::Index k = draw(rng, 1, std::min<Eigen::Index>(s, 64));
    MatrixXd q = oracle::random_matrix(draw(rng, 1, 64), r, rng);
    MatrixXd kk = oracle::random_matrix(s, r, rng);
    // Every fifth case rounds to a coarse grid so ties are common.
    if (t % 5 == 0) {
      q = q.array().round();
      kk = kk.array().round();
    }
    if (twopass_select(q, kk, k).indices != oracle::topk(q, kk, k)) ++bad_two;
  }
  const double secs = seconds_since(t0);
  return {bad_stream == 0 && bad_two == 0 && secs < 60.0,
          fmt("streaming mismatches %d/500, two-pass mismatches %d/500, %.2f s", bad_stream, bad_two, secs)};
}

Outcome c2_full() {
  std::mt19937_64 rng(1002);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Eigen::Index s = draw(rng, 1, 128), d = draw(rng, 1, 32), dv = draw(rng, 1, 32);
    const MatrixXd q = oracle::random_matrix(draw(rng, 1, 128), d, rng, 2.0), k = oracle::random_matrix(s, d, rng, 2.0),
                   v = oracle::random_matrix(s, dv, rng);
    worst = std::max(worst, (full_attention(q, k, v) - oracle::attention(q, k, v)).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-6, fmt("max abs error %.3g over 100 instances", worst)};
}

Outcome c3_sparse() {
  std::mt19937_64 rng(1003);
  double worst_full = 0.0;
  const std::vector<double> thetas{0.5, 0.8, 0.9, 0.99};
  std::vector<double> mean_err(thetas.size(), 0.0);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index s = draw(rng, 16, 128), d = draw(rng, 4, 16);
    const MatrixXd q = oracle::random_matrix(s, d, rng, 2.0), k = oracle::random_matrix(s, d, rng, 2.0),
                   v = oracle::random_matrix(s, d, rng);
    const MatrixXd probs = oracle::probabilities(q, k);
    const MatrixXd ref = oracle::attention(q, k, v);
    CriticalIndexSet all;
    all.num_keys = s;
    all.rows = oracle::critical(probs, 1.0);
    worst_full = std::max(worst_full, (sparse_attention(q, k, v, all) - ref).cwiseAbs().maxCoeff());
    for (std::size_t i = 0; i < thetas.size(); ++i) {
      CriticalIndexSet set;
      set.num_keys = s;
      set.rows = oracle::critical(probs, thetas[i]);
      const MatrixXd out = sparse_attention(q, k, v, set);
      mean_err[i] += (out - ref).rowwise().norm().mean() / 20.0;
    }
  }
  bool monotone = true;
  for (std::size_t i = 1; i < thetas.size(); ++i) monotone = monotone && mean_err[i] <= mean_err[i - 1];
  return {worst_full <= 1e-6 && monotone,
          fmt("theta=1 max error %.3g; mean row error %.4g, %.4g, %.4g, %.4g at 0.5/0.8/0.9/0.99", worst_full,
              mean_err[0], mean_err[1], mean_err[2], mean_err[3])};
}

// Composite predictor loss written out independently of the library.
double reference_loss(const MatrixXd& a, const MatrixXd& t) {
  double cos_acc = 0.0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    double dot = 0.0, na = 0.0, nt = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      dot += a(r, c) * t(r, c);
      na += a(r, c) * a(r, c);
      nt += t(r, c) * t(r, c);
    }
    cos_acc += 1.0 - dot / std::sqrt(na * nt);
  }
  double diff = 0.0, tn = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    diff += (a.data()[i] - t.data()[i]) * (a.data()[i] - t.data()[i]);
    tn += t.data()[i] * t.data()[i];
  }
  return 0.95 * cos_acc / static_cast<double>(a.rows()) + 0.05 * std::sqrt(diff) / std::sqrt(tn);
}

Outcome c4_gradients() {
  std::mt19937_64 rng(1004);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const MatrixXd x = oracle::random_matrix(8, 6, rng);
    const MatrixXd target = oracle::random_matrix(8, 8, rng);
    PredictorConfig cfg;
    cfg.d_lr = 2;
    const auto p = PredictorParams::init(6, cfg, 5000 + static_cast<std::uint64_t>(t));
    std::vector<Eigen::Index> rows(8);
    std::iota(rows.begin(), rows.end(), Eigen::Index{0});
    const auto g = predictor_gradients(p, x, rows, target);
    const MatrixXd fq = oracle::finite_difference(
        [&](const MatrixXd& w) { return reference_loss((x * w) * (x * p.w_k).transpose(), target); }, p.w_q, 1e-6);
    const MatrixXd fk = oracle::finite_difference(
        [&](const MatrixXd& w) { return reference_loss((x * p.w_q) * (x * w).transpose(), target); }, p.w_k, 1e-6);
    worst = std::max(worst, (g.g_q - fq).norm() / fq.norm());
    worst = std::max(worst, (g.g_k - fk).norm() / fk.norm());
  }
  return {worst <= 1e-4, fmt("max relative error %.3g over 50 instances", worst)};
}

Outcome c5_teacher() {
  const auto t0 = Clock::now();
  const int s = 256, d = 32, rank = 4;
  std::mt19937_64 rng(42);
  const MatrixXd x = oracle::random_matrix(s, d, rng);
  const MatrixXd a = oracle::random_matrix(d, rank, rng, 0.5), b = oracle::random_matrix(d, rank, rng, 0.5);
  const MatrixXd qt = x * a, kt = x * b;
  const MatrixXd target = qt * kt.transpose();
  PredictorConfig cfg;
  cfg.d_lr = 16;
  cfg.lr = 1e-3;
  auto p = PredictorParams::init(d, cfg, 7);
  SampleConfig sc;
  sc.factor = 16;
  sc.seed = 1;
  int reached = -1;
  double loss = INFINITY;
  for (int step = 0; step < 5000; ++step) {
    const auto rows = sample_queries(s, sc, static_cast<std::uint64_t>(step));
    MatrixXd tgt(static_cast<Eigen::Index>(rows.size()), s);
    for (std::size_t i = 0; i < rows.size(); ++i) tgt.row(static_cast<Eigen::Index>(i)) = target.row(rows[i]);
    train_step(p, x, rows, tgt);
    if ((step + 1) % 50 == 0) {
      loss = reference_loss((x * p.w_q) * (x * p.w_k).transpose(), target);
      if (loss < 0.01) {
        reached = step + 1;
        break;
      }
    }
  }
  // Oracle critical sets of the teacher at theta 0.9; the predictor keeps
  // the same number of keys per query.
  const auto crit = oracle::critical(oracle::probabilities(qt, kt), 0.9);
  std::size_t hit = 0, total = 0;
  const MatrixXd ql = x * p.w_q, kl = x * p.w_k;
  for (int i = 0; i < s; ++i) {
    const auto mine = oracle::topk(ql.row(i), kl, static_cast<Eigen::Index>(crit[static_cast<std::size_t>(i)].size()))[0];
    const std::set<KvIndex> truth(crit[static_cast<std::size_t>(i)].begin(), crit[static_cast<std::size_t>(i)].end());
    for (auto j : mine) hit += truth.count(j);
    total += truth.size();
  }
  const double recall = static_cast<double>(hit) / static_cast<double>(total);
  const double secs = seconds_since(t0);
  return {reached > 0 && recall >= 0.9 && secs < 300.0,
          fmt("loss %.4g %s at step %d; recall %.4f at theta 0.9; %.1f s", loss, reached > 0 ? "< 0.01" : ">= 0.01",
              reached, recall, secs)};
}

Outcome c6_bnb() {
  std::mt19937_64 rng(1006);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const int h = static_cast<int>(draw(rng, 1, 10)), n = static_cast<int>(draw(rng, 1, 4));
    std::vector<double> loads(static_cast<std::size_t>(h));
    for (auto& l : loads) l = (t % 4 == 0) ? std::round(u(rng) * 4.0) / 4.0 : u(rng);
    const auto plan = balance_heads(loads, n);
    if (plan.comp != oracle::brute_makespan(loads, n) || !plan.optimal) ++bad;
  }
  return {bad == 0, fmt("%d/1000 instances differ from brute force", bad)};
}

// Exhaustive planner written against the closed forms, on dyadic inputs so
// every sum and product is exact.
struct Evaluated {
  int g_h = 0;
  double objective = INFINITY;
  bool feasible = false;
};

Evaluated evaluate_pair(int g_h, int g_s, const std::vector<std::int64_t>& dense64, std::int64_t seq, int dim,
                        double alpha, const ClusterSpec& c, const HcpPlan& plan) {
  const int heads = static_cast<int>(dense64.size());
  const std::int64_t chunk = seq / g_s;
  const double unit = 4.0 * static_cast<double>(chunk) * static_cast<double>(seq) * dim / 64.0;
  const std::int64_t best = oracle::dp_makespan(dense64, g_h);
  const double comp = static_cast<double>(best) * unit;
  Evaluated ev;
  ev.g_h = g_h;
  if (plan.comp != comp) return ev;  // the planner's balance is not optimal
  const auto rank = [&](bool hcp_first, int pos, int si) { return hcp_first ? si * g_h + pos : pos * g_s + si; };
  const auto node = [&](int r) { return r / c.devices_per_node; };
  const auto spans = [&](bool hcp_first, bool hcp_group, int fixed) {
    const int n = hcp_group ? g_h : g_s;
    std::set<int> nodes;
    for (int m = 0; m < n; ++m) nodes.insert(node(hcp_group ? rank(hcp_first, m, fixed) : rank(hcp_first, fixed, m)));
    return nodes.size() > 1;
  };
  std::vector<double> hcp(static_cast<std::size_t>(g_h)), scp(static_cast<std::size_t>(g_h)),
      mem(static_cast<std::size_t>(g_h));
  for (int pos = 0; pos < g_h; ++pos) {
    const int kept = plan.heads_per_device[static_cast<std::size_t>(pos)];
    const double part = static_cast<double>(chunk) / g_h;
    const double recv = kept * (g_h - 1) * part, sent = (heads - kept) * part;
    hcp[static_cast<std::size_t>(pos)] =
        g_h > 1 ? c.elem_width * (3.0 * dim * std::max(recv, sent) + dim * std::max(sent, recv)) : 0.0;
    const double remote = (g_s - 1) * alpha;
    scp[static_cast<std::size_t>(pos)] =
        g_s > 1 ? c.elem_width * 2.0 * kept * dim * static_cast<double>(seq) / g_s * remote : 0.0;
    mem[static_cast<std::size_t>(pos)] = 4.0 * static_cast<double>(chunk) * dim * kept * c.elem_width +
                                         (g_s > 1 ? c.elem_width * 2.0 * kept * dim * remote * seq / g_s : 0.0);
  }
  double cross[2];
  for (int f = 0; f < 2; ++f) {
    const bool hcp_first = f == 0;
    double h = 0.0, s = 0.0;
    for (int si = 0; si < g_s; ++si)
      for (int pos = 0; pos < g_h; ++pos) {
        if (spans(hcp_first, true, si)) h += hcp[static_cast<std::size_t>(pos)];
        if (spans(hcp_first, false, pos)) s += scp[static_cast<std::size_t>(pos)];
      }
    cross[f] = std::max(h, s);
  }
  const bool hcp_first = !(cross[1] < cross[0]);
  double obj = 0.0, peak = 0.0;
  for (int si = 0; si < g_s; ++si)
    for (int pos = 0; pos < g_h; ++pos) {
      const double bw_h = spans(hcp_first, true, si) ? c.inter_bw : c.intra_bw;
      const double bw_s = spans(hcp_first, false, pos) ? c.inter_bw : c.intra_bw;
      obj = std::max(obj, hcp[static_cast<std::size_t>(pos)] / bw_h + scp[static_cast<std::size_t>(pos)] / bw_s +
                              comp / c.compute_rate);
      peak = std::max(peak, mem[static_cast<std::size_t>(pos)]);
    }
  ev.objective = obj;
  ev.feasible = peak <= c.memory_cap;
  return ev;
}

Outcome c7_hybrid() {
  std::mt19937_64 rng(1007);
  int bad = 0, infeasible_agree = 0;
  std::string first;
  const int device_counts[] = {1, 2, 4, 8};
  for (int t = 0; t < 100; ++t) {
    ClusterSpec c;
    c.devices = device_counts[t % 4];
    const int per_node_choices[] = {1, 2, 4, 8};
    do c.devices_per_node = per_node_choices[rng() % 4];
    while (c.devices % c.devices_per_node != 0);
    c.intra_bw = std::ldexp(1.0, static_cast<int>(draw(rng, 8, 12)));
    c.inter_bw = std::ldexp(1.0, static_cast<int>(draw(rng, 4, 8)));
    c.compute_rate = std::ldexp(1.0, static_cast<int>(draw(rng, 10, 16)));
    c.elem_width = 2;
    const int heads = static_cast<int>(draw(rng, 1, 16));
    const std::int64_t seq = std::int64_t{1} << draw(rng, 3, 6);
    const int dim = 1 << draw(rng, 1, 3);
    const double alpha = static_cast<double>(draw(rng, 0, 4)) / 4.0;
    std::vector<std::int64_t> dense64(static_cast<std::size_t>(heads));
    std::vector<double> sparsity(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      dense64[static_cast<std::size_t>(h)] = draw(rng, 0, 64);
      sparsity[static_cast<std::size_t>(h)] = 1.0 - static_cast<double>(dense64[static_cast<std::size_t>(h)]) / 64.0;
    }
    if (std::all_of(dense64.begin(), dense64.end(), [](auto v) { return v == 0; })) {
      dense64[0] = 1;
      sparsity[0] = 1.0 - 1.0 / 64.0;
    }
    c.memory_cap = (t % 10 == 9) ? 64.0 : 1e15;
    const Workload w{sparsity, seq, dim};

    double want = INFINITY;
    int want_g = 0;
    for (int g_h = 1; g_h <= std::min(c.devices, heads); ++g_h) {
      if (c.devices % g_h) continue;
      const int g_s = c.devices / g_h;
      const auto cfg = build_config(g_h, g_s, w, uniform_alpha(alpha), c);
      const auto ev = evaluate_pair(g_h, g_s, dense64, seq, dim, alpha, c, cfg.plan);
      if (ev.feasible && ev.objective < want) {
        want = ev.objective;
        want_g = g_h;
      }
    }
    try {
      const auto sol = solve_hybrid(w, uniform_alpha(alpha), c);
      if (sol.best.objective != want || sol.best.g_h != want_g) {
        ++bad;
        if (first.empty()) first = fmt(" (first: case %d, solver %.17g at g_h=%d, exhaustive %.17g at g_h=%d)", t,
                                       sol.best.objective, sol.best.g_h, want, want_g);
      }
    } catch (const Infeasible&) {
      if (std::isfinite(want)) ++bad;
      else ++infeasible_agree;
    }
  }
  return {bad == 0, fmt("%d/100 instances differ from the exhaustive evaluator; %d agreed infeasible", bad,
                        infeasible_agree) + first};
}

Outcome c8_simulator() {
  const auto t0 = Clock::now();
  const int heads = 8, dim = 8, width = 2;
  const Eigen::Index s = 64;
  int runs = 0, bad_eq = 0, bad_ledger = 0;
  double worst = 0.0;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    std::mt19937_64 rng(1008 + seed);
    std::vector<MatrixXd> q, k, v, ref;
    std::vector<CriticalIndexSet> sets;
    std::vector<double> sparsity;
    for (int h = 0; h < heads; ++h) {
      q.push_back(oracle::random_matrix(s, dim, rng, 1.0 + h));
      k.push_back(oracle::random_matrix(s, dim, rng, 1.0));
      v.push_back(oracle::random_matrix(s, dim, rng));
      CriticalIndexSet set;
      set.num_keys = s;
      set.rows = oracle::critical(oracle::probabilities(q.back(), k.back()), 0.9);
      std::size_t kept = 0;
      for (const auto& r : set.rows) kept += r.size();
      sparsity.push_back(1.0 - static_cast<double>(kept) / static_cast<double>(s * s));
      ref.push_back(oracle::attention(q.back(), k.back(), v.back(), &set.rows));
      sets.push_back(std::move(set));
    }
    for (int n : {1, 2, 4, 8}) {
      for (int g_h = 1; g_h <= n; ++g_h) {
        if (n % g_h) continue;
        const int g_s = n / g_h;
        const auto loads = head_loads(sparsity, s / g_s, s, dim);
        const auto plan = balance_heads(loads, g_h);
        for (auto pl : {Placement::kHcpFirst, Placement::kScpFirst}) {
          ++runs;
          const SimPlan sp{g_h, g_s, pl, plan.assignment};
          const auto res = run_hybrid_sparse_cp(q, k, v, sets, sp, width);
          double err = 0.0;
          for (int h = 0; h < heads; ++h)
            err = std::max(err, (res.output[static_cast<std::size_t>(h)] - ref[static_cast<std::size_t>(h)])
                                    .cwiseAbs()
                                    .maxCoeff());
          worst = std::max(worst, err);
          if (err > 1e-6) ++bad_eq;

          bool ok = check_ledger(res, sp, sets, dim, width).ok;
          for (int p = 0; p < kNumSimPhases; ++p)
            ok = ok && res.log.total_sent(static_cast<SimPhase>(p)) == res.log.total_received(static_cast<SimPhase>(p));
          const Eigen::Index chunk = s / g_s;
          for (const auto& dev : res.devices) {
            const auto kept = static_cast<std::uint64_t>(dev.heads);
            const std::uint64_t part = static_cast<std::uint64_t>(chunk / g_h);
            const std::uint64_t recv = kept * static_cast<std::uint64_t>(g_h - 1) * part;
            const std::uint64_t sent = (heads - kept) * part;
            const std::uint64_t hcp_want = g_h > 1 ? width * 4ull * dim * std::max(recv, sent) : 0;
            const auto& log = res.log;
            const std::uint64_t hcp_got =
                std::max(log.sent(dev.rank, SimPhase::kHcpFwd), log.received(dev.rank, SimPhase::kHcpFwd)) +
                std::max(log.sent(dev.rank, SimPhase::kOutputRedistribute),
                         log.received(dev.rank, SimPhase::kOutputRedistribute));
            // Distinct remote keys needed by this device and requested from it.
            std::uint64_t need = 0, asked = 0;
            for (int h = 0; h < heads; ++h) {
              if (plan.assignment[static_cast<std::size_t>(h)] != dev.hcp_pos) continue;
              for (int other = 0; other < g_s; ++other) {
                if (other == dev.scp_idx) continue;
                std::set<KvIndex> in, out;
                for (Eigen::Index qi = 0; qi < chunk; ++qi) {
                  for (auto kv : sets[static_cast<std::size_t>(h)].rows[static_cast<std::size_t>(dev.scp_idx * chunk + qi)])
                    if (static_cast<Eigen::Index>(kv) / chunk == other) in.insert(kv);
                  for (auto kv : sets[static_cast<std::size_t>(h)].rows[static_cast<std::size_t>(other * chunk + qi)])
                    if (static_cast<Eigen::Index>(kv) / chunk == dev.scp_idx) out.insert(kv);
                }
                need += in.size();
                asked += out.size();
              }
            }
            const std::uint64_t scp_want = width * 2ull * dim * std::max(need, asked);
            const std::uint64_t scp_got =
                std::max(log.sent(dev.rank, SimPhase::kScpKv), log.received(dev.rank, SimPhase::kScpKv));
            ok = ok && hcp_got == hcp_want && scp_got == scp_want &&
                 dev.resident_qkvo_bytes == 4ull * static_cast<std::uint64_t>(chunk) * dim * kept * width &&
                 dev.resident_remote_kv_bytes == width * 2ull * dim * need;
          }
          if (!ok) ++bad_ledger;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {bad_eq == 0 && bad_ledger == 0 && secs < 600.0,
          fmt("%d runs; max error %.3g; %d equivalence failures; %d ledger mismatches; %.1f s", runs, worst, bad_eq,
              bad_ledger, secs)};
}

Outcome c9_flops() {
  std::mt19937_64 rng(1009);
  bool ok = true;
  std::string detail;
  for (auto [s, sp] : {std::pair{128, 0.75}, std::pair{256, 0.875}, std::pair{320, 0.9375}, std::pair{64, 0.5}}) {
    const int d_k = 16, d_lr = 4;
    const Eigen::Index k = k_from_sparsity(sp, s);
    const MatrixXd q = oracle::random_matrix(s, d_k, rng), kk = oracle::random_matrix(s, d_k, rng),
                   v = oracle::random_matrix(s, d_k, rng);
    FlopCounter full, sparse;
    full_attention(q, kk, v, &full);
    SelectionOptions opt;
    opt.flops = &sparse;
    const auto set = streaming_topk<double>(q.leftCols(d_lr), kk.leftCols(d_lr), k, opt).to_index_set();
    sparse_attention(q, kk, v, set, &sparse);
    // (1 - s) is exactly k / S here, so compare cross-multiplied integers.
    const bool sv = sparse.score_value_flops() * static_cast<std::uint64_t>(s) ==
                    full.score_value_flops() * static_cast<std::uint64_t>(k);
    const bool est = sparse.estimate_flops * d_k == full.score_flops * d_lr;
    const std::uint64_t select_bound = static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(s - k);
    const bool sel = sparse.select_comparisons > 0 && sparse.select_comparisons <= select_bound;
    ok = ok && sv && est && sel && static_cast<double>(k) == (1.0 - sp) * s;
    detail += fmt("S=%d s=%.3f: sv %llu/%llu, est %llu, select %llu; ", s, sp,
                  static_cast<unsigned long long>(sparse.score_value_flops()),
                  static_cast<unsigned long long>(full.score_value_flops()),
                  static_cast<unsigned long long>(sparse.estimate_flops),
                  static_cast<unsigned long long>(sparse.select_comparisons));
  }
  return {ok, detail};
}

Outcome c10_two_stage() {
  const auto t0 = Clock::now();
  int passed = 0;
  std::string detail;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TrainerConfig cfg;
    cfg.seed = seed;
    Trainer run(cfg, calibrate(cfg.calibration));
    const bool switched = run.run_stage1();
    // Stage 1 never changes the model through the predictors, so the dense
    // branch forked here is the seed-matched full-attention run.
    Trainer ref = run;
    ref.set_allow_sparse(false);
    run.run_stage2(cfg.stage2_steps);
    ref.run_stage2(cfg.stage2_steps);
    const double sparse_loss = run.eval_loss(true), dense_loss = ref.eval_loss(false);
    const double gap = std::abs(sparse_loss - dense_loss) / dense_loss;
    int sparse_blocks = 0;
    for (int b = 0; b < cfg.shape.blocks; ++b) sparse_blocks += run.block_sparse(b) ? 1 : 0;
    const bool ok = switched && gap <= 0.05;
    passed += ok ? 1 : 0;
    detail += fmt("seed %llu: switch at %lld, %d sparse blocks, eval %.5f vs %.5f (gap %.2f%%); ",
                  static_cast<unsigned long long>(seed),
                  static_cast<long long>(run.transition_iteration().value_or(-1)), sparse_blocks, sparse_loss,
                  dense_loss, 100.0 * gap);
  }
  const double secs = seconds_since(t0);
  detail += fmt("%.0f s", secs);
  return {passed >= 2 && secs < 1800.0, detail};
}

Outcome c11_memory() {
  std::mt19937_64 rng(1011);
  bool ok = true;
  std::string detail;
  const double c = 4.0;
  for (Eigen::Index s : {256, 1024, 4096}) {
    const Eigen::Index k = std::min<Eigen::Index>(64, s / 4);
    const MatrixXd q = oracle::random_matrix(s, 8, rng), kk = oracle::random_matrix(s, 8, rng);
    SelectionMemoryCounter mem;
    SelectionOptions opt;
    opt.memory = &mem;
    streaming_topk(q, kk, k, opt);
    const double ratio = static_cast<double>(mem.peak()) / static_cast<double>(s * k);
    ok = ok && ratio <= c;
    detail += fmt("S=%lld k=%lld peak %.3f S k; ", static_cast<long long>(s), static_cast<long long>(k), ratio);
  }
  return {ok, detail + "bound 4 S k"};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sparsedit");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  char* envp[] = {nullptr};
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  const int rc = cli::main_entry(static_cast<int>(argv.size()), argv.data(), envp);
  std::cout.rdbuf(old);
  return rc;
}

Outcome c12_replay() {
  const fs::path configs = fs::path(SPARSEDIT_SOURCE_DIR) / "configs";
  const fs::path root = fs::temp_directory_path() / "sparsedit_acceptance_replay";
  fs::remove_all(root);
  const auto cfg = [&](const char* n) { return (configs / n).string(); };
  const std::map<std::string, std::vector<std::string>> commands{
      {"analyze", {"analyze", "--config", cfg("analyze.json")}},
      {"calibrate", {"calibrate", "--config", cfg("calibrate.json")}},
      {"plan",
       {"plan", "--config", cfg("plan.json"), "--profile", cfg("profile.json"), "--cluster", cfg("cluster.json")}},
      {"simulate", {"simulate", "--config", cfg("simulate.json")}},
      {"train", {"train", "--config", cfg("train_tiny.json"), "--seed", "3"}},
  };
  int ok = 0;
  std::string failed;
  for (const auto& [name, args] : commands) {
    auto a = args;
    a.push_back("--out");
    a.push_back((root / name).string());
    const int rc = run_cli(a);
    const int rr = rc == 0 ? run_cli({"replay", (root / name / "manifest.json").string(), "--out",
                                      (root / (name + "_replay")).string()})
                           : -1;
    if (rc == 0 && rr == 0) ++ok;
    else failed += fmt(" %s(run %d, replay %d)", name.c_str(), rc, rr);
  }
  fs::remove_all(root);
  return {ok == static_cast<int>(commands.size()),
          fmt("%d/%zu commands replayed byte-identical", ok, commands.size()) + failed};
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("criteria", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, Outcome (*)()>> all{
      {"top-k selection exact", c1_topk},
      {"full attention vs loop oracle", c2_full},
      {"sparse attention and theta monotonicity", c3_sparse},
      {"predictor gradients vs finite differences", c4_gradients},
      {"predictor convergence on rank-4 teacher", c5_teacher},
      {"head balancing vs brute force", c6_bnb},
      {"hybrid solver vs exhaustive evaluator", c7_hybrid},
      {"simulator equivalence and byte ledger", c8_simulator},
      {"FLOP accounting", c9_flops},
      {"two-stage toy run vs full attention", c10_two_stage},
      {"streaming top-k memory bound", c11_memory},
      {"CLI replay determinism", c12_replay},
  };
  int failures = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = all[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << all[i].first << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
