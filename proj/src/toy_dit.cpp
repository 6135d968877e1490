#include "sparsedit/toy_dit.hpp"

#include "sparsedit/synthetic.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace sparsedit {

namespace {

// Parameter layout: in.w, in.b, time.w, then 8 tensors per block, then out.w, out.b.
enum BlockParam { kWq = 0, kWk, kWv, kWo, kW1, kB1, kW2, kB2, kPerBlock };
constexpr std::size_t kHead = 3;

std::size_t blk(int b, int p) { return kHead + static_cast<std::size_t>(b) * kPerBlock + static_cast<std::size_t>(p); }

}  // namespace

void ToyDiTShape::validate() const {
  require(channels >= 1 && blocks >= 1 && heads >= 1 && d_k >= 1 && mlp_hidden >= 1,
          "ToyDiTShape: dimensions must be positive");
  require(qk_scale >= 0.0 && qk_decay > 0.0 && qk_decay <= 1.0, "ToyDiTShape: qk_scale >= 0, qk_decay in (0, 1]");
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw InvalidInput("ParamSet: no parameter named " + name);
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  z.names = names;
  for (const auto& v : values) z.values.push_back(MatrixXd::Zero(v.rows(), v.cols()));
  return z;
}

bool ParamSet::operator==(const ParamSet& o) const {
  if (names != o.names || values.size() != o.values.size()) return false;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].rows() != o.values[i].rows() || values[i].cols() != o.values[i].cols()) return false;
    if (values[i] != o.values[i]) return false;
  }
  return true;
}

MatrixXd positional_encoding(const TokenGrid& grid, int width) {
  require(width >= 1, "positional_encoding: width must be positive");
  const int per_axis = (width / 3) / 2 * 2;
  MatrixXd pe = MatrixXd::Zero(grid.size(), width);
  const int extent[3] = {grid.frames, grid.height, grid.width};
  for (Eigen::Index s = 0; s < grid.size(); ++s) {
    const auto c = grid.coords(s);
    for (int a = 0; a < 3; ++a) {
      for (int i = 0; i < per_axis / 2; ++i) {
        // Lowest frequency is half a period across the axis, so it stays monotone.
        const double omega = std::numbers::pi * std::pow(2.0, i) / extent[a];
        pe(s, a * per_axis + 2 * i) = std::sin(omega * c[a]);
        pe(s, a * per_axis + 2 * i + 1) = std::cos(omega * c[a]);
      }
    }
  }
  return pe;
}

ToyDiT::ToyDiT(const ToyDiTShape& shape, std::uint64_t seed) : shape_(shape) {
  shape_.validate();
  std::mt19937_64 rng(seed);
  const int d = shape_.d_model(), c = shape_.channels, f = shape_.mlp_hidden;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  auto add = [&](std::string name, MatrixXd m) {
    params_.names.push_back(std::move(name));
    params_.values.push_back(std::move(m));
  };
  add("in.w", gaussian_matrix(c, d, 1.0 / std::sqrt(static_cast<double>(c)), rng));
  add("in.b", MatrixXd::Zero(1, d));
  add("time.w", gaussian_matrix(1, d, 1.0, rng));
  for (int b = 0; b < shape_.blocks; ++b) {
    const std::string p = "b" + std::to_string(b) + ".";
    for (const char* qk : {"wq", "wk"}) {
      MatrixXd w = gaussian_matrix(d, d, sd, rng);
      for (int col = 0; col < d; ++col) w.col(col) *= shape_.qk_scale * std::pow(shape_.qk_decay, col % shape_.d_k);
      add(p + qk, std::move(w));
    }
    add(p + "wv", gaussian_matrix(d, d, sd, rng));
    add(p + "wo", gaussian_matrix(d, d, 0.5 * sd, rng));
    add(p + "w1", gaussian_matrix(d, f, sd, rng));
    add(p + "b1", MatrixXd::Zero(1, f));
    add(p + "w2", gaussian_matrix(f, d, 0.5 / std::sqrt(static_cast<double>(f)), rng));
    add(p + "b2", MatrixXd::Zero(1, d));
  }
  add("out.w", gaussian_matrix(d, c, sd, rng));
  add("out.b", MatrixXd::Zero(1, c));
  pos_ = positional_encoding(shape_.grid, d);
}

MatrixXd ToyDiT::head_slice(const MatrixXd& m, int head) const {
  return m.middleCols(static_cast<Eigen::Index>(head) * shape_.d_k, shape_.d_k);
}

MatrixXd ToyDiT::forward(const MatrixXd& x_t, double t, const std::vector<BlockAttention>& attn,
                         ForwardCache* cache) const {
  require(attn.empty() || static_cast<int>(attn.size()) == shape_.blocks,
          "ToyDiT::forward: need one attention choice per block");
  if (attn.empty()) return forward(x_t, t, AttentionSelector{}, cache);
  return forward(
      x_t, t, [&attn](int b, const MatrixXd&) { return attn[static_cast<std::size_t>(b)]; }, cache);
}

MatrixXd ToyDiT::forward(const MatrixXd& x_t, double t, const AttentionSelector& select,
                         ForwardCache* cache) const {
  const Eigen::Index S = shape_.grid.size();
  const int dk = shape_.d_k;
  require(x_t.rows() == S && x_t.cols() == shape_.channels, "ToyDiT::forward: input shape mismatch");
  const auto& P = params_.values;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  MatrixXd h = x_t * P[0];
  h.rowwise() += P[1].row(0) + t * P[2].row(0);
  h += pos_;
  if (cache) {
    cache->x_t = x_t;
    cache->t = t;
    cache->blocks.assign(static_cast<std::size_t>(shape_.blocks), {});
  }

  for (int b = 0; b < shape_.blocks; ++b) {
    BlockAttention choice = select ? select(b, h) : BlockAttention{};
    const bool sparse = choice.has_value();
    if (sparse) {
      require(static_cast<int>(choice->size()) == shape_.heads, "ToyDiT::forward: need one index set per head");
    }
    MatrixXd q = h * P[blk(b, kWq)], k = h * P[blk(b, kWk)], v = h * P[blk(b, kWv)];
    MatrixXd o(S, shape_.d_model());
    std::vector<MatrixXd> probs;
    std::vector<std::vector<std::vector<double>>> weights;
    for (int j = 0; j < shape_.heads; ++j) {
      const auto qj = q.middleCols(j * dk, dk);
      const auto kj = k.middleCols(j * dk, dk);
      const auto vj = v.middleCols(j * dk, dk);
      if (!sparse) {
        MatrixXd a = (qj * kj.transpose()) * scale;
        for (Eigen::Index r = 0; r < S; ++r) {
          auto row = a.row(r);
          row = (row.array() - row.maxCoeff()).exp();
          row /= row.sum();
        }
        o.middleCols(j * dk, dk) = a * vj;
        if (cache) probs.push_back(std::move(a));
      } else {
        const CriticalIndexSet& set = (*choice)[static_cast<std::size_t>(j)];
        require(static_cast<Eigen::Index>(set.rows.size()) == S && set.num_keys == S,
                "ToyDiT::forward: index set must cover every query");
        std::vector<std::vector<double>> hw(static_cast<std::size_t>(S));
        for (Eigen::Index r = 0; r < S; ++r) {
          const auto& sel = set.rows[static_cast<std::size_t>(r)];
          require(!sel.empty(), "ToyDiT::forward: empty index list");
          auto& w = hw[static_cast<std::size_t>(r)];
          w.resize(sel.size());
          double m = -std::numeric_limits<double>::infinity();
          for (std::size_t t2 = 0; t2 < sel.size(); ++t2) {
            w[t2] = qj.row(r).dot(kj.row(sel[t2])) * scale;
            m = std::max(m, w[t2]);
          }
          double den = 0.0;
          for (double& x : w) {
            x = std::exp(x - m);
            den += x;
          }
          auto orow = o.row(r).segment(j * dk, dk);
          orow.setZero();
          for (std::size_t t2 = 0; t2 < sel.size(); ++t2) {
            w[t2] /= den;
            orow += w[t2] * vj.row(sel[t2]);
          }
        }
        if (cache) weights.push_back(std::move(hw));
      }
    }
    MatrixXd h_mid = h + o * P[blk(b, kWo)];
    MatrixXd z1 = h_mid * P[blk(b, kW1)];
    z1.rowwise() += P[blk(b, kB1)].row(0);
    MatrixXd m = z1.cwiseMax(0.0);
    MatrixXd h_out = h_mid + m * P[blk(b, kW2)];
    h_out.rowwise() += P[blk(b, kB2)].row(0);
    if (cache) {
      BlockCache& bc = cache->blocks[static_cast<std::size_t>(b)];
      bc.h_in = std::move(h);
      bc.q = std::move(q);
      bc.k = std::move(k);
      bc.v = std::move(v);
      bc.o = std::move(o);
      bc.h_mid = std::move(h_mid);
      bc.z1 = std::move(z1);
      bc.m = std::move(m);
      bc.probs = std::move(probs);
      bc.w = std::move(weights);
      bc.sparse = sparse;
      if (sparse) bc.sets = std::move(*choice);
    }
    h = std::move(h_out);
  }
  MatrixXd out = h * P[P.size() - 2];
  out.rowwise() += P.back().row(0);
  if (cache) {
    cache->h_out = h;
    cache->out = out;
  }
  return out;
}

void ToyDiT::backward(const ForwardCache& cache, const MatrixXd& d_out, ParamSet& grads) const {
  const auto& P = params_.values;
  auto& G = grads.values;
  require(G.size() == P.size(), "ToyDiT::backward: gradient set does not match parameters");
  require(static_cast<int>(cache.blocks.size()) == shape_.blocks, "ToyDiT::backward: cache is incomplete");
  const Eigen::Index S = shape_.grid.size();
  const int dk = shape_.d_k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  G[G.size() - 2] += cache.h_out.transpose() * d_out;
  G.back() += d_out.colwise().sum();
  MatrixXd dh = d_out * P[P.size() - 2].transpose();

  for (int b = shape_.blocks - 1; b >= 0; --b) {
    const BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];
    // MLP residual.
    G[blk(b, kW2)] += bc.m.transpose() * dh;
    G[blk(b, kB2)] += dh.colwise().sum();
    MatrixXd dz = (dh * P[blk(b, kW2)].transpose()).cwiseProduct((bc.z1.array() > 0.0).cast<double>().matrix());
    G[blk(b, kW1)] += bc.h_mid.transpose() * dz;
    G[blk(b, kB1)] += dz.colwise().sum();
    MatrixXd dh_mid = dh + dz * P[blk(b, kW1)].transpose();

    // Attention residual.
    G[blk(b, kWo)] += bc.o.transpose() * dh_mid;
    const MatrixXd d_o = dh_mid * P[blk(b, kWo)].transpose();
    MatrixXd dq = MatrixXd::Zero(S, shape_.d_model()), dk_m = MatrixXd::Zero(S, shape_.d_model()),
             dv = MatrixXd::Zero(S, shape_.d_model());
    for (int j = 0; j < shape_.heads; ++j) {
      const auto qj = bc.q.middleCols(j * dk, dk);
      const auto kj = bc.k.middleCols(j * dk, dk);
      const auto vj = bc.v.middleCols(j * dk, dk);
      const auto doj = d_o.middleCols(j * dk, dk);
      if (!bc.sparse) {
        const MatrixXd& a = bc.probs[static_cast<std::size_t>(j)];
        dv.middleCols(j * dk, dk) = a.transpose() * doj;
        MatrixXd da = doj * vj.transpose();
        const VectorXd rs = a.cwiseProduct(da).rowwise().sum();
        MatrixXd ds = a.cwiseProduct(da.colwise() - rs);
        dq.middleCols(j * dk, dk) = (ds * kj) * scale;
        dk_m.middleCols(j * dk, dk) = (ds.transpose() * qj) * scale;
      } else {
        const CriticalIndexSet& set = bc.sets[static_cast<std::size_t>(j)];
        const auto& hw = bc.w[static_cast<std::size_t>(j)];
        for (Eigen::Index r = 0; r < S; ++r) {
          const auto& sel = set.rows[static_cast<std::size_t>(r)];
          const auto& w = hw[static_cast<std::size_t>(r)];
          std::vector<double> g(sel.size());
          double s = 0.0;
          for (std::size_t t2 = 0; t2 < sel.size(); ++t2) {
            g[t2] = doj.row(r).dot(vj.row(sel[t2]));
            s += w[t2] * g[t2];
          }
          for (std::size_t t2 = 0; t2 < sel.size(); ++t2) {
            const double dl = w[t2] * (g[t2] - s) * scale;
            dq.row(r).segment(j * dk, dk) += dl * kj.row(sel[t2]);
            dk_m.row(sel[t2]).segment(j * dk, dk) += dl * qj.row(r);
            dv.row(sel[t2]).segment(j * dk, dk) += w[t2] * doj.row(r);
          }
        }
      }
    }
    G[blk(b, kWq)] += bc.h_in.transpose() * dq;
    G[blk(b, kWk)] += bc.h_in.transpose() * dk_m;
    G[blk(b, kWv)] += bc.h_in.transpose() * dv;
    dh = dh_mid + dq * P[blk(b, kWq)].transpose() + dk_m * P[blk(b, kWk)].transpose() +
         dv * P[blk(b, kWv)].transpose();
  }
  G[0] += cache.x_t.transpose() * dh;
  const MatrixXd col = dh.colwise().sum();
  G[1] += col;
  G[2] += cache.t * col;
}

double flow_matching_loss(const MatrixXd& pred, const MatrixXd& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "flow_matching_loss: shape mismatch");
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

MatrixXd flow_matching_grad(const MatrixXd& pred, const MatrixXd& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "flow_matching_grad: shape mismatch");
  return (pred - target) * (2.0 / static_cast<double>(pred.size()));
}

FlowSample make_flow_sample(const MatrixXd& data, const MatrixXd& noise, double t) {
  require(data.rows() == noise.rows() && data.cols() == noise.cols(), "make_flow_sample: shape mismatch");
  require(t >= 0.0 && t <= 1.0, "make_flow_sample: t must lie in [0, 1]");
  return {(1.0 - t) * noise + t * data, data - noise, t};
}

Adam::Adam(const ParamSet& like, double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(like.zeros_like()), v_(like.zeros_like()) {
  require(lr > 0.0 && beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0,
          "Adam: invalid hyperparameters");
}

void Adam::step(ParamSet& params, const ParamSet& grads) {
  require(grads.size() == params.size() && m_.size() == params.size(), "Adam: parameter set mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.values[i];
    auto& m = m_.values[i];
    auto& v = v_.values[i];
    const auto& g = grads.values[i];
    for (Eigen::Index e = 0; e < p.size(); ++e) {
      const double gi = g.data()[e];
      m.data()[e] = b1_ * m.data()[e] + (1.0 - b1_) * gi;
      v.data()[e] = b2_ * v.data()[e] + (1.0 - b2_) * gi * gi;
      p.data()[e] -= lr_ * (m.data()[e] / c1) / (std::sqrt(v.data()[e] / c2) + eps_);
    }
  }
}

}  // namespace sparsedit
