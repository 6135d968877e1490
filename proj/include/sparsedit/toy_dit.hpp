#pragma once

// A small DiT-like denoiser over a 3D token grid: linear patch embedding plus
// fixed 3D sinusoidal positions and a learned time direction, a stack of
// (multi-head self-attention, ReLU MLP) residual blocks, and a linear head.
// Forward and backward are written out by hand; attention per block is either
// dense or restricted to explicit per-head index sets.

#include "sparsedit/index_set.hpp"
#include "sparsedit/types.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace sparsedit {

struct ToyDiTShape {
  TokenGrid grid{8, 8, 8};
  int channels = 4;
  int blocks = 4;
  int heads = 4;
  int d_k = 16;
  int mlp_hidden = 128;
  // Query/key projections start with per-column scale qk_scale * qk_decay^j
  // inside each head, giving peaked, effectively low-rank score maps.
  double qk_scale = 1.0;
  double qk_decay = 0.5;

  [[nodiscard]] int d_model() const { return heads * d_k; }
  void validate() const;
};

/// Named parameter tensors; biases are 1 x n.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<MatrixXd> values;

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] std::size_t index_of(const std::string& name) const;
  MatrixXd& at(const std::string& name) { return values[index_of(name)]; }
  [[nodiscard]] const MatrixXd& at(const std::string& name) const { return values[index_of(name)]; }
  [[nodiscard]] ParamSet zeros_like() const;
  bool operator==(const ParamSet& o) const;
};

/// Per-block attention choice for one forward pass: nullopt is dense,
/// otherwise one index set per head.
using BlockAttention = std::optional<std::vector<CriticalIndexSet>>;

/// Picks a block's attention from the block input, during the forward pass.
using AttentionSelector = std::function<BlockAttention(int block, const MatrixXd& h_in)>;

struct BlockCache {
  MatrixXd h_in, q, k, v, o, h_mid, z1, m;
  std::vector<MatrixXd> probs;                      // dense heads: S x S
  std::vector<std::vector<std::vector<double>>> w;  // sparse heads: weights per selected key
  bool sparse = false;
  std::vector<CriticalIndexSet> sets;
};

struct ForwardCache {
  MatrixXd x_t;
  double t = 0.0;
  std::vector<BlockCache> blocks;
  MatrixXd h_out;
  MatrixXd out;
};

class ToyDiT {
 public:
  ToyDiT(const ToyDiTShape& shape, std::uint64_t seed);

  [[nodiscard]] const ToyDiTShape& shape() const { return shape_; }
  ParamSet& params() { return params_; }
  [[nodiscard]] const ParamSet& params() const { return params_; }
  [[nodiscard]] const MatrixXd& positions() const { return pos_; }

  /// Predicted velocity for noisy latent x_t (S x channels) at time t.
  /// `attn` has one entry per block; empty means dense everywhere.
  MatrixXd forward(const MatrixXd& x_t, double t, const std::vector<BlockAttention>& attn,
                   ForwardCache* cache = nullptr) const;
  /// Same, with attention chosen per block as the pass reaches it; a null
  /// selector means dense everywhere.
  MatrixXd forward(const MatrixXd& x_t, double t, const AttentionSelector& select,
                   ForwardCache* cache = nullptr) const;

  /// Accumulates dL/dparams into `grads` given dL/d(output).
  void backward(const ForwardCache& cache, const MatrixXd& d_out, ParamSet& grads) const;

  /// Per-head slice of a block's Q or K.
  [[nodiscard]] MatrixXd head_slice(const MatrixXd& m, int head) const;

 private:
  ToyDiTShape shape_;
  ParamSet params_;
  MatrixXd pos_;
};

/// 3D sinusoidal encoding: the width is split in three, one third per axis.
MatrixXd positional_encoding(const TokenGrid& grid, int width);

/// mean((pred - target)^2) over all entries.
double flow_matching_loss(const MatrixXd& pred, const MatrixXd& target);
/// d loss / d pred.
MatrixXd flow_matching_grad(const MatrixXd& pred, const MatrixXd& target);

/// Linear interpolant between noise (t = 0) and data (t = 1) and its velocity.
struct FlowSample {
  MatrixXd x_t;
  MatrixXd velocity;
  double t = 0.0;
};
FlowSample make_flow_sample(const MatrixXd& data, const MatrixXd& noise, double t);

class Adam {
 public:
  Adam(const ParamSet& like, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamSet& params, const ParamSet& grads);
  [[nodiscard]] std::int64_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  ParamSet m_, v_;
};

}  // namespace sparsedit
