#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcrl/rng.hpp"

namespace dcrl::nn {

using Mat = Eigen::MatrixXd;

/// A named trainable tensor with gradient and Adam state.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m, adam_v;
  std::int64_t adam_t = 0;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Owns parameters with stable addresses; iteration order is creation order,
/// which fixes the checkpoint layout.
class ParamStore {
 public:
  Param& create(const std::string& name, int rows, int cols);
  Param& create_kaiming(const std::string& name, int rows, int cols, Rng& rng);
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;

  std::vector<Param*> all();
  /// Parameters whose name starts with one of the given prefixes.
  std::vector<Param*> with_prefix(const std::vector<std::string>& prefixes);

  void zero_grads();
  std::size_t size() const { return params_.size(); }

 private:
  std::deque<Param> params_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with per-parameter step counters so parameter groups may join the
/// optimization late (training phases) and still get correct bias correction.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  void step(const std::vector<Param*>& params);
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
};

/// Reverse-mode tape over dense matrices. Values are rows x batch; scalars
/// are 1x1. One tape instance is built per loss evaluation and discarded.
class Tape {
 public:
  using Id = int;

  /// Constant leaf (no gradient tracked into it).
  Id input(Mat v);
  /// Leaf that accumulates a gradient (for Jacobian checks and conditioning
  /// vectors produced outside the tape).
  Id input_grad(Mat v);
  /// Parameter as a value node; backward accumulates into the parameter.
  Id param_leaf(Param& p);

  Id affine(Param& w, Param& b, Id x);          // w * x + b per column
  Id conv4x4(Param& w, Param& b, Id x);         // 3x3 conv on a 4x4 grid, see .cpp
  Id relu(Id x);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id div(Id a, Id b);
  Id scale(Id a, double c);
  Id offset(Id a, double c);
  Id mul_const(Id a, Mat m);
  Id add_const(Id a, Mat m);
  Id vexp(Id a);
  Id vlog(Id a);
  Id vabs(Id a);
  Id vsquare(Id a);
  Id vsqrt(Id a);
  Id rowcat(Id a, Id b);
  Id rows(Id a, int lo, int n);
  Id row(Id a, int r) { return rows(a, r, 1); }
  Id drop_row(Id a, int r);
  Id colsum(Id a);                              // r x B -> 1 x B
  Id rowsum(Id a);                              // r x B -> r x 1
  Id sum(Id a);                                 // -> 1 x 1
  Id broadcast(Id a, int rows, int cols);       // 1 x 1 -> rows x cols
  Id row_broadcast(Id a, int rows);             // 1 x B -> rows x B
  Id log_softmax_cols(Id a);

  Id neg(Id a) { return scale(a, -1.0); }
  Id mean(Id a) {
    const auto& v = val(a);
    return scale(sum(a), 1.0 / static_cast<double>(v.rows() * v.cols()));
  }

  const Mat& val(Id id) const { return nodes_[id].value; }
  double scalar(Id id) const { return nodes_[id].value(0, 0); }

  /// Backpropagate from a 1x1 root (seed gradient 1).
  void backward(Id root);
  /// Gradient accumulated at a node (zero matrix if none reached it).
  Mat grad_of(Id id) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    kInput, kParamLeaf, kAffine, kConv4x4, kRelu, kAdd, kSub, kMul, kDiv,
    kScale, kOffset, kMulConst, kAddConst, kExp, kLog, kAbs, kSquare, kSqrt,
    kRowCat, kRows, kDropRow, kColSum, kRowSum, kSum, kBroadcast,
    kRowBroadcast, kLogSoftmaxCols,
  };
  struct Node {
    Op op;
    int a = -1, b = -1;
    int i0 = 0, i1 = 0;
    double c = 0.0;
    Param* pw = nullptr;
    Param* pb = nullptr;
    Mat value;
    Mat grad;
    Mat cmat;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Id push(Node n);
  void accumulate(int id, const Mat& g);
  bool req(Id id) const { return id >= 0 && nodes_[id].requires_grad; }

  std::vector<Node> nodes_;
};

/// Sinusoidal embedding of a time value; geometric frequencies in [1, 1000].
Eigen::VectorXd time_embedding(double t, int dim);
/// Column-wise embedding of a batch of times.
Mat time_embedding_batch(const Eigen::VectorXd& ts, int dim);

}  // namespace dcrl::nn
