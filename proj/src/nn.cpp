#include "dcrl/nn.hpp"

#include <cmath>

namespace dcrl::nn {

namespace {

// Neighbor table for a 3x3 stencil on the 4x4 grid (row-major positions,
// zero padding encoded as -1). Built once.
const std::vector<std::array<int, 9>>& grid_neighbors() {
  static const std::vector<std::array<int, 9>> table = [] {
    std::vector<std::array<int, 9>> t(16);
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) {
        std::array<int, 9> nb{};
        int k = 0;
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = c + dc;
            nb[k++] = (rr >= 0 && rr < 4 && cc >= 0 && cc < 4) ? rr * 4 + cc : -1;
          }
        }
        t[r * 4 + c] = nb;
      }
    }
    return t;
  }();
  return table;
}

}  // namespace

Param& ParamStore::create(const std::string& name, int rows, int cols) {
  if (find(name) != nullptr)
    throw std::logic_error("duplicate parameter name: " + name);
  params_.push_back(Param{});
  Param& p = params_.back();
  p.name = name;
  p.value.setZero(rows, cols);
  p.grad.setZero(rows, cols);
  return p;
}

Param& ParamStore::create_kaiming(const std::string& name, int rows, int cols,
                                  Rng& rng) {
  Param& p = create(name, rows, cols);
  const double std = std::sqrt(2.0 / static_cast<double>(cols));
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) p.value(r, c) = std * rng.normal();
  return p;
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<Param*> ParamStore::with_prefix(
    const std::vector<std::string>& prefixes) {
  std::vector<Param*> out;
  for (auto& p : params_) {
    for (const auto& pre : prefixes) {
      if (p.name.rfind(pre, 0) == 0) {
        out.push_back(&p);
        break;
      }
    }
  }
  return out;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step(const std::vector<Param*>& params) {
  for (Param* p : params) {
    if (p->adam_m.size() == 0) {
      p->adam_m.setZero(p->value.rows(), p->value.cols());
      p->adam_v.setZero(p->value.rows(), p->value.cols());
    }
    p->adam_t += 1;
    p->adam_m = cfg_.beta1 * p->adam_m + (1.0 - cfg_.beta1) * p->grad;
    p->adam_v = cfg_.beta2 * p->adam_v +
                (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(p->adam_t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(p->adam_t));
    p->value.array() -= cfg_.lr * (p->adam_m.array() / bc1) /
                        ((p->adam_v.array() / bc2).sqrt() + cfg_.eps);
  }
}

Tape::Id Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::input(Mat v) {
  Node n;
  n.op = Op::kInput;
  n.value = std::move(v);
  return push(std::move(n));
}

Tape::Id Tape::input_grad(Mat v) {
  Node n;
  n.op = Op::kInput;
  n.value = std::move(v);
  n.requires_grad = true;
  return push(std::move(n));
}

Tape::Id Tape::param_leaf(Param& p) {
  Node n;
  n.op = Op::kParamLeaf;
  n.pw = &p;
  n.value = p.value;
  n.requires_grad = true;
  return push(std::move(n));
}

Tape::Id Tape::affine(Param& w, Param& b, Id x) {
  Node n;
  n.op = Op::kAffine;
  n.a = x;
  n.pw = &w;
  n.pb = &b;
  n.value = (w.value * nodes_[x].value).colwise() +
            Eigen::VectorXd(b.value.col(0));
  n.requires_grad = true;
  return push(std::move(n));
}

Tape::Id Tape::conv4x4(Param& w, Param& b, Id x) {
  const Mat& in = nodes_[x].value;
  if (in.rows() != 16) throw std::invalid_argument("conv4x4 expects 16 rows");
  const int channels = static_cast<int>(w.value.rows());
  const int batch = static_cast<int>(in.cols());
  const auto& nb = grid_neighbors();
  Mat out = Mat::Zero(16 * channels, batch);
  for (int p = 0; p < 16; ++p) {
    for (int k = 0; k < 9; ++k) {
      if (nb[p][k] < 0) continue;
      out.middleRows(p * channels, channels).noalias() +=
          w.value.col(k) * in.row(nb[p][k]);
    }
    out.middleRows(p * channels, channels).colwise() +=
        Eigen::VectorXd(b.value.col(0));
  }
  Node n;
  n.op = Op::kConv4x4;
  n.a = x;
  n.pw = &w;
  n.pb = &b;
  n.value = std::move(out);
  n.requires_grad = true;
  return push(std::move(n));
}

Tape::Id Tape::relu(Id x) {
  Node n;
  n.op = Op::kRelu;
  n.a = x;
  n.value = nodes_[x].value.cwiseMax(0.0);
  n.requires_grad = req(x);
  return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value + nodes_[b].value;
  n.requires_grad = req(a) || req(b);
  return push(std::move(n));
}

Tape::Id Tape::sub(Id a, Id b) {
  Node n;
  n.op = Op::kSub;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value - nodes_[b].value;
  n.requires_grad = req(a) || req(b);
  return push(std::move(n));
}

Tape::Id Tape::mul(Id a, Id b) {
  Node n;
  n.op = Op::kMul;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value.cwiseProduct(nodes_[b].value);
  n.requires_grad = req(a) || req(b);
  return push(std::move(n));
}

Tape::Id Tape::div(Id a, Id b) {
  Node n;
  n.op = Op::kDiv;
  n.a = a;
  n.b = b;
  n.value = nodes_[a].value.cwiseQuotient(nodes_[b].value);
  n.requires_grad = req(a) || req(b);
  return push(std::move(n));
}

Tape::Id Tape::scale(Id a, double c) {
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.c = c;
  n.value = c * nodes_[a].value;
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::offset(Id a, double c) {
  Node n;
  n.op = Op::kOffset;
  n.a = a;
  n.c = c;
  n.value = nodes_[a].value.array() + c;
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::mul_const(Id a, Mat m) {
  Node n;
  n.op = Op::kMulConst;
  n.a = a;
  n.value = nodes_[a].value.cwiseProduct(m);
  n.cmat = std::move(m);
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::add_const(Id a, Mat m) {
  Node n;
  n.op = Op::kAddConst;
  n.a = a;
  n.value = nodes_[a].value + m;
  n.cmat = std::move(m);
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::vexp(Id a) {
  Node n;
  n.op = Op::kExp;
  n.a = a;
  n.value = nodes_[a].value.array().exp();
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::vlog(Id a) {
  Node n;
  n.op = Op::kLog;
  n.a = a;
  n.value = nodes_[a].value.array().log();
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::vabs(Id a) {
  Node n;
  n.op = Op::kAbs;
  n.a = a;
  n.value = nodes_[a].value.cwiseAbs();
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::vsquare(Id a) {
  Node n;
  n.op = Op::kSquare;
  n.a = a;
  n.value = nodes_[a].value.array().square();
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::vsqrt(Id a) {
  Node n;
  n.op = Op::kSqrt;
  n.a = a;
  n.value = nodes_[a].value.array().sqrt();
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::rowcat(Id a, Id b) {
  const Mat& va = nodes_[a].value;
  const Mat& vb = nodes_[b].value;
  Mat v(va.rows() + vb.rows(), va.cols());
  v.topRows(va.rows()) = va;
  v.bottomRows(vb.rows()) = vb;
  Node n;
  n.op = Op::kRowCat;
  n.a = a;
  n.b = b;
  n.i0 = static_cast<int>(va.rows());
  n.value = std::move(v);
  n.requires_grad = req(a) || req(b);
  return push(std::move(n));
}

Tape::Id Tape::rows(Id a, int lo, int cnt) {
  Node n;
  n.op = Op::kRows;
  n.a = a;
  n.i0 = lo;
  n.i1 = cnt;
  n.value = nodes_[a].value.middleRows(lo, cnt);
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::drop_row(Id a, int r) {
  const Mat& v = nodes_[a].value;
  Mat out(v.rows() - 1, v.cols());
  out.topRows(r) = v.topRows(r);
  out.bottomRows(v.rows() - 1 - r) = v.bottomRows(v.rows() - 1 - r);
  Node n;
  n.op = Op::kDropRow;
  n.a = a;
  n.i0 = r;
  n.value = std::move(out);
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::colsum(Id a) {
  Node n;
  n.op = Op::kColSum;
  n.a = a;
  n.i0 = static_cast<int>(nodes_[a].value.rows());
  n.value = nodes_[a].value.colwise().sum();
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::rowsum(Id a) {
  Node n;
  n.op = Op::kRowSum;
  n.a = a;
  n.i0 = static_cast<int>(nodes_[a].value.cols());
  n.value = nodes_[a].value.rowwise().sum();
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::sum(Id a) {
  Node n;
  n.op = Op::kSum;
  n.a = a;
  n.value = Mat::Constant(1, 1, nodes_[a].value.sum());
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::broadcast(Id a, int r, int c) {
  if (nodes_[a].value.size() != 1)
    throw std::invalid_argument("broadcast expects a 1x1 node");
  Node n;
  n.op = Op::kBroadcast;
  n.a = a;
  n.i0 = r;
  n.i1 = c;
  n.value = Mat::Constant(r, c, nodes_[a].value(0, 0));
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::row_broadcast(Id a, int r) {
  if (nodes_[a].value.rows() != 1)
    throw std::invalid_argument("row_broadcast expects a 1xB node");
  Node n;
  n.op = Op::kRowBroadcast;
  n.a = a;
  n.i0 = r;
  n.value = nodes_[a].value.replicate(r, 1);
  n.requires_grad = req(a);
  return push(std::move(n));
}

Tape::Id Tape::log_softmax_cols(Id a) {
  const Mat& v = nodes_[a].value;
  Mat out(v.rows(), v.cols());
  for (int c = 0; c < v.cols(); ++c) {
    const double mx = v.col(c).maxCoeff();
    const double lse = mx + std::log((v.col(c).array() - mx).exp().sum());
    out.col(c) = v.col(c).array() - lse;
  }
  Node n;
  n.op = Op::kLogSoftmaxCols;
  n.a = a;
  n.value = std::move(out);
  n.requires_grad = req(a);
  return push(std::move(n));
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

Mat Tape::grad_of(Id id) const {
  const Node& n = nodes_[id];
  if (n.has_grad) return n.grad;
  return Mat::Zero(n.value.rows(), n.value.cols());
}

void Tape::backward(Id root) {
  if (nodes_[root].value.size() != 1)
    throw std::invalid_argument("backward root must be a scalar node");
  if (!nodes_[root].requires_grad) return;
  accumulate(root, Mat::Constant(1, 1, 1.0));

  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.has_grad) continue;
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kParamLeaf:
        n.pw->grad += g;
        break;
      case Op::kAffine: {
        n.pw->grad.noalias() += g * nodes_[n.a].value.transpose();
        n.pb->grad.col(0) += g.rowwise().sum();
        if (req(n.a)) accumulate(n.a, n.pw->value.transpose() * g);
        break;
      }
      case Op::kConv4x4: {
        const auto& nb = grid_neighbors();
        const Mat& in = nodes_[n.a].value;
        const int channels = static_cast<int>(n.pw->value.rows());
        Mat gin;
        const bool need_in = req(n.a);
        if (need_in) gin = Mat::Zero(in.rows(), in.cols());
        for (int p = 0; p < 16; ++p) {
          const auto gp = g.middleRows(p * channels, channels);
          n.pb->grad.col(0) += gp.rowwise().sum();
          for (int k = 0; k < 9; ++k) {
            if (nb[p][k] < 0) continue;
            n.pw->grad.col(k).noalias() += gp * in.row(nb[p][k]).transpose();
            if (need_in)
              gin.row(nb[p][k]).noalias() +=
                  n.pw->value.col(k).transpose() * gp;
          }
        }
        if (need_in) accumulate(n.a, gin);
        break;
      }
      case Op::kRelu:
        accumulate(n.a, (n.value.array() > 0.0)
                            .select(g, Mat::Zero(g.rows(), g.cols())));
        break;
      case Op::kAdd:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::kSub:
        accumulate(n.a, g);
        accumulate(n.b, -g);
        break;
      case Op::kMul:
        accumulate(n.a, g.cwiseProduct(nodes_[n.b].value));
        accumulate(n.b, g.cwiseProduct(nodes_[n.a].value));
        break;
      case Op::kDiv:
        accumulate(n.a, g.cwiseQuotient(nodes_[n.b].value));
        accumulate(n.b, -g.cwiseProduct(n.value).cwiseQuotient(nodes_[n.b].value));
        break;
      case Op::kScale:
        accumulate(n.a, n.c * g);
        break;
      case Op::kOffset:
        accumulate(n.a, g);
        break;
      case Op::kMulConst:
        accumulate(n.a, g.cwiseProduct(n.cmat));
        break;
      case Op::kAddConst:
        accumulate(n.a, g);
        break;
      case Op::kExp:
        accumulate(n.a, g.cwiseProduct(n.value));
        break;
      case Op::kLog:
        accumulate(n.a, g.cwiseQuotient(nodes_[n.a].value));
        break;
      case Op::kAbs:
        accumulate(n.a, g.cwiseProduct(nodes_[n.a].value.cwiseSign()));
        break;
      case Op::kSquare:
        accumulate(n.a, 2.0 * g.cwiseProduct(nodes_[n.a].value));
        break;
      case Op::kSqrt:
        accumulate(n.a, 0.5 * g.cwiseQuotient(n.value));
        break;
      case Op::kRowCat: {
        accumulate(n.a, g.topRows(n.i0));
        accumulate(n.b, g.bottomRows(g.rows() - n.i0));
        break;
      }
      case Op::kRows: {
        Mat ga = Mat::Zero(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
        ga.middleRows(n.i0, n.i1) = g;
        accumulate(n.a, ga);
        break;
      }
      case Op::kDropRow: {
        Mat ga = Mat::Zero(nodes_[n.a].value.rows(), nodes_[n.a].value.cols());
        ga.topRows(n.i0) = g.topRows(n.i0);
        ga.bottomRows(ga.rows() - 1 - n.i0) = g.bottomRows(g.rows() - n.i0);
        accumulate(n.a, ga);
        break;
      }
      case Op::kColSum:
        accumulate(n.a, g.replicate(n.i0, 1));
        break;
      case Op::kRowSum:
        accumulate(n.a, g.replicate(1, n.i0));
        break;
      case Op::kSum:
        accumulate(n.a, Mat::Constant(nodes_[n.a].value.rows(),
                                      nodes_[n.a].value.cols(), g(0, 0)));
        break;
      case Op::kBroadcast:
        accumulate(n.a, Mat::Constant(1, 1, g.sum()));
        break;
      case Op::kRowBroadcast:
        accumulate(n.a, g.colwise().sum());
        break;
      case Op::kLogSoftmaxCols: {
        Mat ga(g.rows(), g.cols());
        for (int c = 0; c < g.cols(); ++c) {
          const double gs = g.col(c).sum();
          ga.col(c) = g.col(c).array() - n.value.col(c).array().exp() * gs;
        }
        accumulate(n.a, ga);
        break;
      }
    }
    // Release interior gradient storage early; parameters accumulate into
    // their own buffers and graded leaves keep theirs for grad_of().
    if (n.op != Op::kInput) {
      n.grad.resize(0, 0);
      n.has_grad = false;
    }
  }
}

Eigen::VectorXd time_embedding(double t, int dim) {
  Eigen::VectorXd emb(dim);
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq =
        std::pow(1000.0, half > 1 ? static_cast<double>(k) / (half - 1) : 0.0);
    emb[2 * k] = std::sin(freq * t);
    emb[2 * k + 1] = std::cos(freq * t);
  }
  return emb;
}

Mat time_embedding_batch(const Eigen::VectorXd& ts, int dim) {
  Mat out(dim, ts.size());
  for (int c = 0; c < ts.size(); ++c) out.col(c) = time_embedding(ts[c], dim);
  return out;
}

}  // namespace dcrl::nn
