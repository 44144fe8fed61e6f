#include "dcrl/latent_scm.hpp"

#include <cmath>
#include <stdexcept>

namespace dcrl::latent_scm {

namespace {
constexpr double kHalfLog2Pi = 0.5 * 1.8378770664093453;

VectorXd drop_coord(const VectorXd& e, int i) {
  VectorXd out(e.size() - 1);
  out.head(i) = e.head(i);
  out.tail(e.size() - 1 - i) = e.tail(e.size() - 1 - i);
  return out;
}
}  // namespace

void FlowConfig::validate() const {
  if (d < 1) throw std::invalid_argument("flow d must be >= 1");
  if (hidden < 1) throw std::invalid_argument("flow hidden must be >= 1");
}

SolutionFlow::SolutionFlow(FlowConfig cfg, nn::ParamStore& store,
                           const std::string& prefix, Rng& init_rng)
    : cfg_(cfg) {
  cfg_.validate();
  const int ctx = std::max(cfg_.d - 1, 1);
  for (int i = 0; i < cfg_.d; ++i) {
    const std::string cp = prefix + "c" + std::to_string(i) + ".";
    Component c;
    c.w1 = &store.create_kaiming(cp + "w1", cfg_.hidden, ctx, init_rng);
    c.b1 = &store.create(cp + "b1", cfg_.hidden, 1);
    c.w2 = &store.create(cp + "w2", 2, cfg_.hidden);  // zero: identity flow
    c.b2 = &store.create(cp + "b2", 2, 1);
    comps_.push_back(c);
  }
}

Tape::Id SolutionFlow::conditioner(Tape& tape, int i, Tape::Id context) const {
  if (i < 0 || i >= cfg_.d)
    throw std::invalid_argument("flow component index out of range");
  const Component& c = comps_[i];
  const Tape::Id h = tape.relu(tape.affine(*c.w1, *c.b1, context));
  return tape.affine(*c.w2, *c.b2, h);
}

std::pair<double, double> SolutionFlow::shift_log_scale(
    int i, const VectorXd& e) const {
  if (i < 0 || i >= cfg_.d)
    throw std::invalid_argument("flow component index out of range");
  Tape tape;
  // d = 1 has an empty context; feed a zero scalar so shapes stay valid.
  const VectorXd ctx = cfg_.d > 1 ? drop_coord(e, i) : VectorXd::Zero(1);
  const Tape::Id out = conditioner(tape, i, tape.input(ctx));
  const double m = tape.val(out)(0, 0);
  const double l = tape.val(out)(1, 0);
  if (!std::isfinite(m) || !std::isfinite(l))
    throw std::runtime_error("flow conditioner produced non-finite output");
  return {m, l};
}

double SolutionFlow::flow_log_density(int i, double e_tilde_i,
                                      const VectorXd& e) const {
  const auto [m, l] = shift_log_scale(i, e);
  const double h = (e_tilde_i - m) * std::exp(-l);
  return -kHalfLog2Pi - 0.5 * h * h - l;
}

VectorXd SolutionFlow::extract_causal_variables(const VectorXd& e) const {
  VectorXd z(cfg_.d);
  for (int i = 0; i < cfg_.d; ++i) {
    const auto [m, l] = shift_log_scale(i, e);
    z[i] = (e[i] - m) * std::exp(-l);
  }
  return z;
}

MatrixXd SolutionFlow::extract_batch(const MatrixXd& e) const {
  if (e.rows() != cfg_.d)
    throw std::invalid_argument("extract_batch: row count must equal d");
  MatrixXd z(cfg_.d, e.cols());
  Tape tape;
  for (int i = 0; i < cfg_.d; ++i) {
    Mat ctx;
    if (cfg_.d > 1) {
      ctx.resize(cfg_.d - 1, e.cols());
      ctx.topRows(i) = e.topRows(i);
      ctx.bottomRows(cfg_.d - 1 - i) = e.bottomRows(cfg_.d - 1 - i);
    } else {
      ctx = Mat::Zero(1, e.cols());
    }
    const Tape::Id out = conditioner(tape, i, tape.input(std::move(ctx)));
    const auto& v = tape.val(out);
    z.row(i) = (e.row(i) - v.row(0)).cwiseProduct((-v.row(1)).array().exp().matrix());
  }
  return z;
}

double uniform_density_stub(double support_bound) {
  if (support_bound <= 0.0)
    throw std::invalid_argument("support bound must be positive");
  return -std::log(2.0 * support_bound);
}

double standard_normal_log_density(const VectorXd& v) {
  return -kHalfLog2Pi * static_cast<double>(v.size()) - 0.5 * v.squaredNorm();
}

double prior_log_density(const VectorXd& e, const VectorXd& e_tilde, int target,
                         const SolutionFlow& flow) {
  const int d = static_cast<int>(e.size());
  if (target < 0 || target >= d)
    throw std::invalid_argument("prior_log_density: target out of range");
  for (int i = 0; i < d; ++i) {
    if (i == target) continue;
    if (std::abs(e[i] - e_tilde[i]) > 1e-9)
      throw std::logic_error(
          "prior_log_density: off-target coordinates must coincide "
          "(projection contract violated at index " +
          std::to_string(i) + ")");
  }
  return -std::log(static_cast<double>(d)) + standard_normal_log_density(e) +
         flow.flow_log_density(target, e_tilde[target], e);
}

}  // namespace dcrl::latent_scm
