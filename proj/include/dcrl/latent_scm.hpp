#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "dcrl/nn.hpp"
#include "dcrl/rng.hpp"

namespace dcrl::latent_scm {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nn::Mat;
using nn::Tape;

struct FlowConfig {
  int d = 5;
  int hidden = 64;

  void validate() const;
};

struct PriorConfig {
  int d = 5;  // e ~ N(0, I), I ~ uniform over {0..d-1}
};

/// Per-component conditional affine flows h_i(v; e_{-i}) = (v - m_i) *
/// exp(-l_i) with (m_i, l_i) produced by a one-hidden-layer conditioner on
/// the remaining coordinates. The conditioners implicitly encode the causal
/// graph; zero-initialized heads start at the identity flow.
class SolutionFlow {
 public:
  SolutionFlow(FlowConfig cfg, nn::ParamStore& store, const std::string& prefix,
               Rng& init_rng);

  /// Batched conditioner node for component i from a ((d-1) x B) context;
  /// row 0 is the shift m, row 1 the log-scale l.
  Tape::Id conditioner(Tape& tape, int i, Tape::Id context) const;

  /// (shift, log_scale) for component i given the full vector e (the i-th
  /// coordinate is dropped to form the context).
  std::pair<double, double> shift_log_scale(int i, const VectorXd& e) const;

  /// log p(e_tilde_i | e) under the flow: log N(h_i; 0, 1) - l_i.
  double flow_log_density(int i, double e_tilde_i, const VectorXd& e) const;

  /// z_i = h_i(e_i; e_{-i}) applied component-wise.
  VectorXd extract_causal_variables(const VectorXd& e) const;
  /// Column-wise extraction for a (d x n) batch.
  MatrixXd extract_batch(const MatrixXd& e) const;

  const FlowConfig& config() const { return cfg_; }

 private:
  FlowConfig cfg_;
  struct Component {
    nn::Param *w1, *b1, *w2, *b2;
  };
  std::vector<Component> comps_;
};

/// Phase-2 stand-in for the flow density: a uniform law on
/// [-support_bound, support_bound], i.e. the constant -ln(2 * support_bound).
double uniform_density_stub(double support_bound);

/// log p(e, e_tilde, I) = log p(I) + log p(e) + log p(e_tilde_target | e).
/// The Dirac factors are handled structurally: the off-target coordinates
/// must already coincide (tolerance 1e-9) or the call is a contract
/// violation.
double prior_log_density(const VectorXd& e, const VectorXd& e_tilde, int target,
                         const SolutionFlow& flow);

/// Standard-normal log density of a vector.
double standard_normal_log_density(const VectorXd& v);

}  // namespace dcrl::latent_scm
