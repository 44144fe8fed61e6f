#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "dcrl/nn.hpp"
#include "dcrl/rng.hpp"

namespace dcrl::encoder {

using Eigen::VectorXd;
using nn::Mat;
using nn::Tape;

struct GaussianPosterior {
  VectorXd mu;
  VectorXd log_std;

  VectorXd std() const { return log_std.array().exp(); }
};

struct InterventionPosterior {
  VectorXd log_probs;

  VectorXd probs() const { return log_probs.array().exp(); }
  int argmax() const {
    Eigen::Index i;
    log_probs.maxCoeff(&i);
    return static_cast<int>(i);
  }
};

struct EncoderConfig {
  int d = 5;
  int input_dim = 16;
  int hidden = 64;
  int layers = 2;
  bool time_dependent = false;
  int time_dim = 32;

  void validate() const;
};

/// q(e|x): an MLP emitting the mean and log standard deviation of a
/// diagonal Gaussian over noise encodings. In time-dependent mode the
/// sinusoidal embedding of t is concatenated to the input.
class StochasticEncoder {
 public:
  StochasticEncoder(EncoderConfig cfg, nn::ParamStore& store,
                    const std::string& prefix, Rng& init_rng);

  /// Batched tape forward; returns a (2d x B) node, mu rows on top of
  /// log_std rows. `ts` is ignored unless the encoder is time-dependent;
  /// a time-dependent encoder requires it.
  Tape::Id forward(Tape& tape, Tape::Id x, const VectorXd* ts) const;
  Tape::Id forward(Tape& tape, const Mat& x, const VectorXd* ts) const {
    return forward(tape, tape.input(x), ts);
  }

  GaussianPosterior encode(const VectorXd& x,
                           std::optional<double> t = std::nullopt) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  std::vector<nn::Param*> ws_, bs_;
};

/// Heuristic intervention scores: alpha + beta |dmu_i| + gamma |dmu_i|^2,
/// normalized over components by a softmax.
InterventionPosterior intervention_logits(const VectorXd& mu_x,
                                          const VectorXd& mu_xt, double alpha,
                                          double beta, double gamma);

/// Learnable (alpha, beta, gamma) wrapper around the heuristic.
class InterventionModule {
 public:
  InterventionModule(nn::ParamStore& store, const std::string& prefix);

  /// (d x B) log-probability node from mean nodes of the two encodings.
  Tape::Id log_probs(Tape& tape, Tape::Id mu_x, Tape::Id mu_xt) const;

  InterventionPosterior posterior(const VectorXd& mu_x,
                                  const VectorXd& mu_xt) const;

  double alpha() const { return coeff_->value(0, 0); }
  double beta() const { return coeff_->value(1, 0); }
  double gamma() const { return coeff_->value(2, 0); }

 private:
  nn::Param* coeff_;  // rows: alpha, beta, gamma
};

/// Precision-weighted fusion of the two per-coordinate posteriors for all
/// off-target coordinates (one shared sample lands in both outputs
/// bit-exactly); the target coordinate is sampled independently per side.
struct ProjectedPair {
  VectorXd e, e_tilde;
};
ProjectedPair project_pair(const GaussianPosterior& post_x,
                           const GaussianPosterior& post_xt, int target,
                           Rng& rng);

struct EncodedPair {
  GaussianPosterior post_x, post_xt;
  InterventionPosterior q_target;
  VectorXd e, e_tilde;
  int target_sample = -1;
};

/// Batched tape construction of the full encoding module. The returned
/// node bundle is what both training losses and the single-pair sampler
/// are built from. RNG draw order: one uniform per column for the target
/// (only when sample_target), then shared, pre, post normal matrices.
struct EncodedPairNodes {
  Tape::Id mu_x, log_std_x;    // d x B
  Tape::Id mu_xt, log_std_xt;  // d x B
  Tape::Id log_q_target;       // d x B
  Tape::Id e, e_tilde;         // d x B
  Tape::Id log_q_pair;         // 1 x B, log q(e, e_tilde | x, x_tilde, I)
  std::vector<int> targets;    // sampled or argmax target per column
  Mat target_mask;             // d x B one-hot
};
EncodedPairNodes build_encoded_pair_batch(Tape& tape,
                                          const StochasticEncoder& enc,
                                          const InterventionModule& ivn,
                                          const Mat& x, const Mat& x_tilde,
                                          const VectorXd* ts, Rng& rng,
                                          bool sample_target);

/// Single-pair convenience wrapper; argmax target unless sample_target.
EncodedPair sample_encoded_pair(const StochasticEncoder& enc,
                                const InterventionModule& ivn,
                                const VectorXd& x, const VectorXd& x_tilde,
                                Rng& rng,
                                std::optional<double> t = std::nullopt,
                                bool sample_target = false);

}  // namespace dcrl::encoder
