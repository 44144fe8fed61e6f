#pragma once

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>

#include "dcrl/nn.hpp"
#include "dcrl/rng.hpp"

namespace dcrl::sde {

using Eigen::VectorXd;

/// Variance-exploding noise schedule, sigma(t) = sigma_min * (max/min)^t.
/// The ELBO weight and the squared diffusion coefficient coincide here:
/// lambda(t) = g^2(t) = 2 sigma^2(t) ln(max/min).
struct VESchedule {
  double sigma_min = 0.01;
  double sigma_max = 50.0;

  double sigma(double t) const;
  double marginal_var(double t) const;  // sigma^2(t) - sigma^2(0)
  double marginal_std(double t) const;
  double lambda_weight(double t) const;
  double diffusion_sq(double t) const { return lambda_weight(t); }

  void validate() const;
};

/// How score-matching residuals are weighted over time. kElbo is the
/// likelihood weighting; kKernelVar turns the residual into a plain
/// noise-prediction regression.
enum class WeightMode { kElbo, kKernelVar };

WeightMode weight_mode_from_string(const std::string& s);
std::string to_string(WeightMode m);

struct PerturbResult {
  VectorXd x_t;
  VectorXd score;  // conditional score of the perturbation kernel at x_t
};
PerturbResult perturb(const VESchedule& sched, const VectorXd& x0, double t,
                      Rng& rng);

struct ScoreNetConfig {
  int cond_dim = 0;  // 0 = unconditional
  int width = 128;
  int blocks = 2;
  int time_dim = 32;
  bool grid_stem = true;  // reshape the 16-vector into a 4x4 grid + 3x3 conv
  int grid_channels = 8;

  void validate() const;
};

/// Compact residual score network s_theta(u_t, e, t). The input is
/// normalized by the marginal std, the time enters through a sinusoidal
/// embedding, and the conditioning vector modulates each block by a
/// feature-wise scale and shift. The raw output predicts the perturbation
/// noise; the score is that prediction divided by -marginal_std(t).
class ScoreNetwork {
 public:
  ScoreNetwork(ScoreNetConfig cfg, nn::ParamStore& store,
               const std::string& prefix, Rng& init_rng);

  /// Batched tape forward. x_t is 16 x B, ts holds one time per column
  /// (all in (0, 1]), cond is an optional (cond_dim x B) node.
  nn::Tape::Id forward(nn::Tape& tape, const nn::Mat& x_t,
                       const VectorXd& ts, std::optional<nn::Tape::Id> cond,
                       const VESchedule& sched) const;

  /// Single-vector evaluation without gradient bookkeeping.
  VectorXd evaluate(const VectorXd& x_t, const VectorXd* cond, double t,
                    const VESchedule& sched) const;

  const ScoreNetConfig& config() const { return cfg_; }

 private:
  ScoreNetConfig cfg_;
  nn::Param *stem_w_ = nullptr, *stem_b_ = nullptr;
  nn::Param *proj_w_, *proj_b_;
  struct Block {
    nn::Param *film_w, *film_b, *w1, *b1, *w2, *b2;
  };
  std::vector<Block> blocks_;
  nn::Param *out_w_, *out_b_, *skip_w_, *skip_b_;
};

ScoreNetwork build_score_network(const ScoreNetConfig& cfg,
                                 nn::ParamStore& store,
                                 const std::string& prefix, Rng& init_rng);

/// Builds the conditioning node for a batch; ts is null when the encoder is
/// used time-independently.
using CondBuilder = std::function<nn::Tape::Id(
    nn::Tape&, const nn::Mat& x0, const VectorXd* ts)>;

/// Unconditional denoising score matching over a batch. Accumulates
/// parameter gradients when backprop is set.
double dsm_loss(const ScoreNetwork& net, const VESchedule& sched,
                const nn::Mat& x0, const VectorXd& ts, Rng& rng,
                bool backprop = true, WeightMode mode = WeightMode::kElbo);

/// Conditional denoising score matching; gradients flow into the score
/// network and through `cond` into whatever produced the conditioning.
double cdsm_loss(const ScoreNetwork& net, const VESchedule& sched,
                 const CondBuilder& cond, const nn::Mat& x0,
                 const VectorXd& ts, bool time_dependent, Rng& rng,
                 bool backprop = true, WeightMode mode = WeightMode::kElbo);

/// Euler-Maruyama discretization of the reverse-time SDE from t = 1 down to
/// t = 1/n_steps, starting from x ~ N(0, sigma^2(1) I).
using ScoreFn = std::function<VectorXd(const VectorXd& x, double t)>;
VectorXd reverse_sde_sample(const ScoreFn& score, const VESchedule& sched,
                            int n_steps, Rng& rng);
VectorXd reverse_sde_sample(const ScoreNetwork& net, const VESchedule& sched,
                            const VectorXd* cond, int n_steps, Rng& rng);

}  // namespace dcrl::sde
