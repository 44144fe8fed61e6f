#pragma once

#include <Eigen/Dense>

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dcrl/encoder.hpp"
#include "dcrl/latent_scm.hpp"
#include "dcrl/nn.hpp"
#include "dcrl/rng.hpp"
#include "dcrl/scmgen.hpp"
#include "dcrl/sde.hpp"

namespace dcrl::trainer {

using Eigen::VectorXd;
using nn::Mat;

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int d = 5;
  double lr = 3e-4;
  int batch = 64;
  std::array<int, 3> phase_epochs{20, 50, 50};
  bool time_dependent = false;
  std::string lambda_mode = "elbo";  // or "kernel_var"
  bool entropy_literal_sign = false;
  double entropy_coeff = 1.0;
  double t_floor = 1e-5;
  double phase2_support_bound = 10.0;
  std::uint64_t seed = 0;
  int save_every = 0;  // extra checkpoint every k epochs; 0 = phase ends only

  // Diffusion schedule and sampler defaults.
  double sigma_min = 0.01;
  double sigma_max = 50.0;
  int n_steps = 100;

  // Architecture.
  int score_width = 128;
  int score_blocks = 2;
  int time_dim = 32;
  bool grid_stem = true;
  int grid_channels = 8;
  int enc_hidden = 64;
  int enc_layers = 2;
  int flow_hidden = 64;

  void validate() const;
  std::string to_json_string() const;
  static TrainConfig from_json_string(const std::string& s);
  std::string hash() const;  // canonical-form hash, format-insensitive
};

/// All trainable modules plus the schedule, sharing one parameter store.
struct Model {
  TrainConfig cfg;
  sde::VESchedule schedule;
  nn::ParamStore store;
  std::unique_ptr<sde::ScoreNetwork> score;
  std::unique_ptr<encoder::StochasticEncoder> enc;
  std::unique_ptr<encoder::InterventionModule> ivn;
  std::unique_ptr<latent_scm::SolutionFlow> flow;

  static Model init(const TrainConfig& cfg);
};

struct LossBreakdown {
  double total = 0.0;
  double diff_x = 0.0;
  double diff_xt = 0.0;
  double prior = 0.0;      // mean log p(I) + log p(e) + log p(e_tilde|e,I)
  double posterior = 0.0;  // mean log q(I|..) + log q(e, e_tilde|..)
  double entropy = 0.0;    // entropy-regularizer value as added to the loss

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown& operator/=(double k);
};

enum class FlowMode { kFlow, kUniformStub };

struct LossOptions {
  double beta = 1.0;
  bool time_dependent_encoder = false;
  FlowMode flow_mode = FlowMode::kFlow;
  double entropy_coeff = 0.0;
  bool entropy_literal_sign = false;
  sde::WeightMode lambda_mode = sde::WeightMode::kElbo;
  double t_floor = 1e-5;
  double support_bound = 10.0;
  bool sample_target = true;  // categorical draw; false = argmax
  bool backprop = true;
};

/// Shared ELBO-derived loss over a pair batch (columns). Draw order per
/// batch: times, target uniforms, three projection normal blocks, then the
/// two perturbation noise blocks.
LossBreakdown model_loss(Model& model, const Mat& x, const Mat& x_tilde,
                         const LossOptions& opt, Rng& rng);

/// Single-point representation loss; requires a time-independent encoder.
LossBreakdown model_loss_single(Model& model, const Mat& x, const Mat& x_tilde,
                                double beta, Rng& rng, LossOptions opt = {});

/// Infinite-dimensional (trajectory) loss: the encoder sees the same t as
/// the diffusion perturbation. Reduces to model_loss_single bit-for-bit
/// when the encoder ignores time.
LossBreakdown model_loss_infinite(Model& model, const Mat& x,
                                  const Mat& x_tilde, double beta, Rng& rng,
                                  LossOptions opt = {});

/// Negative entropy of the batch-aggregate intervention posterior:
/// sum_I qbar ln qbar (minimized at the uniform aggregate). The literal
/// variant returns +H instead.
double entropy_regularizer(
    const std::vector<encoder::InterventionPosterior>& batch,
    bool literal_sign = false);

/// Phase schedule for the ELBO weight: 0 in phase 1, 1 in phase 2, linear
/// 0 -> 1 over phase 3. Epochs are 0-based within the phase.
double beta_schedule(int phase, int epoch, const TrainConfig& cfg);

struct TrainResult {
  std::string checkpoint_path;
  std::string log_path;
  LossBreakdown final_epoch;
  int epochs_run = 0;
};

/// Three-phase training per the reference procedure; writes JSONL epoch
/// records and phase-boundary checkpoints under out_dir. A nonnegative
/// stop_after_epochs halts (with a resumable checkpoint) after that many
/// epochs of this invocation.
TrainResult train(const scmgen::PairDataset& ds, const TrainConfig& cfg,
                  const std::string& out_dir,
                  const std::string& resume_path = "",
                  int stop_after_epochs = -1);

void save_checkpoint(const Model& model, const Rng& train_rng, int phase,
                     int epoch, const std::string& path);

struct Checkpoint {
  Model model;
  int phase = 1;
  int epoch = 0;  // next epoch to run within phase
  std::string rng_state;
};
Checkpoint load_checkpoint(const std::string& path);

/// Loads parameters into an existing model; shape mismatches raise an error
/// naming the offending tensor.
void load_checkpoint_into(Model& model, const std::string& path);

}  // namespace dcrl::trainer
