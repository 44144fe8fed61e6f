#include "dcrl/sde.hpp"

#include <cmath>
#include <stdexcept>

namespace dcrl::sde {

using nn::Mat;
using nn::Tape;

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("time must lie in [0,1], got " +
                                std::to_string(t));
}

Mat weight_matrix(const VESchedule& sched, const VectorXd& ts, int rows,
                  WeightMode mode) {
  Mat w(rows, ts.size());
  for (int b = 0; b < ts.size(); ++b) {
    const double v = mode == WeightMode::kElbo ? sched.lambda_weight(ts[b])
                                               : sched.marginal_var(ts[b]);
    w.col(b).setConstant(v);
  }
  return w;
}

}  // namespace

void VESchedule::validate() const {
  if (!(sigma_min > 0.0 && sigma_min < sigma_max))
    throw std::invalid_argument("VESchedule requires 0 < sigma_min < sigma_max");
}

double VESchedule::sigma(double t) const {
  check_time(t);
  return sigma_min * std::pow(sigma_max / sigma_min, t);
}

double VESchedule::marginal_var(double t) const {
  const double s = sigma(t);
  return s * s - sigma_min * sigma_min;
}

double VESchedule::marginal_std(double t) const {
  return std::sqrt(marginal_var(t));
}

double VESchedule::lambda_weight(double t) const {
  const double s = sigma(t);
  return 2.0 * s * s * std::log(sigma_max / sigma_min);
}

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "elbo") return WeightMode::kElbo;
  if (s == "kernel_var") return WeightMode::kKernelVar;
  throw std::invalid_argument("unknown weight mode: " + s);
}

std::string to_string(WeightMode m) {
  return m == WeightMode::kElbo ? "elbo" : "kernel_var";
}

PerturbResult perturb(const VESchedule& sched, const VectorXd& x0, double t,
                      Rng& rng) {
  if (!(t > 0.0 && t <= 1.0))
    throw std::invalid_argument("perturb: t must lie in (0,1]");
  const double std = sched.marginal_std(t);
  PerturbResult out;
  const VectorXd eta = rng.normal_vec(static_cast<int>(x0.size()));
  out.x_t = x0 + std * eta;
  out.score = -(out.x_t - x0) / (std * std);
  return out;
}

void ScoreNetConfig::validate() const {
  if (cond_dim < 0) throw std::invalid_argument("cond_dim must be >= 0");
  if (width < 1 || blocks < 1) throw std::invalid_argument("bad network size");
  if (time_dim < 2 || time_dim % 2 != 0)
    throw std::invalid_argument("time_dim must be even and >= 2");
  if (grid_stem && grid_channels < 1)
    throw std::invalid_argument("grid_channels must be >= 1");
}

ScoreNetwork::ScoreNetwork(ScoreNetConfig cfg, nn::ParamStore& store,
                           const std::string& prefix, Rng& init_rng)
    : cfg_(cfg) {
  cfg_.validate();
  const int ctx_dim = cfg_.time_dim + cfg_.cond_dim;
  int stem_out = 16;
  if (cfg_.grid_stem) {
    stem_w_ = &store.create_kaiming(prefix + "stem.w", cfg_.grid_channels, 9,
                                    init_rng);
    stem_b_ = &store.create(prefix + "stem.b", cfg_.grid_channels, 1);
    stem_out = 16 * cfg_.grid_channels;
  }
  proj_w_ = &store.create_kaiming(prefix + "proj.w", cfg_.width, stem_out,
                                  init_rng);
  proj_b_ = &store.create(prefix + "proj.b", cfg_.width, 1);
  for (int k = 0; k < cfg_.blocks; ++k) {
    const std::string bp = prefix + "block" + std::to_string(k) + ".";
    Block blk;
    blk.film_w =
        &store.create_kaiming(bp + "film.w", 2 * cfg_.width, ctx_dim, init_rng);
    blk.film_b = &store.create(bp + "film.b", 2 * cfg_.width, 1);
    blk.w1 = &store.create_kaiming(bp + "w1", cfg_.width, cfg_.width, init_rng);
    blk.b1 = &store.create(bp + "b1", cfg_.width, 1);
    blk.w2 = &store.create_kaiming(bp + "w2", cfg_.width, cfg_.width, init_rng);
    blk.b2 = &store.create(bp + "b2", cfg_.width, 1);
    blocks_.push_back(blk);
  }
  // Zero-initialized head and skip gain: the initial score is identically 0.
  out_w_ = &store.create(prefix + "out.w", 16, cfg_.width);
  out_b_ = &store.create(prefix + "out.b", 16, 1);
  skip_w_ = &store.create(prefix + "skip.w", 16, ctx_dim);
  skip_b_ = &store.create(prefix + "skip.b", 16, 1);
}

Tape::Id ScoreNetwork::forward(Tape& tape, const Mat& x_t, const VectorXd& ts,
                               std::optional<Tape::Id> cond,
                               const VESchedule& sched) const {
  const int batch = static_cast<int>(x_t.cols());
  if (x_t.rows() != 16)
    throw std::invalid_argument("score network expects 16-dimensional input");
  if (ts.size() != batch)
    throw std::invalid_argument("one time per batch column required");
  if (cond.has_value() != (cfg_.cond_dim > 0))
    throw std::invalid_argument(
        "conditioning node must match configured cond_dim");
  if (cond && tape.val(*cond).rows() != cfg_.cond_dim)
    throw std::invalid_argument("conditioning dimension mismatch");

  // Input normalization and output scaling are fixed per-column transforms.
  Mat norm(16, batch), out_scale(16, batch);
  for (int b = 0; b < batch; ++b) {
    if (!(ts[b] > 0.0 && ts[b] <= 1.0))
      throw std::invalid_argument("score network times must lie in (0,1]");
    const double var = sched.marginal_var(ts[b]);
    norm.col(b).setConstant(1.0 / std::sqrt(1.0 + var));
    out_scale.col(b).setConstant(-1.0 / std::sqrt(var));
  }

  const Tape::Id x_norm = tape.input(x_t.cwiseProduct(norm));
  Tape::Id ctx = tape.input(nn::time_embedding_batch(ts, cfg_.time_dim));
  if (cond) ctx = tape.rowcat(ctx, *cond);

  Tape::Id h;
  if (cfg_.grid_stem) {
    const Tape::Id g = tape.relu(tape.conv4x4(*stem_w_, *stem_b_, x_norm));
    h = tape.relu(tape.affine(*proj_w_, *proj_b_, g));
  } else {
    h = tape.relu(tape.affine(*proj_w_, *proj_b_, x_norm));
  }
  for (const Block& blk : blocks_) {
    const Tape::Id film = tape.affine(*blk.film_w, *blk.film_b, ctx);
    const Tape::Id gamma = tape.rows(film, 0, cfg_.width);
    const Tape::Id shift = tape.rows(film, cfg_.width, cfg_.width);
    Tape::Id u = tape.affine(*blk.w1, *blk.b1, h);
    u = tape.add(tape.mul(u, tape.offset(gamma, 1.0)), shift);
    u = tape.relu(u);
    u = tape.affine(*blk.w2, *blk.b2, u);
    h = tape.add(h, u);
  }
  Tape::Id eta = tape.affine(*out_w_, *out_b_, h);
  const Tape::Id skip = tape.affine(*skip_w_, *skip_b_, ctx);
  eta = tape.add(eta, tape.mul(skip, x_norm));
  return tape.mul_const(eta, out_scale);
}

VectorXd ScoreNetwork::evaluate(const VectorXd& x_t, const VectorXd* cond,
                                double t, const VESchedule& sched) const {
  nn::Tape tape;
  std::optional<Tape::Id> c;
  if (cfg_.cond_dim > 0) {
    if (cond == nullptr)
      throw std::invalid_argument("conditioned network needs a cond vector");
    c = tape.input(*cond);
  }
  VectorXd ts(1);
  ts[0] = t;
  const Tape::Id s = forward(tape, x_t, ts, c, sched);
  return tape.val(s).col(0);
}

ScoreNetwork build_score_network(const ScoreNetConfig& cfg,
                                 nn::ParamStore& store,
                                 const std::string& prefix, Rng& init_rng) {
  return ScoreNetwork(cfg, store, prefix, init_rng);
}

namespace {

// Shared core: perturb the batch, run the net, reduce the weighted residual.
double score_matching_loss(const ScoreNetwork& net, const VESchedule& sched,
                           const CondBuilder* cond_builder, const Mat& x0,
                           const VectorXd& ts, bool time_dependent, Rng& rng,
                           bool backprop, WeightMode mode) {
  const int batch = static_cast<int>(x0.cols());
  if (batch == 0) throw std::invalid_argument("empty batch");
  if (ts.size() != batch)
    throw std::invalid_argument("one time per batch element required");

  nn::Tape tape;
  std::optional<Tape::Id> cond;
  if (cond_builder != nullptr)
    cond = (*cond_builder)(tape, x0, time_dependent ? &ts : nullptr);

  const Mat eta = rng.normal_mat(16, batch);
  Mat x_t(16, batch), target(16, batch);
  for (int b = 0; b < batch; ++b) {
    const double std = sched.marginal_std(ts[b]);
    x_t.col(b) = x0.col(b) + std * eta.col(b);
    target.col(b) = -eta.col(b) / std;
  }

  const Tape::Id s = net.forward(tape, x_t, ts, cond, sched);
  const Tape::Id resid = tape.sub(s, tape.input(target));
  const Tape::Id weighted =
      tape.mul_const(tape.vsquare(resid), weight_matrix(sched, ts, 16, mode));
  const Tape::Id loss = tape.scale(tape.sum(weighted), 1.0 / batch);
  if (backprop) tape.backward(loss);
  return tape.scalar(loss);
}

}  // namespace

double dsm_loss(const ScoreNetwork& net, const VESchedule& sched, const Mat& x0,
                const VectorXd& ts, Rng& rng, bool backprop, WeightMode mode) {
  return score_matching_loss(net, sched, nullptr, x0, ts, false, rng, backprop,
                             mode);
}

double cdsm_loss(const ScoreNetwork& net, const VESchedule& sched,
                 const CondBuilder& cond, const Mat& x0, const VectorXd& ts,
                 bool time_dependent, Rng& rng, bool backprop,
                 WeightMode mode) {
  return score_matching_loss(net, sched, &cond, x0, ts, time_dependent, rng,
                             backprop, mode);
}

VectorXd reverse_sde_sample(const ScoreFn& score, const VESchedule& sched,
                            int n_steps, Rng& rng) {
  if (n_steps < 1) throw std::invalid_argument("n_steps must be >= 1");
  const double h = 1.0 / n_steps;
  VectorXd x = sched.sigma(1.0) * rng.normal_vec(16);
  for (int k = 0; k < n_steps; ++k) {
    const double t = 1.0 - k * h;
    const double g2 = sched.diffusion_sq(t);
    x += h * g2 * score(x, t) + std::sqrt(h * g2) * rng.normal_vec(16);
  }
  return x;
}

VectorXd reverse_sde_sample(const ScoreNetwork& net, const VESchedule& sched,
                            const VectorXd* cond, int n_steps, Rng& rng) {
  return reverse_sde_sample(
      [&](const VectorXd& x, double t) {
        return net.evaluate(x, cond, t, sched);
      },
      sched, n_steps, rng);
}

}  // namespace dcrl::sde
