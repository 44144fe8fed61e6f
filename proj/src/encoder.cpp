#include "dcrl/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace dcrl::encoder {

namespace {
constexpr double kHalfLog2Pi = 0.5 * 1.8378770664093453;  // 0.5 * ln(2*pi)
}

void EncoderConfig::validate() const {
  if (d < 1) throw std::invalid_argument("encoder d must be >= 1");
  if (input_dim < 1 || hidden < 1 || layers < 1)
    throw std::invalid_argument("bad encoder size");
  if (time_dim < 2 || time_dim % 2 != 0)
    throw std::invalid_argument("time_dim must be even and >= 2");
}

StochasticEncoder::StochasticEncoder(EncoderConfig cfg, nn::ParamStore& store,
                                     const std::string& prefix, Rng& init_rng)
    : cfg_(cfg) {
  cfg_.validate();
  int in = cfg_.input_dim + (cfg_.time_dependent ? cfg_.time_dim : 0);
  for (int l = 0; l < cfg_.layers; ++l) {
    ws_.push_back(&store.create_kaiming(prefix + "l" + std::to_string(l) + ".w",
                                        cfg_.hidden, in, init_rng));
    bs_.push_back(
        &store.create(prefix + "l" + std::to_string(l) + ".b", cfg_.hidden, 1));
    in = cfg_.hidden;
  }
  // Head initialized to zero: the initial posterior is N(0, I) for every x.
  ws_.push_back(&store.create(prefix + "head.w", 2 * cfg_.d, in));
  bs_.push_back(&store.create(prefix + "head.b", 2 * cfg_.d, 1));
}

Tape::Id StochasticEncoder::forward(Tape& tape, Tape::Id x,
                                    const VectorXd* ts) const {
  const Mat& xv = tape.val(x);
  if (xv.rows() != cfg_.input_dim)
    throw std::invalid_argument("encoder input dimension mismatch");
  if (!xv.allFinite())
    throw std::invalid_argument("encoder input must be finite");
  Tape::Id h = x;
  if (cfg_.time_dependent) {
    if (ts == nullptr)
      throw std::invalid_argument("time-dependent encoder requires times");
    h = tape.rowcat(
        x, tape.input(nn::time_embedding_batch(*ts, cfg_.time_dim)));
  }
  for (int l = 0; l < cfg_.layers; ++l)
    h = tape.relu(tape.affine(*ws_[l], *bs_[l], h));
  return tape.affine(*ws_.back(), *bs_.back(), h);
}

GaussianPosterior StochasticEncoder::encode(const VectorXd& x,
                                            std::optional<double> t) const {
  Tape tape;
  VectorXd ts(1);
  ts[0] = t.value_or(0.0);
  const Tape::Id out = forward(tape, x, cfg_.time_dependent ? &ts : nullptr);
  GaussianPosterior post;
  post.mu = tape.val(out).col(0).head(cfg_.d);
  post.log_std = tape.val(out).col(0).tail(cfg_.d);
  return post;
}

InterventionPosterior intervention_logits(const VectorXd& mu_x,
                                          const VectorXd& mu_xt, double alpha,
                                          double beta, double gamma) {
  if (mu_x.size() != mu_xt.size())
    throw std::invalid_argument("intervention_logits: length mismatch");
  if (mu_x.size() == 0)
    throw std::invalid_argument("intervention_logits: empty input");
  const Eigen::ArrayXd delta = (mu_x - mu_xt).cwiseAbs().array();
  const VectorXd scores = (alpha + beta * delta + gamma * delta.square()).matrix();
  const double mx = scores.maxCoeff();
  const double lse = mx + std::log((scores.array() - mx).exp().sum());
  InterventionPosterior post;
  post.log_probs = scores.array() - lse;
  return post;
}

InterventionModule::InterventionModule(nn::ParamStore& store,
                                       const std::string& prefix) {
  coeff_ = &store.create(prefix + "coeff", 3, 1);
  coeff_->value << 0.0, 1.0, 1.0;
}

Tape::Id InterventionModule::log_probs(Tape& tape, Tape::Id mu_x,
                                       Tape::Id mu_xt) const {
  const int d = static_cast<int>(tape.val(mu_x).rows());
  const int batch = static_cast<int>(tape.val(mu_x).cols());
  const Tape::Id coeff = tape.param_leaf(*coeff_);
  const Tape::Id a = tape.broadcast(tape.row(coeff, 0), d, batch);
  const Tape::Id b = tape.broadcast(tape.row(coeff, 1), d, batch);
  const Tape::Id g = tape.broadcast(tape.row(coeff, 2), d, batch);
  const Tape::Id delta = tape.vabs(tape.sub(mu_x, mu_xt));
  const Tape::Id scores =
      tape.add(a, tape.add(tape.mul(b, delta), tape.mul(g, tape.vsquare(delta))));
  return tape.log_softmax_cols(scores);
}

InterventionPosterior InterventionModule::posterior(
    const VectorXd& mu_x, const VectorXd& mu_xt) const {
  return intervention_logits(mu_x, mu_xt, alpha(), beta(), gamma());
}

ProjectedPair project_pair(const GaussianPosterior& post_x,
                           const GaussianPosterior& post_xt, int target,
                           Rng& rng) {
  const int d = static_cast<int>(post_x.mu.size());
  if (target < 0 || target >= d)
    throw std::invalid_argument("project_pair: target out of range");
  ProjectedPair out;
  out.e.resize(d);
  out.e_tilde.resize(d);
  const VectorXd std_x = post_x.std();
  const VectorXd std_xt = post_xt.std();
  // Matches the batched builder's draw order: shared, then pre, then post.
  const VectorXd eta_shared = rng.normal_vec(d);
  const VectorXd eta_x = rng.normal_vec(d);
  const VectorXd eta_xt = rng.normal_vec(d);
  for (int i = 0; i < d; ++i) {
    if (i == target) {
      out.e[i] = post_x.mu[i] + std_x[i] * eta_x[i];
      out.e_tilde[i] = post_xt.mu[i] + std_xt[i] * eta_xt[i];
    } else {
      const double p1 = 1.0 / (std_x[i] * std_x[i]);
      const double p2 = 1.0 / (std_xt[i] * std_xt[i]);
      const double var = 1.0 / (p1 + p2);
      const double mu = var * (p1 * post_x.mu[i] + p2 * post_xt.mu[i]);
      const double sample = mu + std::sqrt(var) * eta_shared[i];
      out.e[i] = sample;
      out.e_tilde[i] = sample;
    }
  }
  return out;
}

EncodedPairNodes build_encoded_pair_batch(Tape& tape,
                                          const StochasticEncoder& enc,
                                          const InterventionModule& ivn,
                                          const Mat& x, const Mat& x_tilde,
                                          const VectorXd* ts, Rng& rng,
                                          bool sample_target) {
  const int d = enc.config().d;
  const int batch = static_cast<int>(x.cols());
  if (x_tilde.cols() != batch || x_tilde.rows() != x.rows())
    throw std::invalid_argument("pair batch shape mismatch");

  EncodedPairNodes out;
  const Tape::Id enc_x = enc.forward(tape, x, ts);
  const Tape::Id enc_xt = enc.forward(tape, x_tilde, ts);
  out.mu_x = tape.rows(enc_x, 0, d);
  out.log_std_x = tape.rows(enc_x, d, d);
  out.mu_xt = tape.rows(enc_xt, 0, d);
  out.log_std_xt = tape.rows(enc_xt, d, d);
  out.log_q_target = ivn.log_probs(tape, out.mu_x, out.mu_xt);

  // Target selection reads posterior values off the tape; the gradient path
  // into (alpha, beta, gamma) is carried by the log q(I) and entropy terms.
  out.targets.resize(batch);
  out.target_mask.setZero(d, batch);
  const Mat& lq = tape.val(out.log_q_target);
  for (int b = 0; b < batch; ++b) {
    int k;
    if (sample_target) {
      const VectorXd probs = lq.col(b).array().exp();
      k = rng.categorical(probs);
    } else {
      Eigen::Index am;
      lq.col(b).maxCoeff(&am);
      k = static_cast<int>(am);
    }
    out.targets[b] = k;
    out.target_mask(k, b) = 1.0;
  }
  Mat off_mask = Mat::Ones(d, batch) - out.target_mask;

  // Reparameterized draws.
  const Tape::Id eta_shared = tape.input(rng.normal_mat(d, batch));
  const Tape::Id eta_x = tape.input(rng.normal_mat(d, batch));
  const Tape::Id eta_xt = tape.input(rng.normal_mat(d, batch));

  const Tape::Id var_x = tape.vexp(tape.scale(out.log_std_x, 2.0));
  const Tape::Id var_xt = tape.vexp(tape.scale(out.log_std_xt, 2.0));
  const Tape::Id ones = tape.input(Mat::Ones(d, batch));
  const Tape::Id prec = tape.add(tape.div(ones, var_x), tape.div(ones, var_xt));
  const Tape::Id var_f = tape.div(ones, prec);
  const Tape::Id mu_f =
      tape.mul(var_f, tape.add(tape.div(out.mu_x, var_x),
                               tape.div(out.mu_xt, var_xt)));
  const Tape::Id shared = tape.add(mu_f, tape.mul(tape.vsqrt(var_f), eta_shared));
  const Tape::Id own_x =
      tape.add(out.mu_x, tape.mul(tape.vexp(out.log_std_x), eta_x));
  const Tape::Id own_xt =
      tape.add(out.mu_xt, tape.mul(tape.vexp(out.log_std_xt), eta_xt));

  const Tape::Id shared_masked = tape.mul_const(shared, off_mask);
  out.e = tape.add(shared_masked, tape.mul_const(own_x, out.target_mask));
  out.e_tilde = tape.add(shared_masked, tape.mul_const(own_xt, out.target_mask));

  // log q(e, e_tilde | x, x_tilde, I): one fused Gaussian per off-target
  // coordinate plus the two independent target coordinates. Evaluated in
  // the entropy form (residual/std is the injected noise), whose total
  // derivative equals that of the explicit density at the sample.
  const Tape::Id log_var_f = tape.vlog(var_f);
  const Tape::Id lq_off =
      tape.offset(tape.scale(tape.add(log_var_f, tape.vsquare(eta_shared)), -0.5),
                  -kHalfLog2Pi);
  const Tape::Id lq_tar_x =
      tape.offset(tape.add(tape.scale(tape.vsquare(eta_x), -0.5),
                           tape.neg(out.log_std_x)),
                  -kHalfLog2Pi);
  const Tape::Id lq_tar_xt =
      tape.offset(tape.add(tape.scale(tape.vsquare(eta_xt), -0.5),
                           tape.neg(out.log_std_xt)),
                  -kHalfLog2Pi);
  out.log_q_pair = tape.add(
      tape.colsum(tape.mul_const(lq_off, off_mask)),
      tape.colsum(tape.mul_const(tape.add(lq_tar_x, lq_tar_xt),
                                 out.target_mask)));
  return out;
}

EncodedPair sample_encoded_pair(const StochasticEncoder& enc,
                                const InterventionModule& ivn,
                                const VectorXd& x, const VectorXd& x_tilde,
                                Rng& rng, std::optional<double> t,
                                bool sample_target) {
  Tape tape;
  VectorXd ts(1);
  ts[0] = t.value_or(0.0);
  const VectorXd* tp = (t.has_value() || enc.config().time_dependent) ? &ts : nullptr;
  const EncodedPairNodes nodes = build_encoded_pair_batch(
      tape, enc, ivn, x, x_tilde, tp, rng, sample_target);
  EncodedPair out;
  out.post_x.mu = tape.val(nodes.mu_x).col(0);
  out.post_x.log_std = tape.val(nodes.log_std_x).col(0);
  out.post_xt.mu = tape.val(nodes.mu_xt).col(0);
  out.post_xt.log_std = tape.val(nodes.log_std_xt).col(0);
  out.q_target.log_probs = tape.val(nodes.log_q_target).col(0);
  out.e = tape.val(nodes.e).col(0);
  out.e_tilde = tape.val(nodes.e_tilde).col(0);
  out.target_sample = nodes.targets[0];
  return out;
}

}  // namespace dcrl::encoder
