#include <doctest.h>

#include <cmath>

#include "dcrl/encoder.hpp"
#include "dcrl/scmgen.hpp"

using namespace dcrl;
using namespace dcrl::encoder;
using dcrl::nn::Mat;
using dcrl::nn::Tape;

namespace {

StochasticEncoder make_encoder(nn::ParamStore& store, int d, Rng& rng,
                               bool time_dependent = false) {
  EncoderConfig cfg;
  cfg.d = d;
  cfg.time_dependent = time_dependent;
  return StochasticEncoder(cfg, store, "enc.", rng);
}

}  // namespace

TEST_CASE("encode is deterministic and zero weights give the bias") {
  Rng rng(1);
  nn::ParamStore store;
  const StochasticEncoder enc = make_encoder(store, 4, rng);
  const Eigen::VectorXd x = rng.normal_vec(16);
  const GaussianPosterior a = enc.encode(x);
  const GaussianPosterior b = enc.encode(x);
  CHECK(a.mu == b.mu);
  CHECK(a.log_std == b.log_std);

  // The head starts at zero, so mu and log_std equal the head bias.
  nn::Param* head_b = store.find("enc.head.b");
  REQUIRE(head_b != nullptr);
  for (int i = 0; i < 8; ++i) head_b->value(i, 0) = 0.25 * (i + 1);
  const GaussianPosterior c = enc.encode(x);
  for (int i = 0; i < 4; ++i) {
    CHECK(c.mu[i] == doctest::Approx(0.25 * (i + 1)));
    CHECK(c.log_std[i] == doctest::Approx(0.25 * (i + 5)));
  }

  Eigen::VectorXd bad = x;
  bad[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(enc.encode(bad), std::invalid_argument);
}

TEST_CASE("encoder input gradient matches finite differences") {
  Rng rng(2);
  nn::ParamStore store;
  const StochasticEncoder enc = make_encoder(store, 3, rng);
  // Non-zero head so mu depends on x.
  nn::Param* head_w = store.find("enc.head.w");
  for (int j = 0; j < head_w->value.cols(); ++j)
    for (int i = 0; i < head_w->value.rows(); ++i)
      head_w->value(i, j) = 0.02 * rng.normal();

  const Eigen::VectorXd x = rng.normal_vec(16);
  const Eigen::VectorXd w = rng.normal_vec(3);  // weighting over mu rows

  Mat wm = Mat::Zero(6, 1);
  for (int i = 0; i < 3; ++i) wm(i, 0) = w[i];
  auto weighted_mu = [&](const Eigen::VectorXd& xv) {
    Tape t;
    const Tape::Id out = enc.forward(t, Mat(xv), nullptr);
    return t.scalar(t.sum(t.mul_const(out, wm)));
  };

  Tape t2;
  const Tape::Id x2 = t2.input_grad(x);
  const Tape::Id out = enc.forward(t2, x2, nullptr);
  t2.backward(t2.sum(t2.mul_const(out, wm)));
  const Mat g = t2.grad_of(x2);

  const double step = 1e-5;
  for (int i = 0; i < 16; ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += step;
    xm[i] -= step;
    const double fd = (weighted_mu(xp) - weighted_mu(xm)) / (2 * step);
    CHECK(std::abs(fd - g(i, 0)) /
              std::max({std::abs(fd), std::abs(g(i, 0)), 1e-8}) <
          1e-3);
  }
}

TEST_CASE("intervention logits: hand softmax, symmetry, and invariances") {
  Eigen::VectorXd mu_x(2), mu_xt(2);
  mu_x << 0.0, 0.0;
  mu_xt << 0.0, -1.0;  // |delta| = (0, 1)
  const InterventionPosterior p = intervention_logits(mu_x, mu_xt, 0, 1, 0);
  CHECK(p.probs()[0] == doctest::Approx(0.2689414213699951).epsilon(1e-10));
  CHECK(p.probs()[1] == doctest::Approx(0.7310585786300049).epsilon(1e-10));
  CHECK(p.probs().sum() == doctest::Approx(1.0).epsilon(1e-9));

  // Zero delta: uniform. beta = gamma = 0: uniform regardless of delta.
  Eigen::VectorXd z4 = Eigen::VectorXd::Zero(4);
  const InterventionPosterior u = intervention_logits(z4, z4, 0.7, 1.3, 2.0);
  for (int i = 0; i < 4; ++i) CHECK(u.probs()[i] == doctest::Approx(0.25));
  Rng rng(5);
  const Eigen::VectorXd r1 = rng.normal_vec(4), r2 = rng.normal_vec(4);
  const InterventionPosterior c = intervention_logits(r1, r2, 0.7, 0.0, 0.0);
  for (int i = 0; i < 4; ++i) CHECK(c.probs()[i] == doctest::Approx(0.25));

  // Swapping x and x_tilde leaves the posterior unchanged.
  const InterventionPosterior f = intervention_logits(r1, r2, 0.1, 1.0, 0.5);
  const InterventionPosterior g = intervention_logits(r2, r1, 0.1, 1.0, 0.5);
  CHECK(f.log_probs.isApprox(g.log_probs));

  // Permutation equivariance.
  Eigen::VectorXd p1(3), p2(3);
  p1 << 0.3, -0.8, 0.1;
  p2 << -0.2, 0.5, 0.4;
  const InterventionPosterior base = intervention_logits(p1, p2, 0, 1, 1);
  Eigen::VectorXd q1(3), q2(3);
  const std::vector<int> perm = {2, 0, 1};
  for (int i = 0; i < 3; ++i) {
    q1[i] = p1[perm[i]];
    q2[i] = p2[perm[i]];
  }
  const InterventionPosterior permuted = intervention_logits(q1, q2, 0, 1, 1);
  for (int i = 0; i < 3; ++i)
    CHECK(permuted.log_probs[i] == doctest::Approx(base.log_probs[perm[i]]));

  // Alpha shifts all scores equally: argmax unchanged.
  const InterventionPosterior a0 = intervention_logits(p1, p2, 0.0, 1.0, 0.5);
  const InterventionPosterior a9 = intervention_logits(p1, p2, 9.0, 1.0, 0.5);
  CHECK(a0.argmax() == a9.argmax());
  CHECK(a0.log_probs.isApprox(a9.log_probs, 1e-9));

  CHECK_THROWS_AS(intervention_logits(Eigen::VectorXd(0), Eigen::VectorXd(0),
                                      0, 1, 0),
                  std::invalid_argument);
}

TEST_CASE("project_pair: fusion formulas and bit-exact sharing") {
  const int d = 5;
  GaussianPosterior pa, pb;
  Rng rng(9);
  pa.mu = rng.normal_vec(d);
  pa.log_std = 0.3 * rng.normal_vec(d);
  pb.mu = rng.normal_vec(d);
  pb.log_std = 0.3 * rng.normal_vec(d);

  // Off-target coordinates are the same double in both outputs.
  for (int target = 0; target < d; ++target) {
    const ProjectedPair pp = project_pair(pa, pb, target, rng);
    for (int i = 0; i < d; ++i)
      if (i != target) CHECK(pp.e[i] == pp.e_tilde[i]);
  }

  // Replay the rng stream: shared = mu_f + sqrt(var_f) * eta with the
  // precision-weighted fusion of the two coordinate Gaussians.
  Rng draw(123), replay(123);
  const ProjectedPair pp = project_pair(pa, pb, 2, draw);
  const Eigen::VectorXd eta_shared = replay.normal_vec(d);
  for (int i = 0; i < d; ++i) {
    if (i == 2) continue;
    const double s1 = std::exp(pa.log_std[i]), s2 = std::exp(pb.log_std[i]);
    const double var = 1.0 / (1.0 / (s1 * s1) + 1.0 / (s2 * s2));
    const double mu = var * (pa.mu[i] / (s1 * s1) + pb.mu[i] / (s2 * s2));
    CHECK(pp.e[i] == doctest::Approx(mu + std::sqrt(var) * eta_shared[i])
                         .epsilon(1e-12));
  }

  // Equal variances: shared mean is the midpoint.
  GaussianPosterior qa, qb;
  qa.mu = Eigen::VectorXd::Constant(2, 1.0);
  qb.mu = Eigen::VectorXd::Constant(2, 3.0);
  qa.log_std = Eigen::VectorXd::Zero(2);
  qb.log_std = Eigen::VectorXd::Zero(2);
  Rng rd(7), rr(7);
  const ProjectedPair mid = project_pair(qa, qb, 1, rd);
  const Eigen::VectorXd eta = rr.normal_vec(2);
  CHECK(mid.e[0] ==
        doctest::Approx(2.0 + std::sqrt(0.5) * eta[0]).epsilon(1e-12));

  // Identical posteriors: still bit-exact off target by construction.
  Rng ri(11);
  const ProjectedPair same = project_pair(pa, pa, 0, ri);
  for (int i = 1; i < d; ++i) CHECK(same.e[i] == same.e_tilde[i]);

  CHECK_THROWS_AS(project_pair(pa, pb, d, rng), std::invalid_argument);
}

TEST_CASE("sample_encoded_pair: argmax evaluation and determinism") {
  Rng rng(13);
  nn::ParamStore store;
  const StochasticEncoder enc = make_encoder(store, 3, rng);
  const InterventionModule ivn(store, "ivn.");
  // Give the encoder a nontrivial head.
  nn::Param* head = store.find("enc.head.w");
  for (int j = 0; j < head->value.cols(); ++j)
    for (int i = 0; i < head->value.rows(); ++i)
      head->value(i, j) = 0.05 * rng.normal();

  const Eigen::VectorXd x = rng.normal_vec(16);
  const Eigen::VectorXd xt = rng.normal_vec(16);
  Rng s1(42), s2(42);
  const EncodedPair a = sample_encoded_pair(enc, ivn, x, xt, s1);
  const EncodedPair b = sample_encoded_pair(enc, ivn, x, xt, s2);
  CHECK(a.e == b.e);
  CHECK(a.e_tilde == b.e_tilde);
  CHECK(a.target_sample == b.target_sample);
  CHECK(a.target_sample == a.q_target.argmax());
  CHECK(a.q_target.probs().sum() == doctest::Approx(1.0).epsilon(1e-6));
  for (int i = 0; i < 3; ++i)
    if (i != a.target_sample) CHECK(a.e[i] == a.e_tilde[i]);
}

TEST_CASE("batched pair builder keeps the weak-supervision invariant for all draws") {
  Rng rng(17);
  nn::ParamStore store;
  const StochasticEncoder enc = make_encoder(store, 4, rng);
  const InterventionModule ivn(store, "ivn.");
  for (auto* p : store.all())
    if (p->value.cwiseAbs().sum() == 0.0)
      for (int j = 0; j < p->value.cols(); ++j)
        for (int i = 0; i < p->value.rows(); ++i)
          p->value(i, j) = 0.1 * rng.normal();

  const int batch = 64;
  for (int rep = 0; rep < 20; ++rep) {
    const Mat x = rng.normal_mat(16, batch);
    const Mat xt = rng.normal_mat(16, batch);
    Tape tape;
    const EncodedPairNodes nodes = build_encoded_pair_batch(
        tape, enc, ivn, x, xt, nullptr, rng, /*sample_target=*/true);
    const Mat& e = tape.val(nodes.e);
    const Mat& et = tape.val(nodes.e_tilde);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < 4; ++i)
        if (i != nodes.targets[b]) CHECK(e(i, b) == et(i, b));
  }
}

TEST_CASE("oracle noise-inverting encoder recovers every intervention target") {
  // The composed map noise -> observation is P (I - W^T)^{-1}; its
  // pseudo-inverse recovers noise encodings whose off-target coordinates
  // coincide, so the heuristic argmax must hit the target for any beta > 0.
  const scmgen::PairDataset ds = scmgen::build_dataset(5, 0.5, 1000, 1, 1, 3);
  const Eigen::MatrixXd solve =
      (Eigen::MatrixXd::Identity(5, 5) - ds.scm.weights.transpose()).inverse();
  const Eigen::MatrixXd fwd = ds.projection * solve;
  const Eigen::MatrixXd pinv =
      (fwd.transpose() * fwd).ldlt().solve(Eigen::MatrixXd(fwd.transpose()));

  const std::vector<std::pair<double, double>> beta_gamma = {
      {1.0, 0.0}, {0.5, 2.0}, {3.0, 1.0}};
  for (const auto& [beta, gamma] : beta_gamma) {
    int hits = 0;
    for (int c = 0; c < 1000; ++c) {
      const Eigen::VectorXd e = pinv * ds.x.col(c);
      const Eigen::VectorXd et = pinv * ds.x_tilde.col(c);
      const InterventionPosterior q =
          intervention_logits(e, et, 0.3, beta, gamma);
      if (q.argmax() == ds.targets[c]) ++hits;
    }
    CHECK(hits == 1000);
  }
}
