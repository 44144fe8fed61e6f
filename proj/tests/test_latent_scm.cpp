#include <doctest.h>

#include <cmath>

#include "dcrl/latent_scm.hpp"

using namespace dcrl;
using namespace dcrl::latent_scm;
using dcrl::nn::Mat;
using dcrl::nn::Tape;

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;

SolutionFlow make_flow(nn::ParamStore& store, int d, Rng& rng) {
  FlowConfig cfg;
  cfg.d = d;
  return SolutionFlow(cfg, store, "flow.", rng);
}

void set_component_head(nn::ParamStore& store, int i, double m, double l) {
  nn::Param* b2 = store.find("flow.c" + std::to_string(i) + ".b2");
  REQUIRE(b2 != nullptr);
  b2->value(0, 0) = m;
  b2->value(1, 0) = l;
}

}  // namespace

TEST_CASE("flow log density: hand values at controlled conditioner outputs") {
  Rng rng(1);
  nn::ParamStore store;
  const SolutionFlow flow = make_flow(store, 3, rng);
  const Eigen::VectorXd e = Eigen::VectorXd::Zero(3);

  // Identity flow (zero-initialized heads): standard normal at 0.
  CHECK(flow.flow_log_density(0, 0.0, e) ==
        doctest::Approx(-kHalfLog2Pi).epsilon(1e-12));

  // m = 1, l = ln 2, value 1: h = 0, density -0.5 ln(2 pi) - ln 2.
  set_component_head(store, 1, 1.0, std::log(2.0));
  CHECK(flow.flow_log_density(1, 1.0, e) ==
        doctest::Approx(-1.612085713764618).epsilon(1e-12));

  CHECK_THROWS_AS(flow.flow_log_density(5, 0.0, e), std::invalid_argument);
}

TEST_CASE("flow densities integrate to one (quadrature oracle)") {
  Rng rng(2);
  nn::ParamStore store;
  const SolutionFlow flow = make_flow(store, 4, rng);
  // Random moderate conditioners so (m, l) genuinely depend on the context
  // (kept small enough that the density stays resolvable by the grid).
  for (auto* p : store.all())
    for (int j = 0; j < p->value.cols(); ++j)
      for (int i = 0; i < p->value.rows(); ++i)
        p->value(i, j) += 0.02 * rng.normal();
  const Eigen::VectorXd e = rng.normal_vec(4);

  for (int i = 0; i < 4; ++i) {
    // Simpson's rule over [-50, 50].
    const int n = 20000;
    const double a = -50.0, b = 50.0, h = (b - a) / n;
    double acc = 0.0;
    for (int k = 0; k <= n; ++k) {
      const double v = a + k * h;
      const double f = std::exp(flow.flow_log_density(i, v, e));
      const double wgt = (k == 0 || k == n) ? 1.0 : (k % 2 == 1 ? 4.0 : 2.0);
      acc += wgt * f;
    }
    acc *= h / 3.0;
    CHECK(std::abs(acc - 1.0) < 1e-4);
  }
}

TEST_CASE("prior log density: closed forms and contract enforcement") {
  Rng rng(3);
  nn::ParamStore store;
  const SolutionFlow flow2 = make_flow(store, 2, rng);

  // d = 2, e = e_tilde = 0, identity flow:
  // ln(1/2) + 2 standard-normal terms + one more at the target.
  const Eigen::VectorXd z2 = Eigen::VectorXd::Zero(2);
  CHECK(prior_log_density(z2, z2, 0, flow2) ==
        doctest::Approx(-3.4499627801739634).epsilon(1e-12));

  // log p(e) at 0 for d = 5.
  CHECK(standard_normal_log_density(Eigen::VectorXd::Zero(5)) ==
        doctest::Approx(-4.594692666023363).epsilon(1e-12));

  // The uniform-target term is -ln d for every target.
  nn::ParamStore store3;
  const SolutionFlow flow3 = make_flow(store3, 3, rng);
  const Eigen::VectorXd z3 = Eigen::VectorXd::Zero(3);
  for (int target = 0; target < 3; ++target) {
    const double v = prior_log_density(z3, z3, target, flow3);
    CHECK(v == doctest::Approx(-std::log(3.0) + 3 * -kHalfLog2Pi +
                               -kHalfLog2Pi));
  }

  // Off-target mismatch violates the projection contract.
  Eigen::VectorXd bad = z2;
  bad[1] = 1e-6;
  CHECK_THROWS_AS(prior_log_density(z2, bad, 0, flow2), std::logic_error);
  // Target coordinate may differ freely.
  Eigen::VectorXd ok = z2;
  ok[0] = 2.0;
  CHECK_NOTHROW(prior_log_density(z2, ok, 0, flow2));
}

TEST_CASE("causal-variable extraction: identity, shift, and inversion") {
  Rng rng(4);
  nn::ParamStore store;
  const SolutionFlow flow = make_flow(store, 3, rng);
  const Eigen::VectorXd e = rng.normal_vec(3);

  // Identity flow at initialization.
  CHECK(flow.extract_causal_variables(e).isApprox(e));

  // Constant shift c with unit scale: z = e - c.
  for (int i = 0; i < 3; ++i) set_component_head(store, i, 0.7, 0.0);
  CHECK(flow.extract_causal_variables(e).isApprox(
      (e.array() - 0.7).matrix()));

  // Random conditioners: coordinate-wise inversion with contexts held at e.
  Rng jitter(5);
  for (auto* p : store.all())
    for (int j = 0; j < p->value.cols(); ++j)
      for (int i = 0; i < p->value.rows(); ++i)
        p->value(i, j) += 0.3 * jitter.normal();
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::VectorXd er = rng.normal_vec(3);
    const Eigen::VectorXd z = flow.extract_causal_variables(er);
    for (int i = 0; i < 3; ++i) {
      const auto [m, l] = flow.shift_log_scale(i, er);
      const double recovered = z[i] * std::exp(l) + m;
      CHECK(recovered == doctest::Approx(er[i]).epsilon(1e-10));
    }
  }

  // Batch extraction agrees with the per-vector path.
  Mat batch = rng.normal_mat(3, 7);
  const Mat zb = flow.extract_batch(batch);
  for (int c = 0; c < 7; ++c)
    CHECK(zb.col(c).isApprox(flow.extract_causal_variables(batch.col(c))));
}

TEST_CASE("extraction gradient w.r.t. e matches finite differences") {
  Rng rng(6);
  nn::ParamStore store;
  const SolutionFlow flow = make_flow(store, 3, rng);
  Rng jitter(7);
  for (auto* p : store.all())
    for (int j = 0; j < p->value.cols(); ++j)
      for (int i = 0; i < p->value.rows(); ++i)
        p->value(i, j) += 0.2 * jitter.normal();

  const Eigen::VectorXd e = rng.normal_vec(3);
  const Eigen::VectorXd w = rng.normal_vec(3);

  auto weighted_z = [&](const Eigen::VectorXd& ev) {
    return w.dot(flow.extract_causal_variables(ev));
  };

  // Tape route mirroring the training-loss construction.
  Tape t;
  const Tape::Id eid = t.input_grad(e);
  Tape::Id acc = -1;
  for (int i = 0; i < 3; ++i) {
    const Tape::Id ctx = t.drop_row(eid, i);
    const Tape::Id cond = flow.conditioner(t, i, ctx);
    const Tape::Id z_i =
        t.mul(t.sub(t.row(eid, i), t.row(cond, 0)),
              t.vexp(t.neg(t.row(cond, 1))));
    const Tape::Id term = t.scale(z_i, w[i]);
    acc = i == 0 ? term : t.add(acc, term);
  }
  t.backward(t.sum(acc));
  const Mat g = t.grad_of(eid);

  const double h = 1e-6;
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd ep = e, em = e;
    ep[i] += h;
    em[i] -= h;
    const double fd = (weighted_z(ep) - weighted_z(em)) / (2 * h);
    CHECK(std::abs(fd - g(i, 0)) /
              std::max({std::abs(fd), std::abs(g(i, 0)), 1e-8}) <
          1e-3);
  }
}

TEST_CASE("uniform density stub") {
  CHECK(uniform_density_stub(10.0) ==
        doctest::Approx(-2.995732273553991).epsilon(1e-12));
  CHECK(uniform_density_stub(0.5) == doctest::Approx(0.0));
  CHECK_THROWS_AS(uniform_density_stub(0.0), std::invalid_argument);
}
