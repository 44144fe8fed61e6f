#include <doctest.h>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

#include "dcrl/latent_scm.hpp"
#include "dcrl/serialize.hpp"
#include "dcrl/trainer.hpp"
#include "test_util.hpp"

using namespace dcrl;
using namespace dcrl::trainer;
using dcrl::nn::Mat;

namespace {

TrainConfig small_config(int d, bool time_dependent = false) {
  TrainConfig cfg;
  cfg.d = d;
  cfg.time_dependent = time_dependent;
  cfg.score_width = 32;
  cfg.score_blocks = 1;
  cfg.grid_channels = 2;
  cfg.enc_hidden = 32;
  cfg.flow_hidden = 16;
  cfg.batch = 32;
  return cfg;
}

void jitter_params(Model& model, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (auto* p : model.store.all())
    for (int j = 0; j < p->value.cols(); ++j)
      for (int i = 0; i < p->value.rows(); ++i)
        p->value(i, j) += scale * rng.normal();
}

}  // namespace

TEST_CASE("beta schedule follows the three training phases") {
  TrainConfig cfg;
  cfg.phase_epochs = {20, 50, 50};
  for (int e = 0; e < 20; ++e) CHECK(beta_schedule(1, e, cfg) == 0.0);
  for (int e = 0; e < 50; ++e) CHECK(beta_schedule(2, e, cfg) == 1.0);
  CHECK(beta_schedule(3, 0, cfg) == 0.0);
  CHECK(beta_schedule(3, 49, cfg) == 1.0);
  // Midpoint of the linear ramp.
  TrainConfig odd = cfg;
  odd.phase_epochs = {1, 1, 11};
  CHECK(beta_schedule(3, 5, odd) == doctest::Approx(0.5));
  CHECK_THROWS_AS(beta_schedule(4, 0, cfg), std::invalid_argument);
  CHECK_THROWS_AS(beta_schedule(3, 50, cfg), std::invalid_argument);
}

TEST_CASE("entropy regularizer extremes and aggregation") {
  const int d = 5;
  std::vector<encoder::InterventionPosterior> uniform(8);
  for (auto& q : uniform)
    q.log_probs = Eigen::VectorXd::Constant(d, -std::log(double(d)));
  CHECK(entropy_regularizer(uniform) ==
        doctest::Approx(-std::log(5.0)).epsilon(1e-12));

  // Point masses on one target: maximum value 0.
  std::vector<encoder::InterventionPosterior> collapsed(4);
  for (auto& q : collapsed) {
    q.log_probs = Eigen::VectorXd::Constant(d, -1e9);
    q.log_probs[2] = 0.0;
  }
  CHECK(entropy_regularizer(collapsed) == doctest::Approx(0.0).epsilon(1e-9));

  // Two point masses on targets 0 and 1: -ln 2.
  std::vector<encoder::InterventionPosterior> two(2);
  for (int k = 0; k < 2; ++k) {
    two[k].log_probs = Eigen::VectorXd::Constant(d, -1e9);
    two[k].log_probs[k] = 0.0;
  }
  CHECK(entropy_regularizer(two) ==
        doctest::Approx(-std::log(2.0)).epsilon(1e-9));

  // Literal sign flips the value; label permutation leaves it unchanged.
  CHECK(entropy_regularizer(two, true) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));
  std::vector<encoder::InterventionPosterior> permuted(2);
  for (int k = 0; k < 2; ++k) {
    permuted[k].log_probs = Eigen::VectorXd::Constant(d, -1e9);
    permuted[k].log_probs[4 - k] = 0.0;
  }
  CHECK(entropy_regularizer(permuted) ==
        doctest::Approx(entropy_regularizer(two)).epsilon(1e-9));

  CHECK_THROWS_AS(entropy_regularizer({}), std::invalid_argument);
}

TEST_CASE("beta = 0 leaves exactly the two score-matching terms") {
  Model model = Model::init(small_config(3));
  jitter_params(model, 0.05, 77);
  Rng data_rng(1);
  const Mat x = data_rng.normal_mat(16, 8);
  const Mat xt = data_rng.normal_mat(16, 8);

  Rng r(9);
  LossOptions opt;
  opt.beta = 0.0;
  opt.entropy_coeff = 0.0;
  const LossBreakdown lb = model_loss(model, x, xt, opt, r);
  CHECK(lb.total == lb.diff_x + lb.diff_xt);
  CHECK(lb.prior == 0.0);
  CHECK(lb.posterior == 0.0);
}

TEST_CASE("latent block equals independently recomputed ELBO terms") {
  Model model = Model::init(small_config(3));
  jitter_params(model, 0.05, 78);
  Rng data_rng(2);
  const int batch = 6;
  const Mat x = data_rng.normal_mat(16, batch);
  const Mat xt = data_rng.normal_mat(16, batch);

  LossOptions opt;
  opt.entropy_coeff = 0.0;
  opt.flow_mode = FlowMode::kFlow;
  opt.sample_target = true;

  Rng r0(31), r1(31), replay(31);
  opt.beta = 0.0;
  const LossBreakdown lb0 = model_loss(model, x, xt, opt, r0);
  opt.beta = 1.0;
  const LossBreakdown lb1 = model_loss(model, x, xt, opt, r1);

  // Replay the same stream: times first, then the encoded-pair draws.
  Eigen::VectorXd ts(batch);
  for (int b = 0; b < batch; ++b)
    ts[b] = opt.t_floor + (1.0 - opt.t_floor) * replay.uniform();
  nn::Tape tape;
  const encoder::EncodedPairNodes pair = encoder::build_encoded_pair_batch(
      tape, *model.enc, *model.ivn, x, xt, nullptr, replay, true);

  double latent = 0.0;
  for (int b = 0; b < batch; ++b) {
    const Eigen::VectorXd e = tape.val(pair.e).col(b);
    const Eigen::VectorXd et = tape.val(pair.e_tilde).col(b);
    const int k = pair.targets[b];
    const double prior = latent_scm::prior_log_density(e, et, k, *model.flow);
    const double log_q_i = tape.val(pair.log_q_target)(k, b);
    const double log_q_pair = tape.val(pair.log_q_pair)(0, b);
    latent += prior - log_q_i - log_q_pair;
  }
  latent /= batch;

  CHECK(lb1.total - lb0.total == doctest::Approx(-latent).epsilon(1e-9));
  CHECK(lb1.prior - lb1.posterior == doctest::Approx(latent).epsilon(1e-9));
  CHECK(std::isfinite(lb1.total));
}

TEST_CASE("infinite-dimensional loss reduces to the single-point loss") {
  Model model = Model::init(small_config(4, /*time_dependent=*/false));
  jitter_params(model, 0.05, 79);
  Rng data_rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    const Mat x = data_rng.normal_mat(16, 8);
    const Mat xt = data_rng.normal_mat(16, 8);
    Rng ra(100 + rep), rb(100 + rep);
    const LossBreakdown a = model_loss_single(model, x, xt, 0.7, ra);
    const LossBreakdown b = model_loss_infinite(model, x, xt, 0.7, rb);
    CHECK(a.total == b.total);  // bitwise under a shared stream
    CHECK(a.diff_x == b.diff_x);
    CHECK(a.prior == b.prior);
    CHECK(a.posterior == b.posterior);
  }

  // A time-dependent encoder is rejected by the single-point loss.
  Model td = Model::init(small_config(4, true));
  const Mat x = data_rng.normal_mat(16, 4);
  Rng r(5);
  CHECK_THROWS_AS(model_loss_single(td, x, x, 0.5, r), std::invalid_argument);
  // ... and accepted by the trajectory loss.
  Rng r2(5);
  CHECK_NOTHROW(model_loss_infinite(td, x, x, 0.5, r2));
}

TEST_CASE("loss decreases over 300 steps on a d=2 toy dataset") {
  const scmgen::PairDataset ds = scmgen::build_dataset(2, 0.5, 256, 8, 8, 21);
  Model model = Model::init(small_config(2));
  nn::Adam opt({.lr = 3e-4});
  Rng rng(22);
  LossOptions lo;
  lo.beta = 1.0;
  lo.entropy_coeff = 1.0;
  lo.flow_mode = FlowMode::kFlow;
  auto params = model.store.all();
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 300; ++step) {
    Mat x(16, 32), xt(16, 32);
    for (int k = 0; k < 32; ++k) {
      const int idx = rng.uniform_int(256);
      x.col(k) = ds.x.col(idx);
      xt.col(k) = ds.x_tilde.col(idx);
    }
    model.store.zero_grads();
    const LossBreakdown lb = model_loss(model, x, xt, lo, rng);
    opt.step(params);
    if (step == 0) first = lb.total;
    last = lb.total;
  }
  CHECK(last < first);
}

TEST_CASE("non-finite parameters abort with a diagnostic") {
  Model model = Model::init(small_config(2));
  model.store.all()[0]->value(0, 0) =
      std::numeric_limits<double>::quiet_NaN();
  Rng rng(1);
  const Mat x = rng.normal_mat(16, 4);
  LossOptions opt;
  Rng r(2);
  CHECK_THROWS_AS(model_loss(model, x, x, opt, r), TrainingDiverged);
}

TEST_CASE("checkpoint round trip is bitwise and guards integrity") {
  const std::string dir = test_dir();
  const std::string path = dir + "/ckpt_test.bin";
  Model model = Model::init(small_config(3));
  jitter_params(model, 0.1, 80);
  Rng train_rng(7);
  train_rng.normal();  // advance the stream
  save_checkpoint(model, train_rng, 2, 5, path);

  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.phase == 2);
  CHECK(ck.epoch == 5);
  CHECK(ck.rng_state == train_rng.serialize_state());
  auto a = model.store.all();
  auto b = ck.model.store.all();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value == b[i]->value);
  }

  // Tampering trips the checksum.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(100);
    char c;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x01);
    f.seekp(100);
    f.write(&c, 1);
  }
  CHECK_THROWS_AS(load_checkpoint(path), io::ChecksumError);

  // Loading into a mismatched model names the offending tensor.
  save_checkpoint(model, train_rng, 2, 5, path);
  Model other = Model::init(small_config(2));
  try {
    load_checkpoint_into(other, path);
    FAIL("expected a shape error");
  } catch (const io::IoError& e) {
    CHECK(std::string(e.what()).find("score.") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("training writes logs and checkpoints; resume replays the stream") {
  const std::string base = test_dir() + "/train_resume";
  std::filesystem::remove_all(base);
  const scmgen::PairDataset ds = scmgen::build_dataset(2, 0.5, 128, 8, 8, 33);
  TrainConfig cfg = small_config(2);
  cfg.batch = 32;
  cfg.phase_epochs = {1, 2, 2};
  cfg.seed = 4;

  const TrainResult full = train(ds, cfg, base + "/full");
  CHECK(std::filesystem::exists(full.checkpoint_path));
  CHECK(full.epochs_run == 5);

  // Epoch records carry the component breakdown.
  std::vector<nlohmann::json> full_log;
  {
    std::ifstream in(full.log_path);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) full_log.push_back(nlohmann::json::parse(line));
  }
  REQUIRE(full_log.size() == 5);
  for (const auto& rec : full_log) {
    CHECK(rec.contains("diffusion_x"));
    CHECK(rec.contains("diffusion_xt"));
    CHECK(rec.contains("prior"));
    CHECK(rec.contains("posterior"));
    CHECK(rec.contains("entropy"));
    CHECK(rec.contains("seconds"));
  }

  // Stop mid phase 2, then resume: the remaining epochs must reproduce
  // the uninterrupted run's losses exactly.
  const TrainResult part =
      train(ds, cfg, base + "/part", "", /*stop_after_epochs=*/2);
  CHECK(part.epochs_run == 2);
  const TrainResult rest =
      train(ds, cfg, base + "/part", part.checkpoint_path);
  CHECK(rest.epochs_run == 3);

  std::vector<nlohmann::json> part_log;
  {
    std::ifstream in(rest.log_path);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) part_log.push_back(nlohmann::json::parse(line));
  }
  REQUIRE(part_log.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(part_log[i]["loss"].get<double>() ==
          full_log[i]["loss"].get<double>());
    CHECK(part_log[i]["phase"] == full_log[i]["phase"]);
    CHECK(part_log[i]["epoch"] == full_log[i]["epoch"]);
  }
  std::filesystem::remove_all(base);
}

TEST_CASE("config hash is canonical and shape-sensitive") {
  TrainConfig a;
  TrainConfig b;
  CHECK(a.hash() == b.hash());
  b.lr = 1e-3;
  CHECK(a.hash() != b.hash());
  const TrainConfig c = TrainConfig::from_json_string(a.to_json_string());
  CHECK(c.hash() == a.hash());
}

TEST_CASE("all loss components are finite at random init for d in {2,5,10}") {
  for (int d : {2, 5, 10}) {
    TrainConfig cfg = small_config(d);
    Model model = Model::init(cfg);
    jitter_params(model, 0.05, 900 + d);
    Rng data_rng(40 + d);
    const Mat x = data_rng.normal_mat(16, 16);
    const Mat xt = data_rng.normal_mat(16, 16);
    LossOptions opt;
    opt.beta = 1.0;
    opt.entropy_coeff = 1.0;
    opt.flow_mode = FlowMode::kFlow;
    Rng r(50 + d);
    const LossBreakdown lb = model_loss(model, x, xt, opt, r);
    CHECK(std::isfinite(lb.total));
    CHECK(std::isfinite(lb.diff_x));
    CHECK(std::isfinite(lb.diff_xt));
    CHECK(std::isfinite(lb.prior));
    CHECK(std::isfinite(lb.posterior));
    CHECK(std::isfinite(lb.entropy));
  }
}

TEST_CASE("phase 3 lowers the full objective it optimizes (desk smoke)") {
  const std::string base = test_dir() + "/desk_smoke";
  std::filesystem::remove_all(base);
  const scmgen::PairDataset ds =
      scmgen::build_dataset(5, 0.5, 10000, 500, 500, 2);
  TrainConfig cfg;
  cfg.d = 5;
  cfg.seed = 2;
  cfg.phase_epochs = {5, 10, 10};
  cfg.score_width = 64;
  cfg.score_blocks = 1;

  // Capture the phase-2 boundary, then train to completion.
  const TrainResult mid = train(ds, cfg, base, "", /*stop_after_epochs=*/15);
  Checkpoint at_phase3 = load_checkpoint(mid.checkpoint_path);
  REQUIRE(at_phase3.phase == 3);
  const TrainResult done = train(ds, cfg, base, mid.checkpoint_path);
  CHECK(done.epochs_run == 10);
  Checkpoint final = load_checkpoint(done.checkpoint_path);

  // Full beta = 1 loss (flow density, entropy term) on a held-out batch.
  auto full_loss = [&](Model& m) {
    Mat x(16, 256), xt(16, 256);
    for (int k = 0; k < 256; ++k) {
      const int idx = ds.val_idx[k];
      x.col(k) = ds.x.col(idx);
      xt.col(k) = ds.x_tilde.col(idx);
    }
    LossOptions opt;
    opt.beta = 1.0;
    opt.entropy_coeff = 1.0;
    opt.flow_mode = FlowMode::kFlow;
    opt.backprop = false;
    Rng r(99);
    return model_loss(m, x, xt, opt, r).total;
  };
  const double before = full_loss(at_phase3.model);
  const double after = full_loss(final.model);
  CHECK(after < before);
  std::filesystem::remove_all(base);
}

TEST_CASE("degenerate single-latent configuration trains and evaluates") {
  const scmgen::PairDataset ds = scmgen::build_dataset(1, 0.5, 96, 8, 8, 77);
  CHECK(ds.scm.graph.edge_count() == 0);
  for (int t : ds.targets) CHECK(t == 0);

  TrainConfig cfg = small_config(1);
  cfg.batch = 32;
  cfg.phase_epochs = {1, 1, 1};
  cfg.seed = 77;
  const TrainResult tr = train(ds, cfg, test_dir() + "/d1_smoke");
  CHECK(tr.epochs_run == 3);
  CHECK(std::isfinite(tr.final_epoch.total));
  std::filesystem::remove_all(test_dir() + "/d1_smoke");
}
