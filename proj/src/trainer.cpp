#include "dcrl/trainer.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dcrl/serialize.hpp"

namespace dcrl::trainer {

namespace {

using json = nlohmann::json;
using Tape = nn::Tape;

constexpr double kHalfLog2Pi = 0.5 * 1.8378770664093453;

json config_to_json(const TrainConfig& c) {
  return json{{"d", c.d},
              {"lr", c.lr},
              {"batch", c.batch},
              {"phase_epochs", c.phase_epochs},
              {"time_dependent", c.time_dependent},
              {"lambda_mode", c.lambda_mode},
              {"entropy_literal_sign", c.entropy_literal_sign},
              {"entropy_coeff", c.entropy_coeff},
              {"t_floor", c.t_floor},
              {"phase2_support_bound", c.phase2_support_bound},
              {"seed", c.seed},
              {"save_every", c.save_every},
              {"sigma_min", c.sigma_min},
              {"sigma_max", c.sigma_max},
              {"n_steps", c.n_steps},
              {"score_width", c.score_width},
              {"score_blocks", c.score_blocks},
              {"time_dim", c.time_dim},
              {"grid_stem", c.grid_stem},
              {"grid_channels", c.grid_channels},
              {"enc_hidden", c.enc_hidden},
              {"enc_layers", c.enc_layers},
              {"flow_hidden", c.flow_hidden}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.d = j.at("d").get<int>();
  c.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<int>();
  c.phase_epochs = j.at("phase_epochs").get<std::array<int, 3>>();
  c.time_dependent = j.at("time_dependent").get<bool>();
  c.lambda_mode = j.at("lambda_mode").get<std::string>();
  c.entropy_literal_sign = j.at("entropy_literal_sign").get<bool>();
  c.entropy_coeff = j.at("entropy_coeff").get<double>();
  c.t_floor = j.at("t_floor").get<double>();
  c.phase2_support_bound = j.at("phase2_support_bound").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.save_every = j.at("save_every").get<int>();
  c.sigma_min = j.at("sigma_min").get<double>();
  c.sigma_max = j.at("sigma_max").get<double>();
  c.n_steps = j.at("n_steps").get<int>();
  c.score_width = j.at("score_width").get<int>();
  c.score_blocks = j.at("score_blocks").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.grid_stem = j.at("grid_stem").get<bool>();
  c.grid_channels = j.at("grid_channels").get<int>();
  c.enc_hidden = j.at("enc_hidden").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.flow_hidden = j.at("flow_hidden").get<int>();
  return c;
}

Mat lambda_matrix(const sde::VESchedule& sched, const VectorXd& ts, int rows,
                  sde::WeightMode mode) {
  Mat w(rows, ts.size());
  for (int b = 0; b < ts.size(); ++b) {
    const double v = mode == sde::WeightMode::kElbo
                         ? sched.lambda_weight(ts[b])
                         : sched.marginal_var(ts[b]);
    w.col(b).setConstant(v);
  }
  return w;
}

void check_finite(const LossBreakdown& lb) {
  const std::pair<const char*, double> comps[] = {
      {"total", lb.total},   {"diffusion_x", lb.diff_x},
      {"diffusion_xt", lb.diff_xt}, {"prior", lb.prior},
      {"posterior", lb.posterior},  {"entropy", lb.entropy}};
  for (const auto& [name, v] : comps) {
    if (!std::isfinite(v))
      throw TrainingDiverged(std::string("non-finite loss component: ") + name);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (d < 1) throw std::invalid_argument("train config: d must be >= 1");
  if (lr <= 0.0) throw std::invalid_argument("train config: lr must be > 0");
  if (batch < 1) throw std::invalid_argument("train config: batch must be >= 1");
  for (int e : phase_epochs)
    if (e < 0) throw std::invalid_argument("train config: negative epochs");
  if (!(t_floor > 0.0 && t_floor < 1.0))
    throw std::invalid_argument("train config: t_floor must lie in (0,1)");
  if (n_steps < 1)
    throw std::invalid_argument("train config: n_steps must be >= 1");
  sde::VESchedule{sigma_min, sigma_max}.validate();
  sde::weight_mode_from_string(lambda_mode);
}

std::string TrainConfig::to_json_string() const {
  return config_to_json(*this).dump();
}

TrainConfig TrainConfig::from_json_string(const std::string& s) {
  return config_from_json(json::parse(s));
}

std::string TrainConfig::hash() const {
  const std::string canon = config_to_json(*this).dump();
  return io::hex64(io::fnv1a(canon.data(), canon.size()));
}

Model Model::init(const TrainConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.schedule = sde::VESchedule{cfg.sigma_min, cfg.sigma_max};
  Rng init_rng(cfg.seed + 1);
  sde::ScoreNetConfig sc;
  sc.cond_dim = cfg.d;
  sc.width = cfg.score_width;
  sc.blocks = cfg.score_blocks;
  sc.time_dim = cfg.time_dim;
  sc.grid_stem = cfg.grid_stem;
  sc.grid_channels = cfg.grid_channels;
  m.score = std::make_unique<sde::ScoreNetwork>(sc, m.store, "score.", init_rng);
  encoder::EncoderConfig ec;
  ec.d = cfg.d;
  ec.hidden = cfg.enc_hidden;
  ec.layers = cfg.enc_layers;
  ec.time_dependent = cfg.time_dependent;
  ec.time_dim = cfg.time_dim;
  m.enc = std::make_unique<encoder::StochasticEncoder>(ec, m.store, "enc.",
                                                       init_rng);
  m.ivn = std::make_unique<encoder::InterventionModule>(m.store, "ivn.");
  latent_scm::FlowConfig fc;
  fc.d = cfg.d;
  fc.hidden = cfg.flow_hidden;
  m.flow =
      std::make_unique<latent_scm::SolutionFlow>(fc, m.store, "flow.", init_rng);
  return m;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  total += o.total;
  diff_x += o.diff_x;
  diff_xt += o.diff_xt;
  prior += o.prior;
  posterior += o.posterior;
  entropy += o.entropy;
  return *this;
}

LossBreakdown& LossBreakdown::operator/=(double k) {
  total /= k;
  diff_x /= k;
  diff_xt /= k;
  prior /= k;
  posterior /= k;
  entropy /= k;
  return *this;
}

LossBreakdown model_loss(Model& model, const Mat& x, const Mat& x_tilde,
                         const LossOptions& opt, Rng& rng) {
  const int batch = static_cast<int>(x.cols());
  const int d = model.cfg.d;
  if (batch == 0) throw std::invalid_argument("model_loss: empty batch");
  if (x.rows() != 16 || x_tilde.rows() != 16 || x_tilde.cols() != batch)
    throw std::invalid_argument("model_loss: batch shape mismatch");

  VectorXd ts(batch);
  for (int b = 0; b < batch; ++b)
    ts[b] = opt.t_floor + (1.0 - opt.t_floor) * rng.uniform();

  Tape tape;
  encoder::EncodedPairNodes pair = encoder::build_encoded_pair_batch(
      tape, *model.enc, *model.ivn, x, x_tilde,
      opt.time_dependent_encoder ? &ts : nullptr, rng, opt.sample_target);

  // Conditional score-matching terms for both halves of the pair.
  const Mat eta_x = rng.normal_mat(16, batch);
  const Mat eta_xt = rng.normal_mat(16, batch);
  Mat x_t(16, batch), xt_t(16, batch), target_x(16, batch), target_xt(16, batch);
  for (int b = 0; b < batch; ++b) {
    const double std = model.schedule.marginal_std(ts[b]);
    x_t.col(b) = x.col(b) + std * eta_x.col(b);
    target_x.col(b) = -eta_x.col(b) / std;
    xt_t.col(b) = x_tilde.col(b) + std * eta_xt.col(b);
    target_xt.col(b) = -eta_xt.col(b) / std;
  }
  const Mat weights = lambda_matrix(model.schedule, ts, 16, opt.lambda_mode);

  const Tape::Id s_x =
      model.score->forward(tape, x_t, ts, pair.e, model.schedule);
  const Tape::Id diff_x = tape.scale(
      tape.sum(tape.mul_const(
          tape.vsquare(tape.sub(s_x, tape.input(target_x))), weights)),
      1.0 / batch);
  const Tape::Id s_xt =
      model.score->forward(tape, xt_t, ts, pair.e_tilde, model.schedule);
  const Tape::Id diff_xt = tape.scale(
      tape.sum(tape.mul_const(
          tape.vsquare(tape.sub(s_xt, tape.input(target_xt))), weights)),
      1.0 / batch);

  Tape::Id total = tape.add(diff_x, diff_xt);

  LossBreakdown lb;
  lb.diff_x = tape.scalar(diff_x);
  lb.diff_xt = tape.scalar(diff_xt);

  if (opt.beta != 0.0) {
    // log p(e) under the standard-normal prior.
    const Tape::Id lp_e = tape.offset(
        tape.scale(tape.colsum(tape.vsquare(pair.e)), -0.5), -d * kHalfLog2Pi);
    // log p(e_tilde_target | e): flow density or the phase-2 uniform stub.
    Tape::Id lp_flow;
    if (opt.flow_mode == FlowMode::kUniformStub) {
      lp_flow = tape.input(Mat::Constant(
          1, batch, latent_scm::uniform_density_stub(opt.support_bound)));
    } else {
      Tape::Id ld_all = -1;
      for (int i = 0; i < d; ++i) {
        const Tape::Id ctx = d > 1 ? tape.drop_row(pair.e, i)
                                   : tape.input(Mat::Zero(1, batch));
        const Tape::Id cond = model.flow->conditioner(tape, i, ctx);
        const Tape::Id shift = tape.row(cond, 0);
        const Tape::Id log_scale = tape.row(cond, 1);
        const Tape::Id h = tape.mul(tape.sub(tape.row(pair.e_tilde, i), shift),
                                    tape.vexp(tape.neg(log_scale)));
        const Tape::Id ld = tape.sub(
            tape.offset(tape.scale(tape.vsquare(h), -0.5), -kHalfLog2Pi),
            log_scale);
        ld_all = i == 0 ? ld : tape.rowcat(ld_all, ld);
      }
      lp_flow = tape.colsum(tape.mul_const(ld_all, pair.target_mask));
    }
    const Tape::Id lp_target = tape.input(
        Mat::Constant(1, batch, -std::log(static_cast<double>(d))));
    const Tape::Id lq_target =
        tape.colsum(tape.mul_const(pair.log_q_target, pair.target_mask));

    const Tape::Id prior_sum = tape.add(tape.add(lp_e, lp_flow), lp_target);
    const Tape::Id post_sum = tape.add(lq_target, pair.log_q_pair);
    const Tape::Id latent = tape.sub(prior_sum, post_sum);
    total = tape.add(
        total, tape.scale(tape.sum(latent), -opt.beta / batch));
    lb.prior = tape.val(prior_sum).sum() / batch;
    lb.posterior = tape.val(post_sum).sum() / batch;
  }

  if (opt.entropy_coeff != 0.0) {
    const Tape::Id probs = tape.vexp(pair.log_q_target);
    const Tape::Id qbar = tape.scale(tape.rowsum(probs), 1.0 / batch);
    Tape::Id ent = tape.sum(tape.mul(qbar, tape.vlog(qbar)));  // = -H(qbar)
    if (opt.entropy_literal_sign) ent = tape.neg(ent);
    lb.entropy = tape.scalar(ent);
    total = tape.add(total, tape.scale(ent, opt.entropy_coeff));
  }

  lb.total = tape.scalar(total);
  check_finite(lb);
  if (opt.backprop) tape.backward(total);
  return lb;
}

LossBreakdown model_loss_single(Model& model, const Mat& x, const Mat& x_tilde,
                                double beta, Rng& rng, LossOptions opt) {
  if (model.enc->config().time_dependent)
    throw std::invalid_argument(
        "model_loss_single requires a time-independent encoder");
  opt.beta = beta;
  opt.time_dependent_encoder = false;
  return model_loss(model, x, x_tilde, opt, rng);
}

LossBreakdown model_loss_infinite(Model& model, const Mat& x,
                                  const Mat& x_tilde, double beta, Rng& rng,
                                  LossOptions opt) {
  opt.beta = beta;
  opt.time_dependent_encoder = true;
  return model_loss(model, x, x_tilde, opt, rng);
}

double entropy_regularizer(
    const std::vector<encoder::InterventionPosterior>& batch,
    bool literal_sign) {
  if (batch.empty())
    throw std::invalid_argument("entropy_regularizer: empty batch");
  VectorXd qbar = VectorXd::Zero(batch[0].log_probs.size());
  for (const auto& q : batch) qbar += q.probs();
  qbar /= static_cast<double>(batch.size());
  double neg_h = 0.0;
  for (int i = 0; i < qbar.size(); ++i)
    if (qbar[i] > 0.0) neg_h += qbar[i] * std::log(qbar[i]);
  return literal_sign ? -neg_h : neg_h;
}

double beta_schedule(int phase, int epoch, const TrainConfig& cfg) {
  if (phase < 1 || phase > 3)
    throw std::invalid_argument("beta_schedule: phase must be 1..3");
  const int total = cfg.phase_epochs[phase - 1];
  if (epoch < 0 || (total > 0 && epoch >= total))
    throw std::invalid_argument("beta_schedule: epoch out of range");
  if (phase == 1) return 0.0;
  if (phase == 2) return 1.0;
  return total > 1 ? static_cast<double>(epoch) / (total - 1) : 1.0;
}

void save_checkpoint(const Model& model, const Rng& train_rng, int phase,
                     int epoch, const std::string& path) {
  io::ArrayFile f;
  f.set_meta("kind", "dcrl.checkpoint");
  f.set_meta("config_json", model.cfg.to_json_string());
  f.set_meta("config_hash", model.cfg.hash());
  f.set_meta("phase", std::to_string(phase));
  f.set_meta("epoch", std::to_string(epoch));
  f.set_meta("rng_state", train_rng.serialize_state());
  std::vector<int> adam_ts;
  for (auto* p : const_cast<Model&>(model).store.all()) {
    f.put("p." + p->name, p->value);
    if (p->adam_m.size() > 0) {
      f.put("m." + p->name, p->adam_m);
      f.put("v." + p->name, p->adam_v);
    }
    adam_ts.push_back(static_cast<int>(p->adam_t));
  }
  f.put_ints("adam_t", adam_ts);
  f.save(path);
}

namespace {

void restore_params(Model& model, const io::ArrayFile& f) {
  std::vector<int> adam_ts = f.ints("adam_t");
  auto params = model.store.all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    nn::Param* p = params[i];
    if (!f.has("p." + p->name))
      throw io::IoError("checkpoint is missing tensor '" + p->name + "'");
    const Eigen::MatrixXd& v = f.mat("p." + p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw io::IoError("checkpoint shape mismatch for tensor '" + p->name +
                        "': expected " + std::to_string(p->value.rows()) + "x" +
                        std::to_string(p->value.cols()) + ", found " +
                        std::to_string(v.rows()) + "x" +
                        std::to_string(v.cols()));
    p->value = v;
    if (f.has("m." + p->name)) {
      p->adam_m = f.mat("m." + p->name);
      p->adam_v = f.mat("v." + p->name);
    }
  }
  if (adam_ts.size() != params.size())
    throw io::IoError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i]->adam_t = adam_ts[i];
}

}  // namespace

Checkpoint load_checkpoint(const std::string& path) {
  io::ArrayFile f = io::ArrayFile::load(path);
  if (!f.has_meta("kind") || f.meta("kind") != "dcrl.checkpoint")
    throw io::IoError("not a checkpoint file: " + path);
  const TrainConfig cfg = TrainConfig::from_json_string(f.meta("config_json"));
  if (cfg.hash() != f.meta("config_hash"))
    throw io::VersionError("checkpoint config hash mismatch in " + path);
  Checkpoint ck{Model::init(cfg), std::stoi(f.meta("phase")),
                std::stoi(f.meta("epoch")), f.meta("rng_state")};
  restore_params(ck.model, f);
  return ck;
}

void load_checkpoint_into(Model& model, const std::string& path) {
  io::ArrayFile f = io::ArrayFile::load(path);
  if (!f.has_meta("kind") || f.meta("kind") != "dcrl.checkpoint")
    throw io::IoError("not a checkpoint file: " + path);
  restore_params(model, f);
}

TrainResult train(const scmgen::PairDataset& ds, const TrainConfig& cfg,
                  const std::string& out_dir, const std::string& resume_path,
                  int stop_after_epochs) {
  cfg.validate();
  if (ds.d != cfg.d)
    throw std::invalid_argument("dataset d=" + std::to_string(ds.d) +
                                " does not match config d=" +
                                std::to_string(cfg.d));
  std::filesystem::create_directories(out_dir);

  Model model = Model::init(cfg);
  Rng train_rng(cfg.seed);
  int start_phase = 1, start_epoch = 0;
  if (!resume_path.empty()) {
    Checkpoint ck = load_checkpoint(resume_path);
    if (ck.model.cfg.hash() != cfg.hash())
      throw io::VersionError("resume checkpoint was written by a different "
                             "configuration");
    model = std::move(ck.model);
    train_rng.restore_state(ck.rng_state);
    start_phase = ck.phase;
    start_epoch = ck.epoch;
  }

  nn::Adam opt(nn::AdamConfig{.lr = cfg.lr});
  const std::string log_path = out_dir + "/train_log.jsonl";
  std::ofstream log(log_path, resume_path.empty() ? std::ios::trunc
                                                  : std::ios::app);
  if (!log) throw io::IoError("cannot open training log: " + log_path);

  const std::vector<std::vector<std::string>> phase_prefixes = {
      {"score.", "enc."},
      {"score.", "enc.", "ivn."},
      {"score.", "enc.", "ivn.", "flow."}};

  TrainResult result;
  result.log_path = log_path;
  const std::string ckpt_path = out_dir + "/checkpoint.bin";

  for (int phase = start_phase; phase <= 3; ++phase) {
    auto params = model.store.with_prefix(phase_prefixes[phase - 1]);
    LossOptions opt_loss;
    opt_loss.time_dependent_encoder = cfg.time_dependent;
    opt_loss.lambda_mode = sde::weight_mode_from_string(cfg.lambda_mode);
    opt_loss.t_floor = cfg.t_floor;
    opt_loss.support_bound = cfg.phase2_support_bound;
    opt_loss.flow_mode =
        phase == 3 ? FlowMode::kFlow : FlowMode::kUniformStub;
    opt_loss.entropy_coeff = phase == 3 ? cfg.entropy_coeff : 0.0;
    opt_loss.entropy_literal_sign = cfg.entropy_literal_sign;
    opt_loss.sample_target = true;

    const int epochs = cfg.phase_epochs[phase - 1];
    for (int epoch = (phase == start_phase ? start_epoch : 0); epoch < epochs;
         ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      opt_loss.beta = beta_schedule(phase, epoch, cfg);

      std::vector<int> order = train_rng.permutation(
          static_cast<int>(ds.train_idx.size()));
      LossBreakdown epoch_mean;
      int n_batches = 0;
      for (std::size_t off = 0; off < order.size();
           off += static_cast<std::size_t>(cfg.batch)) {
        const int b =
            static_cast<int>(std::min<std::size_t>(cfg.batch,
                                                   order.size() - off));
        Mat xb(16, b), xtb(16, b);
        for (int k = 0; k < b; ++k) {
          const int idx = ds.train_idx[order[off + k]];
          xb.col(k) = ds.x.col(idx);
          xtb.col(k) = ds.x_tilde.col(idx);
        }
        model.store.zero_grads();
        LossBreakdown lb = model_loss(model, xb, xtb, opt_loss, train_rng);
        opt.step(params);
        epoch_mean += lb;
        ++n_batches;
      }
      epoch_mean /= std::max(n_batches, 1);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();

      json rec{{"phase", phase},
               {"epoch", epoch},
               {"beta", opt_loss.beta},
               {"loss", epoch_mean.total},
               {"diffusion_x", epoch_mean.diff_x},
               {"diffusion_xt", epoch_mean.diff_xt},
               {"prior", epoch_mean.prior},
               {"posterior", epoch_mean.posterior},
               {"entropy", epoch_mean.entropy},
               {"seconds", secs}};
      log << rec.dump() << "\n";
      log.flush();
      result.final_epoch = epoch_mean;
      ++result.epochs_run;

      const bool phase_end = epoch == epochs - 1;
      const bool stop_now = stop_after_epochs >= 0 &&
                            result.epochs_run >= stop_after_epochs;
      if (phase_end || stop_now ||
          (cfg.save_every > 0 && (epoch + 1) % cfg.save_every == 0)) {
        const int next_phase = phase_end ? phase + 1 : phase;
        const int next_epoch = phase_end ? 0 : epoch + 1;
        save_checkpoint(model, train_rng, std::min(next_phase, 3),
                        phase_end && phase == 3 ? epochs : next_epoch,
                        ckpt_path);
      }
      if (stop_now) {
        result.checkpoint_path = ckpt_path;
        return result;
      }
    }
  }
  if (!std::filesystem::exists(ckpt_path))
    save_checkpoint(model, train_rng, 3, cfg.phase_epochs[2], ckpt_path);
  result.checkpoint_path = ckpt_path;
  return result;
}

}  // namespace dcrl::trainer
