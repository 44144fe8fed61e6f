// Command-line interface for dataset generation, training, evaluation, and
// the full experiment matrix.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "dcrl/evalx.hpp"
#include "dcrl/experiment.hpp"
#include "dcrl/scmgen.hpp"
#include "dcrl/serialize.hpp"
#include "dcrl/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitPartial = 3;

int cmd_generate(int d, std::uint64_t seed, double edge_prob, int n_train,
                 int n_val, int n_test, const std::string& out) {
  dcrl::scmgen::PairDataset ds =
      dcrl::scmgen::build_dataset(d, edge_prob, n_train, n_val, n_test, seed);
  std::filesystem::create_directories(
      std::filesystem::path(out).parent_path().empty()
          ? "."
          : std::filesystem::path(out).parent_path().string());
  dcrl::scmgen::save_dataset(ds, out);

  std::vector<int> hist(d, 0);
  for (int t : ds.targets) ++hist[t];
  std::cout << "dataset written: " << out << "\n"
            << "  d=" << d << " pairs=" << ds.size()
            << " edges=" << ds.scm.graph.edge_count() << " seed=" << seed
            << "\n  target histogram:";
  for (int i = 0; i < d; ++i) std::cout << " " << hist[i];
  std::cout << "\n  checksum=" << dcrl::io::hex64(dcrl::io::fnv1a_file(out))
            << "\n";
  return kExitOk;
}

dcrl::trainer::TrainConfig train_config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw dcrl::harness::ConfigError("cannot open train config: " + path);
  std::string body((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  // Overlay onto defaults so partial configs are valid.
  nlohmann::json defaults =
      nlohmann::json::parse(dcrl::trainer::TrainConfig{}.to_json_string());
  nlohmann::json user;
  try {
    user = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw dcrl::harness::ConfigError(std::string("train config parse error: ") +
                                     e.what());
  }
  for (auto it = user.begin(); it != user.end(); ++it) {
    if (!defaults.contains(it.key()))
      throw dcrl::harness::ConfigError("unknown train config key '" +
                                       it.key() + "'");
    defaults[it.key()] = *it;
  }
  return dcrl::trainer::TrainConfig::from_json_string(defaults.dump());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffusion-based causal representation learning"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "sample an SCM pair dataset");
  int g_d = 5;
  std::uint64_t g_seed = 0;
  double g_edge_prob = dcrl::scmgen::kDefaultEdgeProb;
  int g_train = 100000, g_val = 10000, g_test = 10000;
  std::string g_out = "dataset.bin";
  gen->add_option("--d", g_d, "latent dimension")->check(CLI::PositiveNumber);
  gen->add_option("--seed", g_seed, "rng seed");
  gen->add_option("--edge-prob", g_edge_prob, "edge probability");
  gen->add_option("--n-train", g_train, "training pairs");
  gen->add_option("--n-val", g_val, "validation pairs");
  gen->add_option("--n-test", g_test, "test pairs");
  gen->add_option("--out", g_out, "output path");

  // train
  auto* tr = app.add_subcommand("train", "train a model on a dataset");
  std::string t_dataset, t_config, t_out = "run", t_resume;
  std::vector<int> t_phase_epochs;
  int t_stop_after = -1;
  std::uint64_t t_seed = 0;
  bool t_seed_set = false;
  tr->add_option("--dataset", t_dataset, "dataset path")->required();
  tr->add_option("--config", t_config, "train config JSON file");
  tr->add_option("--out", t_out, "output directory");
  tr->add_option("--resume", t_resume, "checkpoint to resume from");
  tr->add_option("--phase-epochs", t_phase_epochs,
                 "override epochs per phase (three values)")
      ->expected(3);
  tr->add_option("--stop-after", t_stop_after,
                 "stop after this many epochs (resumable)");
  tr->add_option("--seed", t_seed, "training seed")
      ->each([&](const std::string&) { t_seed_set = true; });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint or adapter");
  std::string e_checkpoint, e_dataset, e_mode = "single",
              e_adapter = "model", e_out = "metrics.jsonl";
  ev->add_option("--checkpoint", e_checkpoint, "model checkpoint");
  ev->add_option("--dataset", e_dataset, "dataset path")->required();
  ev->add_option("--mode", e_mode,
                 "single|trajectory (adapters other than model are\n"
                 "always single-point)")
      ->check(CLI::IsMember({"single", "trajectory"}));
  ev->add_option("--adapter", e_adapter, "model|oracle|random")
      ->check(CLI::IsMember({"model", "oracle", "random"}));
  ev->add_option("--out", e_out, "metrics output (JSONL)");
  std::string e_importance;
  ev->add_option("--importance-out", e_importance,
                 "also dump importance matrices as CSV");

  // run-matrix
  auto* rm = app.add_subcommand("run-matrix",
                                "run the full d x seed experiment matrix");
  std::string m_config, m_profile;
  int m_jobs = 1;
  rm->add_option("--config", m_config, "experiment config JSON file");
  rm->add_option("--profile", m_profile, "named preset (full|desk)");
  rm->add_option("--jobs", m_jobs, "parallel cell processes")
      ->check(CLI::PositiveNumber);

  // plot
  auto* pl = app.add_subcommand("plot", "regenerate plots from stored metrics");
  std::string p_config, p_profile;
  pl->add_option("--config", p_config, "experiment config JSON file");
  pl->add_option("--profile", p_profile, "named preset (full|desk)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      return cmd_generate(g_d, g_seed, g_edge_prob, g_train, g_val, g_test,
                          g_out);
    }
    if (tr->parsed()) {
      dcrl::trainer::TrainConfig cfg;
      if (!t_config.empty()) cfg = train_config_from_file(t_config);
      if (!t_phase_epochs.empty())
        cfg.phase_epochs = {t_phase_epochs[0], t_phase_epochs[1],
                            t_phase_epochs[2]};
      if (t_seed_set) cfg.seed = t_seed;
      dcrl::scmgen::PairDataset ds = dcrl::scmgen::load_dataset(t_dataset);
      cfg.d = ds.d;
      const dcrl::trainer::TrainResult res =
          dcrl::trainer::train(ds, cfg, t_out, t_resume, t_stop_after);
      std::cout << "checkpoint: " << res.checkpoint_path << "\n"
                << "log: " << res.log_path << "\n"
                << "epochs run: " << res.epochs_run
                << " final loss: " << res.final_epoch.total << "\n";
      return kExitOk;
    }
    if (ev->parsed()) {
      dcrl::scmgen::PairDataset ds = dcrl::scmgen::load_dataset(e_dataset);
      dcrl::evalx::EvalConfig ec;
      dcrl::evalx::MetricsReport rep;
      if (e_adapter == "oracle") {
        rep = dcrl::evalx::evaluate_oracle(ds, ec);
      } else if (e_adapter == "random") {
        rep = dcrl::evalx::evaluate_random(ds, ds.seed + 1000003, ec);
      } else {
        if (e_checkpoint.empty())
          throw dcrl::harness::ConfigError(
              "--checkpoint is required with the model adapter");
        dcrl::trainer::Checkpoint ck =
            dcrl::trainer::load_checkpoint(e_checkpoint);
        rep = dcrl::evalx::evaluate(ck.model, ds,
                                    e_mode == "single"
                                        ? dcrl::evalx::EvalMode::kSingle
                                        : dcrl::evalx::EvalMode::kTrajectory,
                                    ec);
      }
      std::ofstream out(e_out, std::ios::trunc);
      out << rep.to_jsonl();
      if (!e_importance.empty()) rep.dump_importance(e_importance);
      std::cout << "metrics (" << rep.rows.size() << " row"
                << (rep.rows.size() == 1 ? "" : "s") << ") -> " << e_out
                << "\n  shd=" << rep.shd << " dci_d=" << rep.dci_d
                << " dci_c=" << rep.dci_c
                << " accuracy=" << rep.intervention_accuracy << "\n";
      return kExitOk;
    }
    if (rm->parsed() || pl->parsed()) {
      const bool plotting = pl->parsed();
      const std::string cfg_file = plotting ? p_config : m_config;
      const std::string profile = plotting ? p_profile : m_profile;
      dcrl::harness::ExperimentConfig cfg;
      if (!cfg_file.empty())
        cfg = dcrl::harness::ExperimentConfig::load_file(cfg_file);
      else if (!profile.empty())
        cfg = dcrl::harness::ExperimentConfig::profile(profile);
      else
        throw dcrl::harness::ConfigError("provide --config or --profile");
      if (plotting) {
        dcrl::harness::write_aggregate(cfg);
        const auto paths = dcrl::harness::write_plots(cfg);
        for (const auto& p : paths) std::cout << "plot: " << p << "\n";
        return kExitOk;
      }
      dcrl::harness::MatrixResult res =
          dcrl::harness::run_matrix(cfg, std::cout, m_jobs);
      std::cout << res.cells.size() - res.failed << "/" << res.cells.size()
                << " cells completed\n";
      if (res.failed > 0) return kExitPartial;
      std::cout << "aggregate: " << res.aggregate_path << "\n";
      return kExitOk;
    }
  } catch (const dcrl::harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
