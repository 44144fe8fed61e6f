#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dcrl/experiment.hpp"
#include "dcrl/serialize.hpp"
#include "test_util.hpp"

using namespace dcrl;
using namespace dcrl::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.name = "tiny";
  cfg.d_values = {2};
  cfg.seeds = {0, 1};
  cfg.n_train = 256;
  cfg.n_val = 16;
  cfg.n_test = 128;
  cfg.train.phase_epochs = {1, 1, 1};
  cfg.train.batch = 64;
  cfg.train.score_width = 16;
  cfg.train.score_blocks = 1;
  cfg.train.grid_channels = 2;
  cfg.train.enc_hidden = 16;
  cfg.train.flow_hidden = 8;
  cfg.adapters = {"model", "random", "oracle"};
  cfg.out_dir = out_dir;
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DCRL_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("experiment config schema: unknown keys and bad types are named") {
  json j = ExperimentConfig::profile("desk").to_json();
  j["unknown_knob"] = 3;
  try {
    ExperimentConfig::from_json(j);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("unknown_knob") != std::string::npos);
  }

  json bad = ExperimentConfig::profile("desk").to_json();
  bad["n_train"] = "lots";
  try {
    ExperimentConfig::from_json(bad);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("n_train") != std::string::npos);
  }

  json bad_train = ExperimentConfig::profile("desk").to_json();
  bad_train["train"]["mystery"] = 1;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad_train), ConfigError);

  CHECK_THROWS_AS(ExperimentConfig::profile("galaxy"), ConfigError);
}

TEST_CASE("config hash ignores formatting but tracks semantics") {
  const ExperimentConfig desk = ExperimentConfig::profile("desk");
  const std::string pretty = desk.to_json().dump(4);
  const std::string compact = desk.to_json().dump();
  const ExperimentConfig a = ExperimentConfig::from_json(json::parse(pretty));
  const ExperimentConfig b = ExperimentConfig::from_json(json::parse(compact));
  CHECK(a.hash() == b.hash());

  ExperimentConfig c = desk;
  c.n_train += 1;
  CHECK(c.hash() != desk.hash());
}

TEST_CASE("run_matrix executes, caches, and recomputes single cells") {
  const std::string out = test_dir() + "/matrix";
  fs::remove_all(out);
  const ExperimentConfig cfg = tiny_config(out);

  std::ostringstream log;
  const MatrixResult first = run_matrix(cfg, log);
  REQUIRE(first.failed == 0);
  REQUIRE(first.cells.size() == 2);
  for (const auto& c : first.cells) {
    CHECK(c.ok);
    CHECK(fs::exists(c.dir + "/run_record.json"));
    CHECK(fs::exists(c.dir + "/metrics.jsonl"));
    CHECK(fs::exists(c.dir + "/dataset.bin"));
  }
  CHECK(fs::exists(out + "/aggregate.json"));
  CHECK(fs::exists(out + "/aggregate.csv"));
  CHECK(fs::exists(out + "/plots/dci_d_single.svg"));

  // Rerun: all cells cached.
  std::ostringstream log2;
  const MatrixResult second = run_matrix(cfg, log2);
  for (const auto& c : second.cells) CHECK(c.skipped);

  // Delete one cell: only that cell is recomputed.
  fs::remove_all(cfg.cell_dir(2, 1));
  std::ostringstream log3;
  const MatrixResult third = run_matrix(cfg, log3);
  CHECK(third.cells[0].skipped);
  CHECK(!third.cells[1].skipped);
  CHECK(third.failed == 0);

  // Aggregate std over seeds matches a hand recomputation.
  std::vector<double> dci_values;
  for (std::uint64_t seed : cfg.seeds) {
    std::ifstream in(cfg.cell_dir(2, seed) + "/metrics.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json rec = json::parse(line);
      if (rec["adapter"] == "oracle") dci_values.push_back(rec["dci_d"]);
    }
  }
  REQUIRE(dci_values.size() == 2);
  const double mean = (dci_values[0] + dci_values[1]) / 2.0;
  double var = 0.0;
  for (double v : dci_values) var += (v - mean) * (v - mean);
  const double stddev = std::sqrt(var / 2.0);

  std::ifstream agg_in(out + "/aggregate.json");
  const json agg = json::parse(agg_in);
  bool found = false;
  for (const auto& row : agg) {
    if (row["adapter"] == "oracle" && row["mode"] == "single") {
      CHECK(row["dci_d"]["mean"].get<double>() == doctest::Approx(mean));
      CHECK(row["dci_d"]["std"].get<double>() == doctest::Approx(stddev));
      CHECK(row["dci_d"]["n"] == 2);
      found = true;
    }
  }
  CHECK(found);

  // Plots are pure views: delete and regenerate from metrics alone.
  fs::remove_all(out + "/plots");
  const auto paths = write_plots(cfg);
  CHECK(!paths.empty());
  CHECK(fs::exists(out + "/plots/dci_d_single.svg"));

  fs::remove_all(out);
}

TEST_CASE("cli: generate-data is reproducible and rejects bad flags") {
  const std::string dir = test_dir() + "/cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string ds1 = dir + "/a.bin";
  const std::string ds2 = dir + "/b.bin";
  const std::string flags =
      " --d 3 --seed 5 --n-train 64 --n-val 8 --n-test 8 --out ";
  CHECK(run_cli("generate-data" + flags + ds1) == 0);
  CHECK(run_cli("generate-data" + flags + ds2) == 0);
  CHECK(io::fnv1a_file(ds1) == io::fnv1a_file(ds2));

  // Metadata sidecar records d.
  std::ifstream meta(ds1 + ".meta.json");
  const json m = json::parse(meta);
  CHECK(m["d"] == 3);

  // Invalid dimension: usage error with nonzero exit.
  CHECK(run_cli("generate-data --d 0 --out " + dir + "/x.bin") != 0);
  // Unknown subcommand.
  CHECK(run_cli("frobnicate") != 0);
  fs::remove_all(dir);
}

TEST_CASE("cli: train + evaluate round trip on a tiny dataset") {
  const std::string dir = test_dir() + "/cli_train";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string ds = dir + "/ds.bin";
  REQUIRE(run_cli("generate-data --d 2 --seed 1 --n-train 128 --n-val 8 "
                  "--n-test 64 --out " +
                  ds) == 0);

  // Train config overlay file with a malformed key is rejected by name.
  {
    std::ofstream bad(dir + "/bad.json");
    bad << R"({"learning_rate_typo": 0.1})";
  }
  CHECK(run_cli("train --dataset " + ds + " --config " + dir +
                "/bad.json --out " + dir + "/run") == 1);

  {
    std::ofstream good(dir + "/train.json");
    good << R"({"batch": 64, "score_width": 16, "score_blocks": 1,
                "grid_channels": 2, "enc_hidden": 16, "flow_hidden": 8})";
  }
  REQUIRE(run_cli("train --dataset " + ds + " --config " + dir +
                  "/train.json --phase-epochs 1 1 1 --out " + dir + "/run") ==
          0);
  CHECK(fs::exists(dir + "/run/checkpoint.bin"));

  CHECK(run_cli("evaluate --checkpoint " + dir + "/run/checkpoint.bin" +
                " --dataset " + ds + " --mode single --out " + dir +
                "/metrics.jsonl") == 0);
  std::ifstream in(dir + "/metrics.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 1);

  // Trajectory mode emits 11 rows.
  CHECK(run_cli("evaluate --checkpoint " + dir + "/run/checkpoint.bin" +
                " --dataset " + ds + " --mode trajectory --out " + dir +
                "/traj.jsonl") == 0);
  std::ifstream tin(dir + "/traj.jsonl");
  rows = 0;
  while (std::getline(tin, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 11);

  // Missing dataset: runtime failure exit code.
  CHECK(run_cli("evaluate --checkpoint " + dir + "/run/checkpoint.bin" +
                " --dataset " + dir + "/nope.bin --out " + dir + "/m.jsonl") ==
        2);
  fs::remove_all(dir);
}

TEST_CASE("run_matrix trajectory mode emits line plots") {
  const std::string out = test_dir() + "/matrix_traj";
  fs::remove_all(out);
  ExperimentConfig cfg = tiny_config(out);
  cfg.seeds = {0};
  cfg.eval_modes = {"single", "trajectory"};
  cfg.adapters = {"model"};
  cfg.train.time_dependent = true;
  std::ostringstream log;
  const MatrixResult res = run_matrix(cfg, log);
  REQUIRE(res.failed == 0);

  // 1 single row + 11 trajectory rows.
  std::ifstream in(cfg.cell_dir(2, 0) + "/metrics.jsonl");
  int rows = 0, traj_rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    if (json::parse(line)["mode"] == "trajectory") ++traj_rows;
  }
  CHECK(rows == 12);
  CHECK(traj_rows == 11);
  CHECK(fs::exists(out + "/plots/dci_d_d2_trajectory.svg"));
  fs::remove_all(out);
}

TEST_CASE("run_matrix with parallel worker processes") {
  const std::string out = test_dir() + "/matrix_par";
  fs::remove_all(out);
  ExperimentConfig cfg = tiny_config(out);
  cfg.adapters = {"oracle", "random"};  // no training, cells stay light
  std::ostringstream log;
  const MatrixResult res = run_matrix(cfg, log, /*jobs=*/2);
  CHECK(res.failed == 0);
  for (const auto& c : res.cells) CHECK(fs::exists(c.dir + "/metrics.jsonl"));
  fs::remove_all(out);
}

TEST_CASE("cli: stop-after and resume continue a run") {
  const std::string dir = test_dir() + "/cli_resume";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string ds = dir + "/ds.bin";
  REQUIRE(run_cli("generate-data --d 2 --seed 3 --n-train 128 --n-val 8 "
                  "--n-test 16 --out " +
                  ds) == 0);
  const std::string common =
      " --dataset " + ds +
      " --phase-epochs 1 1 1 --out " + dir + "/run";
  {
    std::ofstream cfgf(dir + "/t.json");
    cfgf << R"({"score_width": 16, "score_blocks": 1, "grid_channels": 2,
                "enc_hidden": 16, "flow_hidden": 8, "batch": 64})";
  }
  REQUIRE(run_cli("train --config " + dir + "/t.json" + common +
                  " --stop-after 1") == 0);
  CHECK(run_cli("train --config " + dir + "/t.json" + common + " --resume " +
                dir + "/run/checkpoint.bin") == 0);
  fs::remove_all(dir);
}

TEST_CASE("parallel and serial matrices produce identical metrics") {
  const std::string out1 = test_dir() + "/matrix_ser";
  const std::string out2 = test_dir() + "/matrix_par2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  ExperimentConfig a = tiny_config(out1);
  a.adapters = {"oracle", "random"};
  ExperimentConfig b = a;
  b.out_dir = out2;
  std::ostringstream log;
  REQUIRE(run_matrix(a, log).failed == 0);
  REQUIRE(run_matrix(b, log, /*jobs=*/2).failed == 0);
  for (std::uint64_t seed : a.seeds) {
    std::ifstream f1(a.cell_dir(2, seed) + "/metrics.jsonl");
    std::ifstream f2(b.cell_dir(2, seed) + "/metrics.jsonl");
    const std::string s1((std::istreambuf_iterator<char>(f1)),
                         std::istreambuf_iterator<char>());
    const std::string s2((std::istreambuf_iterator<char>(f2)),
                         std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());
  }
  fs::remove_all(out1);
  fs::remove_all(out2);
}
