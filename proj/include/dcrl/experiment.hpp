#pragma once

#include <nlohmann/json.hpp>

#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcrl/evalx.hpp"
#include "dcrl/trainer.hpp"

namespace dcrl::harness {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The full experiment matrix: datasets, training, and evaluation for every
/// (d, seed) cell. Parsed from JSON with schema validation (unknown or
/// ill-typed keys are reported by name).
struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<int> d_values{5};
  std::vector<std::uint64_t> seeds{0};
  double edge_prob = 0.5;
  int n_train = 100000;
  int n_val = 10000;
  int n_test = 10000;
  trainer::TrainConfig train;  // d and seed are filled per cell
  std::vector<std::string> eval_modes{"single"};
  std::vector<std::string> adapters{"model", "random"};
  std::string out_dir = "runs/experiment";

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load_file(const std::string& path);
  /// Named presets: "full" (the complete experiment grid) and "desk"
  /// (bounded-time).
  static ExperimentConfig profile(const std::string& name);
  nlohmann::json to_json() const;
  std::string hash() const;
  void validate() const;

  /// Output root honoring the DCRL_OUT_ROOT environment variable for
  /// relative paths.
  std::string resolved_out_dir() const;
  std::string cell_dir(int d, std::uint64_t seed) const;
};

struct CellOutcome {
  int d = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  bool skipped = false;  // valid cached artifacts were reused
  std::string error;
  std::string dir;
};

struct MatrixResult {
  std::vector<CellOutcome> cells;
  int failed = 0;
  std::string aggregate_path;
};

/// Generate, train, and evaluate one cell; writes dataset/checkpoint/
/// metrics plus a run record. Returns without work when a valid cached
/// run record for the same config hash is present.
CellOutcome run_cell(const ExperimentConfig& cfg, int d, std::uint64_t seed,
                     std::ostream& log);

/// The whole matrix (optionally across parallel worker processes), then
/// aggregation and plots.
MatrixResult run_matrix(const ExperimentConfig& cfg, std::ostream& log,
                        int jobs = 1);

/// Pure views over stored metrics: aggregate.json/csv and SVG plots are
/// regenerable from the metrics files alone.
std::string write_aggregate(const ExperimentConfig& cfg);
std::vector<std::string> write_plots(const ExperimentConfig& cfg);

}  // namespace dcrl::harness
