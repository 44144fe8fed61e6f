#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "dcrl/rng.hpp"
#include "dcrl/scmgen.hpp"
#include "dcrl/trainer.hpp"

namespace dcrl::evalx {

using Eigen::MatrixXd;
using Eigen::MatrixXi;
using Eigen::VectorXd;

/// Column-matching between learned latents and ground-truth factors by
/// maximum total |Spearman correlation| (Hungarian assignment).
struct Alignment {
  std::vector<int> perm;     // latent i is matched to factor perm[i]
  VectorXd signs;            // sign of the matched rank correlation
  VectorXd scores;           // |rho| of each matched pair
  std::vector<int> flagged;  // constant latent columns (zero-score matches)
};
Alignment align_latents(const MatrixXd& latents, const MatrixXd& factors);

/// Spearman rank correlation with average ranks on ties; 0 for constants.
double spearman(const VectorXd& a, const VectorXd& b);

/// Minimum-cost assignment (square cost matrix), O(n^3).
std::vector<int> hungarian(const MatrixXd& cost);

struct GbtConfig {
  int n_trees = 40;
  int max_depth = 3;
  double learning_rate = 0.1;
  int min_leaf = 5;
  // Per-regressor denoising: importances below this fraction of the
  // regressor's largest importance are treated as split noise.
  double importance_floor = 1e-3;
};

/// Gradient-boosted regression trees with squared loss; importances are
/// split-gain totals normalized to sum to one.
struct GbtModel {
  struct Node {
    int feature = -1;  // -1 = leaf
    double threshold = 0.0;
    int left = -1, right = -1;
    double value = 0.0;
  };
  struct Tree {
    std::vector<Node> nodes;
  };
  double base = 0.0;
  std::vector<Tree> trees;
  VectorXd importance;

  double predict(const VectorXd& x) const;
};
GbtModel gbt_fit(const MatrixXd& x, const VectorXd& y, const GbtConfig& cfg);

struct DciResult {
  double disentanglement = 0.0;
  double completeness = 0.0;
  MatrixXd importance;  // d_latent x d_factor
  std::vector<std::string> warnings;
};
/// Entropy-based aggregation of a nonnegative importance matrix into
/// (disentanglement, completeness), weighted by row/column mass.
DciResult dci_from_importance(const MatrixXd& importance);
/// DCI scores from per-factor boosted-tree regressors (latents d_latent x n,
/// factors d_factor x n).
DciResult dci_scores(const MatrixXd& latents, const MatrixXd& factors,
                     const GbtConfig& gbt = {});

struct EncoConfig {
  int iterations = 20;
  int graph_samples = 100;
  double sparsity = 0.004;
  // Logits track gain_scale * (likelihood gain - sparsity) through an
  // exponential moving average; smoothing in (0, 1].
  double gain_scale = 200.0;
  double smoothing = 0.5;
  double logit_clamp = 10.0;
  int min_intervention_count = 2;
  std::uint64_t seed = 0;
};

struct LearnedGraph {
  MatrixXi adjacency;          // thresholded: existence > .5 and orient > .5
  MatrixXd edge_scores;        // sigmoid of existence logits
  MatrixXd orientation_scores; // sigmoid of orientation logits (antisymmetric)
};

/// Interventional structure learning over inferred latents: alternates
/// closed-form linear-Gaussian conditional fits (parent sets sampled from
/// current beliefs) with likelihood-gain updates of existence/orientation
/// logits, contrasting samples where the candidate parent was intervened on.
LearnedGraph enco_learn(const MatrixXd& z_pre, const MatrixXd& z_post,
                        const std::vector<int>& targets,
                        const EncoConfig& cfg = {});

/// Structural Hamming distance as the sum of absolute adjacency
/// differences (a reversed edge costs 2). The prose variant counts a
/// reversal as a single edit.
int shd(const MatrixXi& a, const MatrixXi& b, bool prose_variant = false);

struct InferredLatents {
  MatrixXd z_pre, z_post;    // d x n
  std::vector<int> targets;  // inferred (or supplied) per pair
};

/// Runs the trained encoding/intervention/solution modules over a dataset
/// slice: posterior means (optionally at a trajectory time), argmax
/// intervention targets, causal variables via the solution functions.
/// use_encodings skips the solution functions and returns e directly.
InferredLatents infer_latent_dataset(const trainer::Model& model,
                                     const scmgen::PairDataset& ds,
                                     const std::vector<int>& indices,
                                     std::optional<double> timestep,
                                     bool use_encodings = false);

/// Adapters for baseline rows: the hidden ground truth, or seeded noise.
InferredLatents ground_truth_latents(const scmgen::PairDataset& ds,
                                     const std::vector<int>& indices);
InferredLatents random_latents(const scmgen::PairDataset& ds,
                               const std::vector<int>& indices, Rng& rng);

struct EvalConfig {
  GbtConfig gbt;
  EncoConfig enco;
  bool use_encodings = false;  // feed e instead of z into the learner
  bool shd_prose_variant = false;
};

struct MetricsRow {
  double t = -1.0;  // trajectory time; -1 for single mode
  int shd = 0;
  double dci_d = 0.0;
  double dci_c = 0.0;
  double accuracy = 0.0;
  MatrixXd importance;  // latent x factor, for inspection dumps
  std::vector<std::string> warnings;
};

enum class EvalMode { kSingle, kTrajectory };

struct MetricsReport {
  std::string mode;
  std::string adapter;  // "model", "oracle", "random"
  int d = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  // Headline scores: the single-mode row, or the row mean in trajectory mode.
  int shd = 0;
  double dci_d = 0.0;
  double dci_c = 0.0;
  double intervention_accuracy = 0.0;
  std::vector<MetricsRow> rows;

  std::string to_jsonl() const;  // one JSON record per row
  /// CSV dump of the per-row importance matrices (one block per row).
  void dump_importance(const std::string& path) const;
};

/// Full pipeline on one latent source: align, DCI, structure learning,
/// SHD against the ground-truth graph (learned adjacency permuted by the
/// alignment), and intervention accuracy through the same permutation.
/// Insufficient interventional coverage degrades to an empty learned graph
/// with a warning instead of failing the whole report.
MetricsRow evaluate_latents(const InferredLatents& lat,
                            const scmgen::PairDataset& ds,
                            const std::vector<int>& indices,
                            const EvalConfig& cfg);

MetricsReport evaluate(const trainer::Model& model,
                       const scmgen::PairDataset& ds, EvalMode mode,
                       const EvalConfig& cfg = {});
MetricsReport evaluate_oracle(const scmgen::PairDataset& ds,
                              const EvalConfig& cfg = {});
MetricsReport evaluate_random(const scmgen::PairDataset& ds,
                              std::uint64_t seed, const EvalConfig& cfg = {});

/// The 11 trajectory times 0.0, 0.1, ..., 1.0.
std::vector<double> trajectory_times();

}  // namespace dcrl::evalx
