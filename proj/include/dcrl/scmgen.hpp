#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "dcrl/rng.hpp"

namespace dcrl::scmgen {

using Eigen::MatrixXd;
using Eigen::MatrixXi;
using Eigen::VectorXd;

constexpr int kObsDim = 16;
constexpr double kNoiseVar = 0.1;
constexpr double kDefaultWMin = 0.1;
constexpr double kDefaultEdgeProb = 0.5;
constexpr double kMaxProjectionCond = 1e3;

/// DAG over d nodes. adjacency(i, j) == 1 iff i -> j; acyclic by
/// construction (edges only go forward in topo_order).
struct CausalGraph {
  int d = 0;
  MatrixXi adjacency;
  std::vector<int> topo_order;

  int edge_count() const { return adjacency.sum(); }
  bool is_parent(int i, int j) const { return adjacency(i, j) != 0; }
  std::vector<int> parents(int j) const;
  /// target plus all nodes reachable from it.
  std::vector<bool> descendants(int target) const;
};

struct LinearGaussianSCM {
  CausalGraph graph;
  MatrixXd weights;    // weights(i, j) != 0 iff adjacency(i, j) == 1
  VectorXd noise_var;  // per node, 0.1 in the reference configuration

  /// Closed-form latent covariance (I - W^T)^{-1} diag(noise) (I - W)^{-1}.
  MatrixXd latent_covariance() const;
};

struct WeaklySupervisedPair {
  VectorXd x, x_tilde;      // observations, length 16
  VectorXd z, z_tilde;      // ground-truth latents (evaluation only)
  VectorXd eps, eps_tilde;  // exogenous noise (evaluation only)
  int target = -1;          // intervention target (evaluation only)
};

/// Columnar pair storage; one column per pair.
struct PairDataset {
  int d = 0;
  std::uint64_t seed = 0;
  LinearGaussianSCM scm;
  MatrixXd projection;  // 16 x d, full column rank
  MatrixXd x, x_tilde;  // 16 x n
  MatrixXd z, z_tilde;  // d x n   (ground truth, evaluation only)
  MatrixXd eps, eps_tilde;
  std::vector<int> targets;
  std::vector<int> train_idx, val_idx, test_idx;

  int size() const { return static_cast<int>(x.cols()); }
  WeaklySupervisedPair pair(int i) const;
};

/// Random DAG: a uniformly random topological order, then each forward pair
/// carries an edge independently with probability edge_prob.
CausalGraph sample_graph(int d, double edge_prob, Rng& rng);

/// Edge weights ~ N(0,1) redrawn until |w| >= w_min; equal noise variance 0.1.
LinearGaussianSCM sample_scm(const CausalGraph& graph, double w_min, Rng& rng);

/// Ancestral sampling of n latent vectors and the exogenous noise that
/// produced them.
struct AncestralSample {
  MatrixXd z;    // d x n
  MatrixXd eps;  // d x n
};
AncestralSample ancestral_sample(const LinearGaussianSCM& scm, int n, Rng& rng);

/// Perfect stochastic intervention on `target`: a fresh value ~ N(0,1)
/// replaces the node's mechanism; all other exogenous noise is shared
/// bit-exactly with the pre-intervention state.
struct InterventionResult {
  VectorXd z_tilde, eps_tilde;
};
InterventionResult intervene_pair(const LinearGaussianSCM& scm,
                                  const VectorXd& z, const VectorXd& eps,
                                  int target, Rng& rng);

VectorXd project_to_observations(const VectorXd& z, const MatrixXd& projection);

PairDataset build_dataset(int d, double edge_prob, int n_train, int n_val,
                          int n_test, std::uint64_t seed);

/// Binary container at `path` plus a JSON sidecar at `path + ".meta.json"`.
void save_dataset(const PairDataset& ds, const std::string& path);
PairDataset load_dataset(const std::string& path);

}  // namespace dcrl::scmgen
