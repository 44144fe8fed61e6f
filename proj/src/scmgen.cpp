#include "dcrl/scmgen.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/SVD>

#include <fstream>
#include <stdexcept>

#include "dcrl/serialize.hpp"

namespace dcrl::scmgen {

namespace {
using nlohmann::json;

constexpr int kDatasetSchemaVersion = 1;

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

MatrixXd matrix_from_json(const json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows > 0 ? static_cast<int>(j[0].size()) : 0;
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  return m;
}

double condition_number(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv(sv.size() - 1) <= 0.0) return std::numeric_limits<double>::infinity();
  return sv(0) / sv(sv.size() - 1);
}

}  // namespace

std::vector<int> CausalGraph::parents(int j) const {
  std::vector<int> out;
  for (int i = 0; i < d; ++i)
    if (adjacency(i, j) != 0) out.push_back(i);
  return out;
}

std::vector<bool> CausalGraph::descendants(int target) const {
  std::vector<bool> reach(d, false);
  reach[target] = true;
  // topo_order guarantees parents are settled before children.
  for (int a = 0; a < d; ++a) {
    const int j = topo_order[a];
    if (reach[j]) continue;
    for (int i = 0; i < d; ++i) {
      if (adjacency(i, j) != 0 && reach[i]) {
        reach[j] = true;
        break;
      }
    }
  }
  return reach;
}

MatrixXd LinearGaussianSCM::latent_covariance() const {
  const int d = graph.d;
  const MatrixXd m = (MatrixXd::Identity(d, d) - weights.transpose()).inverse();
  return m * noise_var.asDiagonal() * m.transpose();
}

WeaklySupervisedPair PairDataset::pair(int i) const {
  WeaklySupervisedPair p;
  p.x = x.col(i);
  p.x_tilde = x_tilde.col(i);
  p.z = z.col(i);
  p.z_tilde = z_tilde.col(i);
  p.eps = eps.col(i);
  p.eps_tilde = eps_tilde.col(i);
  p.target = targets[i];
  return p;
}

CausalGraph sample_graph(int d, double edge_prob, Rng& rng) {
  if (d < 1) throw std::invalid_argument("sample_graph: d must be >= 1");
  if (edge_prob < 0.0 || edge_prob > 1.0)
    throw std::invalid_argument("sample_graph: edge_prob must be in [0,1]");
  CausalGraph g;
  g.d = d;
  g.topo_order = rng.permutation(d);
  g.adjacency = MatrixXi::Zero(d, d);
  for (int a = 0; a < d; ++a) {
    for (int b = a + 1; b < d; ++b) {
      if (rng.uniform() < edge_prob)
        g.adjacency(g.topo_order[a], g.topo_order[b]) = 1;
    }
  }
  return g;
}

LinearGaussianSCM sample_scm(const CausalGraph& graph, double w_min, Rng& rng) {
  if (w_min <= 0.0) throw std::invalid_argument("sample_scm: w_min must be > 0");
  LinearGaussianSCM scm;
  scm.graph = graph;
  scm.weights = MatrixXd::Zero(graph.d, graph.d);
  for (int a = 0; a < graph.d; ++a) {
    for (int b = 0; b < graph.d; ++b) {
      const int i = graph.topo_order[a];
      const int j = graph.topo_order[b];
      if (graph.adjacency(i, j) == 0) continue;
      double w = rng.normal();
      while (std::abs(w) < w_min) w = rng.normal();
      scm.weights(i, j) = w;
    }
  }
  scm.noise_var = VectorXd::Constant(graph.d, kNoiseVar);
  return scm;
}

AncestralSample ancestral_sample(const LinearGaussianSCM& scm, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("ancestral_sample: n must be >= 1");
  const int d = scm.graph.d;
  AncestralSample out;
  out.eps.resize(d, n);
  for (int c = 0; c < n; ++c)
    for (int r = 0; r < d; ++r)
      out.eps(r, c) = std::sqrt(scm.noise_var[r]) * rng.normal();
  out.z = MatrixXd::Zero(d, n);
  for (int a = 0; a < d; ++a) {
    const int j = scm.graph.topo_order[a];
    out.z.row(j) = out.eps.row(j);
    for (int i = 0; i < d; ++i) {
      if (scm.graph.adjacency(i, j) != 0)
        out.z.row(j) += scm.weights(i, j) * out.z.row(i);
    }
  }
  return out;
}

InterventionResult intervene_pair(const LinearGaussianSCM& scm,
                                  const VectorXd& z, const VectorXd& eps,
                                  int target, Rng& rng) {
  const int d = scm.graph.d;
  if (target < 0 || target >= d)
    throw std::invalid_argument("intervene_pair: target out of range");
  (void)z;
  InterventionResult out;
  out.eps_tilde = eps;
  out.eps_tilde[target] = rng.normal();  // the intervention value itself
  out.z_tilde = VectorXd::Zero(d);
  for (int a = 0; a < d; ++a) {
    const int j = scm.graph.topo_order[a];
    if (j == target) {
      out.z_tilde[j] = out.eps_tilde[j];  // mechanism replaced
      continue;
    }
    out.z_tilde[j] = out.eps_tilde[j];
    for (int i = 0; i < d; ++i) {
      if (scm.graph.adjacency(i, j) != 0)
        out.z_tilde[j] += scm.weights(i, j) * out.z_tilde[i];
    }
  }
  return out;
}

VectorXd project_to_observations(const VectorXd& z, const MatrixXd& projection) {
  if (projection.rows() != kObsDim || projection.cols() != z.size())
    throw std::invalid_argument("project_to_observations: shape mismatch");
  return projection * z;
}

PairDataset build_dataset(int d, double edge_prob, int n_train, int n_val,
                          int n_test, std::uint64_t seed) {
  if (d < 1) throw std::invalid_argument("build_dataset: d must be >= 1");
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw std::invalid_argument("build_dataset: split sizes must be >= 1");

  Rng rng(seed);
  PairDataset ds;
  ds.d = d;
  ds.seed = seed;
  const CausalGraph graph = sample_graph(d, edge_prob, rng);
  ds.scm = sample_scm(graph, kDefaultWMin, rng);

  ds.projection.resize(kObsDim, d);
  do {
    for (int c = 0; c < d; ++c)
      for (int r = 0; r < kObsDim; ++r) ds.projection(r, c) = rng.normal();
  } while (condition_number(ds.projection) > kMaxProjectionCond);

  const int n = n_train + n_val + n_test;
  AncestralSample base = ancestral_sample(ds.scm, n, rng);
  ds.z = std::move(base.z);
  ds.eps = std::move(base.eps);
  ds.z_tilde.resize(d, n);
  ds.eps_tilde.resize(d, n);
  ds.targets.resize(n);
  for (int c = 0; c < n; ++c) {
    const int target = rng.uniform_int(d);
    ds.targets[c] = target;
    InterventionResult iv =
        intervene_pair(ds.scm, ds.z.col(c), ds.eps.col(c), target, rng);
    ds.z_tilde.col(c) = iv.z_tilde;
    ds.eps_tilde.col(c) = iv.eps_tilde;
  }
  ds.x = ds.projection * ds.z;
  ds.x_tilde = ds.projection * ds.z_tilde;

  ds.train_idx.resize(n_train);
  ds.val_idx.resize(n_val);
  ds.test_idx.resize(n_test);
  for (int i = 0; i < n_train; ++i) ds.train_idx[i] = i;
  for (int i = 0; i < n_val; ++i) ds.val_idx[i] = n_train + i;
  for (int i = 0; i < n_test; ++i) ds.test_idx[i] = n_train + n_val + i;
  return ds;
}

void save_dataset(const PairDataset& ds, const std::string& path) {
  io::ArrayFile f;
  f.set_meta("kind", "dcrl.pair_dataset");
  f.put("x", ds.x);
  f.put("x_tilde", ds.x_tilde);
  f.put("z", ds.z);
  f.put("z_tilde", ds.z_tilde);
  f.put("eps", ds.eps);
  f.put("eps_tilde", ds.eps_tilde);
  f.put_ints("targets", ds.targets);
  f.put_ints("train_idx", ds.train_idx);
  f.put_ints("val_idx", ds.val_idx);
  f.put_ints("test_idx", ds.test_idx);
  f.save(path);
  const std::uint64_t checksum = io::fnv1a_file(path);

  json meta;
  meta["schema_version"] = kDatasetSchemaVersion;
  meta["seed"] = ds.seed;
  meta["d"] = ds.d;
  meta["n_pairs"] = ds.size();
  meta["noise_var"] = kNoiseVar;
  meta["target_distribution"] = "uniform";  // assumption recorded for consumers
  json adj = json::array();
  for (int i = 0; i < ds.d; ++i) {
    json row = json::array();
    for (int j = 0; j < ds.d; ++j) row.push_back(ds.scm.graph.adjacency(i, j));
    adj.push_back(row);
  }
  meta["adjacency"] = adj;
  meta["topo_order"] = ds.scm.graph.topo_order;
  meta["weights"] = matrix_to_json(ds.scm.weights);
  meta["projection"] = matrix_to_json(ds.projection);
  meta["checksum"] = io::hex64(checksum);
  meta["evaluation_only_fields"] = {"z", "z_tilde", "eps", "eps_tilde",
                                    "targets"};

  std::ofstream out(path + ".meta.json", std::ios::trunc);
  if (!out) throw io::IoError("cannot write sidecar for " + path);
  out << meta.dump(2) << "\n";
}

PairDataset load_dataset(const std::string& path) {
  std::ifstream in(path + ".meta.json");
  if (!in) throw io::IoError("missing dataset sidecar: " + path + ".meta.json");
  json meta = json::parse(in);
  const int version = meta.at("schema_version").get<int>();
  if (version != kDatasetSchemaVersion)
    throw io::VersionError("dataset schema version " + std::to_string(version) +
                           " unsupported (expected " +
                           std::to_string(kDatasetSchemaVersion) + ")");
  if (meta.at("checksum").get<std::string>() != io::hex64(io::fnv1a_file(path)))
    throw io::ChecksumError("dataset checksum mismatch for " + path);

  io::ArrayFile f = io::ArrayFile::load(path);
  PairDataset ds;
  ds.d = meta.at("d").get<int>();
  ds.seed = meta.at("seed").get<std::uint64_t>();
  ds.x = f.mat("x");
  ds.x_tilde = f.mat("x_tilde");
  ds.z = f.mat("z");
  ds.z_tilde = f.mat("z_tilde");
  ds.eps = f.mat("eps");
  ds.eps_tilde = f.mat("eps_tilde");
  ds.targets = f.ints("targets");
  ds.train_idx = f.ints("train_idx");
  ds.val_idx = f.ints("val_idx");
  ds.test_idx = f.ints("test_idx");

  ds.scm.graph.d = ds.d;
  ds.scm.graph.topo_order = meta.at("topo_order").get<std::vector<int>>();
  ds.scm.graph.adjacency = MatrixXi::Zero(ds.d, ds.d);
  for (int i = 0; i < ds.d; ++i)
    for (int j = 0; j < ds.d; ++j)
      ds.scm.graph.adjacency(i, j) = meta.at("adjacency")[i][j].get<int>();
  ds.scm.weights = matrix_from_json(meta.at("weights"));
  ds.scm.noise_var = VectorXd::Constant(ds.d, meta.at("noise_var").get<double>());
  ds.projection = matrix_from_json(meta.at("projection"));
  return ds;
}

}  // namespace dcrl::scmgen
