#include "dcrl/evalx.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace dcrl::evalx {

namespace {

using json = nlohmann::json;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

VectorXd ranks_with_ties(const VectorXd& v) {
  const int n = static_cast<int>(v.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return v[a] < v[b] || (v[a] == v[b] && a < b);
  });
  VectorXd r(n);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * (i + j) + 1.0;
    for (int k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

double pearson(const VectorXd& a, const VectorXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const VectorXd da = a.array() - ma, db = b.array() - mb;
  const double va = da.squaredNorm(), vb = db.squaredNorm();
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return da.dot(db) / std::sqrt(va * vb);
}

// Entropy in nats with 0 ln 0 = 0.
double entropy(const VectorXd& p) {
  double h = 0.0;
  for (int i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

}  // namespace

double spearman(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("spearman: length mismatch");
  return pearson(ranks_with_ties(a), ranks_with_ties(b));
}

std::vector<int> hungarian(const MatrixXd& cost) {
  if (cost.rows() != cost.cols())
    throw std::invalid_argument("hungarian: square cost matrix required");
  const int n = static_cast<int>(cost.rows());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

Alignment align_latents(const MatrixXd& latents, const MatrixXd& factors) {
  const int dl = static_cast<int>(latents.rows());
  const int df = static_cast<int>(factors.rows());
  const int n = static_cast<int>(latents.cols());
  if (factors.cols() != n)
    throw std::invalid_argument("align_latents: sample count mismatch");
  if (n < std::max(dl, df))
    throw std::invalid_argument("align_latents: need n >= d samples");

  MatrixXd corr = MatrixXd::Zero(dl, df);
  Alignment out;
  for (int i = 0; i < dl; ++i) {
    const VectorXd li = latents.row(i);
    const bool constant = (li.array() == li[0]).all();
    if (constant) out.flagged.push_back(i);
    for (int j = 0; j < df; ++j)
      corr(i, j) = constant ? 0.0 : spearman(li, factors.row(j));
  }

  const int m = std::max(dl, df);
  MatrixXd cost = MatrixXd::Zero(m, m);
  cost.block(0, 0, dl, df) = -corr.cwiseAbs();
  const std::vector<int> assign = hungarian(cost);

  out.perm.assign(dl, -1);
  out.signs = VectorXd::Ones(dl);
  out.scores = VectorXd::Zero(dl);
  for (int i = 0; i < dl; ++i) {
    const int j = assign[i];
    if (j >= df) continue;  // padded column (more latents than factors)
    out.perm[i] = j;
    out.scores[i] = std::abs(corr(i, j));
    out.signs[i] = corr(i, j) < 0.0 ? -1.0 : 1.0;
  }
  return out;
}

double GbtModel::predict(const VectorXd& x) const {
  double y = base;
  for (const Tree& t : trees) {
    int id = 0;
    while (t.nodes[id].feature >= 0) {
      const Node& nd = t.nodes[id];
      id = x[nd.feature] <= nd.threshold ? nd.left : nd.right;
    }
    y += t.nodes[id].value;
  }
  return y;
}

GbtModel gbt_fit(const MatrixXd& x, const VectorXd& y, const GbtConfig& cfg) {
  const int p = static_cast<int>(x.rows());
  const int n = static_cast<int>(x.cols());
  if (y.size() != n) throw std::invalid_argument("gbt_fit: label size mismatch");
  if (n < 2 * cfg.min_leaf) throw std::invalid_argument("gbt_fit: too few samples");

  // Global presort per feature (ties broken by sample index).
  std::vector<std::vector<int>> order(p, std::vector<int>(n));
  for (int f = 0; f < p; ++f) {
    std::iota(order[f].begin(), order[f].end(), 0);
    std::sort(order[f].begin(), order[f].end(), [&](int a, int b) {
      return x(f, a) < x(f, b) || (x(f, a) == x(f, b) && a < b);
    });
  }

  GbtModel model;
  model.base = y.mean();
  model.importance = VectorXd::Zero(p);
  VectorXd pred = VectorXd::Constant(n, model.base);
  std::vector<char> member(n);

  for (int t = 0; t < cfg.n_trees; ++t) {
    const VectorXd resid = y - pred;
    GbtModel::Tree tree;
    struct Work {
      int node;
      int depth;
      std::vector<int> samples;
    };
    std::vector<Work> stack;
    tree.nodes.push_back({});
    {
      std::vector<int> all(n);
      std::iota(all.begin(), all.end(), 0);
      stack.push_back({0, 0, std::move(all)});
    }
    while (!stack.empty()) {
      Work w = std::move(stack.back());
      stack.pop_back();
      const auto& samples = w.samples;
      const int cnt = static_cast<int>(samples.size());
      double sum = 0.0;
      for (int s : samples) sum += resid[s];

      int best_f = -1;
      double best_gain = 1e-12, best_thr = 0.0;
      if (w.depth < cfg.max_depth && cnt >= 2 * cfg.min_leaf) {
        std::fill(member.begin(), member.end(), 0);
        for (int s : samples) member[s] = 1;
        const double parent = sum * sum / cnt;
        for (int f = 0; f < p; ++f) {
          double sl = 0.0;
          int nl = 0;
          double prev = std::numeric_limits<double>::quiet_NaN();
          for (int s : order[f]) {
            if (!member[s]) continue;
            const double xv = x(f, s);
            if (nl >= cfg.min_leaf && cnt - nl >= cfg.min_leaf && xv != prev) {
              const double sr = sum - sl;
              const double gain =
                  sl * sl / nl + sr * sr / (cnt - nl) - parent;
              if (gain > best_gain) {
                best_gain = gain;
                best_f = f;
                best_thr = 0.5 * (prev + xv);
              }
            }
            sl += resid[s];
            ++nl;
            prev = xv;
          }
        }
      }
      if (best_f < 0) {
        tree.nodes[w.node].feature = -1;
        tree.nodes[w.node].value = cfg.learning_rate * sum / cnt;
        for (int s : samples) pred[s] += tree.nodes[w.node].value;
        continue;
      }
      model.importance[best_f] += best_gain;
      std::vector<int> left, right;
      for (int s : samples)
        (x(best_f, s) <= best_thr ? left : right).push_back(s);
      const int li = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back({});
      const int ri = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back({});
      tree.nodes[w.node].feature = best_f;
      tree.nodes[w.node].threshold = best_thr;
      tree.nodes[w.node].left = li;
      tree.nodes[w.node].right = ri;
      stack.push_back({li, w.depth + 1, std::move(left)});
      stack.push_back({ri, w.depth + 1, std::move(right)});
    }
    model.trees.push_back(std::move(tree));
  }
  const double total = model.importance.sum();
  if (total > 0.0) model.importance /= total;
  return model;
}

DciResult dci_from_importance(const MatrixXd& importance) {
  const int dl = static_cast<int>(importance.rows());
  const int df = static_cast<int>(importance.cols());
  DciResult out;
  out.importance = importance;
  const double total = importance.sum();
  if (total <= 0.0) {
    out.warnings.push_back("degenerate importance matrix (all zero)");
    return out;
  }
  for (int i = 0; i < dl; ++i) {
    const double rs = importance.row(i).sum();
    if (rs <= 0.0) continue;  // weight zero below
    const VectorXd pi = importance.row(i) / rs;
    const double di = df > 1 ? 1.0 - entropy(pi) / std::log(df) : 1.0;
    out.disentanglement += (rs / total) * di;
  }
  for (int j = 0; j < df; ++j) {
    const double cs = importance.col(j).sum();
    if (cs <= 0.0) {
      out.warnings.push_back("factor " + std::to_string(j) +
                             " has all-zero importances; completeness 0");
      continue;
    }
    const VectorXd pj = importance.col(j) / cs;
    const double cj = dl > 1 ? 1.0 - entropy(pj) / std::log(dl) : 1.0;
    out.completeness += (cs / total) * cj;
  }
  return out;
}

DciResult dci_scores(const MatrixXd& latents, const MatrixXd& factors,
                     const GbtConfig& gbt) {
  const int dl = static_cast<int>(latents.rows());
  const int df = static_cast<int>(factors.rows());
  const int n = static_cast<int>(latents.cols());
  if (factors.cols() != n)
    throw std::invalid_argument("dci_scores: sample count mismatch");
  if (n < 10 * df)
    throw std::invalid_argument("dci_scores: need at least 10*d samples");

  MatrixXd importance = MatrixXd::Zero(dl, df);
  for (int j = 0; j < df; ++j) {
    const GbtModel m = gbt_fit(latents, factors.row(j), gbt);
    VectorXd imp = m.importance;
    const double cutoff = gbt.importance_floor * imp.maxCoeff();
    for (int i = 0; i < dl; ++i)
      if (imp[i] < cutoff) imp[i] = 0.0;
    const double total = imp.sum();
    if (total > 0.0) imp /= total;
    importance.col(j) = imp;
  }
  return dci_from_importance(importance);
}

namespace {

// Closed-form linear-Gaussian conditional of node j on a parent bitmask,
// fitted on the observational second-moment matrix (intercept included).
struct ConditionalFit {
  VectorXd resid_coef;  // length d+1; residual = resid_coef . [z; 1]
  double var = 1.0;
};

class FitCache {
 public:
  FitCache(const MatrixXd& a_obs, double n_obs)
      : a_obs_(a_obs), n_obs_(n_obs), d_(static_cast<int>(a_obs.rows()) - 1) {}

  const ConditionalFit& get(int child, std::uint32_t mask) {
    const std::uint64_t key =
        (static_cast<std::uint64_t>(child) << 32) | mask;
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;

    std::vector<int> idx;
    for (int k = 0; k < d_; ++k)
      if (mask & (1u << k)) idx.push_back(k);
    idx.push_back(d_);  // intercept carrier
    const int m = static_cast<int>(idx.size());
    MatrixXd gram(m, m);
    VectorXd rhs(m);
    for (int a = 0; a < m; ++a) {
      rhs[a] = a_obs_(idx[a], child);
      for (int b = 0; b < m; ++b) gram(a, b) = a_obs_(idx[a], idx[b]);
    }
    const VectorXd beta = gram.ldlt().solve(rhs);
    ConditionalFit fit;
    fit.resid_coef = VectorXd::Zero(d_ + 1);
    fit.resid_coef[child] = 1.0;
    for (int a = 0; a < m; ++a) fit.resid_coef[idx[a]] -= beta[a];
    fit.var = std::max(
        fit.resid_coef.dot(a_obs_ * fit.resid_coef) / n_obs_, 1e-9);
    return cache_.emplace(key, std::move(fit)).first->second;
  }

 private:
  const MatrixXd& a_obs_;
  double n_obs_;
  int d_;
  std::unordered_map<std::uint64_t, ConditionalFit> cache_;
};

constexpr double kLog2Pi = 1.8378770664093453;

double group_mean_ll(const ConditionalFit& fit, const MatrixXd& a_group,
                     double n_group) {
  const double msr = fit.resid_coef.dot(a_group * fit.resid_coef) / n_group;
  return -0.5 * (kLog2Pi + std::log(fit.var)) - msr / (2.0 * fit.var);
}

}  // namespace

LearnedGraph enco_learn(const MatrixXd& z_pre, const MatrixXd& z_post,
                        const std::vector<int>& targets,
                        const EncoConfig& cfg) {
  const int d = static_cast<int>(z_pre.rows());
  const int n = static_cast<int>(z_pre.cols());
  if (d > 31) throw std::invalid_argument("enco_learn: d too large (bitmask)");
  if (z_post.rows() != d || z_post.cols() != n ||
      static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("enco_learn: shape mismatch");

  std::vector<int> counts(d, 0);
  for (int t : targets) {
    if (t < 0 || t >= d)
      throw std::invalid_argument("enco_learn: target index out of range");
    ++counts[t];
  }
  std::string undersampled;
  for (int i = 0; i < d; ++i) {
    if (counts[i] < std::max(cfg.min_intervention_count, 1))
      undersampled += (undersampled.empty() ? "" : ", ") + std::to_string(i);
  }
  if (!undersampled.empty())
    throw std::invalid_argument(
        "enco_learn: insufficient interventional coverage for nodes {" +
        undersampled + "}");

  // Augmented second-moment matrices: observational and per-target.
  auto augmented = [&](const MatrixXd& z, const std::vector<int>* sel,
                       int who) {
    MatrixXd a = MatrixXd::Zero(d + 1, d + 1);
    VectorXd w(d + 1);
    for (int c = 0; c < z.cols(); ++c) {
      if (sel != nullptr && (*sel)[c] != who) continue;
      w.head(d) = z.col(c);
      w[d] = 1.0;
      a.noalias() += w * w.transpose();
    }
    return a;
  };
  const MatrixXd a_obs = augmented(z_pre, nullptr, 0);
  std::vector<MatrixXd> a_int(d);
  for (int i = 0; i < d; ++i) a_int[i] = augmented(z_post, &targets, i);

  FitCache fits(a_obs, n);
  MatrixXd gamma = MatrixXd::Zero(d, d);  // existence logits
  MatrixXd theta = MatrixXd::Zero(d, d);  // orientation logits, antisymmetric
  Rng rng(cfg.seed);

  MatrixXd gains = MatrixXd::Zero(d, d);
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        if (i == j) continue;
        double acc = 0.0;
        for (int s = 0; s < cfg.graph_samples; ++s) {
          std::uint32_t mask = 0;
          for (int k = 0; k < d; ++k) {
            if (k == i || k == j) continue;
            const double pk = sigmoid(gamma(k, j)) * sigmoid(theta(k, j));
            if (rng.uniform() < pk) mask |= (1u << k);
          }
          const ConditionalFit& with = fits.get(j, mask | (1u << i));
          const ConditionalFit& without = fits.get(j, mask);
          acc += group_mean_ll(with, a_int[i], counts[i]) -
                 group_mean_ll(without, a_int[i], counts[i]);
        }
        gains(i, j) = acc / cfg.graph_samples;
      }
    }
    // Smoothed fixed-point on the gain estimates: each logit tracks the
    // scaled net gain under the current belief-sampled parent sets, so
    // spurious ancestor edges decay once the true parents saturate.
    const double a = cfg.smoothing;
    auto clamp = [&](double v) {
      return std::clamp(v, -cfg.logit_clamp, cfg.logit_clamp);
    };
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        if (i == j) continue;
        const double target = cfg.gain_scale * (gains(i, j) - cfg.sparsity);
        gamma(i, j) = clamp((1.0 - a) * gamma(i, j) + a * target);
      }
    }
    for (int i = 0; i < d; ++i) {
      for (int j = i + 1; j < d; ++j) {
        const double target =
            cfg.gain_scale * (sigmoid(gamma(i, j)) * gains(i, j) -
                              sigmoid(gamma(j, i)) * gains(j, i));
        theta(i, j) = clamp((1.0 - a) * theta(i, j) + a * target);
        theta(j, i) = -theta(i, j);
      }
    }
  }

  LearnedGraph out;
  out.edge_scores = gamma.unaryExpr([](double v) { return sigmoid(v); });
  out.orientation_scores = theta.unaryExpr([](double v) { return sigmoid(v); });
  out.adjacency = MatrixXi::Zero(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i != j && out.edge_scores(i, j) > 0.5 &&
          out.orientation_scores(i, j) > 0.5)
        out.adjacency(i, j) = 1;
  return out;
}

int shd(const MatrixXi& a, const MatrixXi& b, bool prose_variant) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("shd: shape mismatch");
  if (!prose_variant) return (a - b).cwiseAbs().sum();
  int edits = 0;
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = i + 1; j < a.cols(); ++j) {
      const bool a_edge = a(i, j) != 0 || a(j, i) != 0;
      const bool b_edge = b(i, j) != 0 || b(j, i) != 0;
      if (a(i, j) == b(i, j) && a(j, i) == b(j, i)) continue;
      if (a_edge && b_edge)
        edits += 1;  // reversal (or multi-edge disagreement) is one edit
      else
        edits += std::abs(a(i, j) - b(i, j)) + std::abs(a(j, i) - b(j, i));
    }
  }
  return edits;
}

InferredLatents infer_latent_dataset(const trainer::Model& model,
                                     const scmgen::PairDataset& ds,
                                     const std::vector<int>& indices,
                                     std::optional<double> timestep,
                                     bool use_encodings) {
  if (model.cfg.d != ds.d)
    throw std::invalid_argument("model d=" + std::to_string(model.cfg.d) +
                                " does not match dataset d=" +
                                std::to_string(ds.d));
  const int n = static_cast<int>(indices.size());
  const int d = ds.d;
  MatrixXd x(16, n), xt(16, n);
  for (int c = 0; c < n; ++c) {
    x.col(c) = ds.x.col(indices[c]);
    xt.col(c) = ds.x_tilde.col(indices[c]);
  }

  nn::Tape tape;
  const VectorXd* tp = nullptr;
  VectorXd ts;
  if (model.enc->config().time_dependent) {
    ts = VectorXd::Constant(n, timestep.value_or(0.0));
    tp = &ts;
  }
  const auto ex = model.enc->forward(tape, x, tp);
  const auto ext = model.enc->forward(tape, xt, tp);
  const MatrixXd mu_x = tape.val(ex).topRows(d);
  const MatrixXd mu_xt = tape.val(ext).topRows(d);

  InferredLatents out;
  out.targets.resize(n);
  const double alpha = model.ivn->alpha();
  const double beta = model.ivn->beta();
  const double gamma = model.ivn->gamma();
  for (int c = 0; c < n; ++c) {
    const VectorXd delta = (mu_x.col(c) - mu_xt.col(c)).cwiseAbs();
    const VectorXd scores =
        (alpha + beta * delta.array() + gamma * delta.array().square())
            .matrix();
    Eigen::Index am;
    scores.maxCoeff(&am);
    out.targets[c] = static_cast<int>(am);
  }
  if (use_encodings) {
    out.z_pre = mu_x;
    out.z_post = mu_xt;
  } else {
    out.z_pre = model.flow->extract_batch(mu_x);
    out.z_post = model.flow->extract_batch(mu_xt);
  }
  return out;
}

InferredLatents ground_truth_latents(const scmgen::PairDataset& ds,
                                     const std::vector<int>& indices) {
  InferredLatents out;
  const int n = static_cast<int>(indices.size());
  out.z_pre.resize(ds.d, n);
  out.z_post.resize(ds.d, n);
  out.targets.resize(n);
  for (int c = 0; c < n; ++c) {
    out.z_pre.col(c) = ds.z.col(indices[c]);
    out.z_post.col(c) = ds.z_tilde.col(indices[c]);
    out.targets[c] = ds.targets[indices[c]];
  }
  return out;
}

InferredLatents random_latents(const scmgen::PairDataset& ds,
                               const std::vector<int>& indices, Rng& rng) {
  InferredLatents out;
  const int n = static_cast<int>(indices.size());
  out.z_pre = rng.normal_mat(ds.d, n);
  out.z_post = rng.normal_mat(ds.d, n);
  out.targets.resize(n);
  for (int c = 0; c < n; ++c) out.targets[c] = rng.uniform_int(ds.d);
  return out;
}

MetricsRow evaluate_latents(const InferredLatents& lat,
                            const scmgen::PairDataset& ds,
                            const std::vector<int>& indices,
                            const EvalConfig& cfg) {
  const int d = ds.d;
  const int n = static_cast<int>(indices.size());
  MatrixXd factors(d, n);
  for (int c = 0; c < n; ++c) factors.col(c) = ds.z.col(indices[c]);

  MetricsRow row;
  const Alignment align = align_latents(lat.z_pre, factors);
  for (int f : align.flagged)
    row.warnings.push_back("constant latent column " + std::to_string(f));

  const DciResult dci = dci_scores(lat.z_pre, factors, cfg.gbt);
  row.dci_d = dci.disentanglement;
  row.dci_c = dci.completeness;
  row.importance = dci.importance;
  row.warnings.insert(row.warnings.end(), dci.warnings.begin(),
                      dci.warnings.end());

  MatrixXi learned = MatrixXi::Zero(d, d);
  try {
    const LearnedGraph lg = enco_learn(lat.z_pre, lat.z_post, lat.targets,
                                       cfg.enco);
    learned = lg.adjacency;
  } catch (const std::invalid_argument& e) {
    row.warnings.push_back(std::string("structure learning degraded: ") +
                           e.what());
  }
  // Move the learned adjacency into factor space; the ground truth is never
  // permuted.
  MatrixXi learned_f = MatrixXi::Zero(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (learned(i, j) != 0 && align.perm[i] >= 0 && align.perm[j] >= 0)
        learned_f(align.perm[i], align.perm[j]) = 1;
  row.shd = shd(learned_f, ds.scm.graph.adjacency, cfg.shd_prose_variant);

  int hits = 0;
  for (int c = 0; c < n; ++c) {
    const int mapped = align.perm[lat.targets[c]];
    if (mapped == ds.targets[indices[c]]) ++hits;
  }
  row.accuracy = static_cast<double>(hits) / n;
  return row;
}

std::vector<double> trajectory_times() {
  std::vector<double> ts;
  for (int i = 0; i <= 10; ++i) ts.push_back(i / 10.0);
  return ts;
}

namespace {

MetricsReport finalize_report(std::vector<MetricsRow> rows, std::string mode,
                              std::string adapter,
                              const scmgen::PairDataset& ds,
                              std::string config_hash) {
  MetricsReport rep;
  rep.mode = std::move(mode);
  rep.adapter = std::move(adapter);
  rep.d = ds.d;
  rep.seed = ds.seed;
  rep.config_hash = std::move(config_hash);
  rep.rows = std::move(rows);
  double sh = 0.0;
  for (const auto& r : rep.rows) {
    sh += r.shd;
    rep.dci_d += r.dci_d;
    rep.dci_c += r.dci_c;
    rep.intervention_accuracy += r.accuracy;
  }
  const double k = static_cast<double>(rep.rows.size());
  rep.shd = static_cast<int>(std::lround(sh / k));
  rep.dci_d /= k;
  rep.dci_c /= k;
  rep.intervention_accuracy /= k;
  return rep;
}

}  // namespace

MetricsReport evaluate(const trainer::Model& model,
                       const scmgen::PairDataset& ds, EvalMode mode,
                       const EvalConfig& cfg) {
  std::vector<MetricsRow> rows;
  if (mode == EvalMode::kSingle) {
    const InferredLatents lat = infer_latent_dataset(
        model, ds, ds.test_idx, std::nullopt, cfg.use_encodings);
    rows.push_back(evaluate_latents(lat, ds, ds.test_idx, cfg));
  } else {
    for (double t : trajectory_times()) {
      const InferredLatents lat =
          infer_latent_dataset(model, ds, ds.test_idx, t, cfg.use_encodings);
      MetricsRow row = evaluate_latents(lat, ds, ds.test_idx, cfg);
      row.t = t;
      rows.push_back(std::move(row));
    }
  }
  return finalize_report(std::move(rows),
                         mode == EvalMode::kSingle ? "single" : "trajectory",
                         "model", ds, model.cfg.hash());
}

MetricsReport evaluate_oracle(const scmgen::PairDataset& ds,
                              const EvalConfig& cfg) {
  const InferredLatents lat = ground_truth_latents(ds, ds.test_idx);
  std::vector<MetricsRow> rows{evaluate_latents(lat, ds, ds.test_idx, cfg)};
  return finalize_report(std::move(rows), "single", "oracle", ds, "");
}

MetricsReport evaluate_random(const scmgen::PairDataset& ds,
                              std::uint64_t seed, const EvalConfig& cfg) {
  Rng rng(seed);
  const InferredLatents lat = random_latents(ds, ds.test_idx, rng);
  std::vector<MetricsRow> rows{evaluate_latents(lat, ds, ds.test_idx, cfg)};
  return finalize_report(std::move(rows), "single", "random", ds, "");
}

void MetricsReport::dump_importance(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : rows) {
    out << "# mode=" << mode << " adapter=" << adapter << " d=" << d
        << " seed=" << seed << " t=" << r.t << "\n";
    for (int i = 0; i < r.importance.rows(); ++i) {
      for (int j = 0; j < r.importance.cols(); ++j)
        out << (j ? "," : "") << r.importance(i, j);
      out << "\n";
    }
  }
}

std::string MetricsReport::to_jsonl() const {
  std::string out;
  for (const auto& r : rows) {
    json rec{{"mode", mode},
             {"adapter", adapter},
             {"d", d},
             {"seed", seed},
             {"config_hash", config_hash},
             {"shd", r.shd},
             {"dci_d", r.dci_d},
             {"dci_c", r.dci_c},
             {"accuracy", r.accuracy}};
    if (r.t >= 0.0)
      rec["t"] = r.t;
    else
      rec["t"] = nullptr;
    if (!r.warnings.empty()) rec["warnings"] = r.warnings;
    out += rec.dump();
    out += "\n";
  }
  return out;
}

}  // namespace dcrl::evalx
