#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "histomorph/morpho.hpp"

namespace histomorph {

// --- Random forest (CART, Gini) ----------------------------------------------

struct TreeNode {
  int feature = -1;        // -1 marks a leaf
  double threshold = 0;
  int left = -1, right = -1;
  double count0 = 0, count1 = 0;  // class counts at the node
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict_p1(const std::vector<double>& x) const {
    int i = 0;
    while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
    double total = nodes[i].count0 + nodes[i].count1;
    return total > 0 ? nodes[i].count1 / total : 0.5;
  }
};

struct ForestConfig {
  int n_trees = 500;
  int max_depth = -1;       // unlimited
  int min_leaf = 1;
  int max_features = 0;     // 0 = floor(sqrt(d))
  uint64_t seed = 0;
};

struct ForestModel {
  std::vector<Tree> trees;
  ForestConfig config;
  std::vector<double> importance;  // mean impurity decrease, normalized to sum 1

  double predict_p1(const std::vector<double>& x) const {
    double s = 0;
    for (const auto& t : trees) s += t.predict_p1(x);
    return s / double(trees.size());
  }
};

namespace detail {

inline double gini(double n0, double n1) {
  double n = n0 + n1;
  if (n <= 0) return 0;
  double p0 = n0 / n, p1 = n1 / n;
  return 1.0 - p0 * p0 - p1 * p1;
}

struct TreeBuilder {
  const std::vector<std::vector<double>>& X;
  const std::vector<int>& y;
  int max_features;
  int max_depth;
  int min_leaf;
  std::mt19937_64& rng;
  Tree& tree;
  std::vector<double>& importance_acc;
  size_t n_total;

  int build(std::vector<int>& idx, int depth) {
    double n0 = 0, n1 = 0;
    for (int i : idx) (y[i] ? n1 : n0) += 1;
    int node_id = int(tree.nodes.size());
    tree.nodes.push_back({-1, 0, -1, -1, n0, n1});

    double node_gini = gini(n0, n1);
    if (node_gini <= 0 || int(idx.size()) < 2 * min_leaf || idx.size() < 2 ||
        (max_depth >= 0 && depth >= max_depth))
      return node_id;

    int d = int(X[0].size());
    std::vector<int> feats(d);
    std::iota(feats.begin(), feats.end(), 0);
    for (int k = 0; k < max_features && k < d; ++k)
      std::swap(feats[k], feats[k + std::uniform_int_distribution<int>(0, d - 1 - k)(rng)]);

    int best_f = -1;
    double best_thr = 0, best_score = node_gini, best_nl0 = 0, best_nl1 = 0;
    std::vector<std::pair<double, int>> vals;
    for (int k = 0; k < max_features && k < d; ++k) {
      int f = feats[k];
      vals.clear();
      for (int i : idx) vals.push_back({X[i][f], y[i]});
      std::sort(vals.begin(), vals.end());
      double l0 = 0, l1 = 0;
      for (size_t i = 0; i + 1 < vals.size(); ++i) {
        (vals[i].second ? l1 : l0) += 1;
        if (vals[i].first == vals[i + 1].first) continue;
        double nl = l0 + l1, nr = double(vals.size()) - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        double score = (nl * gini(l0, l1) + nr * gini(n0 - l0, n1 - l1)) / double(vals.size());
        if (score < best_score - 1e-15) {
          best_score = score;
          best_f = f;
          best_thr = (vals[i].first + vals[i + 1].first) / 2.0;
          best_nl0 = l0;
          best_nl1 = l1;
        }
      }
    }
    if (best_f < 0) return node_id;

    (void)best_nl0;
    (void)best_nl1;
    importance_acc[best_f] += (double(idx.size()) / double(n_total)) * (node_gini - best_score);

    std::vector<int> left, right;
    for (int i : idx) (X[i][best_f] <= best_thr ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    int l = build(left, depth + 1);
    int r = build(right, depth + 1);
    tree.nodes[node_id].feature = best_f;
    tree.nodes[node_id].threshold = best_thr;
    tree.nodes[node_id].left = l;
    tree.nodes[node_id].right = r;
    return node_id;
  }
};

}  // namespace detail

// Bootstrap-aggregated CART trees with Gini splits and sqrt(d) feature sampling.
// Per-tree generators are derived from the master seed, so the result does not
// depend on build scheduling.
inline ForestModel train_forest(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                                ForestConfig cfg = {}) {
  if (X.size() != y.size() || X.size() < 2) throw std::invalid_argument("train_forest: need n >= 2");
  int d = int(X[0].size());
  bool has0 = false, has1 = false;
  for (int v : y) {
    if (v == 0) has0 = true;
    else if (v == 1) has1 = true;
    else throw std::invalid_argument("train_forest: labels must be 0/1");
  }
  if (!has0 || !has1) throw std::invalid_argument("train_forest: single-class input");
  if (cfg.max_features <= 0) cfg.max_features = std::max(1, int(std::sqrt(double(d))));

  ForestModel model;
  model.config = cfg;
  model.trees.resize(cfg.n_trees);
  model.importance.assign(d, 0.0);
  size_t n = X.size();
  for (int t = 0; t < cfg.n_trees; ++t) {
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + uint64_t(t) + 1);
    std::vector<int> idx(n);
    std::uniform_int_distribution<size_t> pick(0, n - 1);
    for (auto& i : idx) i = int(pick(rng));
    detail::TreeBuilder builder{X, y, cfg.max_features, cfg.max_depth, cfg.min_leaf,
                                rng, model.trees[t],  model.importance, n};
    builder.build(idx, 0);
  }
  double total = std::accumulate(model.importance.begin(), model.importance.end(), 0.0);
  if (total > 0)
    for (auto& v : model.importance) v /= total;
  return model;
}

// --- Evaluation curves ---------------------------------------------------------

struct RocPoint {
  double threshold, fpr, tpr;
};
struct PrPoint {
  double threshold, recall, precision;
};
struct MccF1Point {
  double threshold, f1, mcc_unit;  // mcc_unit = (MCC + 1) / 2
};

struct CurveReport {
  std::vector<RocPoint> roc_points;
  std::vector<PrPoint> pr_points;
  std::vector<MccF1Point> mcc_f1_points;
  double auroc = 0;
  double auprc = 0;
  double mcc_f1 = 0;
};

namespace detail {

inline void require_both_classes(const std::vector<int>& labels) {
  bool has0 = false, has1 = false;
  for (int l : labels) (l ? has1 : has0) = true;
  if (!has0 || !has1) throw std::invalid_argument("metrics: need both classes present");
}

// score groups in strictly decreasing score order: (score, n_pos, n_neg)
inline std::vector<std::tuple<double, int, int>> score_groups(const std::vector<double>& scores,
                                                              const std::vector<int>& labels) {
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  std::vector<std::tuple<double, int, int>> groups;
  for (size_t k = 0; k < order.size(); ++k) {
    double s = scores[order[k]];
    if (groups.empty() || std::get<0>(groups.back()) != s) groups.push_back({s, 0, 0});
    if (labels[order[k]])
      ++std::get<1>(groups.back());
    else
      ++std::get<2>(groups.back());
  }
  return groups;
}

}  // namespace detail

// AUROC via the rank (Mann-Whitney) formulation with midrank tie handling;
// AUPRC as average precision with step interpolation. ROC/PR points are emitted
// at every distinct score threshold, thresholds strictly decreasing.
inline CurveReport roc_pr_curves(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("roc_pr_curves: size mismatch or empty");
  detail::require_both_classes(labels);

  double n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg) += 1;

  auto groups = detail::score_groups(scores, labels);

  // rank-sum AUROC: pairs won + half ties
  double wins = 0, seen_neg = 0;
  for (auto it = groups.rbegin(); it != groups.rend(); ++it) {  // ascending score
    auto [s, p, q] = *it;
    wins += double(p) * seen_neg + 0.5 * double(p) * double(q);
    seen_neg += q;
  }
  CurveReport rep;
  rep.auroc = wins / (n_pos * n_neg);

  double tp = 0, fp = 0, ap = 0, prev_recall = 0;
  for (auto& [s, p, q] : groups) {
    tp += p;
    fp += q;
    double recall = tp / n_pos;
    double precision = tp / (tp + fp);
    rep.roc_points.push_back({s, fp / n_neg, recall});
    rep.pr_points.push_back({s, recall, precision});
    ap += (recall - prev_recall) * precision;  // step interpolation
    prev_recall = recall;
  }
  rep.auprc = ap;
  return rep;
}

// MCC-F1 curve over distinct score thresholds (prediction: score >= threshold).
// Thresholds whose confusion matrix has a zero margin (MCC undefined) are
// skipped. Summary scalar: 1 - mean distance of curve points to (1,1) / sqrt(2).
inline CurveReport mcc_f1_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("mcc_f1_curve: size mismatch or empty");
  detail::require_both_classes(labels);

  double n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg) += 1;
  auto groups = detail::score_groups(scores, labels);

  CurveReport rep;
  double tp = 0, fp = 0, dist_sum = 0;
  for (auto& [s, p, q] : groups) {
    tp += p;
    fp += q;
    double fn = n_pos - tp, tn = n_neg - fp;
    double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom <= 0) continue;
    double mcc = (tp * tn - fp * fn) / std::sqrt(denom);
    double f1 = (2 * tp + fp + fn) > 0 ? 2 * tp / (2 * tp + fp + fn) : 0;
    double mcc_unit = (mcc + 1.0) / 2.0;
    rep.mcc_f1_points.push_back({s, f1, mcc_unit});
    dist_sum += std::hypot(1.0 - f1, 1.0 - mcc_unit);
  }
  if (rep.mcc_f1_points.empty())
    throw std::invalid_argument("mcc_f1_curve: no threshold yields a defined MCC");
  rep.mcc_f1 = 1.0 - (dist_sum / double(rep.mcc_f1_points.size())) / std::sqrt(2.0);
  return rep;
}

// --- Mann-Whitney U --------------------------------------------------------------

enum class Alternative { two_sided, less, greater };  // direction refers to sample a

struct MannWhitneyResult {
  double U;  // for sample a: pairs a > b, ties half
  double p_value;
  bool exact;
};

namespace detail {

inline double u_statistic(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0;
  for (double x : a)
    for (double y : b) {
      if (x > y)
        u += 1;
      else if (x == y)
        u += 0.5;
    }
  return u;
}

}  // namespace detail

// Exact p by enumeration of all C(n+m, n) group assignments when n+m <= 20
// (valid with ties); otherwise the normal approximation with tie and continuity
// corrections.
inline MannWhitneyResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b,
                                        Alternative alt = Alternative::greater) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney_u: empty sample");
  size_t n = a.size(), m = b.size();
  double U = detail::u_statistic(a, b);
  double mean_u = double(n) * double(m) / 2.0;

  MannWhitneyResult res{U, 1.0, n + m <= 20};
  if (res.exact) {
    std::vector<double> pool(a);
    pool.insert(pool.end(), b.begin(), b.end());
    std::sort(pool.begin(), pool.end());
    size_t N = pool.size();
    std::vector<int> comb(n);
    std::iota(comb.begin(), comb.end(), 0);
    uint64_t total = 0, ge = 0, le = 0, extreme = 0;
    double eps = 1e-12;
    while (true) {
      std::vector<double> xa, xb;
      std::vector<bool> in_a(N, false);
      for (int i : comb) in_a[i] = true;
      for (size_t i = 0; i < N; ++i) (in_a[i] ? xa : xb).push_back(pool[i]);
      double u = detail::u_statistic(xa, xb);
      ++total;
      if (u >= U - eps) ++ge;
      if (u <= U + eps) ++le;
      if (std::abs(u - mean_u) >= std::abs(U - mean_u) - eps) ++extreme;
      // next combination
      int i = int(n) - 1;
      while (i >= 0 && comb[i] == int(N - n + i)) --i;
      if (i < 0) break;
      ++comb[i];
      for (size_t j = i + 1; j < n; ++j) comb[j] = comb[j - 1] + 1;
    }
    switch (alt) {
      case Alternative::greater: res.p_value = double(ge) / double(total); break;
      case Alternative::less: res.p_value = double(le) / double(total); break;
      case Alternative::two_sided: res.p_value = double(extreme) / double(total); break;
    }
    return res;
  }

  // normal approximation
  std::vector<double> pool(a);
  pool.insert(pool.end(), b.begin(), b.end());
  std::sort(pool.begin(), pool.end());
  double N = double(pool.size());
  double tie_term = 0;
  for (size_t i = 0; i < pool.size();) {
    size_t j = i;
    while (j < pool.size() && pool[j] == pool[i]) ++j;
    double t = double(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  double var_u = (double(n) * double(m) / 12.0) * ((N + 1.0) - tie_term / (N * (N - 1.0)));
  if (var_u <= 0) {  // all values tied
    res.p_value = 1.0;
    return res;
  }
  double sd = std::sqrt(var_u);
  auto phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  switch (alt) {
    case Alternative::greater:
      res.p_value = 1.0 - phi((U - mean_u - 0.5) / sd);
      break;
    case Alternative::less:
      res.p_value = phi((U - mean_u + 0.5) / sd);
      break;
    case Alternative::two_sided: {
      double z = (std::abs(U - mean_u) - 0.5) / sd;
      res.p_value = std::min(1.0, 2.0 * (1.0 - phi(std::max(0.0, z))));
      break;
    }
  }
  return res;
}

// --- Feature-group ablation grid ---------------------------------------------------

struct AblationRow {
  std::string name;
  std::vector<int> columns;
};

// The six feature-group subsets plus the full set, in a fixed row order.
inline std::vector<AblationRow> ablation_rows() {
  return {
      {"all", feature_group_columns(true, true, true)},
      {"intensity", feature_group_columns(false, true, false)},
      {"spatial", feature_group_columns(false, false, true)},
      {"morphology", feature_group_columns(true, false, false)},
      {"morphology_spatial", feature_group_columns(true, false, true)},
      {"spatial_intensity", feature_group_columns(false, true, true)},
      {"morphology_intensity", feature_group_columns(true, true, false)},
  };
}

struct AblationResult {
  std::string name;
  int n_features = 0;
  CurveReport report;
};

// Trains a forest on each feature-group column subset and evaluates it on the given
// test split.
inline std::vector<AblationResult> ablation_grid(const std::vector<std::vector<double>>& X_train,
                                                 const std::vector<int>& y_train,
                                                 const std::vector<std::vector<double>>& X_test,
                                                 const std::vector<int>& y_test,
                                                 ForestConfig cfg = {}) {
  if (X_train.empty() || X_train[0].size() != 75)
    throw std::invalid_argument("ablation_grid: expected the 75-column feature matrix");
  auto select = [](const std::vector<std::vector<double>>& X, const std::vector<int>& cols) {
    std::vector<std::vector<double>> out(X.size());
    for (size_t i = 0; i < X.size(); ++i) {
      out[i].reserve(cols.size());
      for (int c : cols) out[i].push_back(X[i][c]);
    }
    return out;
  };
  std::vector<AblationResult> results;
  for (const auto& row : ablation_rows()) {
    auto model = train_forest(select(X_train, row.columns), y_train, cfg);
    auto Xt = select(X_test, row.columns);
    std::vector<double> scores(Xt.size());
    for (size_t i = 0; i < Xt.size(); ++i) scores[i] = model.predict_p1(Xt[i]);
    AblationResult r;
    r.name = row.name;
    r.n_features = int(row.columns.size());
    r.report = roc_pr_curves(scores, y_test);
    auto mcc = mcc_f1_curve(scores, y_test);
    r.report.mcc_f1_points = std::move(mcc.mcc_f1_points);
    r.report.mcc_f1 = mcc.mcc_f1;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace histomorph
