#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "histomorph/learn.hpp"

using namespace histomorph;

namespace {

// pair-counting oracle: P(score_pos > score_neg) + 0.5 P(tie)
double auroc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0;
  long long pairs = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j])
        wins += 1.0;
      else if (s[i] == s[j])
        wins += 0.5;
    }
  return wins / double(pairs);
}

// average precision oracle over descending distinct thresholds
double auprc_oracle(std::vector<double> s, std::vector<int> y) {
  std::vector<size_t> idx(s.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return s[a] > s[b]; });
  double total_pos = 0;
  for (int v : y) total_pos += v;
  double ap = 0, tp = 0, prev_recall = 0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j < idx.size() && s[idx[j]] == s[idx[i]]) {
      tp += y[idx[j]];
      ++j;
    }
    double recall = tp / total_pos;
    double precision = tp / double(j);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

// permutation oracle for the Mann-Whitney test
double permutation_p(const std::vector<double>& a, const std::vector<double>& b, int n_perm,
                     uint64_t seed) {
  auto u_stat = [](const std::vector<double>& x, const std::vector<double>& y) {
    double u = 0;
    for (double xi : x)
      for (double yi : y) u += xi > yi ? 1.0 : (xi == yi ? 0.5 : 0.0);
    return u;
  };
  double mu = double(a.size()) * double(b.size()) / 2.0;
  double observed = std::abs(u_stat(a, b) - mu);
  std::vector<double> pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  std::mt19937_64 rng(seed);
  int hits = 0;
  for (int p = 0; p < n_perm; ++p) {
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<double> pa(pool.begin(), pool.begin() + a.size());
    std::vector<double> pb(pool.begin() + a.size(), pool.end());
    if (std::abs(u_stat(pa, pb) - mu) >= observed - 1e-12) ++hits;
  }
  return double(hits) / n_perm;
}

}  // namespace

TEST_CASE("auroc equals the pair-counting oracle to 1e-12") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    size_t n = 10 + rng() % 80;
    std::vector<double> s(n);
    std::vector<int> y(n);
    bool ties = trial % 2;
    for (size_t i = 0; i < n; ++i) {
      y[i] = int(rng() % 2);
      s[i] = ties ? double(rng() % 8) : g(rng) + y[i];
    }
    // ensure both classes present
    y[0] = 0;
    y[1] = 1;
    auto rep = roc_pr_curves(s, y);
    CHECK(std::abs(rep.auroc - auroc_oracle(s, y)) < 1e-12);
    CHECK(std::abs(rep.auprc - auprc_oracle(s, y)) < 1e-12);
  }
}

TEST_CASE("perfect and chance edge cases are exact") {
  std::vector<double> s{0.9, 0.8, 0.2, 0.1};
  std::vector<int> y{1, 1, 0, 0};
  auto rep = roc_pr_curves(s, y);
  CHECK(rep.auroc == 1.0);
  CHECK(rep.auprc == 1.0);

  std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
  auto rep2 = roc_pr_curves(flat, y);
  CHECK(rep2.auroc == 0.5);

  std::vector<double> inv{0.1, 0.2, 0.8, 0.9};
  CHECK(roc_pr_curves(inv, y).auroc == 0.0);
}

TEST_CASE("roc curve endpoints and monotonicity") {
  std::vector<double> s{0.9, 0.7, 0.7, 0.3, 0.2};
  std::vector<int> y{1, 0, 1, 1, 0};
  auto rep = roc_pr_curves(s, y);
  REQUIRE(!rep.roc_points.empty());
  CHECK(rep.roc_points.back().tpr == 1.0);
  CHECK(rep.roc_points.back().fpr == 1.0);
  for (size_t i = 1; i < rep.roc_points.size(); ++i) {
    CHECK(rep.roc_points[i].tpr >= rep.roc_points[i - 1].tpr);
    CHECK(rep.roc_points[i].fpr >= rep.roc_points[i - 1].fpr);
    CHECK(rep.roc_points[i].threshold < rep.roc_points[i - 1].threshold);
  }
}

TEST_CASE("mcc-f1 summary matches its distance definition and orders by quality") {
  std::vector<double> s{0.9, 0.8, 0.7, 0.3, 0.2, 0.1};
  std::vector<int> y{1, 1, 1, 0, 0, 0};
  auto rep = mcc_f1_curve(s, y);
  // summary = 1 - mean distance of curve points to (1,1), normalized by sqrt(2)
  double mean_dist = 0;
  for (const auto& p : rep.mcc_f1_points)
    mean_dist += std::hypot(1.0 - p.f1, 1.0 - p.mcc_unit);
  mean_dist /= double(rep.mcc_f1_points.size());
  CHECK(rep.mcc_f1 == doctest::Approx(1.0 - mean_dist / std::sqrt(2.0)).epsilon(1e-12));
  // the midpoint threshold of a perfect ranking sits exactly at (1,1)
  bool has_apex = false;
  for (const auto& p : rep.mcc_f1_points)
    if (p.f1 == doctest::Approx(1.0) && p.mcc_unit == doctest::Approx(1.0)) has_apex = true;
  CHECK(has_apex);
  for (const auto& p : rep.mcc_f1_points) {
    CHECK(p.mcc_unit >= 0.0);
    CHECK(p.mcc_unit <= 1.0);
    CHECK(p.f1 >= 0.0);
    CHECK(p.f1 <= 1.0);
  }

  std::mt19937_64 rng(23);
  std::vector<double> noisy(200);
  std::vector<int> yn(200);
  std::normal_distribution<double> g(0, 1);
  for (int i = 0; i < 200; ++i) {
    yn[i] = int(rng() % 2);
    noisy[i] = g(rng) + 0.3 * yn[i];
  }
  auto noisy_rep = mcc_f1_curve(noisy, yn);
  CHECK(noisy_rep.mcc_f1 < rep.mcc_f1);
}

TEST_CASE("chance-level scores put unit-normalized mcc near 0.5 across thresholds") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> s(10000);
  std::vector<int> y(10000);
  for (size_t i = 0; i < s.size(); ++i) {
    s[i] = uni(rng);
    y[i] = int(i % 2);
  }
  auto rep = mcc_f1_curve(s, y);
  // away from the extremes the confusion matrix is well populated
  for (const auto& p : rep.mcc_f1_points)
    if (p.threshold > 0.1 && p.threshold < 0.9) {
      CHECK(p.mcc_unit > 0.45);
      CHECK(p.mcc_unit < 0.55);
    }
}

TEST_CASE("exact rank test: 3-vs-3 extreme split one-sided p = 0.05") {
  std::vector<double> hi{4, 5, 6}, lo{1, 2, 3};
  auto res = mann_whitney_u(hi, lo, Alternative::greater);
  CHECK(res.exact);
  CHECK(res.U == doctest::Approx(9.0));
  CHECK(res.p_value == doctest::Approx(0.05).epsilon(1e-12));  // 1 / C(6,3)
  auto two = mann_whitney_u(hi, lo, Alternative::two_sided);
  CHECK(two.p_value == doctest::Approx(0.10).epsilon(1e-12));
  auto less = mann_whitney_u(hi, lo, Alternative::less);
  CHECK(less.p_value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exact rank test handles ties by enumeration") {
  std::vector<double> a{1, 2, 2, 5}, b{2, 3, 4};
  auto res = mann_whitney_u(a, b, Alternative::two_sided);
  CHECK(res.exact);
  CHECK(res.p_value > 0.0);
  CHECK(res.p_value <= 1.0);
  // symmetric: swapping samples mirrors U and preserves the two-sided p
  auto swapped = mann_whitney_u(b, a, Alternative::two_sided);
  CHECK(res.p_value == doctest::Approx(swapped.p_value).epsilon(1e-12));
  CHECK(res.U + swapped.U == doctest::Approx(double(a.size() * b.size())));
}

TEST_CASE("large-sample rank test agrees with a permutation oracle within 10%") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g0(0.0, 1.0), g1(0.45, 1.0);
  std::vector<double> a(50), b(50);
  for (auto& v : a) v = g1(rng);
  for (auto& v : b) v = g0(rng);
  auto res = mann_whitney_u(a, b, Alternative::two_sided);
  CHECK_FALSE(res.exact);
  double p_perm = permutation_p(a, b, 100000, 77);
  CHECK(std::abs(res.p_value - p_perm) / p_perm < 0.10);
}

TEST_CASE("forest learns a separable problem and is seed-deterministic") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> g(0, 1);
  std::vector<std::vector<double>> X;
  std::vector<int> y;
  for (int i = 0; i < 300; ++i) {
    int label = i % 2;
    std::vector<double> x(10);
    for (auto& v : x) v = g(rng);
    x[3] += 3.0 * label;  // single informative feature
    X.push_back(x);
    y.push_back(label);
  }
  ForestConfig cfg;
  cfg.n_trees = 100;
  cfg.seed = 5;
  auto model = train_forest(X, y, cfg);
  REQUIRE(int(model.trees.size()) == cfg.n_trees);

  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    int label = i % 2;
    std::vector<double> x(10);
    for (auto& v : x) v = g(rng);
    x[3] += 3.0 * label;
    scores.push_back(model.predict_p1(x));
    labels.push_back(label);
  }
  CHECK(roc_pr_curves(scores, labels).auroc > 0.95);

  double imp_sum = 0;
  for (double v : model.importance) imp_sum += v;
  CHECK(imp_sum == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(model.importance[3] ==
        *std::max_element(model.importance.begin(), model.importance.end()));

  auto model2 = train_forest(X, y, cfg);
  for (const auto& x : X) CHECK(model.predict_p1(x) == model2.predict_p1(x));
  cfg.seed = 6;
  auto model3 = train_forest(X, y, cfg);
  bool differs = false;
  for (const auto& x : X)
    if (model.predict_p1(x) != model3.predict_p1(x)) differs = true;
  CHECK(differs);
}

TEST_CASE("ablation rows cover the documented subset sizes in order") {
  auto rows = ablation_rows();
  REQUIRE(rows.size() == 7);
  std::vector<std::pair<std::string, size_t>> want{
      {"all", 75},        {"intensity", 15},          {"spatial", 20},
      {"morphology", 40}, {"morphology_spatial", 60}, {"spatial_intensity", 35},
      {"morphology_intensity", 55}};
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].name == want[i].first);
    CHECK(rows[i].columns.size() == want[i].second);
  }
}

TEST_CASE("ablation grid trains per subset and the full set dominates a lone group") {
  std::mt19937_64 rng(53);
  std::normal_distribution<double> g(0, 1);
  auto sample = [&](int label) {
    std::vector<double> x(75);
    for (auto& v : x) v = g(rng);
    // plant signal in a morphology column and a spatial column
    x[10] += 2.0 * label;
    x[60] += 2.0 * label;
    return x;
  };
  std::vector<std::vector<double>> Xtr, Xte;
  std::vector<int> ytr, yte;
  for (int i = 0; i < 200; ++i) {
    Xtr.push_back(sample(i % 2));
    ytr.push_back(i % 2);
  }
  for (int i = 0; i < 120; ++i) {
    Xte.push_back(sample(i % 2));
    yte.push_back(i % 2);
  }
  ForestConfig cfg;
  cfg.n_trees = 40;
  cfg.seed = 9;
  auto grid = ablation_grid(Xtr, ytr, Xte, yte, cfg);
  REQUIRE(grid.size() == 7);
  double full = 0, intensity_only = 0;
  for (const auto& r : grid) {
    if (r.name == "all") full = r.report.auroc;
    if (r.name == "intensity") intensity_only = r.report.auroc;
    CHECK(r.report.mcc_f1 > 0.0);
  }
  CHECK(full > 0.9);
  CHECK(intensity_only < full);  // intensity columns carry no planted signal
}
