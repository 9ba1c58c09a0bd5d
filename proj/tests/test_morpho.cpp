#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "histomorph/morpho.hpp"
#include "histomorph/synth.hpp"

using namespace histomorph;

namespace {

// rasterize one labeled region into a mask
ImageLabel mask_from(const std::set<std::pair<int, int>>& pixels, uint16_t label = 1) {
  ImageLabel m(kPatchSize, kPatchSize, 0);
  for (auto [x, y] : pixels) m.at(x, y) = label;
  return m;
}

Patch gray_patch() {
  Patch p;
  p.pixels = ImageRGB(kPatchSize, kPatchSize, 100);
  return p;
}

// brute-force Delaunay oracle: every triple whose circumcircle is empty, O(n^4)
std::set<std::array<int, 3>> delaunay_oracle(const std::vector<std::pair<double, double>>& pts) {
  std::set<std::array<int, 3>> tris;
  int n = int(pts.size());
  auto circum = [&](int i, int j, int k, double& cx, double& cy, double& r2) {
    double ax = pts[i].first, ay = pts[i].second;
    double bx = pts[j].first, by = pts[j].second;
    double cx_ = pts[k].first, cy_ = pts[k].second;
    double d = 2 * (ax * (by - cy_) + bx * (cy_ - ay) + cx_ * (ay - by));
    if (std::abs(d) < 1e-12) return false;
    double a2 = ax * ax + ay * ay, b2 = bx * bx + by * by, c2 = cx_ * cx_ + cy_ * cy_;
    cx = (a2 * (by - cy_) + b2 * (cy_ - ay) + c2 * (ay - by)) / d;
    cy = (a2 * (cx_ - bx) + b2 * (ax - cx_) + c2 * (bx - ax)) / d;
    r2 = (ax - cx) * (ax - cx) + (ay - cy) * (ay - cy);
    return true;
  };
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      for (int k = j + 1; k < n; ++k) {
        double cx, cy, r2;
        if (!circum(i, j, k, cx, cy, r2)) continue;
        bool empty = true;
        for (int m = 0; m < n && empty; ++m) {
          if (m == i || m == j || m == k) continue;
          double d2 = (pts[m].first - cx) * (pts[m].first - cx) +
                      (pts[m].second - cy) * (pts[m].second - cy);
          if (d2 < r2 - 1e-9) empty = false;
        }
        if (empty) tris.insert({i, j, k});
      }
  return tris;
}

std::set<std::array<int, 3>> canonical(const std::vector<Triangle>& tris) {
  std::set<std::array<int, 3>> out;
  for (const auto& t : tris) {
    std::array<int, 3> a{t.a, t.b, t.c};
    std::sort(a.begin(), a.end());
    out.insert(a);
  }
  return out;
}

// direct recomputation oracle for the binned statistics
HistogramStats stats_oracle(const std::vector<double>& values) {
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  std::vector<double> p(10, 0.0), centers(10, lo);
  if (hi - lo >= 1e-12) {
    double w = (hi - lo) / 10;
    for (int b = 0; b < 10; ++b) centers[b] = lo + (b + 0.5) * w;
    for (double v : values) ++p[std::min(9, int((v - lo) / w))];
    for (auto& q : p) q /= double(values.size());
  } else {
    p[0] = 1.0;
  }
  HistogramStats s{};
  for (int b = 0; b < 10; ++b) s.mean += p[b] * centers[b];
  double m2 = 0, m3 = 0, m4 = 0;
  for (int b = 0; b < 10; ++b) {
    double d = centers[b] - s.mean;
    m2 += p[b] * d * d;
    m3 += p[b] * d * d * d;
    m4 += p[b] * d * d * d * d;
    if (p[b] > 0) s.entropy -= p[b] * std::log(p[b]);
  }
  s.stddev = std::sqrt(m2);
  s.skewness = s.stddev > 1e-12 ? m3 / (m2 * s.stddev) : 0.0;
  s.kurtosis = s.stddev > 1e-12 ? m4 / (m2 * m2) : 0.0;
  return s;
}

}  // namespace

TEST_CASE("disk morphometry: area, circularity, eccentricity, solidity") {
  const double r = 20.5;
  const int cx = 100, cy = 120;
  std::set<std::pair<int, int>> px;
  for (int y = 0; y < kPatchSize; ++y)
    for (int x = 0; x < kPatchSize; ++x) {
      double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r) px.insert({x, y});
    }
  auto nuclei = extract_nuclei(gray_patch(), mask_from(px));
  REQUIRE(nuclei.size() == 1);
  const auto& n = nuclei[0];
  CHECK(std::abs(n.area - std::numbers::pi * r * r) / (std::numbers::pi * r * r) < 0.05);
  CHECK(n.circularity >= 0.95);
  CHECK(n.circularity <= 1.0);
  CHECK(n.axis_ratio == doctest::Approx(1.0).epsilon(0.05));
  CHECK(n.eccentricity < 0.3);
  // pixel-corner hull circumscribes the digitized disk (~(r+0.5)/r inflation)
  CHECK(n.solidity >= 0.95);
  CHECK(n.solidity <= 1.0);
  CHECK(n.centroid_x == doctest::Approx(cx).epsilon(0.01));
  CHECK(n.centroid_y == doctest::Approx(cy).epsilon(0.01));
  CHECK(n.major_axis == doctest::Approx(2 * r).epsilon(0.05));
}

TEST_CASE("rectangle morphometry: axis ratio and solidity") {
  std::set<std::pair<int, int>> px;
  for (int y = 50; y < 60; ++y)
    for (int x = 30; x < 70; ++x) px.insert({x, y});
  auto nuclei = extract_nuclei(gray_patch(), mask_from(px));
  REQUIRE(nuclei.size() == 1);
  const auto& n = nuclei[0];
  CHECK(n.area == doctest::Approx(400.0));
  CHECK(std::abs(n.axis_ratio - 4.0) / 4.0 < 0.10);
  CHECK(n.solidity >= 0.98);
  CHECK(n.solidity <= 1.0 + 1e-12);
  CHECK(n.major_axis > n.minor_axis);
}

TEST_CASE("regions below the area floor are dropped and reported") {
  std::set<std::pair<int, int>> big, small;
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 30; ++x) big.insert({x, y});
  for (int y = 100; y < 103; ++y)
    for (int x = 100; x < 103; ++x) small.insert({x, y});  // 9 px < floor
  ImageLabel m(kPatchSize, kPatchSize, 0);
  for (auto [x, y] : big) m.at(x, y) = 1;
  for (auto [x, y] : small) m.at(x, y) = 2;
  NucleiReport report;
  auto nuclei = extract_nuclei(gray_patch(), m, &report);
  CHECK(nuclei.size() == 1);
  CHECK(report.n_skipped_small == 1);
}

TEST_CASE("intensity features read the patch under the label") {
  Patch p = gray_patch();
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 30; ++x) {
      p.pixels.at(x, y, 0) = 30;
      p.pixels.at(x, y, 1) = 60;
      p.pixels.at(x, y, 2) = 200;
    }
  std::set<std::pair<int, int>> px;
  for (int y = 10; y < 30; ++y)
    for (int x = 10; x < 30; ++x) px.insert({x, y});
  auto nuclei = extract_nuclei(p, mask_from(px));
  REQUIRE(nuclei.size() == 1);
  CHECK(nuclei[0].mean_r == doctest::Approx(30.0));
  CHECK(nuclei[0].mean_g == doctest::Approx(60.0));
  CHECK(nuclei[0].mean_b == doctest::Approx(200.0));
}

TEST_CASE("triangulation matches the empty-circumcircle brute force") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uni(0.0, 512.0);
  for (int trial = 0; trial < 25; ++trial) {
    int n = 4 + int(rng() % 30);
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < n; ++i) pts.push_back({uni(rng), uni(rng)});
    auto got = canonical(delaunay_triangulate(pts));
    auto want = delaunay_oracle(pts);
    CHECK(got == want);
  }
}

TEST_CASE("triangulation degenerate inputs") {
  CHECK(delaunay_triangulate({}).empty());
  CHECK(delaunay_triangulate({{1, 1}, {2, 2}}).empty());
  CHECK(delaunay_triangulate({{0, 0}, {1, 1}, {2, 2}, {3, 3}}).empty());  // collinear
  // duplicates collapse onto the first occurrence
  auto tris = delaunay_triangulate({{0, 0}, {10, 0}, {0, 10}, {0, 0}});
  CHECK(canonical(tris) == std::set<std::array<int, 3>>{{0, 1, 2}});
}

TEST_CASE("spatial features from the triangulation") {
  std::vector<NucleusRecord> recs(4);
  // unit square: triangulated into two triangles sharing one diagonal
  double xy[4][2] = {{0, 0}, {100, 0}, {0, 100}, {100, 100}};
  for (int i = 0; i < 4; ++i) {
    recs[i].nucleus_id = i + 1;
    recs[i].centroid_x = xy[i][0];
    recs[i].centroid_y = xy[i][1];
  }
  REQUIRE(delaunay_features(recs));
  int total_degree = 0;
  for (const auto& r : recs) {
    CHECK(r.min_dist >= 100.0 - 1e-9);
    CHECK(r.max_dist <= 100.0 * std::sqrt(2.0) + 1e-9);
    total_degree += r.degree;
  }
  // 5 unique edges (square sides + one diagonal), each counted at both ends
  CHECK(total_degree == 10);
}

TEST_CASE("degenerate point sets zero the spatial features") {
  std::vector<NucleusRecord> recs(2);
  recs[0].centroid_x = 1;
  recs[1].centroid_x = 5;
  CHECK_FALSE(delaunay_features(recs));
  for (const auto& r : recs) {
    CHECK(r.degree == 0);
    CHECK(r.mean_dist == 0.0);
  }
}

TEST_CASE("binned statistics match a direct recomputation to 1e-9") {
  std::mt19937_64 rng(5);
  std::lognormal_distribution<double> ln(3.0, 0.7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> vals(5 + rng() % 200);
    for (auto& v : vals) v = ln(rng);
    auto got = histogram_stats(vals);
    auto want = stats_oracle(vals);
    CHECK(std::abs(got.mean - want.mean) < 1e-9);
    CHECK(std::abs(got.stddev - want.stddev) < 1e-9);
    CHECK(std::abs(got.entropy - want.entropy) < 1e-9);
    CHECK(std::abs(got.skewness - want.skewness) < 1e-9);
    CHECK(std::abs(got.kurtosis - want.kurtosis) < 1e-9);
  }
}

TEST_CASE("uniform histogram entropy equals ln 10; constant values degenerate cleanly") {
  std::vector<double> vals;
  for (int b = 0; b < 10; ++b)
    for (int i = 0; i < 7; ++i) vals.push_back(b + 0.5);  // 7 values per bin
  auto s = histogram_stats(vals);
  CHECK(std::abs(s.entropy - std::log(10.0)) < 1e-9);

  auto c = histogram_stats({4.2, 4.2, 4.2});
  CHECK(c.mean == doctest::Approx(4.2));
  CHECK(c.stddev == 0.0);
  CHECK(c.entropy == 0.0);
  CHECK(c.skewness == 0.0);
  CHECK(c.kurtosis == 0.0);
}

TEST_CASE("feature vector layout: 75 columns, feature-major, named groups") {
  CHECK(kNumPatchFeatures == 75);
  auto names = patch_feature_names();
  REQUIRE(names.size() == 75);
  CHECK(names[0] == "morph_minor_axis_mean");
  CHECK(names[4] == "morph_minor_axis_kurt");
  CHECK(names[5] == "morph_major_axis_mean");
  CHECK(names[15 * 5 - 1] == "spat_degree_kurt");
  CHECK(feature_group_columns(true, false, false).size() == 40);
  CHECK(feature_group_columns(false, true, false).size() == 15);
  CHECK(feature_group_columns(false, false, true).size() == 20);
  CHECK(feature_group_columns(true, true, true).size() == 75);

  // aggregation places each stat at featureIndex*5 + statIndex
  std::vector<NucleusRecord> recs(12);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 12; ++i) {
    recs[i].nucleus_id = i + 1;
    recs[i].area = 50 + double(rng() % 100);
    recs[i].mean_r = double(rng() % 256);
    recs[i].centroid_x = double(rng() % 512);
    recs[i].centroid_y = double(rng() % 512);
  }
  delaunay_features(recs);
  auto fv = aggregate_patch(recs, "p1", "s1");
  CHECK(fv.n_nuclei == 12);
  std::vector<double> areas;
  for (const auto& r : recs) areas.push_back(r.area);
  auto s = histogram_stats(areas);
  int f_area = 3;  // morph_area
  CHECK(fv.values[f_area * 5 + 0] == doctest::Approx(s.mean).epsilon(1e-12));
  CHECK(fv.values[f_area * 5 + 2] == doctest::Approx(s.entropy).epsilon(1e-12));
}

TEST_CASE("synthetic nuclei match their planted geometry") {
  SynthSpec spec;
  spec.seed = 21;
  spec.n_nuclei = 25;
  auto sp = generate_patch(spec);
  auto nuclei = extract_nuclei(sp.patch, sp.mask);
  REQUIRE(int(nuclei.size()) == spec.n_nuclei);
  // truth records are in label order, as are the extracted ones
  for (size_t i = 0; i < nuclei.size(); ++i) {
    const auto& got = nuclei[i];
    const auto& want = sp.truth[i];
    CHECK(std::abs(got.area - want.area) / want.area < 0.10);
    CHECK(std::abs(got.major_axis - want.major_axis) / want.major_axis < 0.15);
  }
}
