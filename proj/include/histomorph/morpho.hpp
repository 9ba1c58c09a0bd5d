#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "histomorph/raster.hpp"

namespace histomorph {

struct NucleusRecord {
  int nucleus_id = 0;
  double centroid_x = 0, centroid_y = 0;
  double minor_axis = 0, major_axis = 0, axis_ratio = 1;
  double area = 0, perimeter = 0;
  double circularity = 1, eccentricity = 0, solidity = 1;
  double mean_r = 0, mean_g = 0, mean_b = 0;
  double min_dist = 0, max_dist = 0, mean_dist = 0;
  int degree = 0;
};

constexpr int kNucleusAreaFloor = 10;  // px, below which labels count as noise

namespace detail {

// Chain-code boundary length with the Vossepoel-Smeulders corner correction.
// pts are the pixels of one connected label.
inline double traced_perimeter(const std::vector<std::pair<int, int>>& pts) {
  int min_x = pts[0].first, max_x = pts[0].first, min_y = pts[0].second, max_y = pts[0].second;
  for (auto [x, y] : pts) {
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  int w = max_x - min_x + 3, h = max_y - min_y + 3;  // 1px background border
  std::vector<uint8_t> bm(size_t(w) * h, 0);
  auto in = [&](int x, int y) { return bm[size_t(y) * w + x] != 0; };
  for (auto [x, y] : pts) bm[size_t(y - min_y + 1) * w + (x - min_x + 1)] = 1;

  // start: topmost-leftmost pixel, approached from the west
  int sx = -1, sy = -1;
  for (int y = 1; y < h - 1 && sx < 0; ++y)
    for (int x = 1; x < w - 1; ++x)
      if (in(x, y)) {
        sx = x;
        sy = y;
        break;
      }

  static constexpr int dx8[8] = {1, 1, 0, -1, -1, -1, 0, 1};
  static constexpr int dy8[8] = {0, 1, 1, 1, 0, -1, -1, -1};

  // Moore-neighbor tracing, clockwise scan starting after the backtrack direction.
  std::vector<int> chain;
  int cx = sx, cy = sy;
  int back_dir = 4;  // backtrack lies to the west of the start
  size_t guard = pts.size() * 8 + 16;
  do {
    int found = -1;
    for (int k = 1; k <= 8; ++k) {
      int dir = (back_dir + k) & 7;
      if (in(cx + dx8[dir], cy + dy8[dir])) {
        found = dir;
        break;
      }
    }
    if (found < 0) break;  // isolated pixel
    chain.push_back(found);
    cx += dx8[found];
    cy += dy8[found];
    back_dir = (found + 4) & 7;  // scan resumes just past the incoming edge
  } while ((cx != sx || cy != sy) && chain.size() < guard);

  if (chain.empty()) return 3.55;  // single pixel
  size_t n_even = 0, n_odd = 0, n_corner = 0;
  for (size_t i = 0; i < chain.size(); ++i) {
    if (chain[i] & 1)
      ++n_odd;
    else
      ++n_even;
    if (chain[i] != chain[(i + chain.size() - 1) % chain.size()]) ++n_corner;
  }
  return 0.980 * double(n_even) + 1.406 * double(n_odd) - 0.091 * double(n_corner);
}

// Monotone-chain convex hull area over the pixel-square corner points.
inline double hull_area(const std::vector<std::pair<int, int>>& pts) {
  std::vector<std::pair<double, double>> c;
  c.reserve(pts.size() * 4);
  for (auto [x, y] : pts) {
    c.push_back({double(x), double(y)});
    c.push_back({double(x) + 1, double(y)});
    c.push_back({double(x), double(y) + 1});
    c.push_back({double(x) + 1, double(y) + 1});
  }
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  if (c.size() < 3) return 0;
  auto cross = [](const auto& o, const auto& a, const auto& b) {
    return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
  };
  std::vector<std::pair<double, double>> hull(2 * c.size());
  size_t k = 0;
  for (const auto& p : c) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  size_t lower = k + 1;
  for (auto it = c.rbegin(); it != c.rend(); ++it) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], *it) <= 0) --k;
    hull[k++] = *it;
  }
  hull.resize(k - 1);
  double area = 0;
  for (size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    area += a.first * b.second - b.first * a.second;
  }
  return std::abs(area) / 2.0;
}

}  // namespace detail

struct NucleiReport {
  int n_skipped_small = 0;
};

// Per-label region properties from a 16-bit label mask over a (color-normalized)
// patch. Ellipse axes come from the moment-equivalent ellipse of the label's
// pixel coordinates, with the 1/12 per-pixel variance term so thin regions keep
// a positive minor axis.
inline std::vector<NucleusRecord> extract_nuclei(const Patch& patch, const ImageLabel& mask,
                                                 NucleiReport* report = nullptr) {
  if (mask.width != patch.pixels.width || mask.height != patch.pixels.height)
    throw std::invalid_argument("extract_nuclei: mask shape mismatch");

  std::map<uint16_t, std::vector<std::pair<int, int>>> by_label;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (uint16_t l = mask.at(x, y); l != 0) by_label[l].push_back({x, y});

  std::vector<NucleusRecord> out;
  for (const auto& [label, pts] : by_label) {
    if (pts.size() < kNucleusAreaFloor) {
      if (report) ++report->n_skipped_small;
      continue;
    }
    NucleusRecord rec;
    rec.nucleus_id = label;
    rec.area = double(pts.size());

    double mx = 0, my = 0;
    double sr = 0, sg = 0, sb = 0;
    for (auto [x, y] : pts) {
      mx += x + 0.5;
      my += y + 0.5;
      sr += patch.pixels.at(x, y, 0);
      sg += patch.pixels.at(x, y, 1);
      sb += patch.pixels.at(x, y, 2);
    }
    double n = rec.area;
    mx /= n;
    my /= n;
    rec.centroid_x = mx;
    rec.centroid_y = my;
    rec.mean_r = sr / n;
    rec.mean_g = sg / n;
    rec.mean_b = sb / n;

    double sxx = 0, syy = 0, sxy = 0;
    for (auto [x, y] : pts) {
      double dx = x + 0.5 - mx, dy = y + 0.5 - my;
      sxx += dx * dx;
      syy += dy * dy;
      sxy += dx * dy;
    }
    sxx = sxx / n + 1.0 / 12.0;
    syy = syy / n + 1.0 / 12.0;
    sxy /= n;
    double tr = sxx + syy;
    double disc = std::sqrt(std::max(0.0, (sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy));
    double l1 = (tr + disc) / 2.0, l2 = std::max((tr - disc) / 2.0, 1e-12);
    rec.major_axis = 4.0 * std::sqrt(l1);
    rec.minor_axis = 4.0 * std::sqrt(l2);
    rec.axis_ratio = rec.major_axis / rec.minor_axis;
    rec.eccentricity = std::sqrt(std::max(0.0, 1.0 - l2 / l1));

    rec.perimeter = detail::traced_perimeter(pts);
    rec.circularity =
        std::min(1.0, 4.0 * std::numbers::pi * rec.area / (rec.perimeter * rec.perimeter));
    double hull = detail::hull_area(pts);
    rec.solidity = hull > 0 ? std::min(1.0, rec.area / hull) : 1.0;
    out.push_back(rec);
  }
  return out;
}

// --- Delaunay triangulation (Bowyer-Watson) ---------------------------------

struct Triangle {
  int a, b, c;
};

namespace detail {

struct Pt {
  double x, y;
};

// > 0 when p lies strictly inside the circumcircle of the ccw triangle (a,b,c).
inline double incircle(const Pt& a, const Pt& b, const Pt& c, const Pt& p) {
  double ax = a.x - p.x, ay = a.y - p.y;
  double bx = b.x - p.x, by = b.y - p.y;
  double cx = c.x - p.x, cy = c.y - p.y;
  double d = (ax * ax + ay * ay) * (bx * cy - cx * by) -
             (bx * bx + by * by) * (ax * cy - cx * ay) +
             (cx * cx + cy * cy) * (ax * by - bx * ay);
  return d;
}

inline double orient(const Pt& a, const Pt& b, const Pt& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

// incircle with an error bound proportional to the magnitude of the terms, for
// tolerance-aware verification
inline bool incircle_violates(const Pt& a, const Pt& b, const Pt& c, const Pt& p) {
  double ax = a.x - p.x, ay = a.y - p.y;
  double bx = b.x - p.x, by = b.y - p.y;
  double cx = c.x - p.x, cy = c.y - p.y;
  double t1 = (ax * ax + ay * ay) * (bx * cy - cx * by);
  double t2 = (bx * bx + by * by) * (ax * cy - cx * ay);
  double t3 = (cx * cx + cy * cy) * (ax * by - bx * ay);
  double det = t1 - t2 + t3;
  double mag = std::abs(t1) + std::abs(t2) + std::abs(t3);
  return det > 1e-9 * mag;
}

struct BwTri {
  int a, b, c;
};

// One Bowyer-Watson pass with a super-triangle `factor` spans across. Hull
// slivers whose circumcircle swallows a super vertex get lost at small factors;
// the caller verifies and retries larger.
inline std::vector<BwTri> bowyer_watson(const std::vector<Pt>& pts, double factor) {
  double min_x = pts[0].x, max_x = pts[0].x, min_y = pts[0].y, max_y = pts[0].y;
  for (const auto& p : pts) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  double span = std::max({max_x - min_x, max_y - min_y, 1.0});
  double cx = (min_x + max_x) / 2, cy = (min_y + max_y) / 2;

  int n = int(pts.size());
  std::vector<Pt> v = pts;
  v.push_back({cx - factor * span, cy - span});
  v.push_back({cx + factor * span, cy - span});
  v.push_back({cx, cy + factor * span});

  std::vector<BwTri> tris{{n, n + 1, n + 2}};
  auto ccw = [&](BwTri& t) {
    if (orient(v[t.a], v[t.b], v[t.c]) < 0) std::swap(t.b, t.c);
  };
  ccw(tris[0]);

  for (int i = 0; i < n; ++i) {
    std::vector<BwTri> bad, good;
    for (auto& t : tris) {
      if (incircle(v[t.a], v[t.b], v[t.c], v[i]) > 0)
        bad.push_back(t);
      else
        good.push_back(t);
    }
    // polygon hole boundary: edges appearing in exactly one bad triangle
    std::map<std::pair<int, int>, int> edge_count;
    for (auto& t : bad) {
      for (auto [p, q] : {std::pair{t.a, t.b}, std::pair{t.b, t.c}, std::pair{t.c, t.a}}) {
        auto key = std::minmax(p, q);
        ++edge_count[{key.first, key.second}];
      }
    }
    tris = std::move(good);
    for (auto& t : bad) {
      for (auto [p, q] : {std::pair{t.a, t.b}, std::pair{t.b, t.c}, std::pair{t.c, t.a}}) {
        auto key = std::minmax(p, q);
        if (edge_count[{key.first, key.second}] == 1) {
          BwTri nt{p, q, i};
          ccw(nt);
          tris.push_back(nt);
        }
      }
    }
  }

  std::vector<BwTri> out;
  for (auto& t : tris)
    if (t.a < n && t.b < n && t.c < n) out.push_back(t);
  return out;
}

inline double convex_hull_area(std::vector<Pt> p) {
  std::sort(p.begin(), p.end(), [](const Pt& a, const Pt& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  auto cross = [](const Pt& o, const Pt& a, const Pt& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  };
  std::vector<Pt> hull(2 * p.size());
  size_t k = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p[i]) <= 0) --k;
    hull[k++] = p[i];
  }
  for (size_t i = p.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], p[i]) <= 0) --k;
    hull[k++] = p[i];
  }
  hull.resize(k > 1 ? k - 1 : 0);
  double area = 0;
  for (size_t i = 1; i + 1 < hull.size(); ++i)
    area += cross(hull[0], hull[i], hull[i + 1]) / 2.0;
  return area;
}

// A result is accepted when it tiles the convex hull and every interior edge is
// locally Delaunay; by the Delaunay lemma that makes it globally Delaunay.
inline bool verify_delaunay(const std::vector<Pt>& pts, const std::vector<BwTri>& tris) {
  double covered = 0;
  for (const auto& t : tris) covered += std::abs(orient(pts[t.a], pts[t.b], pts[t.c])) / 2.0;
  double hull = convex_hull_area(pts);
  if (std::abs(covered - hull) > 1e-9 * std::max(hull, 1.0)) return false;

  std::map<std::pair<int, int>, std::vector<int>> edge_tris;
  for (size_t ti = 0; ti < tris.size(); ++ti) {
    const auto& t = tris[ti];
    for (auto [p, q] : {std::pair{t.a, t.b}, std::pair{t.b, t.c}, std::pair{t.c, t.a}}) {
      auto key = std::minmax(p, q);
      edge_tris[{key.first, key.second}].push_back(int(ti));
    }
  }
  for (const auto& [edge, owners] : edge_tris) {
    if (owners.size() > 2) return false;
    if (owners.size() != 2) continue;
    for (int side = 0; side < 2; ++side) {
      BwTri t = tris[owners[side]];
      if (orient(pts[t.a], pts[t.b], pts[t.c]) < 0) std::swap(t.b, t.c);
      const auto& other = tris[owners[1 - side]];
      for (int vert : {other.a, other.b, other.c}) {
        if (vert == t.a || vert == t.b || vert == t.c) continue;
        if (incircle_violates(pts[t.a], pts[t.b], pts[t.c], pts[vert])) return false;
      }
    }
  }
  return true;
}

}  // namespace detail

// Triangulation of 2-D points, indices into the input. Points closer than 1e-9
// are merged; returns triangles over the deduplicated index set (mapped back to
// the first occurrence of each merged point). Throws nothing; fewer than 3
// distinct non-collinear points yield an empty triangle list.
inline std::vector<Triangle> delaunay_triangulate(const std::vector<std::pair<double, double>>& input) {
  using detail::Pt;
  std::vector<Pt> pts;
  std::vector<int> orig;  // index into input
  for (size_t i = 0; i < input.size(); ++i) {
    bool dup = false;
    for (const auto& q : pts)
      if (std::abs(q.x - input[i].first) < 1e-9 && std::abs(q.y - input[i].second) < 1e-9) {
        dup = true;
        break;
      }
    if (!dup) {
      pts.push_back({input[i].first, input[i].second});
      orig.push_back(int(i));
    }
  }
  if (pts.size() < 3) return {};

  // A finite super-triangle can sit inside the circumcircle of a flat hull
  // sliver, which then never gets emitted. Verify the result and retry with a
  // progressively larger super-triangle until it checks out.
  std::vector<detail::BwTri> tris;
  for (double factor : {30.0, 3e3, 3e5, 3e7}) {
    tris = detail::bowyer_watson(pts, factor);
    if (detail::verify_delaunay(pts, tris)) break;
  }

  std::vector<Triangle> out;
  for (auto& t : tris) out.push_back({orig[t.a], orig[t.b], orig[t.c]});
  return out;
}

// Fills min/max/mean neighbor distance and degree from the Delaunay graph over
// nucleus centroids. Degenerate inputs (< 3 nuclei, collinear) zero the spatial
// fields and report degeneracy.
inline bool delaunay_features(std::vector<NucleusRecord>& records) {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(records.size());
  for (const auto& r : records) pts.push_back({r.centroid_x, r.centroid_y});
  auto tris = delaunay_triangulate(pts);

  for (auto& r : records) {
    r.min_dist = r.max_dist = r.mean_dist = 0;
    r.degree = 0;
  }
  if (tris.empty()) return false;

  std::set<std::pair<int, int>> edges;
  for (const auto& t : tris) {
    for (auto [p, q] : {std::pair{t.a, t.b}, std::pair{t.b, t.c}, std::pair{t.c, t.a}}) {
      auto key = std::minmax(p, q);
      edges.insert({key.first, key.second});
    }
  }
  std::vector<std::vector<double>> dists(records.size());
  for (auto [p, q] : edges) {
    double dx = records[p].centroid_x - records[q].centroid_x;
    double dy = records[p].centroid_y - records[q].centroid_y;
    double d = std::hypot(dx, dy);
    dists[p].push_back(d);
    dists[q].push_back(d);
  }
  for (size_t i = 0; i < records.size(); ++i) {
    if (dists[i].empty()) continue;  // merged-duplicate or isolated point
    auto& r = records[i];
    r.degree = int(dists[i].size());
    r.min_dist = *std::min_element(dists[i].begin(), dists[i].end());
    r.max_dist = *std::max_element(dists[i].begin(), dists[i].end());
    double s = 0;
    for (double d : dists[i]) s += d;
    r.mean_dist = s / double(dists[i].size());
  }
  return true;
}

// --- Patch-level aggregation -------------------------------------------------

constexpr int kNumPerNucleusFeatures = 15;
constexpr int kNumStats = 5;
constexpr int kNumPatchFeatures = kNumPerNucleusFeatures * kNumStats;  // 75
constexpr int kHistogramBins = 10;

// Fixed ordering: 8 morphology, 3 intensity, 4 spatial; stats inner.
inline const std::array<std::string, kNumPerNucleusFeatures>& per_nucleus_feature_names() {
  static const std::array<std::string, kNumPerNucleusFeatures> names = {
      "morph_minor_axis", "morph_major_axis", "morph_axis_ratio", "morph_area",
      "morph_perimeter",  "morph_circularity", "morph_eccentricity", "morph_solidity",
      "int_mean_r",       "int_mean_g",       "int_mean_b",
      "spat_min_dist",    "spat_max_dist",    "spat_mean_dist",    "spat_degree"};
  return names;
}

inline const std::array<std::string, kNumStats>& stat_names() {
  static const std::array<std::string, kNumStats> names = {"mean", "std", "entropy", "skew", "kurt"};
  return names;
}

inline std::vector<std::string> patch_feature_names() {
  std::vector<std::string> out;
  for (const auto& f : per_nucleus_feature_names())
    for (const auto& s : stat_names()) out.push_back(f + "_" + s);
  return out;
}

inline double nucleus_feature(const NucleusRecord& r, int i) {
  switch (i) {
    case 0: return r.minor_axis;
    case 1: return r.major_axis;
    case 2: return r.axis_ratio;
    case 3: return r.area;
    case 4: return r.perimeter;
    case 5: return r.circularity;
    case 6: return r.eccentricity;
    case 7: return r.solidity;
    case 8: return r.mean_r;
    case 9: return r.mean_g;
    case 10: return r.mean_b;
    case 11: return r.min_dist;
    case 12: return r.max_dist;
    case 13: return r.mean_dist;
    case 14: return double(r.degree);
  }
  throw std::invalid_argument("nucleus_feature: bad index");
}

struct PatchFeatureVector {
  std::string patch_id;
  std::string slide_id;
  int n_nuclei = 0;
  std::array<double, kNumPatchFeatures> values{};
};

struct HistogramStats {
  double mean, stddev, entropy, skewness, kurtosis;
};

// Ten-bin histogram over [min, max] of the values, L1-normalized; distribution
// statistics computed on bin centers. Kurtosis is non-excess (Pearson), entropy
// natural-log. sigma == 0 maps skewness and kurtosis to 0.
inline HistogramStats histogram_stats(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("histogram_stats: empty values");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  std::array<double, kHistogramBins> p{};
  std::array<double, kHistogramBins> centers{};
  if (hi - lo < 1e-12) {
    p[0] = 1.0;
    centers.fill(lo);
  } else {
    double w = (hi - lo) / kHistogramBins;
    for (int b = 0; b < kHistogramBins; ++b) centers[b] = lo + (b + 0.5) * w;
    for (double v : values) {
      int b = std::min(kHistogramBins - 1, int((v - lo) / w));
      p[b] += 1.0;
    }
    for (auto& q : p) q /= double(values.size());
  }
  HistogramStats s{};
  for (int b = 0; b < kHistogramBins; ++b) s.mean += p[b] * centers[b];
  double m2 = 0, m3 = 0, m4 = 0;
  for (int b = 0; b < kHistogramBins; ++b) {
    double d = centers[b] - s.mean;
    m2 += p[b] * d * d;
    m3 += p[b] * d * d * d;
    m4 += p[b] * d * d * d * d;
    if (p[b] > 0) s.entropy -= p[b] * std::log(p[b]);
  }
  s.stddev = std::sqrt(m2);
  if (s.stddev > 1e-12) {
    s.skewness = m3 / (m2 * s.stddev);
    s.kurtosis = m4 / (m2 * m2);
  }
  return s;
}

inline PatchFeatureVector aggregate_patch(const std::vector<NucleusRecord>& records,
                                          const std::string& patch_id,
                                          const std::string& slide_id = "") {
  if (records.empty()) throw std::invalid_argument("aggregate_patch: no nuclei");
  PatchFeatureVector fv;
  fv.patch_id = patch_id;
  fv.slide_id = slide_id;
  fv.n_nuclei = int(records.size());
  for (int f = 0; f < kNumPerNucleusFeatures; ++f) {
    std::vector<double> vals;
    vals.reserve(records.size());
    for (const auto& r : records) vals.push_back(nucleus_feature(r, f));
    auto s = histogram_stats(vals);
    fv.values[f * kNumStats + 0] = s.mean;
    fv.values[f * kNumStats + 1] = s.stddev;
    fv.values[f * kNumStats + 2] = s.entropy;
    fv.values[f * kNumStats + 3] = s.skewness;
    fv.values[f * kNumStats + 4] = s.kurtosis;
  }
  return fv;
}

// Column index ranges of the three feature groups in the 75-vector.
inline std::vector<int> feature_group_columns(bool morphology, bool intensity, bool spatial) {
  std::vector<int> cols;
  for (int f = 0; f < kNumPerNucleusFeatures; ++f) {
    bool take = (f < 8) ? morphology : (f < 11) ? intensity : spatial;
    if (take)
      for (int s = 0; s < kNumStats; ++s) cols.push_back(f * kNumStats + s);
  }
  return cols;
}

}  // namespace histomorph
