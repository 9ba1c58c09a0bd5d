#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "histomorph/calibrate.hpp"
#include "histomorph/csv.hpp"
#include "histomorph/image.hpp"
#include "histomorph/morpho.hpp"
#include "histomorph/raster.hpp"
#include "histomorph/stain.hpp"

namespace histomorph {

struct SynthSpec {
  int n_nuclei = 40;
  double radius_min = 7.0, radius_max = 13.0;
  double aspect_max = 2.0;                      // major/minor, drawn in [1, aspect_max]
  double hematoxylin_scale = 1.0;               // nucleus concentration multiplier
  double eosin_background = 0.08;               // faint cytoplasm tint
  Eigen::Matrix<double, 3, 2> stain_W = ruifrok_hed().topRows<2>().transpose();
  uint64_t seed = 0;
};

struct SynthPatch {
  Patch patch;
  ImageLabel mask;
  std::vector<NucleusRecord> truth;  // geometry fields only, spatial unset
};

// Ellipse nuclei at dart-thrown non-overlapping positions, colored through the
// configured stain matrix with gamma-distributed concentrations, over a faint eosin
// background. Ground truth carries the analytic geometry of each ellipse.
inline SynthPatch generate_patch(const SynthSpec& spec) {
  if (spec.radius_min <= 0 || spec.radius_max < spec.radius_min)
    throw std::invalid_argument("generate_patch: bad radius range");
  const int S = kPatchSize;
  const double margin = 2.0;

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  struct Ellipse {
    double cx, cy, a, b, theta, ch, ce, c_halo;
  };
  std::vector<Ellipse> ells;
  int throws = 0;
  std::gamma_distribution<double> conc(4.0, 0.25);
  while (int(ells.size()) < spec.n_nuclei) {
    if (++throws > 100000)
      throw std::runtime_error("generate_patch: could not place nuclei without overlap");
    double r = spec.radius_min + (spec.radius_max - spec.radius_min) * u01(rng);
    double q = 1.0 + (spec.aspect_max - 1.0) * u01(rng);
    Ellipse e;
    e.a = r * std::sqrt(q);
    e.b = r / std::sqrt(q);
    e.theta = std::numbers::pi * u01(rng);
    e.cx = e.a + margin + (S - 2 * (e.a + margin)) * u01(rng);
    e.cy = e.a + margin + (S - 2 * (e.a + margin)) * u01(rng);
    bool ok = true;
    for (const auto& o : ells)
      if (std::hypot(e.cx - o.cx, e.cy - o.cy) < e.a + o.a + margin) {
        ok = false;
        break;
      }
    if (!ok) continue;
    e.ch = conc(rng) * spec.hematoxylin_scale;
    e.ce = 0.3 * conc(rng);
    e.c_halo = 0.6 + 0.4 * conc(rng);  // eosin-rich cytoplasm around the nucleus
    ells.push_back(e);
  }

  SynthPatch out;
  out.patch.slide_id = "synth";
  out.patch.patch_id = "synth";
  out.patch.magnification = Magnification::x20;
  out.patch.pixels = ImageRGB(S, S);
  out.mask = ImageLabel(S, S, 0);

  Eigen::Vector3d bg_od = spec.stain_W * Eigen::Vector2d(0.0, spec.eosin_background);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      for (int c = 0; c < 3; ++c) out.patch.pixels.at(x, y, c) = u8_of_od(bg_od[c]);

  for (size_t k = 0; k < ells.size(); ++k) {
    const auto& e = ells[k];
    Eigen::Vector3d od = spec.stain_W * Eigen::Vector2d(e.ch, e.ce + spec.eosin_background);
    double ct = std::cos(e.theta), st = std::sin(e.theta);
    int x0 = std::max(0, int(e.cx - e.a - 1)), x1 = std::min(S - 1, int(e.cx + e.a + 1));
    int y0 = std::max(0, int(e.cy - e.a - 1)), y1 = std::min(S - 1, int(e.cy + e.a + 1));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double dx = x + 0.5 - e.cx, dy = y + 0.5 - e.cy;
        double u = (dx * ct + dy * st) / e.a;
        double v = (-dx * st + dy * ct) / e.b;
        if (u * u + v * v <= 1.0) {
          out.mask.at(x, y) = uint16_t(k + 1);
          for (int c = 0; c < 3; ++c) out.patch.pixels.at(x, y, c) = u8_of_od(od[c]);
        }
      }
    NucleusRecord t;
    t.nucleus_id = int(k + 1);
    t.centroid_x = e.cx;
    t.centroid_y = e.cy;
    t.major_axis = 2 * e.a;
    t.minor_axis = 2 * e.b;
    t.axis_ratio = e.a / e.b;
    t.area = std::numbers::pi * e.a * e.b;
    t.eccentricity = std::sqrt(std::max(0.0, 1.0 - (e.b * e.b) / (e.a * e.a)));
    out.truth.push_back(t);
  }

  // eosin-rich cytoplasm halos, painted only over background so nuclei (and the
  // label mask) are untouched; these give the eosin factor enough support for
  // stain separation to identify it
  const double halo = 1.45;
  for (const auto& e : ells) {
    Eigen::Vector3d od = spec.stain_W * Eigen::Vector2d(0.0, e.c_halo + spec.eosin_background);
    double ct = std::cos(e.theta), st = std::sin(e.theta);
    double ra = halo * e.a;
    int x0 = std::max(0, int(e.cx - ra - 1)), x1 = std::min(S - 1, int(e.cx + ra + 1));
    int y0 = std::max(0, int(e.cy - ra - 1)), y1 = std::min(S - 1, int(e.cy + ra + 1));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        if (out.mask.at(x, y) != 0) continue;
        double dx = x + 0.5 - e.cx, dy = y + 0.5 - e.cy;
        double u = (dx * ct + dy * st) / e.a;
        double v = (-dx * st + dy * ct) / e.b;
        double r2 = u * u + v * v;
        if (r2 > 1.0 && r2 <= halo * halo)
          for (int c = 0; c < 3; ++c) out.patch.pixels.at(x, y, c) = u8_of_od(od[c]);
      }
  }
  return out;
}

// Calibrated logit pairs: the label is sampled from the softmax of the base
// logits, then the emitted logits are scaled by planted_T, so temperature
// fitting should recover planted_T.
inline std::vector<LogitRecord> make_calibrated_logits(size_t n, double planted_T, uint64_t seed,
                                                       double logit_spread = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, logit_spread);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<LogitRecord> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    double d = gauss(rng);
    double p1 = 1.0 / (1.0 + std::exp(-d));
    LogitRecord r;
    r.patch_id = "p" + std::to_string(i);
    r.slide_id = "s" + std::to_string(i % 16);
    r.label = u01(rng) < p1 ? 1 : 0;
    r.z = {-planted_T * d / 2.0, planted_T * d / 2.0};
    out.push_back(std::move(r));
  }
  return out;
}

struct CohortSpec {
  int n_slides = 20;
  int patches_per_slide = 50;
  double biomarker_effect = 1.0;
  bool shift_morphology = true;
  bool shift_intensity = true;
  bool shift_spatial = true;
  double miscalibration_T = 3.0;
  uint64_t seed = 0;
};

// On-disk two-class cohort in the exact formats the pipeline ingests:
// tiles + manifest + thumbnail, nucleus masks, cancer-detection logits,
// slide biomarker labels, and immune scores.
inline void write_cohort(const std::filesystem::path& dir, const CohortSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "tiles");
  fs::create_directories(dir / "masks");

  std::mt19937_64 rng(spec.seed ^ 0xC0F0ull);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  const int grid_w = 10;
  const int grid_h = (spec.patches_per_slide + grid_w - 1) / grid_w;
  const int cell_px = 8;

  csv::Table manifest;
  manifest.header = {"slide_id", "patch_id", "path", "x", "y", "magnification"};
  csv::Table logits;
  logits.header = {"patch_id", "slide_id", "label", "z_0", "z_1"};
  csv::Table labels;
  labels.header = {"slide_id", "label"};
  csv::Table immune;
  immune.header = {"sample_id", "group", "immune_score"};

  // tissue-everywhere thumbnail shared by all slides
  ImageRGB thumb(grid_w * cell_px, grid_h * cell_px);
  for (size_t i = 0; i < thumb.data.size(); i += 3) {
    thumb.data[i] = 210;
    thumb.data[i + 1] = 140;
    thumb.data[i + 2] = 180;
  }
  write_png_rgb((dir / "thumbnail.png").string(), thumb);

  for (int s = 0; s < spec.n_slides; ++s) {
    int cls = s % 2;  // alternate so both classes span the slide range
    std::string slide_id = "slide" + std::to_string(s);
    labels.rows.push_back({slide_id, std::to_string(cls)});

    // immune scores: mutated group shifted up
    double imm = 500.0 * gauss(rng) + (cls ? 1200.0 : 0.0) * spec.biomarker_effect;
    immune.rows.push_back({slide_id, cls ? "mutated" : "non-mutated",
                           std::to_string(imm)});

    double shift = (cls ? 0.25 : 0.0) * spec.biomarker_effect;
    for (int p = 0; p < spec.patches_per_slide; ++p) {
      SynthSpec ps;
      ps.seed = spec.seed * 1000003ull + uint64_t(s) * 1009ull + uint64_t(p);
      int base_n = 34;
      ps.n_nuclei = spec.shift_spatial ? int(std::lround(base_n * (1.0 + shift))) : base_n;
      if (spec.shift_morphology) {
        ps.radius_min *= 1.0 + shift;
        ps.radius_max *= 1.0 + shift;
      }
      if (spec.shift_intensity) ps.hematoxylin_scale *= 1.0 + 1.5 * shift;
      auto sp = generate_patch(ps);

      int gx = p % grid_w, gy = p / grid_w;
      Patch& patch = sp.patch;
      patch.slide_id = slide_id;
      patch.x = gx * kPatchSize;
      patch.y = gy * kPatchSize;
      patch.patch_id = slide_id + "_p" + std::to_string(p);
      std::string fname = patch_filename(patch);
      write_png_rgb((dir / "tiles" / fname).string(), patch.pixels);
      write_png_label16((dir / "masks" / (patch.patch_id + "_mask.png")).string(), sp.mask);
      manifest.rows.push_back({slide_id, patch.patch_id, (dir / "tiles" / fname).string(),
                               std::to_string(patch.x), std::to_string(patch.y), "20x"});

      // cancer-detection logits at the planted miscalibration temperature
      double d = 2.0 * gauss(rng) + 1.0;  // cancer-leaning margin
      double p1 = 1.0 / (1.0 + std::exp(-d));
      int cancer_label = u01(rng) < p1 ? 1 : 0;
      double z1 = spec.miscalibration_T * d / 2.0;
      logits.rows.push_back({patch.patch_id, slide_id, std::to_string(cancer_label),
                             std::to_string(-z1), std::to_string(z1)});
    }
  }
  csv::write_file((dir / "manifest.csv").string(), manifest);
  csv::write_file((dir / "logits.csv").string(), logits);
  csv::write_file((dir / "labels.csv").string(), labels);
  csv::write_file((dir / "immune_scores.csv").string(), immune);
}

}  // namespace histomorph
