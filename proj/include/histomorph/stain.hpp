#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "histomorph/raster.hpp"

namespace histomorph {

// --- Beer-Lambert optical density -----------------------------------------

inline double od_of_u8(uint8_t v) { return -std::log((double(v) + 1.0) / 256.0); }

inline uint8_t u8_of_od(double od) {
  double v = 256.0 * std::exp(-od) - 1.0;
  return round_clamp_u8(v);
}

// 3xN matrix of per-channel optical densities.
inline Eigen::MatrixXd rgb_to_od(const ImageRGB& img) {
  size_t n = img.data.size() / 3;
  Eigen::MatrixXd od(3, n);
  for (size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) od(c, i) = od_of_u8(img.data[i * 3 + c]);
  return od;
}

inline ImageRGB od_to_rgb(const Eigen::MatrixXd& od, int width, int height) {
  ImageRGB img(width, height);
  for (size_t i = 0; i < size_t(od.cols()); ++i)
    for (int c = 0; c < 3; ++c) img.data[i * 3 + c] = u8_of_od(std::max(0.0, od(c, i)));
  return img;
}

// Ruifrok H&E(-DAB) stain vectors in OD space, rows = stains, unit L2 norm.
inline Eigen::Matrix3d ruifrok_hed() {
  Eigen::Matrix3d m;
  m << 0.65, 0.70, 0.29,
       0.07, 0.99, 0.11,
       0.27, 0.57, 0.78;
  for (int r = 0; r < 3; ++r) m.row(r).normalize();
  return m;
}

struct StainModel {
  Eigen::Matrix<double, 3, 2> W;  // columns: hematoxylin, eosin (OD space, unit norm)
  Eigen::Vector2d p99 = Eigen::Vector2d::Zero();
  double lambda = 0.1;
  bool converged = true;

  void validate() const {
    for (int c = 0; c < 2; ++c) {
      if (W.col(c).minCoeff() < 0) throw std::invalid_argument("StainModel: negative entry in W");
      if (std::abs(W.col(c).norm() - 1.0) > 1e-9)
        throw std::invalid_argument("StainModel: column not unit norm");
    }
    if (p99.minCoeff() < 0) throw std::invalid_argument("StainModel: negative p99");
  }
};

namespace detail {

// Non-negative lasso coding of one OD pixel against two unit-norm bases:
// min_h>=0 0.5*||v - W h||^2 + lambda*||h||_1 via cyclic coordinate descent.
// (The fit objective uses the unhalved residual; scaling lambda by 0.5 here
// makes this the exact coordinate minimizer for ||v-Wh||^2 + lambda*||h||_1.)
inline void code_pixel(const Eigen::Matrix<double, 3, 2>& W, const Eigen::Vector3d& v, double lambda,
                       double& h0, double& h1) {
  double g01 = W.col(0).dot(W.col(1));
  double b0 = W.col(0).dot(v);
  double b1 = W.col(1).dot(v);
  double l = lambda * 0.5;
  for (int it = 0; it < 40; ++it) {
    double n0 = std::max(0.0, b0 - g01 * h1 - l);
    double n1 = std::max(0.0, b1 - g01 * n0 - l);
    if (std::abs(n0 - h0) + std::abs(n1 - h1) < 1e-12) {
      h0 = n0;
      h1 = n1;
      break;
    }
    h0 = n0;
    h1 = n1;
  }
}

// Lasso selects the stain support, least squares on the support removes the
// shrinkage bias; used when coding for reconstruction rather than for the fit
// objective itself.
inline void debias_pixel(const Eigen::Matrix<double, 3, 2>& W, const Eigen::Vector3d& v, double& h0,
                         double& h1) {
  double g01 = W.col(0).dot(W.col(1));
  double b0 = W.col(0).dot(v);
  double b1 = W.col(1).dot(v);
  if (h0 > 0 && h1 > 0) {
    double det = 1.0 - g01 * g01;
    if (det > 1e-12) {
      double n0 = (b0 - g01 * b1) / det;
      double n1 = (b1 - g01 * b0) / det;
      if (n0 >= 0 && n1 >= 0) {
        h0 = n0;
        h1 = n1;
        return;
      }
    }
  }
  if (h0 > 0 && h1 <= 0) {
    h0 = std::max(0.0, b0);
  } else if (h1 > 0 && h0 <= 0) {
    h1 = std::max(0.0, b1);
  }
}

inline Eigen::MatrixXd code_matrix(const Eigen::Matrix<double, 3, 2>& W, const Eigen::MatrixXd& V,
                                   double lambda, const Eigen::MatrixXd* warm = nullptr,
                                   bool debias = false) {
  Eigen::MatrixXd H = warm ? *warm : Eigen::MatrixXd::Zero(2, V.cols());
  for (Eigen::Index j = 0; j < V.cols(); ++j) {
    code_pixel(W, V.col(j), lambda, H(0, j), H(1, j));
    if (debias) debias_pixel(W, V.col(j), H(0, j), H(1, j));
  }
  return H;
}

inline double nmf_objective(const Eigen::Matrix<double, 3, 2>& W, const Eigen::MatrixXd& H,
                            const Eigen::MatrixXd& V, double lambda) {
  return (V - W * H).squaredNorm() + lambda * H.sum();
}

// Project onto {W >= 0, unit-norm columns}; a zeroed column falls back to its
// previous direction to keep the factorization rank-2.
inline Eigen::Matrix<double, 3, 2> project_w(Eigen::Matrix<double, 3, 2> W,
                                             const Eigen::Matrix<double, 3, 2>& prev) {
  W = W.cwiseMax(0.0);
  for (int c = 0; c < 2; ++c) {
    double n = W.col(c).norm();
    if (n < 1e-12)
      W.col(c) = prev.col(c);
    else
      W.col(c) /= n;
  }
  return W;
}

}  // namespace detail

struct StainFitOptions {
  double lambda = 0.1;
  double od_floor = 0.15;
  int max_iterations = 200;
  double rel_tolerance = 1e-6;
  int max_fit_pixels = 8000;  // foreground subsample cap for the W fit
  std::vector<double>* objective_trace = nullptr;
};

// Sparse NMF stain separation: V ~ W*H with W >= 0 (unit-norm columns), H >= 0,
// minimizing ||V - W*H||_F^2 + lambda*||H||_1 by alternating a coordinate-descent
// H step with a backtracking projected-gradient W step. Both steps only accept
// objective decreases, so the trace is non-increasing. Columns are ordered by
// the hematoxylin convention (larger blue-channel OD in column 0).
inline StainModel fit_stain_model(const Patch& patch, const StainFitOptions& opt = {}) {
  Eigen::MatrixXd od = rgb_to_od(patch.pixels);

  std::vector<Eigen::Index> fg;
  for (Eigen::Index j = 0; j < od.cols(); ++j)
    if (od.col(j).maxCoeff() >= opt.od_floor) fg.push_back(j);
  if (fg.size() < 100)
    throw std::invalid_argument("fit_stain_model: fewer than 100 foreground pixels");

  // deterministic stride subsample for the alternating fit
  size_t stride = std::max<size_t>(1, fg.size() / size_t(opt.max_fit_pixels));
  std::vector<Eigen::Index> sel;
  for (size_t i = 0; i < fg.size(); i += stride) sel.push_back(fg[i]);
  Eigen::MatrixXd V(3, sel.size());
  for (size_t i = 0; i < sel.size(); ++i) V.col(i) = od.col(sel[i]);

  Eigen::Matrix<double, 3, 2> W = ruifrok_hed().topRows<2>().transpose();
  Eigen::MatrixXd H = detail::code_matrix(W, V, opt.lambda);
  double obj = detail::nmf_objective(W, H, V, opt.lambda);
  if (opt.objective_trace) opt.objective_trace->push_back(obj);

  bool converged = false;
  double step = 1.0 / std::max(1.0, double(V.cols()));
  for (int it = 0; it < opt.max_iterations; ++it) {
    // W step: projected gradient with backtracking, accept only improvements
    Eigen::Matrix<double, 3, 2> grad = 2.0 * (W * H - V) * H.transpose();
    double t = step;
    for (int bt = 0; bt < 30; ++bt) {
      Eigen::Matrix<double, 3, 2> cand = detail::project_w(W - t * grad, W);
      double cand_obj = detail::nmf_objective(cand, H, V, opt.lambda);
      if (cand_obj <= obj) {
        W = cand;
        obj = cand_obj;
        step = t * 1.5;
        break;
      }
      t *= 0.5;
    }
    // H step: coordinate descent from the previous coding (monotone)
    H = detail::code_matrix(W, V, opt.lambda, &H);
    double new_obj = detail::nmf_objective(W, H, V, opt.lambda);
    if (opt.objective_trace) opt.objective_trace->push_back(new_obj);
    double rel = std::abs(obj - new_obj) / std::max(obj, 1e-12);
    obj = new_obj;
    if (rel < opt.rel_tolerance) {
      converged = true;
      break;
    }
  }

  // hematoxylin convention: column 0 carries the larger blue OD component
  bool swap = W(2, 0) < W(2, 1);
  StainModel model;
  model.lambda = opt.lambda;
  model.converged = converged;
  model.W = swap ? Eigen::Matrix<double, 3, 2>((Eigen::Matrix<double, 3, 2>() << W.col(1), W.col(0)).finished()) : W;

  // concentration percentiles over the full foreground
  Eigen::MatrixXd Vfg(3, fg.size());
  for (size_t i = 0; i < fg.size(); ++i) Vfg.col(i) = od.col(fg[i]);
  Eigen::MatrixXd Hfg = detail::code_matrix(model.W, Vfg, opt.lambda, nullptr, true);
  for (int r = 0; r < 2; ++r) {
    std::vector<double> row(Hfg.cols());
    for (Eigen::Index j = 0; j < Hfg.cols(); ++j) row[j] = Hfg(r, j);
    size_t k = size_t(0.99 * double(row.size() - 1));
    std::nth_element(row.begin(), row.begin() + k, row.end());
    model.p99[r] = row[k];
  }
  return model;
}

// Structure-preserving normalization: code the patch against the source bases,
// rescale concentrations to the target's 99th percentiles, reconstruct with the
// target bases. Zero source percentile leaves that stain's row unscaled.
inline Patch normalize(const Patch& patch, const StainModel& source, const StainModel& target) {
  source.validate();
  target.validate();
  Eigen::MatrixXd od = rgb_to_od(patch.pixels);
  Eigen::MatrixXd H = detail::code_matrix(source.W, od, source.lambda, nullptr, true);
  for (int r = 0; r < 2; ++r) {
    if (source.p99[r] > 0) H.row(r) *= target.p99[r] / source.p99[r];
  }
  Patch out = patch;
  out.pixels = od_to_rgb(target.W * H, patch.pixels.width, patch.pixels.height);
  return out;
}

// --- Augmentations ----------------------------------------------------------

enum class AugmentationKind { hsv, hed, gaussian_noise, flip, rotation };

inline std::string to_string(AugmentationKind k) {
  switch (k) {
    case AugmentationKind::hsv: return "hsv";
    case AugmentationKind::hed: return "hed";
    case AugmentationKind::gaussian_noise: return "gaussian_noise";
    case AugmentationKind::flip: return "flip";
    case AugmentationKind::rotation: return "rotation";
  }
  return "?";
}

inline AugmentationKind augmentation_kind_from_string(const std::string& s) {
  if (s == "hsv") return AugmentationKind::hsv;
  if (s == "hed") return AugmentationKind::hed;
  if (s == "gaussian_noise") return AugmentationKind::gaussian_noise;
  if (s == "flip") return AugmentationKind::flip;
  if (s == "rotation") return AugmentationKind::rotation;
  throw std::invalid_argument("unknown augmentation kind '" + s + "'");
}

// "Light" parameter ranges; the replayable descriptor pins every free choice.
struct AugmentationDescriptor {
  AugmentationKind kind = AugmentationKind::flip;
  std::vector<double> params;  // kind-specific, see augment()
  uint64_t seed = 0;           // drives gaussian noise only
};

constexpr double kHueShiftMax = 10.0;       // degrees
constexpr double kSvGainMin = 0.9, kSvGainMax = 1.1;
constexpr double kHedGainMin = 0.95, kHedGainMax = 1.05;
constexpr double kHedBiasMax = 0.05;
constexpr double kNoiseSigmaMax = 12.75;    // intensity levels

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  double d = mx - mn;
  s = mx > 0 ? d / mx : 0.0;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = 60.0 * ((b - r) / d + 2.0);
  else
    h = 60.0 * ((r - g) / d + 4.0);
  if (h < 0) h += 360.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  double c = v * s;
  double hp = h / 60.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  if (hp < 1) { r1 = c; g1 = x; }
  else if (hp < 2) { r1 = x; g1 = c; }
  else if (hp < 3) { g1 = c; b1 = x; }
  else if (hp < 4) { g1 = x; b1 = c; }
  else if (hp < 5) { r1 = x; b1 = c; }
  else { r1 = c; b1 = x; }
  double m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

inline ImageRGB permute_pixels(const ImageRGB& src, bool hflip, int quarter_turns) {
  ImageRGB dst(src.height, src.width);  // provisional; fixed below
  int w = src.width, h = src.height;
  int ow = (quarter_turns % 2) ? h : w;
  int oh = (quarter_turns % 2) ? w : h;
  dst = ImageRGB(ow, oh);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int sx = hflip ? w - 1 - x : x;
      int ox = x, oy = y;
      switch (quarter_turns & 3) {
        case 0: break;
        case 1: ox = h - 1 - y; oy = x; break;          // 90 deg clockwise
        case 2: ox = w - 1 - x; oy = h - 1 - y; break;  // 180
        case 3: ox = y; oy = w - 1 - x; break;          // 270
      }
      for (int c = 0; c < 3; ++c) dst.at(ox, oy, c) = src.at(sx, y, c);
    }
  return dst;
}

}  // namespace detail

// Applies one descriptor-determined transform. Parameter layout:
//   hsv:            [hue_shift_deg, sat_gain, val_gain]
//   hed:            [gain_h, gain_e, gain_d, bias_h, bias_e, bias_d]
//   gaussian_noise: [sigma]  (seeded by d.seed)
//   flip:           [axis]   0 = horizontal, 1 = vertical
//   rotation:       [quarter_turns]  1, 2 or 3
inline Patch augment(const Patch& patch, const AugmentationDescriptor& d) {
  Patch out = patch;
  ImageRGB& img = out.pixels;
  switch (d.kind) {
    case AugmentationKind::hsv: {
      if (d.params.size() != 3 || std::abs(d.params[0]) > kHueShiftMax ||
          d.params[1] < kSvGainMin || d.params[1] > kSvGainMax || d.params[2] < kSvGainMin ||
          d.params[2] > kSvGainMax)
        throw std::invalid_argument("augment: hsv params out of range");
      for (size_t i = 0; i < img.data.size(); i += 3) {
        double h, s, v, r, g, b;
        detail::rgb_to_hsv(img.data[i] / 255.0, img.data[i + 1] / 255.0, img.data[i + 2] / 255.0, h, s, v);
        h = std::fmod(h + d.params[0] + 360.0, 360.0);
        s = std::clamp(s * d.params[1], 0.0, 1.0);
        v = std::clamp(v * d.params[2], 0.0, 1.0);
        detail::hsv_to_rgb(h, s, v, r, g, b);
        img.data[i] = round_clamp_u8(r * 255.0);
        img.data[i + 1] = round_clamp_u8(g * 255.0);
        img.data[i + 2] = round_clamp_u8(b * 255.0);
      }
      break;
    }
    case AugmentationKind::hed: {
      if (d.params.size() != 6)
        throw std::invalid_argument("augment: hed needs 6 params");
      for (int i = 0; i < 3; ++i)
        if (d.params[i] < kHedGainMin || d.params[i] > kHedGainMax ||
            std::abs(d.params[3 + i]) > kHedBiasMax)
          throw std::invalid_argument("augment: hed params out of range");
      Eigen::Matrix3d M = ruifrok_hed();           // rows = stains
      Eigen::Matrix3d Minv = M.transpose().inverse();
      for (size_t i = 0; i < img.data.size(); i += 3) {
        Eigen::Vector3d od(od_of_u8(img.data[i]), od_of_u8(img.data[i + 1]), od_of_u8(img.data[i + 2]));
        Eigen::Vector3d c = Minv * od;
        for (int k = 0; k < 3; ++k) c[k] = std::max(0.0, c[k] * d.params[k] + d.params[3 + k]);
        Eigen::Vector3d od2 = M.transpose() * c;
        for (int k = 0; k < 3; ++k) img.data[i + k] = u8_of_od(std::max(0.0, od2[k]));
      }
      break;
    }
    case AugmentationKind::gaussian_noise: {
      if (d.params.size() != 1 || d.params[0] < 0 || d.params[0] > kNoiseSigmaMax)
        throw std::invalid_argument("augment: noise sigma out of range");
      std::mt19937_64 rng(d.seed);
      std::normal_distribution<double> noise(0.0, std::max(d.params[0], 1e-300));
      if (d.params[0] > 0)
        for (auto& v : img.data) v = round_clamp_u8(double(v) + noise(rng));
      break;
    }
    case AugmentationKind::flip: {
      if (d.params.size() != 1 || (d.params[0] != 0 && d.params[0] != 1))
        throw std::invalid_argument("augment: flip axis must be 0 or 1");
      if (d.params[0] == 0)
        img = detail::permute_pixels(img, true, 0);
      else
        img = detail::permute_pixels(detail::permute_pixels(img, true, 2), false, 0);
      break;
    }
    case AugmentationKind::rotation: {
      if (d.params.size() != 1 || d.params[0] < 1 || d.params[0] > 3 ||
          d.params[0] != std::floor(d.params[0]))
        throw std::invalid_argument("augment: rotation must be 1..3 quarter turns");
      img = detail::permute_pixels(img, false, int(d.params[0]));
      break;
    }
  }
  return out;
}

// Uniform over the five kinds, then uniform over that kind's range.
inline AugmentationDescriptor sample_descriptor(uint64_t seed) {
  std::mt19937_64 rng(seed);
  AugmentationDescriptor d;
  d.kind = AugmentationKind(std::uniform_int_distribution<int>(0, 4)(rng));
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  switch (d.kind) {
    case AugmentationKind::hsv:
      d.params = {uni(-kHueShiftMax, kHueShiftMax), uni(kSvGainMin, kSvGainMax), uni(kSvGainMin, kSvGainMax)};
      break;
    case AugmentationKind::hed:
      d.params = {uni(kHedGainMin, kHedGainMax), uni(kHedGainMin, kHedGainMax), uni(kHedGainMin, kHedGainMax),
                  uni(-kHedBiasMax, kHedBiasMax), uni(-kHedBiasMax, kHedBiasMax), uni(-kHedBiasMax, kHedBiasMax)};
      break;
    case AugmentationKind::gaussian_noise:
      d.params = {uni(0.0, kNoiseSigmaMax)};
      d.seed = rng();
      break;
    case AugmentationKind::flip:
      d.params = {double(std::uniform_int_distribution<int>(0, 1)(rng))};
      break;
    case AugmentationKind::rotation:
      d.params = {double(std::uniform_int_distribution<int>(1, 3)(rng))};
      break;
  }
  return d;
}

// The 8 dihedral transforms in fixed order: rotations 0/90/180/270, then the
// same four after a horizontal flip. Variant 0 is the identity.
inline std::vector<Patch> tta_variants(const Patch& patch) {
  std::vector<Patch> out;
  out.reserve(8);
  for (int f = 0; f < 2; ++f)
    for (int r = 0; r < 4; ++r) {
      Patch v = patch;
      v.pixels = detail::permute_pixels(patch.pixels, f == 1, r);
      out.push_back(std::move(v));
    }
  return out;
}

// Inverse of tta variant i, for round-trip checks.
inline Patch tta_invert(const Patch& variant, int i) {
  Patch out = variant;
  int r = i % 4, f = i / 4;
  out.pixels = detail::permute_pixels(out.pixels, false, (4 - r) & 3);
  if (f) out.pixels = detail::permute_pixels(out.pixels, true, 0);
  return out;
}

}  // namespace histomorph
