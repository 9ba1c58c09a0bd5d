#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "histomorph/image.hpp"

namespace histomorph {

enum class Magnification { x20, x40 };

inline std::string to_string(Magnification m) { return m == Magnification::x20 ? "20x" : "40x"; }

inline Magnification magnification_from_string(const std::string& s) {
  if (s == "20x") return Magnification::x20;
  if (s == "40x") return Magnification::x40;
  throw std::invalid_argument("unknown magnification '" + s + "'");
}

constexpr int kPatchSize = 512;

struct Patch {
  std::string slide_id;
  std::string patch_id;
  int x = 0;  // pixel offsets at source magnification
  int y = 0;
  Magnification magnification = Magnification::x20;
  ImageRGB pixels;  // kPatchSize x kPatchSize
};

struct TissueMask {
  int grid_w = 0;
  int grid_h = 0;
  std::vector<uint8_t> grid;             // row-major, 1 = tissue
  std::vector<double> tissue_fraction;   // per cell, in [0,1]

  bool at(int gx, int gy) const { return grid[size_t(gy) * grid_w + gx] != 0; }
  size_t true_count() const { return size_t(std::count(grid.begin(), grid.end(), uint8_t(1))); }
};

// HSV saturation of an 8-bit RGB pixel, scaled to [0,255].
inline int saturation_255(uint8_t r, uint8_t g, uint8_t b) {
  int mx = std::max({r, g, b});
  int mn = std::min({r, g, b});
  if (mx == 0) return 0;
  return (255 * (mx - mn) + mx / 2) / mx;
}

// Otsu threshold over a 256-bin histogram; maximizes between-class variance.
// Returns -1 when the histogram is degenerate (single occupied bin).
inline int otsu_threshold(const std::vector<uint64_t>& hist) {
  uint64_t total = 0;
  double sum = 0;
  int occupied = 0;
  for (int i = 0; i < 256; ++i) {
    total += hist[i];
    sum += double(i) * hist[i];
    if (hist[i] > 0) ++occupied;
  }
  if (total == 0 || occupied <= 1) return -1;
  double sum_b = 0, best = -1.0;
  uint64_t w_b = 0;
  int thr = 0;
  for (int t = 0; t < 255; ++t) {
    w_b += hist[t];
    if (w_b == 0) continue;
    uint64_t w_f = total - w_b;
    if (w_f == 0) break;
    sum_b += double(t) * hist[t];
    double m_b = sum_b / w_b;
    double m_f = (sum - sum_b) / w_f;
    double var = double(w_b) * double(w_f) * (m_b - m_f) * (m_b - m_f);
    if (var > best) {
      best = var;
      thr = t;
    }
  }
  return thr;
}

// Tissue detection on a thumbnail whose pixels divide evenly into grid cells of
// cell_px x cell_px, one cell per patch-grid position. A cell is tissue when the
// fraction of its pixels with saturation above the global Otsu threshold reaches
// min_tissue_fraction. Degenerate (constant-saturation) thumbnails fall back to a
// fixed cutoff so blank slides come out all-background and saturated ones all-tissue.
inline TissueMask build_tissue_mask(const ImageRGB& thumbnail, int cell_px,
                                    double min_tissue_fraction = 0.5) {
  if (thumbnail.empty()) throw std::invalid_argument("build_tissue_mask: empty thumbnail");
  if (cell_px <= 0 || thumbnail.width % cell_px || thumbnail.height % cell_px)
    throw std::invalid_argument("build_tissue_mask: thumbnail not divisible into cells");
  if (!(min_tissue_fraction > 0.0 && min_tissue_fraction <= 1.0))
    throw std::invalid_argument("build_tissue_mask: min_tissue_fraction out of (0,1]");

  std::vector<uint64_t> hist(256, 0);
  for (size_t i = 0; i < thumbnail.data.size(); i += 3)
    ++hist[saturation_255(thumbnail.data[i], thumbnail.data[i + 1], thumbnail.data[i + 2])];
  int thr = otsu_threshold(hist);
  if (thr < 0) thr = 25;  // constant saturation: ~0.1 cutoff separates blank from stained

  TissueMask mask;
  mask.grid_w = thumbnail.width / cell_px;
  mask.grid_h = thumbnail.height / cell_px;
  mask.grid.resize(size_t(mask.grid_w) * mask.grid_h);
  mask.tissue_fraction.resize(mask.grid.size());
  for (int gy = 0; gy < mask.grid_h; ++gy) {
    for (int gx = 0; gx < mask.grid_w; ++gx) {
      int n_tissue = 0;
      for (int dy = 0; dy < cell_px; ++dy)
        for (int dx = 0; dx < cell_px; ++dx) {
          int x = gx * cell_px + dx, y = gy * cell_px + dy;
          if (saturation_255(thumbnail.at(x, y, 0), thumbnail.at(x, y, 1), thumbnail.at(x, y, 2)) > thr)
            ++n_tissue;
        }
      double frac = double(n_tissue) / (double(cell_px) * cell_px);
      size_t idx = size_t(gy) * mask.grid_w + gx;
      mask.tissue_fraction[idx] = frac;
      mask.grid[idx] = frac >= min_tissue_fraction ? 1 : 0;
    }
  }
  return mask;
}

struct TileRef {
  std::string slide_id;
  std::string patch_id;
  std::string path;
  int x = 0;
  int y = 0;
  Magnification magnification = Magnification::x20;
};

struct PatchError {
  std::string patch_id;
  std::string message;
};

// One tile per patch-grid cell; grid position is pixel offset / kPatchSize.
// Emits exactly one Patch per true mask cell in row-major cell order; failed
// tile reads become error records and the scan continues.
inline std::vector<Patch> extract_patches(const std::vector<TileRef>& tiles, const TissueMask& mask,
                                          std::vector<PatchError>* errors = nullptr) {
  std::vector<std::optional<const TileRef*>> by_cell(size_t(mask.grid_w) * mask.grid_h);
  for (const auto& t : tiles) {
    int gx = t.x / kPatchSize, gy = t.y / kPatchSize;
    if (gx < 0 || gx >= mask.grid_w || gy < 0 || gy >= mask.grid_h)
      throw std::invalid_argument("extract_patches: tile " + t.patch_id + " outside mask grid");
    by_cell[size_t(gy) * mask.grid_w + gx] = &t;
  }
  std::vector<Patch> out;
  for (int gy = 0; gy < mask.grid_h; ++gy) {
    for (int gx = 0; gx < mask.grid_w; ++gx) {
      size_t idx = size_t(gy) * mask.grid_w + gx;
      if (!mask.grid[idx]) continue;
      if (!by_cell[idx]) {
        if (errors) errors->push_back({"", "no tile for cell (" + std::to_string(gx) + "," + std::to_string(gy) + ")"});
        continue;
      }
      const TileRef& t = **by_cell[idx];
      try {
        Patch p;
        p.slide_id = t.slide_id;
        p.patch_id = t.patch_id;
        p.x = t.x;
        p.y = t.y;
        p.magnification = t.magnification;
        p.pixels = read_tile_rgb(t.path);
        if (p.pixels.width != kPatchSize || p.pixels.height != kPatchSize)
          throw std::invalid_argument("tile is not 512x512");
        out.push_back(std::move(p));
      } catch (const std::exception& e) {
        if (errors) errors->push_back({t.patch_id, e.what()});
      }
    }
  }
  return out;
}

// --- Lanczos-3 2x upscale -------------------------------------------------

inline double lanczos3(double x) {
  x = std::abs(x);
  if (x < 1e-12) return 1.0;
  if (x >= 3.0) return 0.0;
  double px = std::numbers::pi * x;
  return 3.0 * std::sin(px) * std::sin(px / 3.0) / (px * px);
}

namespace detail {

// Tap positions and normalized weights for one output coordinate at scale 2,
// clamp-to-edge. Weights sum to 1 so a constant signal is reproduced exactly.
struct LanczosTaps {
  int index[6];
  double weight[6];
};

inline std::vector<LanczosTaps> lanczos_taps_2x(int src_len) {
  std::vector<LanczosTaps> taps(size_t(src_len) * 2);
  for (int o = 0; o < src_len * 2; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    int base = int(std::floor(src)) - 2;
    double sum = 0;
    for (int k = 0; k < 6; ++k) {
      double w = lanczos3(src - (base + k));
      taps[o].weight[k] = w;
      taps[o].index[k] = std::clamp(base + k, 0, src_len - 1);
      sum += w;
    }
    for (int k = 0; k < 6; ++k) taps[o].weight[k] /= sum;
  }
  return taps;
}

}  // namespace detail

// Separable Lanczos-3 resampling of an RGB raster to twice the size, returned
// as unclamped doubles (channel-interleaved) for oracle comparison.
inline std::vector<double> lanczos_upscale_2x(const ImageRGB& src) {
  int w = src.width, h = src.height;
  auto hx = detail::lanczos_taps_2x(w);
  auto vy = detail::lanczos_taps_2x(h);
  std::vector<double> mid(size_t(h) * w * 2 * 3);
  for (int y = 0; y < h; ++y)
    for (int o = 0; o < 2 * w; ++o) {
      const auto& t = hx[o];
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int k = 0; k < 6; ++k) acc += t.weight[k] * src.at(t.index[k], y, c);
        mid[(size_t(y) * 2 * w + o) * 3 + c] = acc;
      }
    }
  std::vector<double> out(size_t(2 * h) * 2 * w * 3);
  for (int o = 0; o < 2 * h; ++o) {
    const auto& t = vy[o];
    for (int x = 0; x < 2 * w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int k = 0; k < 6; ++k) acc += t.weight[k] * mid[(size_t(t.index[k]) * 2 * w + x) * 3 + c];
        out[(size_t(o) * 2 * w + x) * 3 + c] = acc;
      }
  }
  return out;
}

inline uint8_t round_clamp_u8(double v) {
  // half away from zero
  double r = v >= 0 ? std::floor(v + 0.5) : std::ceil(v - 0.5);
  return uint8_t(std::clamp(r, 0.0, 255.0));
}

// 20x -> 40x translation: resample to 1024x1024 with Lanczos-3 and split into
// the four 512x512 quadrants (top-left, top-right, bottom-left, bottom-right).
// Quadrant patch ids append _q0.._q3.
inline std::vector<Patch> upscale_to_40x(const Patch& p) {
  if (p.magnification != Magnification::x20)
    throw std::invalid_argument("upscale_to_40x: patch must be at 20x");
  if (p.pixels.width != kPatchSize || p.pixels.height != kPatchSize)
    throw std::invalid_argument("upscale_to_40x: patch must be 512x512");

  auto big = lanczos_upscale_2x(p.pixels);
  const int W = 2 * kPatchSize;
  std::vector<Patch> out(4);
  for (int q = 0; q < 4; ++q) {
    int qx = (q % 2) * kPatchSize;
    int qy = (q / 2) * kPatchSize;
    Patch& dst = out[q];
    dst.slide_id = p.slide_id;
    dst.patch_id = p.patch_id + "_q" + std::to_string(q);
    dst.x = p.x * 2 + qx;
    dst.y = p.y * 2 + qy;
    dst.magnification = Magnification::x40;
    dst.pixels = ImageRGB(kPatchSize, kPatchSize);
    for (int y = 0; y < kPatchSize; ++y)
      for (int x = 0; x < kPatchSize; ++x)
        for (int c = 0; c < 3; ++c)
          dst.pixels.at(x, y, c) = round_clamp_u8(big[(size_t(qy + y) * W + qx + x) * 3 + c]);
  }
  return out;
}

inline std::string patch_filename(const Patch& p) {
  return p.slide_id + "_" + std::to_string(p.x) + "_" + std::to_string(p.y) + "_" +
         to_string(p.magnification) + ".png";
}

}  // namespace histomorph
