#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "histomorph/raster.hpp"

using namespace histomorph;
namespace fs = std::filesystem;

namespace {

// independent Otsu oracle: scan all thresholds, maximize between-class variance
// computed directly from class moments
int otsu_oracle(const std::vector<uint64_t>& hist) {
  uint64_t total = 0;
  for (auto h : hist) total += h;
  double best = -1;
  int best_t = 0;
  for (int t = 0; t < 255; ++t) {
    uint64_t n0 = 0, n1 = 0;
    double s0 = 0, s1 = 0;
    for (int i = 0; i <= t; ++i) {
      n0 += hist[i];
      s0 += double(i) * hist[i];
    }
    for (int i = t + 1; i < 256; ++i) {
      n1 += hist[i];
      s1 += double(i) * hist[i];
    }
    if (n0 == 0 || n1 == 0) continue;
    double m0 = s0 / n0, m1 = s1 / n1;
    double var = (double(n0) / total) * (double(n1) / total) * (m0 - m1) * (m0 - m1);
    if (var > best) {
      best = var;
      best_t = t;
    }
  }
  return best_t;
}

// direct (non-separable) 2x Lanczos resample oracle: for each output pixel,
// evaluate the full 6x6 tap window with clamp-to-edge and normalized weights
std::vector<double> lanczos_oracle_2x(const ImageRGB& src) {
  int w = src.width, h = src.height;
  std::vector<double> out(size_t(4) * w * h * 3);
  for (int oy = 0; oy < 2 * h; ++oy)
    for (int ox = 0; ox < 2 * w; ++ox) {
      double sx = (ox + 0.5) / 2.0 - 0.5;
      double sy = (oy + 0.5) / 2.0 - 0.5;
      int bx = int(std::floor(sx)) - 2, by = int(std::floor(sy)) - 2;
      double wx[6], wy[6], sumx = 0, sumy = 0;
      for (int k = 0; k < 6; ++k) {
        wx[k] = lanczos3(sx - (bx + k));
        wy[k] = lanczos3(sy - (by + k));
        sumx += wx[k];
        sumy += wy[k];
      }
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int ky = 0; ky < 6; ++ky)
          for (int kx = 0; kx < 6; ++kx) {
            int x = std::clamp(bx + kx, 0, w - 1);
            int y = std::clamp(by + ky, 0, h - 1);
            acc += (wx[kx] / sumx) * (wy[ky] / sumy) * src.at(x, y, c);
          }
        out[(size_t(oy) * 2 * w + ox) * 3 + c] = acc;
      }
    }
  return out;
}

ImageRGB random_image(int w, int h, uint64_t seed) {
  ImageRGB img(w, h);
  std::mt19937_64 rng(seed);
  for (auto& v : img.data) v = uint8_t(rng());
  return img;
}

}  // namespace

TEST_CASE("otsu matches exhaustive between-class-variance scan") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<uint64_t> hist(256, 0);
    // bimodal-ish random histogram
    std::normal_distribution<double> a(60, 15), b(180, 25);
    for (int i = 0; i < 2000; ++i) {
      int v = int(std::clamp(trial % 2 ? a(rng) : b(rng), 0.0, 255.0));
      ++hist[v];
      v = int(std::clamp(trial % 2 ? b(rng) : a(rng), 0.0, 255.0));
      ++hist[v];
    }
    CHECK(otsu_threshold(hist) == otsu_oracle(hist));
  }
}

TEST_CASE("otsu degenerate histogram reports -1") {
  std::vector<uint64_t> hist(256, 0);
  CHECK(otsu_threshold(hist) == -1);
  hist[100] = 500;
  CHECK(otsu_threshold(hist) == -1);
}

TEST_CASE("tissue mask: blank slide all background, saturated slide all tissue") {
  ImageRGB white(80, 40, 255);
  auto m_white = build_tissue_mask(white, 8);
  CHECK(m_white.grid_w == 10);
  CHECK(m_white.grid_h == 5);
  CHECK(m_white.true_count() == 0);

  ImageRGB magenta(80, 40);
  for (size_t i = 0; i < magenta.data.size(); i += 3) {
    magenta.data[i] = 210;
    magenta.data[i + 1] = 60;
    magenta.data[i + 2] = 190;
  }
  auto m_tissue = build_tissue_mask(magenta, 8);
  CHECK(m_tissue.true_count() == size_t(m_tissue.grid_w) * m_tissue.grid_h);
}

TEST_CASE("tissue mask separates a stained half from a blank half") {
  ImageRGB img(64, 16, 255);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 32; ++x) {
      img.at(x, y, 0) = 200;
      img.at(x, y, 1) = 80;
      img.at(x, y, 2) = 160;
    }
  auto m = build_tissue_mask(img, 8);
  for (int gy = 0; gy < m.grid_h; ++gy)
    for (int gx = 0; gx < m.grid_w; ++gx) CHECK(m.at(gx, gy) == (gx < 4));
}

TEST_CASE("extract_patches honors the mask and records failed reads") {
  fs::path dir = fs::temp_directory_path() / "hm_test_extract";
  fs::create_directories(dir);
  ImageRGB px(kPatchSize, kPatchSize, 128);
  write_png_rgb((dir / "a.png").string(), px);

  TissueMask mask;
  mask.grid_w = 2;
  mask.grid_h = 1;
  mask.grid = {1, 1};
  mask.tissue_fraction = {1.0, 1.0};
  std::vector<TileRef> tiles = {
      {"s1", "p0", (dir / "a.png").string(), 0, 0, Magnification::x20},
      {"s1", "p1", (dir / "missing.png").string(), 512, 0, Magnification::x20},
  };
  std::vector<PatchError> errors;
  auto patches = extract_patches(tiles, mask, &errors);
  REQUIRE(patches.size() == 1);
  CHECK(patches[0].patch_id == "p0");
  REQUIRE(errors.size() == 1);
  CHECK(errors[0].patch_id == "p1");

  mask.grid = {0, 1};
  errors.clear();
  auto patches2 = extract_patches(tiles, mask, &errors);
  CHECK(patches2.empty());  // masked-out cell skipped, remaining cell fails to read
  CHECK(errors.size() == 1);
  fs::remove_all(dir);
}

TEST_CASE("lanczos kernel basics") {
  CHECK(lanczos3(0.0) == doctest::Approx(1.0));
  for (int k = 1; k < 3; ++k) CHECK(std::abs(lanczos3(double(k))) < 1e-12);
  CHECK(lanczos3(3.0) == 0.0);
  CHECK(lanczos3(-1.5) == doctest::Approx(lanczos3(1.5)));
}

TEST_CASE("lanczos 2x: constant image reproduced exactly") {
  ImageRGB img(17, 9, 0);
  for (size_t i = 0; i < img.data.size(); i += 3) {
    img.data[i] = 37;
    img.data[i + 1] = 201;
    img.data[i + 2] = 96;
  }
  auto up = lanczos_upscale_2x(img);
  for (size_t i = 0; i < up.size(); i += 3) {
    CHECK(up[i] == doctest::Approx(37).epsilon(1e-12));
    CHECK(up[i + 1] == doctest::Approx(201).epsilon(1e-12));
    CHECK(up[i + 2] == doctest::Approx(96).epsilon(1e-12));
  }
}

TEST_CASE("lanczos 2x matches the direct convolution oracle to 1e-9") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    auto img = random_image(23, 11, seed);
    auto got = lanczos_upscale_2x(img);
    auto want = lanczos_oracle_2x(img);
    REQUIRE(got.size() == want.size());
    double max_err = 0;
    for (size_t i = 0; i < got.size(); ++i) max_err = std::max(max_err, std::abs(got[i] - want[i]));
    CHECK(max_err < 1e-9);
  }
}

TEST_CASE("round_clamp_u8 rounds half away from zero and clamps") {
  CHECK(round_clamp_u8(0.5) == 1);
  CHECK(round_clamp_u8(1.5) == 2);
  CHECK(round_clamp_u8(2.4999) == 2);
  CHECK(round_clamp_u8(-0.6) == 0);
  CHECK(round_clamp_u8(255.5) == 255);
  CHECK(round_clamp_u8(300.0) == 255);
}

TEST_CASE("upscale_to_40x yields four quadrants tiling the 2x resample") {
  Patch p;
  p.slide_id = "s";
  p.patch_id = "s_p";
  p.x = 512;
  p.y = 1024;
  p.pixels = random_image(kPatchSize, kPatchSize, 99);
  auto quads = upscale_to_40x(p);
  REQUIRE(quads.size() == 4);
  auto big = lanczos_upscale_2x(p.pixels);
  const int W = 2 * kPatchSize;
  for (int q = 0; q < 4; ++q) {
    CHECK(quads[q].magnification == Magnification::x40);
    CHECK(quads[q].patch_id == "s_p_q" + std::to_string(q));
    CHECK(quads[q].pixels.width == kPatchSize);
    CHECK(quads[q].pixels.height == kPatchSize);
    int qx = (q % 2) * kPatchSize, qy = (q / 2) * kPatchSize;
    CHECK(quads[q].x == p.x * 2 + qx);
    CHECK(quads[q].y == p.y * 2 + qy);
    for (int y = 0; y < kPatchSize; y += 37)
      for (int x = 0; x < kPatchSize; x += 41)
        CHECK(quads[q].pixels.at(x, y, 1) ==
              round_clamp_u8(big[(size_t(qy + y) * W + qx + x) * 3 + 1]));
  }
}

TEST_CASE("png round trip, rgb and 16-bit labels") {
  fs::path dir = fs::temp_directory_path() / "hm_test_png";
  fs::create_directories(dir);
  auto img = random_image(33, 21, 5);
  write_png_rgb((dir / "x.png").string(), img);
  auto back = read_png_rgb((dir / "x.png").string());
  CHECK(back.width == img.width);
  CHECK(back.data == img.data);

  ImageLabel lab(20, 10);
  std::mt19937_64 rng(6);
  for (auto& v : lab.data) v = uint16_t(rng());
  write_png_label16((dir / "l.png").string(), lab);
  auto lback = read_png_label16((dir / "l.png").string());
  CHECK(lback.data == lab.data);
  fs::remove_all(dir);
}

TEST_CASE("patch_filename format") {
  Patch p;
  p.slide_id = "sl3";
  p.x = 1024;
  p.y = 512;
  p.magnification = Magnification::x20;
  CHECK(patch_filename(p) == "sl3_1024_512_20x.png");
}
