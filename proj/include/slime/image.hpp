#pragma once

#include <string>
#include <vector>

#include "slime/errors.hpp"

namespace slime {

// Single-channel luminance raster, samples in [0, 1], row-major.
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<float> samples;

  RasterImage() = default;
  RasterImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), samples(static_cast<size_t>(w) * h, fill) {}

  float at(int x, int y) const { return samples[static_cast<size_t>(y) * width + x]; }
  float& at(int x, int y) { return samples[static_cast<size_t>(y) * width + x]; }

  // reflect-101 lookup (mirror without repeating the edge sample)
  float at_reflect(int x, int y) const;

  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

  RasterImage crop(int x0, int y0, int w, int h) const;
};

// reflect-101 index into [0, n)
int mirror_index(int i, int n);

// Separable Lanczos3 resampling (a = 3, reflect-101 boundaries), output dims
// round(input * factor). Pixel-center convention: output j samples the input
// at (j + 0.5) / factor - 0.5. Throws for factor outside (0, 8].
RasterImage resample(const RasterImage& img, double factor);

// reflect-101 padding by `pad` pixels on all four sides.
RasterImage pad_image(const RasterImage& img, int pad);

// 8-bit RGB raster for overlays.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> samples;  // 3 bytes per pixel, row-major

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), samples(static_cast<size_t>(w) * h * 3, 0) {}

  void set(int x, int y, unsigned char r, unsigned char g, unsigned char b) {
    if (x < 0 || x >= width || y < 0 || y >= height) return;
    size_t i = (static_cast<size_t>(y) * width + x) * 3;
    samples[i] = r;
    samples[i + 1] = g;
    samples[i + 2] = b;
  }
};

// Loads a PGM (P2/P5) or PNG file into luminance in [0, 1]; color inputs use
// BT.601 luma. The format is chosen by the file's magic bytes.
RasterImage load_image(const std::string& path);

void save_pgm(const std::string& path, const RasterImage& img);
void save_png_gray(const std::string& path, const RasterImage& img);
void save_png_rgb(const std::string& path, const RgbImage& img);

// Dispatches on the file extension (.png vs anything else -> PGM).
void save_image(const std::string& path, const RasterImage& img);

}  // namespace slime
