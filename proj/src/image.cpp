#include "slime/image.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace slime {

int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

float RasterImage::at_reflect(int x, int y) const {
  return at(mirror_index(x, width), mirror_index(y, height));
}

RasterImage RasterImage::crop(int x0, int y0, int w, int h) const {
  RasterImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = at_reflect(x0 + x, y0 + y);
  return out;
}

namespace {

double lanczos3(double d) {
  if (d == 0.0) return 1.0;
  if (std::abs(d) >= 3.0) return 0.0;
  const double pd = std::numbers::pi * d;
  return 3.0 * std::sin(pd) * std::sin(pd / 3.0) / (pd * pd);
}

// One separable pass along x; transpose-free by explicit axis flag.
RasterImage resample_axis(const RasterImage& img, double factor, bool horizontal) {
  const int in_len = horizontal ? img.width : img.height;
  const int other = horizontal ? img.height : img.width;
  const int out_len = std::max<int>(1, static_cast<int>(std::llround(in_len * factor)));
  RasterImage out(horizontal ? out_len : other, horizontal ? other : out_len);

  std::vector<int> tap_start(out_len);
  std::vector<std::vector<double>> weights(out_len);
  for (int j = 0; j < out_len; ++j) {
    const double center = (j + 0.5) / factor - 0.5;
    const int first = static_cast<int>(std::ceil(center - 3.0 + 1e-12));
    const int last = static_cast<int>(std::floor(center + 3.0 - 1e-12));
    tap_start[j] = first;
    auto& w = weights[j];
    w.resize(last - first + 1);
    double sum = 0.0;
    for (int i = first; i <= last; ++i) {
      double v = lanczos3(center - i);
      w[i - first] = v;
      sum += v;
    }
    for (auto& v : w) v /= sum;  // partition of unity per output sample
  }

  for (int r = 0; r < other; ++r) {
    for (int j = 0; j < out_len; ++j) {
      const auto& w = weights[j];
      double acc = 0.0;
      for (size_t k = 0; k < w.size(); ++k) {
        int i = mirror_index(tap_start[j] + static_cast<int>(k), in_len);
        acc += w[k] * (horizontal ? img.at(i, r) : img.at(r, i));
      }
      if (horizontal)
        out.at(j, r) = static_cast<float>(acc);
      else
        out.at(r, j) = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace

RasterImage resample(const RasterImage& img, double factor) {
  if (!(factor > 0.0) || factor > 8.0)
    throw SizeError("resample factor must lie in (0, 8]");
  if (img.width < 1 || img.height < 1) throw SizeError("resample needs a non-empty image");
  if (factor == 1.0) return img;
  return resample_axis(resample_axis(img, factor, true), factor, false);
}

RasterImage pad_image(const RasterImage& img, int pad) {
  if (pad < 0) throw SizeError("pad must be non-negative");
  if (pad == 0) return img;
  RasterImage out(img.width + 2 * pad, img.height + 2 * pad);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      out.at(x, y) = img.at(mirror_index(x - pad, img.width), mirror_index(y - pad, img.height));
  return out;
}

}  // namespace slime
