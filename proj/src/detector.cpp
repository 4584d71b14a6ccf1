#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

#include "slime/matcher.hpp"

namespace slime {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kIntervals = 3;           // DoG levels per octave carrying extrema
constexpr int kGaussPerOctave = kIntervals + 3;
constexpr double kBaseSigma = 1.6;
constexpr double kAssumedBlur = 0.5;
constexpr int kOriBins = 36;
constexpr int kDescWidth = 4;
constexpr int kDescOriBins = 8;
constexpr int kMinRegionSide = 16;

void gaussian_blur_inplace(RasterImage& img, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double k = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[i + radius] = static_cast<float>(k);
    sum += k;
  }
  for (auto& k : kernel) k = static_cast<float>(k / sum);

  const int w = img.width, h = img.height;
  RasterImage tmp(w, h);
  for (int y = 0; y < h; ++y) {
    const float* row = &img.samples[static_cast<size_t>(y) * w];
    float* out = &tmp.samples[static_cast<size_t>(y) * w];
    int x = 0;
    for (; x < std::min(radius, w); ++x) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * row[mirror_index(x + i, w)];
      out[x] = acc;
    }
    for (; x < w - radius; ++x) {
      float acc = 0.0f;
      const float* p = row + x - radius;
      for (int i = 0; i <= 2 * radius; ++i) acc += kernel[i] * p[i];
      out[x] = acc;
    }
    for (; x < w; ++x) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * row[mirror_index(x + i, w)];
      out[x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    float* out = &img.samples[static_cast<size_t>(y) * w];
    std::fill(out, out + w, 0.0f);
    for (int i = -radius; i <= radius; ++i) {
      const float k = kernel[i + radius];
      const float* src = &tmp.samples[static_cast<size_t>(mirror_index(y + i, h)) * w];
      for (int x = 0; x < w; ++x) out[x] += k * src[x];
    }
  }
}

RasterImage decimate2(const RasterImage& img) {
  RasterImage out(std::max(1, img.width / 2), std::max(1, img.height / 2));
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.at(x, y) = img.at(2 * x, 2 * y);
  return out;
}

struct Octave {
  std::vector<RasterImage> gauss;  // kGaussPerOctave levels
  std::vector<RasterImage> dog;    // kGaussPerOctave - 1 levels
};

std::vector<Octave> build_pyramid(const RasterImage& base, int max_octaves) {
  std::vector<Octave> pyramid;
  RasterImage current = base;
  gaussian_blur_inplace(current,
                        std::sqrt(std::max(0.0, kBaseSigma * kBaseSigma -
                                                    kAssumedBlur * kAssumedBlur)));
  const double k = std::pow(2.0, 1.0 / kIntervals);
  std::vector<double> increments(kGaussPerOctave, 0.0);
  for (int i = 1; i < kGaussPerOctave; ++i) {
    double prev = kBaseSigma * std::pow(k, i - 1);
    double next = prev * k;
    increments[i] = std::sqrt(next * next - prev * prev);
  }

  for (int o = 0; o < max_octaves; ++o) {
    if (std::min(current.width, current.height) < kMinRegionSide) break;
    Octave oct;
    oct.gauss.push_back(current);
    for (int i = 1; i < kGaussPerOctave; ++i) {
      RasterImage level = oct.gauss.back();
      gaussian_blur_inplace(level, increments[i]);
      oct.gauss.push_back(std::move(level));
    }
    for (int i = 0; i + 1 < kGaussPerOctave; ++i) {
      RasterImage d(oct.gauss[i].width, oct.gauss[i].height);
      for (size_t p = 0; p < d.samples.size(); ++p)
        d.samples[p] = oct.gauss[i + 1].samples[p] - oct.gauss[i].samples[p];
      oct.dog.push_back(std::move(d));
    }
    current = decimate2(oct.gauss[kIntervals]);  // sigma doubled
    pyramid.push_back(std::move(oct));
  }
  return pyramid;
}

bool is_extremum(const std::vector<RasterImage>& dog, int level, int x, int y) {
  const float v = dog[level].at(x, y);
  const bool maximum = v > 0;
  for (int dl = -1; dl <= 1; ++dl)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dl == 0 && dy == 0 && dx == 0) continue;
        const float n = dog[level + dl].at(x + dx, y + dy);
        if (maximum ? n >= v : n <= v) return false;
      }
  return true;
}

struct RawKeypoint {
  double x, y;       // octave-frame coordinates
  double sigma_oct;  // sigma within the octave frame
  int octave;
  int level;
  int ix, iy;  // integer location for orientation/descriptor sampling
};

// One quadratic refinement step; rejects low-contrast and edge responses.
bool refine_keypoint(const std::vector<RasterImage>& dog, int level, int x, int y,
                     double contrast_threshold, double edge_ratio, RawKeypoint* out) {
  const RasterImage& d = dog[level];
  auto v = [&](int dl, int dy, int dx) -> double { return dog[level + dl].at(x + dx, y + dy); };

  const double dx = 0.5 * (v(0, 0, 1) - v(0, 0, -1));
  const double dy = 0.5 * (v(0, 1, 0) - v(0, -1, 0));
  const double ds = 0.5 * (v(1, 0, 0) - v(-1, 0, 0));
  const double dxx = v(0, 0, 1) + v(0, 0, -1) - 2 * v(0, 0, 0);
  const double dyy = v(0, 1, 0) + v(0, -1, 0) - 2 * v(0, 0, 0);
  const double dss = v(1, 0, 0) + v(-1, 0, 0) - 2 * v(0, 0, 0);
  const double dxy = 0.25 * (v(0, 1, 1) - v(0, 1, -1) - v(0, -1, 1) + v(0, -1, -1));
  const double dxs = 0.25 * (v(1, 0, 1) - v(1, 0, -1) - v(-1, 0, 1) + v(-1, 0, -1));
  const double dys = 0.25 * (v(1, 1, 0) - v(1, -1, 0) - v(-1, 1, 0) + v(-1, -1, 0));

  Eigen::Matrix3d hess;
  hess << dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss;
  Eigen::Vector3d grad(dx, dy, ds);
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();
  const double det = hess.determinant();
  if (std::abs(det) > 1e-18) offset = -hess.inverse() * grad;
  if (offset.cwiseAbs().maxCoeff() > 1.5) return false;
  offset = offset.cwiseMax(-0.5).cwiseMin(0.5);

  const double contrast = v(0, 0, 0) + 0.5 * grad.dot(offset);
  if (std::abs(contrast) < contrast_threshold) return false;

  const double tr = dxx + dyy;
  const double det2 = dxx * dyy - dxy * dxy;
  const double r = edge_ratio;
  if (det2 <= 0.0 || tr * tr * r >= (r + 1) * (r + 1) * det2) return false;

  out->x = x + offset(0);
  out->y = y + offset(1);
  out->sigma_oct = kBaseSigma * std::pow(2.0, (level + offset(2)) / kIntervals);
  out->level = level;
  out->ix = x;
  out->iy = y;
  (void)d;
  return true;
}

// Dominant gradient direction from a smoothed 36-bin histogram.
double dominant_orientation(const RasterImage& gauss, int x, int y, double sigma_oct) {
  const double sigma_w = 1.5 * sigma_oct;
  const int radius = std::max(1, static_cast<int>(std::lround(3.0 * sigma_w)));
  std::array<double, kOriBins> hist{};
  for (int oy = -radius; oy <= radius; ++oy)
    for (int ox = -radius; ox <= radius; ++ox) {
      const int px = x + ox, py = y + oy;
      if (px < 1 || px >= gauss.width - 1 || py < 1 || py >= gauss.height - 1) continue;
      const double gx = 0.5 * (gauss.at(px + 1, py) - gauss.at(px - 1, py));
      const double gy = 0.5 * (gauss.at(px, py + 1) - gauss.at(px, py - 1));
      const double mag = std::sqrt(gx * gx + gy * gy);
      const double w = std::exp(-0.5 * (ox * ox + oy * oy) / (sigma_w * sigma_w));
      double angle = std::atan2(gy, gx);  // (-pi, pi]
      int bin = static_cast<int>(std::floor((angle + kPi) / (2.0 * kPi) * kOriBins));
      bin = std::clamp(bin, 0, kOriBins - 1);
      hist[bin] += w * mag;
    }

  for (int pass = 0; pass < 2; ++pass) {
    std::array<double, kOriBins> smooth{};
    for (int i = 0; i < kOriBins; ++i)
      smooth[i] = (hist[(i + kOriBins - 1) % kOriBins] + hist[i] + hist[(i + 1) % kOriBins]) / 3.0;
    hist = smooth;
  }

  int best = 0;
  for (int i = 1; i < kOriBins; ++i)
    if (hist[i] > hist[best]) best = i;
  const double l = hist[(best + kOriBins - 1) % kOriBins];
  const double c = hist[best];
  const double r = hist[(best + 1) % kOriBins];
  double interp = 0.0;
  const double denom = l - 2 * c + r;
  if (std::abs(denom) > 1e-12) interp = std::clamp(0.5 * (l - r) / denom, -0.5, 0.5);
  return wrap_angle(-kPi + (best + 0.5 + interp) * (2.0 * kPi / kOriBins));
}

Descriptor compute_descriptor(const RasterImage& gauss, double x, double y, double sigma_oct,
                              double theta) {
  const double cell = 3.0 * sigma_oct;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const int radius = std::min(
      static_cast<int>(std::lround(cell * (kDescWidth + 1) * std::numbers::sqrt2 * 0.5)),
      std::max(gauss.width, gauss.height));
  const double sigma_desc = 0.5 * kDescWidth;

  std::array<double, kDescWidth * kDescWidth * kDescOriBins> hist{};
  const int cx = static_cast<int>(std::lround(x));
  const int cy = static_cast<int>(std::lround(y));
  for (int oy = -radius; oy <= radius; ++oy)
    for (int ox = -radius; ox <= radius; ++ox) {
      const int px = cx + ox, py = cy + oy;
      if (px < 1 || px >= gauss.width - 1 || py < 1 || py >= gauss.height - 1) continue;
      const double rx = px - x, ry = py - y;
      const double u = (cos_t * rx + sin_t * ry) / cell;
      const double v = (-sin_t * rx + cos_t * ry) / cell;
      if (std::abs(u) >= kDescWidth / 2.0 + 0.5 || std::abs(v) >= kDescWidth / 2.0 + 0.5)
        continue;
      const double gx = 0.5 * (gauss.at(px + 1, py) - gauss.at(px - 1, py));
      const double gy = 0.5 * (gauss.at(px, py + 1) - gauss.at(px, py - 1));
      const double mag = std::sqrt(gx * gx + gy * gy);
      const double w = std::exp(-0.5 * (u * u + v * v) / (sigma_desc * sigma_desc));
      const double ori = wrap_angle(std::atan2(gy, gx) - theta);

      const double rbin = v + kDescWidth / 2.0 - 0.5;
      const double cbin = u + kDescWidth / 2.0 - 0.5;
      const double obin = (ori + kPi) / (2.0 * kPi) * kDescOriBins;
      const int r0 = static_cast<int>(std::floor(rbin));
      const int c0 = static_cast<int>(std::floor(cbin));
      const int o0 = static_cast<int>(std::floor(obin));
      const double fr = rbin - r0, fc = cbin - c0, fo = obin - o0;
      for (int dr = 0; dr <= 1; ++dr)
        for (int dc = 0; dc <= 1; ++dc)
          for (int dob = 0; dob <= 1; ++dob) {
            const int rr = r0 + dr, cc = c0 + dc;
            if (rr < 0 || rr >= kDescWidth || cc < 0 || cc >= kDescWidth) continue;
            const int oo = ((o0 + dob) % kDescOriBins + kDescOriBins) % kDescOriBins;
            const double contrib = w * mag * (dr ? fr : 1 - fr) * (dc ? fc : 1 - fc) *
                                   (dob ? fo : 1 - fo);
            hist[(rr * kDescWidth + cc) * kDescOriBins + oo] += contrib;
          }
    }

  Descriptor d;
  d.v.resize(hist.size());
  double norm = 0.0;
  for (double h : hist) norm += h * h;
  norm = std::sqrt(norm);
  if (norm < 1e-12) {
    d.v.clear();  // flat patch, caller drops the keypoint
    return d;
  }
  for (size_t i = 0; i < hist.size(); ++i) d.v[i] = static_cast<float>(std::min(hist[i] / norm, 0.2));
  double norm2 = 0.0;
  for (float h : d.v) norm2 += static_cast<double>(h) * h;
  norm2 = std::sqrt(norm2);
  for (auto& h : d.v) h = static_cast<float>(h / norm2);
  return d;
}

}  // namespace

MatchSet BaseMatcherInterface::match_pair(const ImageRegion& r1, const ImageRegion& r2,
                                          std::optional<double> override1,
                                          std::optional<double> override2, long origin) const {
  auto f1 = detect_and_describe(r1, kBlockPad, override1);
  auto f2 = detect_and_describe(r2, kBlockPad, override2);
  return match_features(f1, f2, origin);
}

struct BuiltinMatcher::Cache {
  std::mutex mutex;
  // key: (cache_key, orientation override bits or sentinel, margin)
  std::map<std::tuple<long, std::uint64_t, int>, std::vector<DetectedFeature>> entries;
};

BuiltinMatcher::BuiltinMatcher(const BuiltinMatcherOptions& options)
    : options_(options), cache_(std::make_unique<Cache>()) {}

BuiltinMatcher::~BuiltinMatcher() = default;

std::vector<DetectedFeature> BuiltinMatcher::detect_and_describe(
    const ImageRegion& region, int exclusion_margin,
    std::optional<double> orientation_override) const {
  const std::uint64_t theta_bits =
      orientation_override ? std::bit_cast<std::uint64_t>(*orientation_override)
                           : 0xffffffffffffffffULL;
  const auto key = std::make_tuple(region.cache_key, theta_bits, exclusion_margin);
  if (region.cache_key >= 0) {
    std::lock_guard<std::mutex> lock(cache_->mutex);
    auto it = cache_->entries.find(key);
    if (it != cache_->entries.end()) return it->second;
  }

  std::vector<DetectedFeature> features;
  const Rect& win = region.window;
  if (win.w >= kMinRegionSide && win.h >= kMinRegionSide) {
    RasterImage crop = region.padded->crop(win.x0, win.y0, win.w, win.h);
    auto pyramid = build_pyramid(crop, options_.octaves);

    for (size_t o = 0; o < pyramid.size(); ++o) {
      const auto& oct = pyramid[o];
      const double oct_scale = std::pow(2.0, static_cast<double>(o));
      for (int level = 1; level <= kIntervals; ++level) {
        const RasterImage& d = oct.dog[level];
        for (int y = 1; y < d.height - 1; ++y)
          for (int x = 1; x < d.width - 1; ++x) {
            if (std::abs(d.at(x, y)) < 0.5 * options_.contrast_threshold) continue;
            if (!is_extremum(oct.dog, level, x, y)) continue;
            RawKeypoint raw{};
            raw.octave = static_cast<int>(o);
            if (!refine_keypoint(oct.dog, level, x, y, options_.contrast_threshold,
                                 options_.edge_ratio, &raw))
              continue;

            // octave frame -> region frame (pixel centers)
            const double rx = (raw.x + 0.5) * oct_scale - 0.5;
            const double ry = (raw.y + 0.5) * oct_scale - 0.5;
            if (rx < exclusion_margin || rx > win.w - 1 - exclusion_margin ||
                ry < exclusion_margin || ry > win.h - 1 - exclusion_margin)
              continue;

            const RasterImage& g = oct.gauss[raw.level];
            double theta = orientation_override
                               ? *orientation_override
                               : dominant_orientation(g, raw.ix, raw.iy, raw.sigma_oct);
            DetectedFeature f;
            f.p.x = region.to_full_res(rx, ry);
            f.p.theta = orientation_override ? *orientation_override : theta;
            f.p.sigma = raw.sigma_oct * oct_scale / region.scale_factor;
            f.d = compute_descriptor(g, raw.x, raw.y, raw.sigma_oct, theta);
            if (f.d.v.empty()) continue;
            features.push_back(std::move(f));
          }
      }
    }
    // Deterministic order regardless of pyramid traversal details.
    std::sort(features.begin(), features.end(), [](const DetectedFeature& a,
                                                   const DetectedFeature& b) {
      if (a.p.x.x() != b.p.x.x()) return a.p.x.x() < b.p.x.x();
      if (a.p.x.y() != b.p.x.y()) return a.p.x.y() < b.p.x.y();
      return a.p.sigma < b.p.sigma;
    });
  }

  if (region.cache_key >= 0) {
    std::lock_guard<std::mutex> lock(cache_->mutex);
    cache_->entries.emplace(key, features);
  }
  return features;
}

MatchSet BuiltinMatcher::match_features(const std::vector<DetectedFeature>& set1,
                                        const std::vector<DetectedFeature>& set2,
                                        long origin) const {
  return nn_match(set1, set2, options_.nnr_threshold, origin);
}

}  // namespace slime
