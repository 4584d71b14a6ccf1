#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "slime/geometry.hpp"
#include "slime/image.hpp"
#include "slime/matcher.hpp"

namespace slime::testing {

// Deterministic RNG for test data; independent from the library's sampling.
inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

// Textured synthetic image: random Gaussian spots on a mid-gray background.
// Spot density is chosen so DoG detectors find plenty of keypoints.
inline RasterImage make_texture(int w, int h, std::uint64_t seed, int spots_per_kpx = 9) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> ux(0.0, w);
  std::uniform_real_distribution<double> uy(0.0, h);
  std::uniform_real_distribution<double> usig(1.5, 6.0);
  std::uniform_real_distribution<double> uamp(-0.45, 0.45);
  RasterImage img(w, h, 0.5f);
  const int spots = std::max(16, w * h * spots_per_kpx / 1024);
  for (int i = 0; i < spots; ++i) {
    const double cx = ux(rng), cy = uy(rng);
    const double sig = usig(rng);
    const double amp = uamp(rng);
    const int r = static_cast<int>(std::ceil(3 * sig));
    for (int y = std::max(0, (int)cy - r); y <= std::min(h - 1, (int)cy + r); ++y)
      for (int x = std::max(0, (int)cx - r); x <= std::min(w - 1, (int)cx + r); ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        img.at(x, y) += static_cast<float>(amp * std::exp(-d2 / (2 * sig * sig)));
      }
  }
  for (auto& s : img.samples) s = std::min(1.0f, std::max(0.0f, s));
  return img;
}

inline float sample_bilinear(const RasterImage& img, double x, double y, float fallback) {
  if (x < 0 || y < 0 || x > img.width - 1 || y > img.height - 1) return fallback;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0, fy = y - y0;
  return static_cast<float>((1 - fx) * (1 - fy) * img.at(x0, y0) +
                            fx * (1 - fy) * img.at(x1, y0) + (1 - fx) * fy * img.at(x0, y1) +
                            fx * fy * img.at(x1, y1));
}

// dst(x') = src(H^-1 x'); pixels mapping outside src become `fallback`.
inline RasterImage warp_image(const RasterImage& src, const Eigen::Matrix3d& h, int out_w,
                              int out_h, float fallback = 0.5f) {
  const Eigen::Matrix3d hinv = h.inverse();
  RasterImage out(out_w, out_h, fallback);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Eigen::Vector3d p = hinv * Eigen::Vector3d(x, y, 1.0);
      if (std::abs(p(2)) < 1e-12) continue;
      out.at(x, y) = sample_bilinear(src, p(0) / p(2), p(1) / p(2), fallback);
    }
  return out;
}

inline Eigen::Matrix3d similarity_matrix(double scale, double angle, double tx, double ty) {
  Eigen::Matrix3d m;
  m << scale * std::cos(angle), -scale * std::sin(angle), tx, scale * std::sin(angle),
      scale * std::cos(angle), ty, 0, 0, 1;
  return m;
}

inline Eigen::Matrix3d rotation_about(double angle, double cx, double cy) {
  Eigen::Matrix3d t1 = similarity_matrix(1.0, 0.0, -cx, -cy);
  Eigen::Matrix3d r = similarity_matrix(1.0, angle, 0.0, 0.0);
  Eigen::Matrix3d t2 = similarity_matrix(1.0, 0.0, cx, cy);
  return t2 * r * t1;
}

// Two-camera rig with planted intrinsics; provides consistent plane-induced
// homographies and the reference fundamental matrix.
struct StereoRig {
  Eigen::Matrix3d k1;
  Eigen::Matrix3d k2;
  Eigen::Matrix3d r;
  Eigen::Vector3d t;

  static StereoRig standard(double focal, double cx, double cy, double focal2_ratio = 1.0) {
    StereoRig rig;
    rig.k1 << focal, 0, cx, 0, focal, cy, 0, 0, 1;
    rig.k2 = rig.k1;
    rig.k2(0, 0) *= focal2_ratio;
    rig.k2(1, 1) *= focal2_ratio;
    const double a = 0.08;  // small yaw
    rig.r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
    rig.t = Eigen::Vector3d(-0.35, 0.04, 0.02);
    return rig;
  }

  // H = K2 (R - t n^T / d) K1^-1 for the plane n^T X = d in camera-1 frame.
  Eigen::Matrix3d plane_homography(const Eigen::Vector3d& n, double d) const {
    return k2 * (r - t * n.transpose() / d) * k1.inverse();
  }

  Eigen::Matrix3d fundamental() const {
    Eigen::Matrix3d tx;
    tx << 0, -t(2), t(1), t(2), 0, -t(0), -t(1), t(0), 0;
    Eigen::Matrix3d f = k2.inverse().transpose() * tx * r * k1.inverse();
    return f / f.norm();
  }

  // Projects the 3D point X (camera-1 frame) into both views.
  Correspondence project(const Eigen::Vector3d& x) const {
    const Eigen::Vector3d p1 = k1 * x;
    const Eigen::Vector3d p2 = k2 * (r * x + t);
    return {Point2(p1(0) / p1(2), p1(1) / p1(2)), Point2(p2(0) / p2(2), p2(1) / p2(2))};
  }
};

// Random projective map that stays well-conditioned near the given extent.
inline Eigen::Matrix3d random_projective(std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Matrix3d m;
  m << 1 + 0.2 * u(rng), 0.2 * u(rng), extent * 0.1 * u(rng), 0.2 * u(rng), 1 + 0.2 * u(rng),
      extent * 0.1 * u(rng), 0.4 * u(rng) / extent, 0.4 * u(rng) / extent, 1.0;
  return m;
}

// Rigid two-plane scene: one stereo rig, two physical planes, the texture of
// image 1 split into a left and a right quad carried by plane A and B.
struct TwoPlaneScene {
  RasterImage img1;
  RasterImage img2;
  Eigen::Matrix3d h_a;  // image1 -> image2 over quad A (left half)
  Eigen::Matrix3d h_b;  // over quad B (right half)
  int split_x = 0;

  bool in_quad_a(const Point2& p) const {
    return p.x() >= 0 && p.x() < split_x && p.y() >= 0 && p.y() < img1.height;
  }
  bool in_quad_b(const Point2& p) const {
    return p.x() >= split_x && p.x() < img1.width && p.y() >= 0 && p.y() < img1.height;
  }
  // a final match is planted-correct when it follows its own quad's plane
  bool planted_correct(const Point2& x, const Point2& x_prime, double tol) const {
    const Eigen::Matrix3d& h = x.x() < split_x ? h_a : h_b;
    Point2 mapped;
    if (!project_point(h, x, &mapped)) return false;
    return (mapped - x_prime).norm() < tol;
  }
};

inline TwoPlaneScene make_two_plane_scene(int size, std::uint64_t seed, int spots_per_kpx = 7) {
  TwoPlaneScene scene;
  scene.split_x = size / 2;
  scene.img1 = make_texture(size, size, seed, spots_per_kpx);

  // The plane-induced flows differ by ~50 px across the frame so the two
  // planes cannot be absorbed by a single homography at t_perp = 15.
  StereoRig rig;
  rig.k1 << 0.85 * size, 0, size / 2.0, 0, 0.85 * size, size / 2.0, 0, 0, 1;
  rig.k2 = rig.k1;
  const double a = 0.05;
  rig.r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  rig.t = Eigen::Vector3d(-0.5, 0.02, 0.01);
  scene.h_a = rig.plane_homography(Eigen::Vector3d(0.29, 0.07, 1.0).normalized(), 1.7);
  scene.h_b = rig.plane_homography(Eigen::Vector3d(-0.35, -0.05, 1.0).normalized(), 4.0);

  const Eigen::Matrix3d ha_inv = scene.h_a.inverse();
  const Eigen::Matrix3d hb_inv = scene.h_b.inverse();
  scene.img2 = RasterImage(size, size, 0.5f);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      Point2 src;
      if (project_point(ha_inv, Point2(x, y), &src) && scene.in_quad_a(src)) {
        scene.img2.at(x, y) = sample_bilinear(scene.img1, src.x(), src.y(), 0.5f);
      } else if (project_point(hb_inv, Point2(x, y), &src) && scene.in_quad_b(src)) {
        scene.img2.at(x, y) = sample_bilinear(scene.img1, src.x(), src.y(), 0.5f);
      }
    }
  return scene;
}

inline Match make_match(double x, double y, double xp, double yp, double theta = 0.0,
                        double sigma = 1.0, double theta_p = 0.0, double sigma_p = 1.0,
                        double similarity = 0.0) {
  Match m;
  m.p.x = Point2(x, y);
  m.p.theta = theta;
  m.p.sigma = sigma;
  m.p_prime.x = Point2(xp, yp);
  m.p_prime.theta = theta_p;
  m.p_prime.sigma = sigma_p;
  m.similarity = similarity;
  return m;
}

}  // namespace slime::testing
