#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "slime/errors.hpp"

namespace slime {

using Point2 = Eigen::Vector2d;

// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

// Cyclic distance |a - b| wrapped into [0, pi].
double angle_distance(double a, double b);

// Dehomogenizes m * [p; 1]. Returns false when the result lies at infinity
// (|w| < 1e-12).
bool project_point(const Eigen::Matrix3d& m, const Point2& p, Point2* out);

// Invertible 3x3 projective map. Stored with unit Frobenius norm and the
// sign fixed so m(2,2) >= 0 when m(2,2) != 0.
class Homography {
 public:
  // Throws DegeneracyError when |det| <= 1e-12 after normalization.
  static Homography from_matrix(const Eigen::Matrix3d& m);
  static Homography identity();

  const Eigen::Matrix3d& matrix() const { return m_; }
  const Eigen::Matrix3d& inverse_matrix() const { return m_inv_; }
  Homography inverse() const;

  bool map(const Point2& p, Point2* out) const { return project_point(m_, p, out); }
  bool map_inverse(const Point2& p, Point2* out) const { return project_point(m_inv_, p, out); }

 private:
  Homography(const Eigen::Matrix3d& m, const Eigen::Matrix3d& m_inv) : m_(m), m_inv_(m_inv) {}
  Eigen::Matrix3d m_;
  Eigen::Matrix3d m_inv_;
};

// Rank-2 3x3 epipolar matrix with unit Frobenius norm. Construction forces
// the smallest singular value to zero.
class FundamentalMatrix {
 public:
  static FundamentalMatrix from_matrix(const Eigen::Matrix3d& m);

  const Eigen::Matrix3d& matrix() const { return m_; }
  FundamentalMatrix transpose() const;

 private:
  explicit FundamentalMatrix(const Eigen::Matrix3d& m) : m_(m) {}
  Eigen::Matrix3d m_;
};

// max(||x' - Hx||, ||x - H^-1 x'||) with dehomogenization before the norm.
// A reprojection landing at infinity yields +inf.
double reprojection_error_max(const Point2& x, const Point2& x_prime, const Homography& h);

// max over both directions of |x'^T F x| / sqrt((Fx)_1^2 + (Fx)_2^2).
// Degenerate epipolar lines yield +inf.
double epipolar_error_max(const Point2& x, const Point2& x_prime, const FundamentalMatrix& f);

using Correspondence = std::pair<Point2, Point2>;

// Hartley-normalized direct linear transform; exact on noise-free input.
// Throws SizeError for fewer than 4 points, DegeneracyError for degenerate
// configurations (e.g. 3 collinear source points among 4).
Homography estimate_homography_dlt(const std::vector<Correspondence>& correspondences);

// Hartley-normalized eight-point algorithm with rank-2 enforcement.
// Throws SizeError for fewer than 8 points, DegeneracyError when the design
// matrix is rank-deficient (pure planar scenes included).
FundamentalMatrix estimate_fundamental_8pt(const std::vector<Correspondence>& correspondences);

struct RansacOptions {
  double threshold = 15.0;      // px, strict inlier bound
  int max_iterations = 10000;   // hard cap on valid samples
  std::uint64_t seed = 0;
  double confidence = 0.999;    // adaptive termination target
};

struct HomographyRansacResult {
  std::optional<Homography> model;
  std::vector<int> inlier_indices;  // sorted ascending
  int iterations_run = 0;
};

struct FundamentalRansacResult {
  std::optional<FundamentalMatrix> model;
  std::vector<int> inlier_indices;
  int iterations_run = 0;
};

// RANSAC over 4-point samples with the max-reprojection inlier test and a
// final DLT refit on the inlier set. Fewer than 4 correspondences or no
// model with >= 4 inliers gives an empty result, not an error.
HomographyRansacResult ransac_homography(const std::vector<Correspondence>& correspondences,
                                         const RansacOptions& options);

// RANSAC over 8-point samples with the max-epipolar-distance inlier test.
FundamentalRansacResult ransac_fundamental(const std::vector<Correspondence>& correspondences,
                                           const RansacOptions& options);

// True iff the third homogeneous coordinate of H*x keeps the sign shared by
// every anchor, and symmetrically for H^-1*x'. Degenerate |w| gives false.
bool plane_side_preserved(const Point2& x, const Point2& x_prime, const Homography& h,
                          const std::vector<Correspondence>& anchors);

// arctan2(Hn - Hx) - arctan2(n - x), wrapped to (-pi, pi]. Empty when a
// reprojection lands at infinity.
std::optional<double> relative_orientation_after_reproj(const Homography& h, const Point2& x,
                                                        const Point2& n);

// ||Hn - Hx|| after dehomogenization (||n - x|| = 1 by the caller's choice
// of n). Empty when a reprojection lands at infinity.
std::optional<double> relative_scale_after_reproj(const Homography& h, const Point2& x,
                                                  const Point2& n);

// splitmix64 step; used to derive independent per-task RANSAC seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace slime
