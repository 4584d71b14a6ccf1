#include "slime/geometry.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace slime {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kInfinityW = 1e-12;

// Fixes the overall sign so the last nonzero entry in row-major order is
// positive, preferring m(2,2) when it is nonzero. Already-canonical input
// passes through bit-identically (text round-trips stay exact).
Eigen::Matrix3d normalize_sign_and_scale(const Eigen::Matrix3d& m) {
  const double norm = m.norm();
  Eigen::Matrix3d out = std::abs(norm - 1.0) <= 1e-14 ? m : Eigen::Matrix3d(m / norm);
  double pivot = out(2, 2);
  if (pivot == 0.0) {
    for (int r = 2; r >= 0 && pivot == 0.0; --r)
      for (int c = 2; c >= 0 && pivot == 0.0; --c) pivot = out(r, c);
  }
  if (pivot < 0.0) out = -out;
  return out;
}

struct HartleyTransform {
  Eigen::Matrix3d t;
};

// Smallest right singular direction of the design matrix, plus the ratio
// sigma_8 / sigma_1 for degeneracy detection. Small systems use the exact
// Jacobi SVD; large ones go through the 9x9 normal equations, whose null
// direction is identical and whose cost is linear in the row count.
void smallest_design_direction(const Eigen::MatrixXd& a, Eigen::Matrix<double, 9, 1>* dir,
                               double* rank_ratio) {
  if (a.rows() <= 64) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    *rank_ratio = sv(7) / std::max(sv(0), 1e-300);
    *dir = svd.matrixV().col(8);
    return;
  }
  const Eigen::Matrix<double, 9, 9> ata = a.transpose() * a;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> eig(ata);
  const auto& ev = eig.eigenvalues();  // ascending
  const double s1 = std::sqrt(std::max(ev(8), 0.0));
  const double s8 = std::sqrt(std::max(ev(1), 0.0));
  *rank_ratio = s8 / std::max(s1, 1e-300);
  *dir = eig.eigenvectors().col(0);
}

// Centroid to the origin, mean distance sqrt(2).
HartleyTransform hartley_normalize(const std::vector<Point2>& pts) {
  Point2 centroid = Point2::Zero();
  for (const auto& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += (p - centroid).norm();
  mean_dist /= static_cast<double>(pts.size());
  double scale = mean_dist > 1e-15 ? std::sqrt(2.0) / mean_dist : 1.0;
  Eigen::Matrix3d t;
  t << scale, 0, -scale * centroid.x(), 0, scale, -scale * centroid.y(), 0, 0, 1;
  return {t};
}

bool three_collinear(const Point2& a, const Point2& b, const Point2& c, double area_tol) {
  double twice_area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
  return std::abs(twice_area) < 2.0 * area_tol;
}

double point_line_distance(const Eigen::Vector3d& line, const Point2& p) {
  double denom_sq = line(0) * line(0) + line(1) * line(1);
  if (denom_sq < 1e-18) return std::numeric_limits<double>::infinity();
  return std::abs(line(0) * p.x() + line(1) * p.y() + line(2)) / std::sqrt(denom_sq);
}

struct Splitmix64 {
  std::uint64_t state;
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // Bounded draw; the modulo bias is irrelevant for sampling indices.
  int below(int n) { return static_cast<int>(next() % static_cast<std::uint64_t>(n)); }
};

void sample_distinct(Splitmix64& rng, int n, int k, std::vector<int>* out) {
  out->clear();
  while (static_cast<int>(out->size()) < k) {
    int idx = rng.below(n);
    if (std::find(out->begin(), out->end(), idx) == out->end()) out->push_back(idx);
  }
}

int adaptive_iteration_bound(int inliers, int total, int sample_size, double confidence,
                             int hard_cap) {
  double w = static_cast<double>(inliers) / static_cast<double>(total);
  if (w >= 1.0) return 1;
  double denom = std::log1p(-std::pow(w, sample_size));
  if (denom >= 0.0 || !std::isfinite(denom)) return hard_cap;
  double needed = std::log(1.0 - confidence) / denom;
  if (!std::isfinite(needed) || needed >= static_cast<double>(hard_cap)) return hard_cap;
  return std::max(1, static_cast<int>(std::ceil(needed)));
}

}  // namespace

double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * kPi);
  if (w <= -kPi) w += 2.0 * kPi;
  return w;
}

double angle_distance(double a, double b) { return std::abs(wrap_angle(a - b)); }

bool project_point(const Eigen::Matrix3d& m, const Point2& p, Point2* out) {
  Eigen::Vector3d q = m * Eigen::Vector3d(p.x(), p.y(), 1.0);
  if (std::abs(q(2)) < kInfinityW) return false;
  *out = Point2(q(0) / q(2), q(1) / q(2));
  return true;
}

Homography Homography::from_matrix(const Eigen::Matrix3d& m) {
  double norm = m.norm();
  if (!(norm > 0.0) || !m.allFinite()) throw DegeneracyError("homography matrix is not finite");
  Eigen::Matrix3d n = normalize_sign_and_scale(m);
  double det = n.determinant();
  if (std::abs(det) <= 1e-12) throw DegeneracyError("homography is not invertible");
  return Homography(n, n.inverse());
}

Homography Homography::identity() { return from_matrix(Eigen::Matrix3d::Identity()); }

// Exact algebraic inverse; skips re-normalization so near-degenerate maps
// cannot fail a second validation round.
Homography Homography::inverse() const { return Homography(m_inv_, m_); }

FundamentalMatrix FundamentalMatrix::from_matrix(const Eigen::Matrix3d& m) {
  if (!m.allFinite() || !(m.norm() > 0.0))
    throw DegeneracyError("fundamental matrix is not finite");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = svd.singularValues();
  if (s(1) <= 1e-15 * std::max(1.0, s(0)))
    throw DegeneracyError("fundamental matrix rank below 2");
  if (s(2) <= 1e-14 * s(0))  // rank 2 already; skip the lossy recomposition
    return FundamentalMatrix(normalize_sign_and_scale(m));
  s(2) = 0.0;
  Eigen::Matrix3d rank2 = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  return FundamentalMatrix(normalize_sign_and_scale(rank2));
}

FundamentalMatrix FundamentalMatrix::transpose() const {
  return FundamentalMatrix(normalize_sign_and_scale(m_.transpose()));
}

double reprojection_error_max(const Point2& x, const Point2& x_prime, const Homography& h) {
  Point2 fwd, bwd;
  if (!h.map(x, &fwd) || !h.map_inverse(x_prime, &bwd))
    return std::numeric_limits<double>::infinity();
  return std::max((x_prime - fwd).norm(), (x - bwd).norm());
}

double epipolar_error_max(const Point2& x, const Point2& x_prime, const FundamentalMatrix& f) {
  Eigen::Vector3d xh(x.x(), x.y(), 1.0);
  Eigen::Vector3d xph(x_prime.x(), x_prime.y(), 1.0);
  Eigen::Vector3d line_fwd = f.matrix() * xh;
  Eigen::Vector3d line_bwd = f.matrix().transpose() * xph;
  return std::max(point_line_distance(line_fwd, x_prime), point_line_distance(line_bwd, x));
}

Homography estimate_homography_dlt(const std::vector<Correspondence>& correspondences) {
  const int n = static_cast<int>(correspondences.size());
  if (n < 4) throw SizeError("homography estimation needs at least 4 correspondences");
  if (n == 4) {
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        for (int c = b + 1; c < 4; ++c)
          if (three_collinear(correspondences[a].first, correspondences[b].first,
                              correspondences[c].first, 1e-9))
            throw DegeneracyError("3 collinear source points in minimal sample");
  }

  std::vector<Point2> src(n), dst(n);
  for (int i = 0; i < n; ++i) {
    src[i] = correspondences[i].first;
    dst[i] = correspondences[i].second;
  }
  HartleyTransform t1 = hartley_normalize(src);
  HartleyTransform t2 = hartley_normalize(dst);

  Eigen::Matrix<double, 9, 1> h;
  double rank_ratio = 0.0;
  if (n == 4) {
    // minimal sample; fixed-size path keeps RANSAC iterations cheap
    Eigen::Matrix<double, 8, 9> a;
    for (int i = 0; i < 4; ++i) {
      Eigen::Vector3d p = t1.t * Eigen::Vector3d(src[i].x(), src[i].y(), 1.0);
      Eigen::Vector3d q = t2.t * Eigen::Vector3d(dst[i].x(), dst[i].y(), 1.0);
      double x = p(0), y = p(1), u = q(0), v = q(1);
      a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
      a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    }
    Eigen::JacobiSVD<Eigen::Matrix<double, 8, 9>> svd(a, Eigen::ComputeFullV);
    rank_ratio = svd.singularValues()(7) / std::max(svd.singularValues()(0), 1e-300);
    h = svd.matrixV().col(8);
  } else {
    Eigen::MatrixXd a(2 * n, 9);
    for (int i = 0; i < n; ++i) {
      Eigen::Vector3d p = t1.t * Eigen::Vector3d(src[i].x(), src[i].y(), 1.0);
      Eigen::Vector3d q = t2.t * Eigen::Vector3d(dst[i].x(), dst[i].y(), 1.0);
      double x = p(0), y = p(1), u = q(0), v = q(1);
      a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
      a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    }
    smallest_design_direction(a, &h, &rank_ratio);
  }
  if (rank_ratio < 1e-9)
    throw DegeneracyError("degenerate correspondence configuration for DLT");
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  Eigen::Matrix3d full = t2.t.inverse() * hn * t1.t;
  return Homography::from_matrix(full);
}

FundamentalMatrix estimate_fundamental_8pt(const std::vector<Correspondence>& correspondences) {
  const int n = static_cast<int>(correspondences.size());
  if (n < 8) throw SizeError("fundamental estimation needs at least 8 correspondences");

  std::vector<Point2> src(n), dst(n);
  for (int i = 0; i < n; ++i) {
    src[i] = correspondences[i].first;
    dst[i] = correspondences[i].second;
  }
  HartleyTransform t1 = hartley_normalize(src);
  HartleyTransform t2 = hartley_normalize(dst);

  Eigen::Matrix<double, 9, 1> fv;
  double rank_ratio = 0.0;
  if (n == 8) {
    Eigen::Matrix<double, 8, 9> a;
    for (int i = 0; i < 8; ++i) {
      Eigen::Vector3d p = t1.t * Eigen::Vector3d(src[i].x(), src[i].y(), 1.0);
      Eigen::Vector3d q = t2.t * Eigen::Vector3d(dst[i].x(), dst[i].y(), 1.0);
      double x = p(0), y = p(1), u = q(0), v = q(1);
      a.row(i) << u * x, u * y, u, v * x, v * y, v, x, y, 1;
    }
    Eigen::JacobiSVD<Eigen::Matrix<double, 8, 9>> svd(a, Eigen::ComputeFullV);
    rank_ratio = svd.singularValues()(7) / std::max(svd.singularValues()(0), 1e-300);
    fv = svd.matrixV().col(8);
  } else {
    Eigen::MatrixXd a(n, 9);
    for (int i = 0; i < n; ++i) {
      Eigen::Vector3d p = t1.t * Eigen::Vector3d(src[i].x(), src[i].y(), 1.0);
      Eigen::Vector3d q = t2.t * Eigen::Vector3d(dst[i].x(), dst[i].y(), 1.0);
      double x = p(0), y = p(1), u = q(0), v = q(1);
      a.row(i) << u * x, u * y, u, v * x, v * y, v, x, y, 1;
    }
    smallest_design_direction(a, &fv, &rank_ratio);
  }
  // Rank < 8 means the nullspace is not unique; pure planar scenes land here.
  if (rank_ratio < 1e-8)
    throw DegeneracyError("rank-deficient eight-point system (planar or repeated points)");
  Eigen::Matrix3d fn;
  fn << fv(0), fv(1), fv(2), fv(3), fv(4), fv(5), fv(6), fv(7), fv(8);
  Eigen::Matrix3d full = t2.t.transpose() * fn * t1.t;
  return FundamentalMatrix::from_matrix(full);
}

namespace {

// Shared RANSAC loop. Model fitting and the error predicate differ between
// the homography and fundamental cases; tie-breaking and termination do not.
template <typename Model, typename FitFn, typename ErrFn>
std::tuple<std::optional<Model>, std::vector<int>, int> ransac_generic(
    const std::vector<Correspondence>& matches, int sample_size, const RansacOptions& options,
    FitFn fit, ErrFn err) {
  const int n = static_cast<int>(matches.size());
  std::optional<Model> best_model;
  std::vector<int> best_inliers;
  double best_error_sum = std::numeric_limits<double>::infinity();
  int valid_iters = 0;
  if (n < sample_size || options.threshold <= 0.0) return {best_model, best_inliers, 0};

  Splitmix64 rng{options.seed ^ 0xa5a5a5a55a5a5a5aULL};
  std::vector<int> sample;
  std::vector<Correspondence> subset(sample_size);
  int needed = options.max_iterations;
  long long attempts = 0;
  const long long attempt_cap = 10LL * options.max_iterations;

  while (valid_iters < std::min(needed, options.max_iterations) && attempts < attempt_cap) {
    ++attempts;
    sample_distinct(rng, n, sample_size, &sample);
    for (int i = 0; i < sample_size; ++i) subset[i] = matches[sample[i]];
    std::optional<Model> model;
    try {
      model = fit(subset);
    } catch (const DegeneracyError&) {
      continue;  // resample; does not consume an iteration
    } catch (const SizeError&) {
      continue;
    }
    ++valid_iters;

    std::vector<int> inliers;
    double error_sum = 0.0;
    for (int i = 0; i < n; ++i) {
      double e = err(matches[i], *model);
      if (e < options.threshold) {
        inliers.push_back(i);
        error_sum += e;
      }
    }
    if (static_cast<int>(inliers.size()) < sample_size) continue;
    bool better = inliers.size() > best_inliers.size() ||
                  (inliers.size() == best_inliers.size() && error_sum < best_error_sum);
    if (better) {
      best_model = model;
      best_inliers = std::move(inliers);
      best_error_sum = error_sum;
      needed = adaptive_iteration_bound(static_cast<int>(best_inliers.size()), n, sample_size,
                                        options.confidence, options.max_iterations);
    }
  }

  if (best_model) {
    // Refit on the consensus set, then recompute the inliers so the reported
    // set satisfies the reported model.
    std::vector<Correspondence> consensus;
    consensus.reserve(best_inliers.size());
    for (int idx : best_inliers) consensus.push_back(matches[idx]);
    try {
      Model refit = fit(consensus);
      std::vector<int> refit_inliers;
      double refit_error_sum = 0.0;
      for (int i = 0; i < n; ++i) {
        double e = err(matches[i], refit);
        if (e < options.threshold) {
          refit_inliers.push_back(i);
          refit_error_sum += e;
        }
      }
      if (static_cast<int>(refit_inliers.size()) >= sample_size) {
        best_model = refit;
        best_inliers = std::move(refit_inliers);
        best_error_sum = refit_error_sum;
      }
    } catch (const DegeneracyError&) {
      // keep the sample model
    }
  }
  return {best_model, best_inliers, valid_iters};
}

}  // namespace

HomographyRansacResult ransac_homography(const std::vector<Correspondence>& correspondences,
                                         const RansacOptions& options) {
  auto [model, inliers, iters] = ransac_generic<Homography>(
      correspondences, 4, options,
      [](const std::vector<Correspondence>& c) { return estimate_homography_dlt(c); },
      [](const Correspondence& m, const Homography& h) {
        return reprojection_error_max(m.first, m.second, h);
      });
  return {model, inliers, iters};
}

FundamentalRansacResult ransac_fundamental(const std::vector<Correspondence>& correspondences,
                                           const RansacOptions& options) {
  auto [model, inliers, iters] = ransac_generic<FundamentalMatrix>(
      correspondences, 8, options,
      [](const std::vector<Correspondence>& c) { return estimate_fundamental_8pt(c); },
      [](const Correspondence& m, const FundamentalMatrix& f) {
        return epipolar_error_max(m.first, m.second, f);
      });
  return {model, inliers, iters};
}

namespace {

// Sign of the third homogeneous coordinate; 0 marks the degenerate band.
int w_sign(const Eigen::Matrix3d& m, const Point2& p) {
  double w = m.row(2).dot(Eigen::Vector3d(p.x(), p.y(), 1.0));
  if (std::abs(w) < kInfinityW) return 0;
  return w > 0.0 ? 1 : -1;
}

}  // namespace

bool plane_side_preserved(const Point2& x, const Point2& x_prime, const Homography& h,
                          const std::vector<Correspondence>& anchors) {
  int sx = w_sign(h.matrix(), x);
  int sxp = w_sign(h.inverse_matrix(), x_prime);
  if (sx == 0 || sxp == 0) return false;
  for (const auto& a : anchors) {
    if (w_sign(h.matrix(), a.first) != sx) return false;
    if (w_sign(h.inverse_matrix(), a.second) != sxp) return false;
  }
  return true;
}

std::optional<double> relative_orientation_after_reproj(const Homography& h, const Point2& x,
                                                        const Point2& n) {
  Point2 hx, hn;
  if (!h.map(x, &hx) || !h.map(n, &hn)) return std::nullopt;
  Point2 d_after = hn - hx;
  Point2 d_before = n - x;
  double after = std::atan2(d_after.y(), d_after.x());
  double before = std::atan2(d_before.y(), d_before.x());
  return wrap_angle(after - before);
}

std::optional<double> relative_scale_after_reproj(const Homography& h, const Point2& x,
                                                  const Point2& n) {
  Point2 hx, hn;
  if (!h.map(x, &hx) || !h.map(n, &hn)) return std::nullopt;
  return (hn - hx).norm();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  Splitmix64 rng{seed + 0x9e3779b97f4a7c15ULL * (salt + 1)};
  return rng.next();
}

}  // namespace slime
