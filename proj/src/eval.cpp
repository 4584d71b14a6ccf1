#include "slime/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace slime {

namespace {

void stamp_disk(std::vector<unsigned char>& mask, int w, int h, double cx, double cy, double r) {
  const int icx = static_cast<int>(std::llround(cx));
  const int icy = static_cast<int>(std::llround(cy));
  const int ir = static_cast<int>(std::ceil(r));
  const double r2 = r * r;
  for (int dy = -ir; dy <= ir; ++dy) {
    const int y = icy + dy;
    if (y < 0 || y >= h) continue;
    for (int dx = -ir; dx <= ir; ++dx) {
      const int x = icx + dx;
      if (x < 0 || x >= w) continue;
      if (dx * dx + dy * dy <= r2) mask[static_cast<size_t>(y) * w + x] = 1;
    }
  }
}

bool mask_valid_at(const RasterImage& mask, int x, int y) {
  if (!mask.in_bounds(x, y)) return false;
  return mask.at(x, y) > 0.5f;
}

bool in_image(const Point2& p, int w, int h) {
  return p.x() >= 0.0 && p.x() < w && p.y() >= 0.0 && p.y() < h;
}

}  // namespace

bool is_correct_planar(const Match& m, const GroundTruth& gt, double t_perp) {
  return reprojection_error_max(m, *gt.h_gt) < t_perp;
}

bool is_correct_nonplanar(const Match& m, const GroundTruth& gt, double t_perp) {
  if (!(epipolar_error_max(m, *gt.f_gt) < t_perp)) return false;

  // Flow agreement with the 4 nearest hand-taken anchors.
  struct Entry {
    double dist;
    const Correspondence* c;
  };
  std::vector<Entry> entries;
  entries.reserve(gt.anchors.size());
  for (const auto& a : gt.anchors) entries.push_back({(a.first - m.p.x).norm(), &a});
  const size_t k = std::min<size_t>(4, entries.size());
  if (k == 0) return true;
  std::partial_sort(entries.begin(), entries.begin() + k, entries.end(),
                    [](const Entry& a, const Entry& b) { return a.dist < b.dist; });
  Point2 mean = Point2::Zero();
  double weight_sum = 0.0;
  for (size_t i = 0; i < k; ++i) {
    const double w = 1.0 / std::max(entries[i].dist, 1e-9);
    mean += w * (entries[i].c->second - entries[i].c->first);
    weight_sum += w;
  }
  mean /= weight_sum;
  const Point2 flow = m.p_prime.x - m.p.x;
  return (flow - mean).norm() < 2.0 * t_perp;
}

bool is_correct(const Match& m, const GroundTruth& gt, double t_perp) {
  return gt.kind == GroundTruthKind::planar ? is_correct_planar(m, gt, t_perp)
                                            : is_correct_nonplanar(m, gt, t_perp);
}

double coverage(const MatchSet& matches, const GroundTruth& gt, int w1, int h1, int w2, int h2,
                double t_perp) {
  const bool planar = gt.kind == GroundTruthKind::planar;
  if (!planar && (!gt.valid_mask_1 || !gt.valid_mask_2))
    throw SizeError("non-planar coverage needs the union valid masks");

  double norm_cov[2];
  for (int side = 0; side < 2; ++side) {
    const int w = side == 0 ? w1 : w2;
    const int h = side == 0 ? h1 : h2;
    std::vector<unsigned char> covered(static_cast<size_t>(w) * h, 0);
    for (const auto& m : matches.matches) {
      if (!is_correct(m, gt, t_perp)) continue;
      const Point2& p = side == 0 ? m.p.x : m.p_prime.x;
      stamp_disk(covered, w, h, p.x(), p.y(), t_perp);
    }

    long valid_count = 0, covered_count = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        bool valid;
        if (planar) {
          Point2 mapped;
          const bool ok = side == 0 ? gt.h_gt->map(Point2(x, y), &mapped)
                                    : gt.h_gt->map_inverse(Point2(x, y), &mapped);
          valid = ok && in_image(mapped, side == 0 ? w2 : w1, side == 0 ? h2 : h1);
        } else {
          valid = mask_valid_at(side == 0 ? *gt.valid_mask_1 : *gt.valid_mask_2, x, y);
        }
        if (!valid) continue;
        ++valid_count;
        if (covered[static_cast<size_t>(y) * w + x]) ++covered_count;
      }
    if (valid_count == 0) throw SizeError("empty valid region (misconfigured ground truth)");
    norm_cov[side] = static_cast<double>(covered_count) / static_cast<double>(valid_count);
  }
  return std::min(norm_cov[0], norm_cov[1]);
}

double precision(const MatchSet& matches, const GroundTruth& gt, double t_perp, long* correct_out,
                 FailureKind* failure_out) {
  long correct = 0;
  for (const auto& m : matches.matches)
    if (is_correct(m, gt, t_perp)) ++correct;
  if (correct_out) *correct_out = correct;
  if (matches.empty()) {
    if (failure_out) *failure_out = FailureKind::no_matches;
    return 0.0;
  }
  if (failure_out) *failure_out = correct == 0 ? FailureKind::only_wrong : FailureKind::none;
  return static_cast<double>(correct) / static_cast<double>(matches.size());
}

namespace {

double threshold_sweep_score(double e12, double e21, double t_perp) {
  const int top = static_cast<int>(std::lround(t_perp));
  int passed = 0;
  const double e = std::max(e12, e21);
  for (int t = 1; t <= top; ++t)
    if (e < static_cast<double>(t)) ++passed;
  return static_cast<double>(passed) / static_cast<double>(top);
}

// Mean reprojection gap between two homographies over the valid grid points
// of the source image.
std::optional<double> mean_reprojection_gap(const Homography& model, const Homography& gt_h,
                                            bool forward, int w_src, int h_src, int w_dst,
                                            int h_dst, int stride) {
  double sum = 0.0;
  long count = 0;
  for (int y = 0; y < h_src; y += stride)
    for (int x = 0; x < w_src; x += stride) {
      const Point2 p(x, y);
      Point2 gt_mapped;
      const bool ok =
          forward ? gt_h.map(p, &gt_mapped) : gt_h.map_inverse(p, &gt_mapped);
      if (!ok || !in_image(gt_mapped, w_dst, h_dst)) continue;
      ++count;
      Point2 model_mapped;
      const bool ok2 =
          forward ? model.map(p, &model_mapped) : model.map_inverse(p, &model_mapped);
      if (!ok2) {
        sum = std::numeric_limits<double>::infinity();
        continue;
      }
      sum += (model_mapped - gt_mapped).norm();
    }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

}  // namespace

double accuracy_planar(const MatchSet& matches, const GroundTruth& gt, int w1, int h1, int w2,
                       int h2, const EvalOptions& options) {
  if (matches.size() < 4) return 0.0;
  std::vector<Correspondence> corr;
  corr.reserve(matches.size());
  for (const auto& m : matches.matches) corr.emplace_back(m.p.x, m.p_prime.x);
  RansacOptions ropt;
  ropt.threshold = options.t_r;
  ropt.seed = options.seed;
  ropt.max_iterations = options.ransac_max_iterations;
  HomographyRansacResult fit = ransac_homography(corr, ropt);
  if (!fit.model) return 0.0;

  auto e12 = mean_reprojection_gap(*fit.model, *gt.h_gt, true, w1, h1, w2, h2,
                                   options.sample_stride);
  auto e21 = mean_reprojection_gap(*fit.model, *gt.h_gt, false, w2, h2, w1, h1,
                                   options.sample_stride);
  if (!e12 || !e21) return 0.0;
  return threshold_sweep_score(*e12, *e21, options.t_perp);
}

namespace {

// Convex clip of a polygon by the half-plane sign * (a x + b y + c) >= 0.
std::vector<Point2> clip_halfplane(const std::vector<Point2>& poly, const Eigen::Vector3d& line,
                                   double sign) {
  std::vector<Point2> out;
  const size_t n = poly.size();
  if (n == 0) return out;
  auto value = [&](const Point2& p) {
    return sign * (line(0) * p.x() + line(1) * p.y() + line(2));
  };
  for (size_t i = 0; i < n; ++i) {
    const Point2& a = poly[i];
    const Point2& b = poly[(i + 1) % n];
    const double va = value(a), vb = value(b);
    if (va >= 0.0) out.push_back(a);
    if ((va >= 0.0) != (vb >= 0.0)) {
      const double t = va / (va - vb);
      out.push_back(a + t * (b - a));
    }
  }
  return out;
}

double polygon_area(const std::vector<Point2>& poly) {
  double twice = 0.0;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Point2& a = poly[i];
    const Point2& b = poly[(i + 1) % n];
    twice += a.x() * b.y() - a.y() * b.x();
  }
  return std::abs(twice) * 0.5;
}

}  // namespace

double epipolar_wedge_error(const Eigen::Vector3d& line_a, const Eigen::Vector3d& line_b,
                            int width, int height) {
  const std::vector<Point2> rect = {Point2(0, 0), Point2(width, 0), Point2(width, height),
                                    Point2(0, height)};
  // Opposite-sign region between the lines, clipped to the image; the sign
  // pairing is resolved by taking the smaller of the region and its
  // complement, which also removes the scale ambiguity of the lines.
  const double s1 = polygon_area(clip_halfplane(clip_halfplane(rect, line_a, 1.0), line_b, -1.0));
  const double s2 = polygon_area(clip_halfplane(clip_halfplane(rect, line_a, -1.0), line_b, 1.0));
  const double between = s1 + s2;
  const double total = static_cast<double>(width) * height;
  return std::min(between, total - between);
}

namespace {

std::optional<double> mean_wedge_error(const FundamentalMatrix& model,
                                       const FundamentalMatrix& gt_f, bool forward, int w_src,
                                       int h_src, int w_dst, int h_dst,
                                       const std::optional<RasterImage>& src_mask, int stride) {
  const double diag = std::hypot(static_cast<double>(w_dst), static_cast<double>(h_dst));
  double sum = 0.0;
  long count = 0;
  for (int y = 0; y < h_src; y += stride)
    for (int x = 0; x < w_src; x += stride) {
      if (src_mask && !mask_valid_at(*src_mask, x, y)) continue;
      const Eigen::Vector3d p(x, y, 1.0);
      const Eigen::Vector3d la = forward ? Eigen::Vector3d(model.matrix() * p)
                                         : Eigen::Vector3d(model.matrix().transpose() * p);
      const Eigen::Vector3d lb = forward ? Eigen::Vector3d(gt_f.matrix() * p)
                                         : Eigen::Vector3d(gt_f.matrix().transpose() * p);
      if (la.head<2>().norm() < 1e-12 || lb.head<2>().norm() < 1e-12) continue;
      sum += epipolar_wedge_error(la, lb, w_dst, h_dst) / diag;
      ++count;
    }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

}  // namespace

double accuracy_nonplanar(const MatchSet& matches, const GroundTruth& gt, int w1, int h1, int w2,
                          int h2, const EvalOptions& options) {
  if (matches.size() < 8) return 0.0;
  std::vector<Correspondence> corr;
  corr.reserve(matches.size());
  for (const auto& m : matches.matches) corr.emplace_back(m.p.x, m.p_prime.x);
  RansacOptions ropt;
  ropt.threshold = options.t_r;
  ropt.seed = options.seed;
  ropt.max_iterations = options.ransac_max_iterations;
  FundamentalRansacResult fit = ransac_fundamental(corr, ropt);
  if (!fit.model) return 0.0;

  auto e12 = mean_wedge_error(*fit.model, *gt.f_gt, true, w1, h1, w2, h2, gt.valid_mask_1,
                              options.sample_stride);
  auto e21 = mean_wedge_error(*fit.model, *gt.f_gt, false, w2, h2, w1, h1, gt.valid_mask_2,
                              options.sample_stride);
  if (!e12 || !e21) return 0.0;
  return threshold_sweep_score(*e12, *e21, options.t_perp);
}

MetricReport compute_metrics(const MatchSet& matches, const GroundTruth& gt, int w1, int h1,
                             int w2, int h2, const EvalOptions& options) {
  MetricReport r;
  r.total_count = static_cast<long>(matches.size());
  r.precision = precision(matches, gt, options.t_perp, &r.correct_count, &r.failure_kind);
  const bool planar = gt.kind == GroundTruthKind::planar;
  if (planar || (gt.valid_mask_1 && gt.valid_mask_2)) {
    r.coverage = coverage(matches, gt, w1, h1, w2, h2, options.t_perp);
    r.coverage_defined = true;
  }
  r.accuracy = planar ? accuracy_planar(matches, gt, w1, h1, w2, h2, options)
                      : accuracy_nonplanar(matches, gt, w1, h1, w2, h2, options);
  return r;
}

namespace {

const char* failure_name(FailureKind k) {
  switch (k) {
    case FailureKind::none:
      return "none";
    case FailureKind::no_matches:
      return "no-matches";
    case FailureKind::only_wrong:
      return "only-wrong";
  }
  return "none";
}

double parse_number(const std::string& tok, int line) {
  try {
    size_t used = 0;
    double v = std::stod(tok, &used);
    if (used != tok.size() || !std::isfinite(v)) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ParseError("malformed number '" + tok + "' in ground-truth file", line);
  }
}

}  // namespace

GroundTruth load_ground_truth(std::istream& stream) {
  GroundTruth gt;
  std::string line;
  int line_number = 0;
  int matrix_rows = 0;
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  bool have_kind = false;

  while (std::getline(stream, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string first;
    if (!(ss >> first)) continue;
    if (first[0] == '#') continue;

    if (!have_kind) {
      if (first == "planar")
        gt.kind = GroundTruthKind::planar;
      else if (first == "nonplanar")
        gt.kind = GroundTruthKind::nonplanar;
      else
        throw ParseError("expected 'planar' or 'nonplanar', got '" + first + "'", line_number);
      have_kind = true;
      continue;
    }
    if (first == "mask1" || first == "mask2") {
      std::string path;
      if (!(ss >> path)) throw ParseError("missing mask path", line_number);
      (first == "mask1" ? gt.mask1_path : gt.mask2_path) = path;
      continue;
    }
    std::vector<double> nums{parse_number(first, line_number)};
    std::string tok;
    while (ss >> tok) nums.push_back(parse_number(tok, line_number));
    if (matrix_rows < 3) {
      if (nums.size() != 3) throw ParseError("matrix rows need 3 values", line_number);
      for (int c = 0; c < 3; ++c) m(matrix_rows, c) = nums[c];
      ++matrix_rows;
    } else {
      if (nums.size() != 4) throw ParseError("anchor lines need 4 values", line_number);
      gt.anchors.emplace_back(Point2(nums[0], nums[1]), Point2(nums[2], nums[3]));
    }
  }

  if (!have_kind) throw ParseError("empty ground-truth file", line_number);
  if (matrix_rows != 3) throw ParseError("ground-truth matrix incomplete", line_number);

  if (gt.kind == GroundTruthKind::planar) {
    try {
      gt.h_gt = Homography::from_matrix(m);
    } catch (const DegeneracyError& e) {
      throw ParseError(std::string("invalid planar GT: ") + e.what(), line_number);
    }
  } else {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m);
    const auto& s = svd.singularValues();
    if (s(2) > 1e-3 * s(0))
      throw ParseError("non-planar GT matrix is not rank 2 within tolerance", line_number);
    try {
      gt.f_gt = FundamentalMatrix::from_matrix(m);
    } catch (const DegeneracyError& e) {
      throw ParseError(std::string("invalid non-planar GT: ") + e.what(), line_number);
    }
    if (gt.anchors.size() < 8)
      throw ParseError("non-planar GT needs at least 8 anchor correspondences", line_number);
  }
  return gt;
}

GroundTruth load_ground_truth_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SizeError("cannot open ground-truth file: " + path);
  GroundTruth gt = load_ground_truth(in);
  const auto dir = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path mp(p);
    return mp.is_absolute() ? mp.string() : (dir / mp).string();
  };
  if (!gt.mask1_path.empty()) gt.valid_mask_1 = load_image(resolve(gt.mask1_path));
  if (!gt.mask2_path.empty()) gt.valid_mask_2 = load_image(resolve(gt.mask2_path));
  return gt;
}

void emit_ground_truth(std::ostream& stream, const GroundTruth& gt) {
  const bool planar = gt.kind == GroundTruthKind::planar;
  stream << (planar ? "planar" : "nonplanar") << "\n";
  const Eigen::Matrix3d& m = planar ? gt.h_gt->matrix() : gt.f_gt->matrix();
  char buf[256];
  for (int r = 0; r < 3; ++r) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", m(r, 0), m(r, 1), m(r, 2));
    stream << buf;
  }
  for (const auto& a : gt.anchors) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g\n", a.first.x(), a.first.y(),
                  a.second.x(), a.second.y());
    stream << buf;
  }
  if (!gt.mask1_path.empty()) stream << "mask1 " << gt.mask1_path << "\n";
  if (!gt.mask2_path.empty()) stream << "mask2 " << gt.mask2_path << "\n";
}

std::string metric_report_text(const MetricReport& r) {
  std::ostringstream os;
  os << "matches:   " << r.total_count << " (" << r.correct_count << " correct)\n";
  if (r.coverage_defined)
    os << "coverage:  " << r.coverage << "\n";
  else
    os << "coverage:  n/a (no union valid mask supplied)\n";
  os << "precision: " << r.precision << "\n";
  os << "accuracy:  " << r.accuracy << "\n";
  os << "failure:   " << failure_name(r.failure_kind) << "\n";
  return os.str();
}

std::string metric_report_keyvalues(const MetricReport& r) {
  std::ostringstream os;
  if (r.coverage_defined) os << "coverage=" << r.coverage << "\n";
  os << "precision=" << r.precision << "\n";
  os << "accuracy=" << r.accuracy << "\n";
  os << "correct=" << r.correct_count << "\n";
  os << "total=" << r.total_count << "\n";
  os << "failure=" << failure_name(r.failure_kind) << "\n";
  return os.str();
}

}  // namespace slime
