#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "slime/geometry.hpp"
#include "slime/image.hpp"
#include "slime/matcher.hpp"

namespace slime {

enum class GroundTruthKind { planar, nonplanar };

struct GroundTruth {
  GroundTruthKind kind = GroundTruthKind::planar;
  std::optional<Homography> h_gt;
  std::optional<FundamentalMatrix> f_gt;
  std::vector<Correspondence> anchors;  // hand-taken, >= 8 for non-planar
  std::string mask1_path, mask2_path;
  std::optional<RasterImage> valid_mask_1, valid_mask_2;  // samples > 0.5 are valid
};

enum class FailureKind { none, no_matches, only_wrong };

struct MetricReport {
  double coverage = 0.0;
  bool coverage_defined = false;
  double precision = 0.0;
  double accuracy = 0.0;
  long correct_count = 0;
  long total_count = 0;
  FailureKind failure_kind = FailureKind::none;
};

struct EvalOptions {
  double t_perp = 15.0;
  double t_r = 3.0;  // RANSAC threshold used for the accuracy model fit
  std::uint64_t seed = 7;
  int ransac_max_iterations = 10000;
  int sample_stride = 8;  // valid-point grid for the accuracy averages
};

// Strict maximum-reprojection test against the GT homography.
bool is_correct_planar(const Match& m, const GroundTruth& gt, double t_perp);

// Epipolar bound plus flow agreement with the 4 nearest anchors
// (distance-weighted mean, 2 * t_perp tolerance).
bool is_correct_nonplanar(const Match& m, const GroundTruth& gt, double t_perp);

bool is_correct(const Match& m, const GroundTruth& gt, double t_perp);

// Dilated-disk area of the correct keypoints over the valid region, per
// image, then the minimum of the two normalized coverages. The non-planar
// valid region must be supplied as masks; an empty valid region is an error.
double coverage(const MatchSet& matches, const GroundTruth& gt, int w1, int h1, int w2, int h2,
                double t_perp);

// Fraction of correct matches; fills the failure flag for empty inputs.
double precision(const MatchSet& matches, const GroundTruth& gt, double t_perp, long* correct_out,
                 FailureKind* failure_out);

// Threshold-sweep score of the homography fitted from the matches against
// the GT homography (mean reprojection gap over valid points, both ways).
double accuracy_planar(const MatchSet& matches, const GroundTruth& gt, int w1, int h1, int w2,
                       int h2, const EvalOptions& options);

// As above with fundamental matrices; the pointwise error is the smaller
// clipped wedge area between the two epipolar lines over the image diagonal.
double accuracy_nonplanar(const MatchSet& matches, const GroundTruth& gt, int w1, int h1, int w2,
                          int h2, const EvalOptions& options);

// Pointwise epipolar-wedge error (exposed for the oracle cross-checks).
double epipolar_wedge_error(const Eigen::Vector3d& line_a, const Eigen::Vector3d& line_b,
                            int width, int height);

MetricReport compute_metrics(const MatchSet& matches, const GroundTruth& gt, int w1, int h1,
                             int w2, int h2, const EvalOptions& options);

// GT file: kind line, 3 matrix rows, anchor lines (x y x' y'), optional
// "mask1 <path>" / "mask2 <path>" lines, '#' comments.
GroundTruth load_ground_truth(std::istream& stream);
GroundTruth load_ground_truth_file(const std::string& path);  // resolves mask paths
void emit_ground_truth(std::ostream& stream, const GroundTruth& gt);

std::string metric_report_text(const MetricReport& r);
std::string metric_report_keyvalues(const MetricReport& r);

}  // namespace slime
