#pragma once

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slime/blocks.hpp"
#include "slime/geometry.hpp"
#include "slime/image.hpp"

namespace slime {

// Keypoint as position + orientation + scale, in full-resolution unpadded
// pixel coordinates.
struct PatchPoint {
  Point2 x = Point2::Zero();
  double theta = 0.0;  // radians, (-pi, pi]
  double sigma = 1.0;  // > 0
};

// Unit-norm feature vector.
struct Descriptor {
  std::vector<float> v;
};

struct Match {
  PatchPoint p;        // image 1
  PatchPoint p_prime;  // image 2
  double similarity = 0.0;  // descriptor distance, >= 0
  long origin = -1;         // block-pair or tile-pair linear index
};

// Ordered list of matches; duplicates are permitted and meaningful.
struct MatchSet {
  std::vector<Match> matches;

  size_t size() const { return matches.size(); }
  bool empty() const { return matches.empty(); }

  // Deterministic order: (x, y, x', y', similarity), then the remaining
  // fields as tie-breakers.
  void sort_canonical();
};

inline double reprojection_error_max(const Match& m, const Homography& h) {
  return reprojection_error_max(m.p.x, m.p_prime.x, h);
}
inline double epipolar_error_max(const Match& m, const FundamentalMatrix& f) {
  return epipolar_error_max(m.p.x, m.p_prime.x, f);
}

struct DetectedFeature {
  PatchPoint p;  // full-resolution unpadded coordinates
  Descriptor d;
};

// A block/tile window of a prepared (scaled + padded) raster, together with
// the bookkeeping needed to place detections in full-resolution coordinates.
struct ImageRegion {
  const RasterImage* padded = nullptr;  // padded raster of the scale level
  Rect window;                          // detection window, padded-frame coords
  int image_index = 1;                  // 1 or 2
  double scale_factor = 1.0;
  int pad = kBlockPad;
  long cache_key = -1;  // unique per (image, level, block); -1 disables caching

  // padded scaled-frame -> full-resolution unpadded
  Point2 to_full_res(double x_local, double y_local) const {
    return Point2(scaled_to_full(window.x0 + x_local - pad, scale_factor),
                  scaled_to_full(window.y0 + y_local - pad, scale_factor));
  }
};

// Nearest-neighbor-ratio matching by exhaustive descriptor search. Ties are
// broken toward the lowest index; fewer than 2 candidates yields no matches.
MatchSet nn_match(const std::vector<DetectedFeature>& set1,
                  const std::vector<DetectedFeature>& set2, double nnr_threshold,
                  long origin = -1);

// Neighborhood-consistency filter: contracts matches whose flow deviates
// from the Delaunay-neighbor median and re-admits those that recover, until
// a fixed point (at most 10 rounds). Never grows beyond the input set.
MatchSet delaunay_consistency_filter(const MatchSet& matches);

// Base matcher contract: detection/description with an optional imposed
// orientation, plus matching of two described sets.
class BaseMatcherInterface {
 public:
  virtual ~BaseMatcherInterface() = default;

  virtual std::vector<DetectedFeature> detect_and_describe(
      const ImageRegion& region, int exclusion_margin,
      std::optional<double> orientation_override) const = 0;

  virtual MatchSet match_features(const std::vector<DetectedFeature>& set1,
                                  const std::vector<DetectedFeature>& set2,
                                  long origin) const = 0;

  // Convenience used by the pipeline; a matcher backed by an external match
  // file overrides this instead of the two primitives.
  virtual MatchSet match_pair(const ImageRegion& r1, const ImageRegion& r2,
                              std::optional<double> override1, std::optional<double> override2,
                              long origin) const;
};

struct BuiltinMatcherOptions {
  double nnr_threshold = 0.95;
  double contrast_threshold = 0.01;
  double edge_ratio = 10.0;
  int octaves = 3;
};

// Difference-of-Gaussians detector with gradient-histogram descriptors.
// Detection results are memoized per (cache_key, override) so repeated
// block-pair queries do not recompute.
class BuiltinMatcher : public BaseMatcherInterface {
 public:
  explicit BuiltinMatcher(const BuiltinMatcherOptions& options = {});
  ~BuiltinMatcher() override;

  std::vector<DetectedFeature> detect_and_describe(
      const ImageRegion& region, int exclusion_margin,
      std::optional<double> orientation_override) const override;

  MatchSet match_features(const std::vector<DetectedFeature>& set1,
                          const std::vector<DetectedFeature>& set2, long origin) const override;

 private:
  struct Cache;
  BuiltinMatcherOptions options_;
  std::unique_ptr<Cache> cache_;
};

// Matcher fed from an externally supplied match set: per region pair it
// returns the stored matches whose endpoints fall inside the two windows,
// with any imposed orientations substituted.
class IngestMatcher : public BaseMatcherInterface {
 public:
  explicit IngestMatcher(MatchSet matches);

  std::vector<DetectedFeature> detect_and_describe(
      const ImageRegion& region, int exclusion_margin,
      std::optional<double> orientation_override) const override;

  MatchSet match_features(const std::vector<DetectedFeature>& set1,
                          const std::vector<DetectedFeature>& set2, long origin) const override;

  MatchSet match_pair(const ImageRegion& r1, const ImageRegion& r2,
                      std::optional<double> override1, std::optional<double> override2,
                      long origin) const override;

  const MatchSet& all_matches() const { return matches_; }

 private:
  MatchSet matches_;
};

// Interchange format: one match per line, 9 tab-separated fields
// (x y theta sigma x' y' theta' sigma' similarity), '#' comments.
MatchSet ingest_matches(std::istream& stream);
MatchSet ingest_matches_file(const std::string& path);
void emit_matches(std::ostream& stream, const MatchSet& matches);
void emit_matches_file(const std::string& path, const MatchSet& matches);

}  // namespace slime
