#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "slime/blocks.hpp"
#include "slime/geometry.hpp"
#include "slime/matcher.hpp"

namespace slime {

struct SlimeConfig {
  double t_perp = 15.0;               // px, max reprojection / epipolar bound
  int m_theta = 16;                   // orientation histogram bins
  double t_theta = 3.0 * 3.14159265358979323846 / 8.0;  // 67.5 deg
  double t_sigma = 3.0;               // relative-scale band [1/3, 3]
  double t_xi = 9.0;                  // epipolar vote factor
  double t_ov = 0.34;                 // plane-fusion Jaccard bound, > 1/3
  double t_theta_plus = 0.7853;       // global-orientation gate, < pi/4
  int block_size = kBlockSize;
  int pad = kBlockPad;
  int stride = kDefaultStride;
  int best_per_tile_pair = 2;
  int best_per_tile = 4;
  int planes_per_tile_final = 2;
  std::uint64_t ransac_seed = 7;
  int ransac_max_iterations = 10000;
  double ransac_confidence = 0.999;
  double nnr_threshold = 0.95;
  int threads = 1;
  long max_block_pairs = -1;  // escape hatch for desk-scale runs; -1 = unlimited

  void validate() const;  // throws SizeError on an invariant violation
};

// Scaled + padded rasters of one image together with its grid.
struct PreparedImage {
  RasterImage original;                    // full resolution, unpadded
  BlockGrid grid;
  std::vector<RasterImage> padded_levels;  // one per scale level
  RasterImage padded_native;               // for tiles

  ImageRegion block_region(const Block& b, int image_index) const;
  ImageRegion tile_region(const Tile& t, int image_index) const;
};

PreparedImage prepare_image(const RasterImage& img);

// A rough local plane: the homography of a block pair plus its support.
struct PlaneHypothesis {
  long l = -1;           // block-pair linear index
  int block1 = -1;       // linear block index in image 1
  int block2 = -1;
  Homography h = Homography::identity();
  MatchSet support;      // M_l, full-resolution coordinates
  double theta_star = 0.0;
};

// Matches from the shared candidate pool compatible with one plane.
struct ExpandedPlane {
  long l = -1;
  int plane_index = -1;          // index into the plane list
  std::vector<int> member_ids;   // sorted indices into the candidate pool
};

struct TilePlaneSet {
  long v = -1;        // tile-pair linear index
  int tile1 = -1;     // c
  int tile2 = -1;     // c'
  long l = -1;        // source plane block-pair index
  int plane_index = -1;
  std::vector<int> member_ids;  // sorted indices into the candidate pool
};

// Matching constrained by planar homography for one block pair: detection,
// NN-ratio matching, the neighborhood filter, then a homography RANSAC at
// t_perp. Empty output means no plane was found.
MatchSet block_pair_match(const PreparedImage& im1, const Block& b1, const PreparedImage& im2,
                          const Block& b2, const BaseMatcherInterface& matcher,
                          const SlimeConfig& cfg, long pair_index,
                          std::optional<Homography>* h_out = nullptr,
                          std::optional<double> override1 = std::nullopt,
                          std::optional<double> override2 = std::nullopt);

// Center of the maximum bin of the wrapped relative-orientation histogram;
// ties go to the lower bin index. Throws SizeError on an empty set.
double orientation_vote(const MatchSet& matches, int m_theta);

// Histogram vote over a plain list of angles (used for the global rotation).
double orientation_vote_angles(const std::vector<double>& angles, int m_theta);
double orientation_vote_angles_weighted(const std::vector<double>& angles,
                                        const std::vector<double>& weights, int m_theta);

// Re-runs the block-pair matching with orientations fixed to (0, theta_star).
std::optional<PlaneHypothesis> refine_plane_with_orientation(
    const PreparedImage& im1, const Block& b1, const PreparedImage& im2, const Block& b2,
    double theta_star, const BaseMatcherInterface& matcher, const SlimeConfig& cfg,
    long pair_index);

// The four per-candidate compatibility checks (reprojection bound, plane
// side, relative orientation, relative scale) over the shared pool.
ExpandedPlane expand_and_prune(const PlaneHypothesis& plane, int plane_index,
                               const MatchSet& pool, const SlimeConfig& cfg);

// Per-check breakdown used by tests and the acceptance suite.
struct ExpansionChecks {
  bool reprojection = false;
  bool plane_side = false;
  bool orientation = false;
  bool scale = false;
  bool all() const { return reprojection && plane_side && orientation && scale; }
};
ExpansionChecks evaluate_expansion_checks(const Match& candidate, const PlaneHypothesis& plane,
                                          const SlimeConfig& cfg);

std::vector<TilePlaneSet> build_tile_sets(const std::vector<PlaneHypothesis>& planes,
                                          const std::vector<ExpandedPlane>& expanded,
                                          const MatchSet& pool, const std::vector<Tile>& tiles1,
                                          const std::vector<Tile>& tiles2,
                                          const SlimeConfig& cfg);

// The q = 1..max_q coverage recursion for one tile pair: q = 1 maximizes
// cardinality, later q maximize matches not already covered. Ties go to the
// lower plane index; winners with no novel matches are not emitted.
std::vector<TilePlaneSet> best_sets_by_novelty(const std::vector<TilePlaneSet>& candidates,
                                               int max_q);

// Applies the recursion per tile pair (q = 1, 2).
std::vector<TilePlaneSet> best_two_per_tile_pair(const std::vector<TilePlaneSet>& sets,
                                                 const SlimeConfig& cfg);

// Re-selects at most four sets per tile of either image from the q = 1, 2
// winners; the result is deduplicated by (l, v).
std::vector<TilePlaneSet> best_four_per_tile(const std::vector<TilePlaneSet>& hstar,
                                             const SlimeConfig& cfg);

struct EpipolarFilterOutcome {
  std::vector<TilePlaneSet> sets;   // F^l_v with the surviving members only
  std::vector<int> surviving_ids;   // M+, sorted pool indices
  int usable_pairs = 0;             // distinct usable fundamental matrices
  bool passthrough = false;         // fewer than 2 usable matrices
};

// Pairwise-plane epipolar voting: a match survives when enough fundamental
// matrices derived from set pairs agree with it.
EpipolarFilterOutcome epipolar_consistency_filter(const std::vector<TilePlaneSet>& sets,
                                                  const MatchSet& pool, const SlimeConfig& cfg);

// Largest sets first; a set is kept only while every tile it touches is
// shared by at most two accepted sets.
std::vector<TilePlaneSet> greedy_two_planes_per_tile(const std::vector<TilePlaneSet>& sets,
                                                     const SlimeConfig& cfg);

// One-hop union of sets whose pairwise Jaccard overlap exceeds t_ov.
std::vector<TilePlaneSet> plane_fusion(const std::vector<TilePlaneSet>& sets,
                                       const SlimeConfig& cfg);

struct GlobalOrientationOutcome {
  std::vector<TilePlaneSet> sets;    // surviving fused sets
  std::vector<double> theta_votes;   // per surviving set
  double theta_plus = 0.0;
};

GlobalOrientationOutcome global_orientation_filter(const std::vector<TilePlaneSet>& fused,
                                                   const MatchSet& pool, const SlimeConfig& cfg);

// Native-resolution re-matching on the surviving tile pairs with imposed
// orientations, gated by flow similarity to the surviving block matches,
// then one global neighborhood filter.
MatchSet tile_refinement(const std::vector<TilePlaneSet>& ftheta,
                         const std::vector<double>& theta_votes, const PreparedImage& im1,
                         const PreparedImage& im2, const BaseMatcherInterface& matcher,
                         const SlimeConfig& cfg, const MatchSet& pool,
                         size_t* raw_tile_matches = nullptr, size_t* kept_tile_matches = nullptr);

struct SelectedSetSummary {
  long l = -1;
  long v = -1;
  int tile1 = -1;
  int tile2 = -1;
  size_t size = 0;
  double theta_vote = 0.0;
  Eigen::Matrix3d h = Eigen::Matrix3d::Identity();
};

struct SlimeDiagnostics {
  int blocks1 = 0, blocks2 = 0, tiles1 = 0, tiles2 = 0;
  long block_pairs_total = 0;
  long block_pairs_with_plane = 0;
  long planes_refined = 0;
  size_t pool_size = 0;
  size_t expanded_members_total = 0;
  size_t tile_sets = 0;
  size_t hstar_sets = 0;
  size_t h_sets = 0;
  int usable_f_pairs = 0;
  bool epipolar_passthrough = false;
  size_t m_plus_size = 0;
  size_t f_sets = 0;
  size_t fbar_sets = 0;
  size_t ftheta_sets = 0;
  double theta_plus = 0.0;
  size_t tile_matches_raw = 0;
  size_t tile_matches_kept = 0;
  size_t final_matches = 0;
  std::vector<SelectedSetSummary> selected;  // the F^theta sets
};

std::string diagnostics_to_text(const SlimeDiagnostics& d);

struct SlimeResult {
  MatchSet final_matches;
  SlimeDiagnostics diagnostics;
};

// The full chain: grids, block-pair matching, orientation voting and
// refinement, expansion, tile-set selection, epipolar voting, greedy
// selection, fusion, global orientation, tile refinement.
SlimeResult run_slime(const RasterImage& img1, const RasterImage& img2,
                      const BaseMatcherInterface& matcher, const SlimeConfig& cfg);

// Keeps the first of every run of identical coordinate quadruples.
MatchSet dedup_by_coordinates(const MatchSet& matches);

// Deterministic helper: runs fn(0..n-1) on `threads` workers; results must
// be written to per-index slots.
void parallel_for(long n, int threads, const std::function<void(long)>& fn);

}  // namespace slime
