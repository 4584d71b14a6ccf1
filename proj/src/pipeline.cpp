#include "slime/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>
#include <unordered_map>

namespace slime {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr int kMaxEstimationPoints = 150;  // deterministic subsample bound
constexpr long kTileCacheBase = 1000000;   // cache-key namespace for tiles
}  // namespace

void SlimeConfig::validate() const {
  if (t_perp <= 0 || t_theta <= 0 || t_sigma <= 0 || t_xi <= 0 || m_theta <= 0 ||
      best_per_tile_pair <= 0 || best_per_tile <= 0 || planes_per_tile_final <= 0 ||
      nnr_threshold <= 0 || threads <= 0)
    throw SizeError("configuration values must be positive");
  if (!(t_ov > 1.0 / 3.0)) throw SizeError("t_ov must exceed 1/3");
  if (!(t_theta_plus < kPi / 4.0)) throw SizeError("t_theta_plus must stay below pi/4");
}

void parallel_for(long n, int threads, const std::function<void(long)>& fn) {
  if (n <= 0) return;
  const int workers = std::max(1, static_cast<int>(std::min<long>(threads, n)));
  if (workers == 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<long> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (;;) {
        const long i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

PreparedImage prepare_image(const RasterImage& img) {
  PreparedImage out;
  out.original = img;
  out.grid = build_block_grid(img.width, img.height);
  for (const auto& level : out.grid.levels) {
    RasterImage scaled = resample(img, level.factor);
    out.padded_levels.push_back(pad_image(scaled, kBlockPad));
  }
  out.padded_native = pad_image(img, kBlockPad);
  return out;
}

ImageRegion PreparedImage::block_region(const Block& b, int image_index) const {
  ImageRegion r;
  r.padded = &padded_levels[b.scale_s - 1];
  // The detection window extends one pad width beyond the block so border
  // keypoints get full context; the matching exclusion margin confines the
  // returned keypoints to the block rect.
  r.window = {b.rect.x0 - kBlockPad, b.rect.y0 - kBlockPad, b.rect.w + 2 * kBlockPad,
              b.rect.h + 2 * kBlockPad};
  r.image_index = image_index;
  r.scale_factor = b.scale_factor;
  r.pad = kBlockPad;
  r.cache_key = static_cast<long>(image_index) * 10 * kTileCacheBase + b.linear_index;
  return r;
}

ImageRegion PreparedImage::tile_region(const Tile& t, int image_index) const {
  ImageRegion r;
  r.padded = &padded_native;
  r.window = {t.rect.x0 - kBlockPad, t.rect.y0 - kBlockPad, t.rect.w + 2 * kBlockPad,
              t.rect.h + 2 * kBlockPad};
  r.image_index = image_index;
  r.scale_factor = 1.0;
  r.pad = kBlockPad;
  r.cache_key =
      static_cast<long>(image_index) * 10 * kTileCacheBase + kTileCacheBase + t.linear_index;
  return r;
}

MatchSet block_pair_match(const PreparedImage& im1, const Block& b1, const PreparedImage& im2,
                          const Block& b2, const BaseMatcherInterface& matcher,
                          const SlimeConfig& cfg, long pair_index,
                          std::optional<Homography>* h_out, std::optional<double> override1,
                          std::optional<double> override2) {
  if (h_out) h_out->reset();
  ImageRegion r1 = im1.block_region(b1, 1);
  ImageRegion r2 = im2.block_region(b2, 2);
  MatchSet candidates = matcher.match_pair(r1, r2, override1, override2, pair_index);
  candidates = delaunay_consistency_filter(candidates);
  if (candidates.size() < 4) return {};

  std::vector<Correspondence> corr;
  corr.reserve(candidates.size());
  for (const auto& m : candidates.matches) corr.emplace_back(m.p.x, m.p_prime.x);
  RansacOptions opt;
  opt.threshold = cfg.t_perp;
  opt.max_iterations = cfg.ransac_max_iterations;
  opt.confidence = cfg.ransac_confidence;
  opt.seed = mix_seed(cfg.ransac_seed, static_cast<std::uint64_t>(pair_index));
  HomographyRansacResult res = ransac_homography(corr, opt);
  if (!res.model) return {};

  MatchSet inliers;
  inliers.matches.reserve(res.inlier_indices.size());
  for (int idx : res.inlier_indices) inliers.matches.push_back(candidates.matches[idx]);
  if (h_out) *h_out = res.model;
  return inliers;
}

namespace {

int vote_bin(double angle, int m_theta) {
  const double w = 2.0 * kPi / m_theta;
  int idx = static_cast<int>(std::floor((wrap_angle(angle) + kPi) / w));
  return ((idx % m_theta) + m_theta) % m_theta;
}

double bin_center(int idx, int m_theta) {
  const double w = 2.0 * kPi / m_theta;
  return wrap_angle(-kPi + (idx + 0.5) * w);
}

}  // namespace

double orientation_vote_angles(const std::vector<double>& angles, int m_theta) {
  return orientation_vote_angles_weighted(angles, {}, m_theta);
}

double orientation_vote_angles_weighted(const std::vector<double>& angles,
                                        const std::vector<double>& weights, int m_theta) {
  if (angles.empty()) throw SizeError("orientation vote over an empty set");
  std::vector<double> hist(m_theta, 0.0);
  for (size_t i = 0; i < angles.size(); ++i)
    hist[vote_bin(angles[i], m_theta)] += weights.empty() ? 1.0 : weights[i];
  int best = 0;
  for (int i = 1; i < m_theta; ++i)
    if (hist[i] > hist[best]) best = i;
  return bin_center(best, m_theta);
}

double orientation_vote(const MatchSet& matches, int m_theta) {
  std::vector<double> rhos;
  rhos.reserve(matches.size());
  for (const auto& m : matches.matches) rhos.push_back(wrap_angle(m.p_prime.theta - m.p.theta));
  return orientation_vote_angles(rhos, m_theta);
}

std::optional<PlaneHypothesis> refine_plane_with_orientation(
    const PreparedImage& im1, const Block& b1, const PreparedImage& im2, const Block& b2,
    double theta_star, const BaseMatcherInterface& matcher, const SlimeConfig& cfg,
    long pair_index) {
  std::optional<Homography> h;
  MatchSet refined =
      block_pair_match(im1, b1, im2, b2, matcher, cfg, pair_index, &h, 0.0, theta_star);
  if (refined.empty() || !h) return std::nullopt;
  PlaneHypothesis plane;
  plane.l = pair_index;
  plane.block1 = b1.linear_index;
  plane.block2 = b2.linear_index;
  plane.h = *h;
  plane.support = std::move(refined);
  plane.theta_star = theta_star;
  return plane;
}

namespace {

// Precomputed plane-side signs of the support set; 0 marks an unusable side.
struct ExpansionContext {
  const PlaneHypothesis* plane;
  int fwd_sign = 0;
  int bwd_sign = 0;

  static int w_sign_of(const Eigen::Matrix3d& m, const Point2& p) {
    const double w = m.row(2).dot(Eigen::Vector3d(p.x(), p.y(), 1.0));
    if (std::abs(w) < 1e-12) return 0;
    return w > 0.0 ? 1 : -1;
  }

  explicit ExpansionContext(const PlaneHypothesis& pl) : plane(&pl) {
    for (const auto& a : pl.support.matches) {
      const int sf = w_sign_of(pl.h.matrix(), a.p.x);
      const int sb = w_sign_of(pl.h.inverse_matrix(), a.p_prime.x);
      if (sf == 0 || sb == 0 || (fwd_sign != 0 && sf != fwd_sign) ||
          (bwd_sign != 0 && sb != bwd_sign)) {
        fwd_sign = bwd_sign = 0;
        return;
      }
      fwd_sign = sf;
      bwd_sign = sb;
    }
  }

  bool side_ok(const Match& m) const {
    if (fwd_sign == 0 || bwd_sign == 0) return false;
    return w_sign_of(plane->h.matrix(), m.p.x) == fwd_sign &&
           w_sign_of(plane->h.inverse_matrix(), m.p_prime.x) == bwd_sign;
  }
};

const std::array<Point2, 4> kNeighborOffsets = {Point2(1, 0), Point2(-1, 0), Point2(0, 1),
                                                Point2(0, -1)};

bool orientation_check(const Match& m, const Homography& h, double t_theta) {
  const double rho = wrap_angle(m.p_prime.theta - m.p.theta);
  for (const auto& off : kNeighborOffsets) {
    auto fwd = relative_orientation_after_reproj(h, m.p.x, m.p.x + off);
    if (fwd && angle_distance(rho, *fwd) < t_theta) return true;
  }
  const Homography hinv = h.inverse();
  for (const auto& off : kNeighborOffsets) {
    // Image-2 patches rotate by -rho under the inverse mapping.
    auto bwd = relative_orientation_after_reproj(hinv, m.p_prime.x, m.p_prime.x + off);
    if (bwd && angle_distance(-rho, *bwd) < t_theta) return true;
  }
  return false;
}

bool scale_check(const Match& m, const Homography& h, double t_sigma) {
  const double psi = m.p_prime.sigma / m.p.sigma;
  for (const auto& off : kNeighborOffsets) {
    auto fwd = relative_scale_after_reproj(h, m.p.x, m.p.x + off);
    if (fwd && *fwd > 1e-12) {
      const double ratio = psi / *fwd;
      if (ratio >= 1.0 / t_sigma && ratio <= t_sigma) return true;
    }
  }
  const Homography hinv = h.inverse();
  for (const auto& off : kNeighborOffsets) {
    auto bwd = relative_scale_after_reproj(hinv, m.p_prime.x, m.p_prime.x + off);
    if (bwd && *bwd > 1e-12) {
      const double ratio = psi * *bwd;  // (1/psi) / psi_n, reciprocal band
      if (ratio >= 1.0 / t_sigma && ratio <= t_sigma) return true;
    }
  }
  return false;
}

ExpansionChecks run_checks(const Match& candidate, const ExpansionContext& ctx,
                           const SlimeConfig& cfg) {
  ExpansionChecks checks;
  checks.reprojection = reprojection_error_max(candidate, ctx.plane->h) < cfg.t_perp;
  checks.plane_side = ctx.side_ok(candidate);
  checks.orientation = orientation_check(candidate, ctx.plane->h, cfg.t_theta);
  checks.scale = scale_check(candidate, ctx.plane->h, cfg.t_sigma);
  return checks;
}

}  // namespace

ExpansionChecks evaluate_expansion_checks(const Match& candidate, const PlaneHypothesis& plane,
                                          const SlimeConfig& cfg) {
  return run_checks(candidate, ExpansionContext(plane), cfg);
}

ExpandedPlane expand_and_prune(const PlaneHypothesis& plane, int plane_index,
                               const MatchSet& pool, const SlimeConfig& cfg) {
  ExpandedPlane out;
  out.l = plane.l;
  out.plane_index = plane_index;
  const ExpansionContext ctx(plane);
  for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
    const Match& m = pool.matches[i];
    // cheapest rejections first
    if (!(reprojection_error_max(m, plane.h) < cfg.t_perp)) continue;
    if (!ctx.side_ok(m)) continue;
    if (!orientation_check(m, plane.h, cfg.t_theta)) continue;
    if (!scale_check(m, plane.h, cfg.t_sigma)) continue;
    out.member_ids.push_back(i);
  }
  return out;
}

std::vector<TilePlaneSet> build_tile_sets(const std::vector<PlaneHypothesis>& planes,
                                          const std::vector<ExpandedPlane>& expanded,
                                          const MatchSet& pool, const std::vector<Tile>& tiles1,
                                          const std::vector<Tile>& tiles2,
                                          const SlimeConfig& cfg) {
  (void)cfg;
  const long n2 = static_cast<long>(tiles2.size());
  auto tiles_containing = [](const std::vector<Tile>& tiles, const Point2& p) {
    std::vector<int> hits;
    for (const auto& t : tiles)
      if (t.rect.contains(p.x() + kBlockPad, p.y() + kBlockPad)) hits.push_back(t.linear_index);
    return hits;
  };

  const long n_planes = static_cast<long>(planes.size());
  std::unordered_map<long, TilePlaneSet> sets;  // key = v * n_planes + plane_index
  for (const auto& exp : expanded) {
    for (int id : exp.member_ids) {
      const Match& m = pool.matches[id];
      for (int c : tiles_containing(tiles1, m.p.x))
        for (int cp : tiles_containing(tiles2, m.p_prime.x)) {
          const long v = static_cast<long>(c) * n2 + cp;
          auto [it, inserted] = sets.try_emplace(v * n_planes + exp.plane_index);
          if (inserted) {
            it->second.v = v;
            it->second.tile1 = c;
            it->second.tile2 = cp;
            it->second.l = planes[exp.plane_index].l;
            it->second.plane_index = exp.plane_index;
          }
          it->second.member_ids.push_back(id);
        }
    }
  }

  std::vector<TilePlaneSet> out;
  out.reserve(sets.size());
  for (auto& [key, set] : sets) {
    if (set.member_ids.empty()) continue;
    std::sort(set.member_ids.begin(), set.member_ids.end());
    out.push_back(std::move(set));
  }
  std::sort(out.begin(), out.end(), [](const TilePlaneSet& a, const TilePlaneSet& b) {
    return std::make_pair(a.v, a.plane_index) < std::make_pair(b.v, b.plane_index);
  });
  return out;
}

std::vector<TilePlaneSet> best_sets_by_novelty(const std::vector<TilePlaneSet>& candidates,
                                               int max_q) {
  std::vector<TilePlaneSet> winners;
  std::set<int> covered;
  std::vector<char> chosen(candidates.size(), 0);
  for (int q = 0; q < max_q; ++q) {
    int best = -1;
    size_t best_novelty = 0;
    for (size_t i = 0; i < candidates.size(); ++i) {
      if (chosen[i]) continue;
      size_t novelty = 0;
      for (int id : candidates[i].member_ids)
        if (!covered.count(id)) ++novelty;
      const bool wins =
          best < 0 || novelty > best_novelty ||
          (novelty == best_novelty &&
           std::make_tuple(candidates[i].l, candidates[i].v, candidates[i].plane_index) <
               std::make_tuple(candidates[best].l, candidates[best].v,
                               candidates[best].plane_index));
      if (wins) {
        best = static_cast<int>(i);
        best_novelty = novelty;
      }
    }
    if (best < 0 || best_novelty == 0) break;
    chosen[best] = 1;
    winners.push_back(candidates[best]);
    for (int id : candidates[best].member_ids) covered.insert(id);
  }
  return winners;
}

std::vector<TilePlaneSet> best_two_per_tile_pair(const std::vector<TilePlaneSet>& sets,
                                                 const SlimeConfig& cfg) {
  std::map<long, std::vector<TilePlaneSet>> by_pair;
  for (const auto& s : sets) by_pair[s.v].push_back(s);
  std::vector<TilePlaneSet> out;
  for (auto& [v, group] : by_pair) {
    auto winners = best_sets_by_novelty(group, cfg.best_per_tile_pair);
    out.insert(out.end(), winners.begin(), winners.end());
  }
  return out;
}

std::vector<TilePlaneSet> best_four_per_tile(const std::vector<TilePlaneSet>& hstar,
                                             const SlimeConfig& cfg) {
  std::map<int, std::vector<TilePlaneSet>> by_tile1, by_tile2;
  for (const auto& s : hstar) {
    by_tile1[s.tile1].push_back(s);
    by_tile2[s.tile2].push_back(s);
  }
  std::set<std::pair<long, long>> seen;  // (l, v)
  std::vector<TilePlaneSet> out;
  auto add_winners = [&](std::map<int, std::vector<TilePlaneSet>>& groups) {
    for (auto& [tile, group] : groups)
      for (auto& w : best_sets_by_novelty(group, cfg.best_per_tile))
        if (seen.insert({w.l, w.v}).second) out.push_back(std::move(w));
  };
  add_winners(by_tile1);
  add_winners(by_tile2);
  std::sort(out.begin(), out.end(), [](const TilePlaneSet& a, const TilePlaneSet& b) {
    return std::make_pair(a.v, a.l) < std::make_pair(b.v, b.l);
  });
  return out;
}

namespace {

// Union of two sets' correspondences, deduplicated by exact coordinates and
// deterministically thinned for estimation.
std::vector<Correspondence> union_correspondences(const TilePlaneSet& a, const TilePlaneSet& b,
                                                  const MatchSet& pool) {
  std::vector<int> ids;
  ids.reserve(a.member_ids.size() + b.member_ids.size());
  std::set_union(a.member_ids.begin(), a.member_ids.end(), b.member_ids.begin(),
                 b.member_ids.end(), std::back_inserter(ids));
  std::set<std::tuple<double, double, double, double>> seen;
  std::vector<Correspondence> corr;
  for (int id : ids) {
    const Match& m = pool.matches[id];
    if (seen.insert({m.p.x.x(), m.p.x.y(), m.p_prime.x.x(), m.p_prime.x.y()}).second)
      corr.emplace_back(m.p.x, m.p_prime.x);
  }
  if (static_cast<int>(corr.size()) > kMaxEstimationPoints) {
    std::vector<Correspondence> thin;
    const double step = static_cast<double>(corr.size()) / kMaxEstimationPoints;
    for (int i = 0; i < kMaxEstimationPoints; ++i)
      thin.push_back(corr[static_cast<size_t>(i * step)]);
    corr = std::move(thin);
  }
  return corr;
}

}  // namespace

EpipolarFilterOutcome epipolar_consistency_filter(const std::vector<TilePlaneSet>& sets,
                                                  const MatchSet& pool, const SlimeConfig& cfg) {
  EpipolarFilterOutcome out;
  std::set<int> relevant;
  for (const auto& s : sets)
    for (int id : s.member_ids) relevant.insert(id);
  std::vector<int> relevant_ids(relevant.begin(), relevant.end());

  if (sets.size() < 2) {
    out.passthrough = true;
    out.surviving_ids = relevant_ids;
    out.sets = sets;
    return out;
  }

  struct PairTask {
    int d, d_prime;
    std::optional<FundamentalMatrix> f;
  };
  std::vector<PairTask> tasks;
  for (size_t d = 0; d < sets.size(); ++d)
    for (size_t dp = d + 1; dp < sets.size(); ++dp)
      tasks.push_back({static_cast<int>(d), static_cast<int>(dp), std::nullopt});

  parallel_for(static_cast<long>(tasks.size()), cfg.threads, [&](long i) {
    auto& task = tasks[i];
    auto corr = union_correspondences(sets[task.d], sets[task.d_prime], pool);
    if (corr.size() < 8) return;
    try {
      task.f = estimate_fundamental_8pt(corr);
    } catch (const DegeneracyError&) {
      // exact rank deficiency (e.g. both sets noise-free on one plane)
    }
  });

  std::vector<const FundamentalMatrix*> usable_f;
  for (const auto& task : tasks)
    if (task.f) usable_f.push_back(&*task.f);
  out.usable_pairs = static_cast<int>(usable_f.size());

  std::vector<int> votes(pool.size(), 0);
  parallel_for(static_cast<long>(relevant_ids.size()), cfg.threads, [&](long i) {
    const int id = relevant_ids[i];
    const Match& m = pool.matches[id];
    int v = 0;
    for (const FundamentalMatrix* f : usable_f)
      if (epipolar_error_max(m, *f) < cfg.t_perp) v += 2;  // both orders of (d, d')
    votes[id] = v;
  });

  if (out.usable_pairs < 2) {
    out.passthrough = true;
    out.surviving_ids = relevant_ids;
    out.sets = sets;
    return out;
  }

  const double threshold = cfg.t_xi * static_cast<double>(sets.size());
  for (int id : relevant_ids)
    if (static_cast<double>(votes[id]) > threshold) out.surviving_ids.push_back(id);

  for (const auto& s : sets) {
    TilePlaneSet filtered = s;
    filtered.member_ids.clear();
    std::set_intersection(s.member_ids.begin(), s.member_ids.end(), out.surviving_ids.begin(),
                          out.surviving_ids.end(), std::back_inserter(filtered.member_ids));
    if (!filtered.member_ids.empty()) out.sets.push_back(std::move(filtered));
  }
  return out;
}

std::vector<TilePlaneSet> greedy_two_planes_per_tile(const std::vector<TilePlaneSet>& sets,
                                                     const SlimeConfig& cfg) {
  std::vector<int> order(sets.size());
  for (size_t i = 0; i < sets.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (sets[a].member_ids.size() != sets[b].member_ids.size())
      return sets[a].member_ids.size() > sets[b].member_ids.size();
    return std::make_pair(sets[a].l, sets[a].v) < std::make_pair(sets[b].l, sets[b].v);
  });

  std::map<int, int> used1, used2;
  std::vector<TilePlaneSet> accepted;
  for (int i : order) {
    const auto& s = sets[i];
    if (used1[s.tile1] >= cfg.planes_per_tile_final || used2[s.tile2] >= cfg.planes_per_tile_final)
      continue;
    ++used1[s.tile1];
    ++used2[s.tile2];
    accepted.push_back(s);
  }
  return accepted;
}

std::vector<TilePlaneSet> plane_fusion(const std::vector<TilePlaneSet>& sets,
                                       const SlimeConfig& cfg) {
  auto jaccard = [](const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    const size_t uni = a.size() + b.size() - inter.size();
    return uni == 0 ? 0.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
  };

  std::vector<TilePlaneSet> fused;
  fused.reserve(sets.size());
  for (const auto& s : sets) {
    TilePlaneSet f = s;
    std::set<int> members(s.member_ids.begin(), s.member_ids.end());
    for (const auto& other : sets) {
      if (&other == &s) continue;
      if (jaccard(s.member_ids, other.member_ids) > cfg.t_ov)
        members.insert(other.member_ids.begin(), other.member_ids.end());
    }
    f.member_ids.assign(members.begin(), members.end());
    fused.push_back(std::move(f));
  }
  return fused;
}

GlobalOrientationOutcome global_orientation_filter(const std::vector<TilePlaneSet>& fused,
                                                   const MatchSet& pool, const SlimeConfig& cfg) {
  GlobalOrientationOutcome out;
  if (fused.empty()) return out;

  std::vector<double> votes;
  std::vector<double> weights;
  votes.reserve(fused.size());
  for (const auto& s : fused) {
    std::vector<double> rhos;
    rhos.reserve(s.member_ids.size());
    for (int id : s.member_ids) {
      const Match& m = pool.matches[id];
      rhos.push_back(wrap_angle(m.p_prime.theta - m.p.theta));
    }
    votes.push_back(orientation_vote_angles(rhos, cfg.m_theta));
    weights.push_back(static_cast<double>(s.member_ids.size()));
  }
  // Plane votes weighted by their support so a couple of junk planes cannot
  // outvote a dominant one when few sets survive.
  out.theta_plus = orientation_vote_angles_weighted(votes, weights, cfg.m_theta);

  for (size_t i = 0; i < fused.size(); ++i) {
    if (angle_distance(out.theta_plus, votes[i]) < cfg.t_theta_plus) {
      out.sets.push_back(fused[i]);
      out.theta_votes.push_back(votes[i]);
    }
  }
  return out;
}

namespace {

// Uniform hash grid over image-1 keypoints for the flow-similarity gate.
class FlowGate {
 public:
  FlowGate(const std::vector<Match>& block_matches, double radius)
      : matches_(block_matches), radius_(radius), cell_(std::max(radius, 1.0)) {
    for (size_t i = 0; i < matches_.size(); ++i)
      grid_[key_of(matches_[i].p.x)].push_back(static_cast<int>(i));
  }

  bool admits(const Match& q) const {
    const auto center = key_of(q.p.x);
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        auto it = grid_.find({center.first + dx, center.second + dy});
        if (it == grid_.end()) continue;
        for (int i : it->second) {
          const Match& p = matches_[i];
          if (std::max((p.p.x - q.p.x).norm(), (p.p_prime.x - q.p_prime.x).norm()) < radius_)
            return true;
        }
      }
    return false;
  }

 private:
  std::pair<long, long> key_of(const Point2& p) const {
    return {static_cast<long>(std::floor(p.x() / cell_)),
            static_cast<long>(std::floor(p.y() / cell_))};
  }
  const std::vector<Match>& matches_;
  double radius_;
  double cell_;
  std::map<std::pair<long, long>, std::vector<int>> grid_;
};

}  // namespace

MatchSet tile_refinement(const std::vector<TilePlaneSet>& ftheta,
                         const std::vector<double>& theta_votes, const PreparedImage& im1,
                         const PreparedImage& im2, const BaseMatcherInterface& matcher,
                         const SlimeConfig& cfg, const MatchSet& pool, size_t* raw_tile_matches,
                         size_t* kept_tile_matches) {
  if (raw_tile_matches) *raw_tile_matches = 0;
  if (kept_tile_matches) *kept_tile_matches = 0;
  if (ftheta.empty()) return {};

  // Block matches of F^theta, deduplicated by pool identity.
  std::set<int> block_ids;
  for (const auto& s : ftheta) block_ids.insert(s.member_ids.begin(), s.member_ids.end());
  std::vector<Match> block_matches;
  block_matches.reserve(block_ids.size());
  for (int id : block_ids) block_matches.push_back(pool.matches[id]);

  std::vector<MatchSet> per_set(ftheta.size());
  parallel_for(static_cast<long>(ftheta.size()), cfg.threads, [&](long i) {
    const auto& s = ftheta[i];
    const Tile& t1 = im1.grid.tiles[s.tile1];
    const Tile& t2 = im2.grid.tiles[s.tile2];
    per_set[i] = matcher.match_pair(im1.tile_region(t1, 1), im2.tile_region(t2, 2), 0.0,
                                    theta_votes[i], kTileCacheBase + s.v);
  });

  FlowGate gate(block_matches, cfg.t_perp);
  MatchSet combined;
  for (const auto& m : block_matches) combined.matches.push_back(m);
  size_t raw = 0, kept = 0;
  for (const auto& set : per_set) {
    raw += set.size();
    for (const auto& q : set.matches) {
      if (gate.admits(q)) {
        combined.matches.push_back(q);
        ++kept;
      }
    }
  }
  if (raw_tile_matches) *raw_tile_matches = raw;
  if (kept_tile_matches) *kept_tile_matches = kept;

  combined.sort_canonical();
  MatchSet final_set = delaunay_consistency_filter(combined);
  final_set.sort_canonical();
  return final_set;
}

MatchSet dedup_by_coordinates(const MatchSet& matches) {
  MatchSet sorted = matches;
  sorted.sort_canonical();
  MatchSet out;
  const Match* last = nullptr;
  for (const auto& m : sorted.matches) {
    if (last && last->p.x == m.p.x && last->p_prime.x == m.p_prime.x) continue;
    out.matches.push_back(m);
    last = &out.matches.back();
  }
  return out;
}

std::string diagnostics_to_text(const SlimeDiagnostics& d) {
  std::ostringstream os;
  os << "blocks1: " << d.blocks1 << "\n";
  os << "blocks2: " << d.blocks2 << "\n";
  os << "tiles1: " << d.tiles1 << "\n";
  os << "tiles2: " << d.tiles2 << "\n";
  os << "block_pairs_total: " << d.block_pairs_total << "\n";
  os << "block_pairs_with_plane: " << d.block_pairs_with_plane << "\n";
  os << "planes_refined: " << d.planes_refined << "\n";
  os << "pool_size: " << d.pool_size << "\n";
  os << "expanded_members_total: " << d.expanded_members_total << "\n";
  os << "tile_sets: " << d.tile_sets << "\n";
  os << "hstar_sets: " << d.hstar_sets << "\n";
  os << "h_sets: " << d.h_sets << "\n";
  os << "usable_f_pairs: " << d.usable_f_pairs << "\n";
  os << "epipolar_passthrough: " << (d.epipolar_passthrough ? 1 : 0) << "\n";
  os << "m_plus_size: " << d.m_plus_size << "\n";
  os << "f_sets: " << d.f_sets << "\n";
  os << "fbar_sets: " << d.fbar_sets << "\n";
  os << "ftheta_sets: " << d.ftheta_sets << "\n";
  os << "theta_plus: " << d.theta_plus << "\n";
  os << "tile_matches_raw: " << d.tile_matches_raw << "\n";
  os << "tile_matches_kept: " << d.tile_matches_kept << "\n";
  os << "final_matches: " << d.final_matches << "\n";
  for (const auto& s : d.selected) {
    os << "selected: l=" << s.l << " v=" << s.v << " tile1=" << s.tile1 << " tile2=" << s.tile2
       << " size=" << s.size << " theta=" << s.theta_vote << " H=";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) os << (r + c ? " " : "") << s.h(r, c);
    os << "\n";
  }
  return os.str();
}

SlimeResult run_slime(const RasterImage& img1, const RasterImage& img2,
                      const BaseMatcherInterface& matcher, const SlimeConfig& cfg) {
  cfg.validate();
  if (std::min(img1.width, img1.height) < kMinImageDim ||
      std::min(img2.width, img2.height) < kMinImageDim)
    throw SizeError("input images must be at least 64 px on the short side");

  SlimeResult result;
  SlimeDiagnostics& diag = result.diagnostics;

  const PreparedImage im1 = prepare_image(img1);
  const PreparedImage im2 = prepare_image(img2);
  diag.blocks1 = static_cast<int>(im1.grid.blocks.size());
  diag.blocks2 = static_cast<int>(im2.grid.blocks.size());
  diag.tiles1 = static_cast<int>(im1.grid.tiles.size());
  diag.tiles2 = static_cast<int>(im2.grid.tiles.size());

  // Block-pair planar matching with the orientation-feedback re-run.
  struct PairOutcome {
    bool had_initial = false;
    std::optional<PlaneHypothesis> plane;
  };
  std::vector<std::pair<const Block*, const Block*>> pairs;
  for (const auto& b1 : im1.grid.blocks)
    for (const auto& b2 : im2.grid.blocks) pairs.emplace_back(&b1, &b2);
  if (cfg.max_block_pairs >= 0 && static_cast<long>(pairs.size()) > cfg.max_block_pairs)
    pairs.resize(cfg.max_block_pairs);
  diag.block_pairs_total = static_cast<long>(pairs.size());

  const long n2 = static_cast<long>(im2.grid.blocks.size());
  std::vector<PairOutcome> outcomes(pairs.size());
  parallel_for(static_cast<long>(pairs.size()), cfg.threads, [&](long i) {
    const Block& b1 = *pairs[i].first;
    const Block& b2 = *pairs[i].second;
    const long pair_index = static_cast<long>(b1.linear_index) * n2 + b2.linear_index;
    MatchSet initial = block_pair_match(im1, b1, im2, b2, matcher, cfg, pair_index);
    if (initial.empty()) return;
    outcomes[i].had_initial = true;
    const double theta_star = orientation_vote(initial, cfg.m_theta);
    outcomes[i].plane =
        refine_plane_with_orientation(im1, b1, im2, b2, theta_star, matcher, cfg, pair_index);
  });

  std::vector<PlaneHypothesis> planes;
  for (auto& o : outcomes) {
    if (o.had_initial) ++diag.block_pairs_with_plane;
    if (o.plane) planes.push_back(std::move(*o.plane));
  }
  diag.planes_refined = static_cast<long>(planes.size());

  // Candidate pool: the union of refined sets, duplicates preserved.
  MatchSet pool;
  for (const auto& p : planes)
    pool.matches.insert(pool.matches.end(), p.support.matches.begin(), p.support.matches.end());
  diag.pool_size = pool.size();
  if (planes.empty()) return result;

  std::vector<ExpandedPlane> expanded(planes.size());
  parallel_for(static_cast<long>(planes.size()), cfg.threads, [&](long i) {
    expanded[i] = expand_and_prune(planes[i], static_cast<int>(i), pool, cfg);
  });
  for (const auto& e : expanded) diag.expanded_members_total += e.member_ids.size();

  std::vector<TilePlaneSet> tile_sets =
      build_tile_sets(planes, expanded, pool, im1.grid.tiles, im2.grid.tiles, cfg);
  diag.tile_sets = tile_sets.size();

  std::vector<TilePlaneSet> hstar = best_two_per_tile_pair(tile_sets, cfg);
  diag.hstar_sets = hstar.size();

  std::vector<TilePlaneSet> h = best_four_per_tile(hstar, cfg);
  diag.h_sets = h.size();

  EpipolarFilterOutcome epi = epipolar_consistency_filter(h, pool, cfg);
  diag.usable_f_pairs = epi.usable_pairs;
  diag.epipolar_passthrough = epi.passthrough;
  diag.m_plus_size = epi.surviving_ids.size();
  diag.f_sets = epi.sets.size();

  std::vector<TilePlaneSet> fbar = greedy_two_planes_per_tile(epi.sets, cfg);
  diag.fbar_sets = fbar.size();

  std::vector<TilePlaneSet> fused = plane_fusion(fbar, cfg);

  GlobalOrientationOutcome ori = global_orientation_filter(fused, pool, cfg);
  diag.ftheta_sets = ori.sets.size();
  diag.theta_plus = ori.theta_plus;
  for (size_t i = 0; i < ori.sets.size(); ++i) {
    SelectedSetSummary sel;
    sel.l = ori.sets[i].l;
    sel.v = ori.sets[i].v;
    sel.tile1 = ori.sets[i].tile1;
    sel.tile2 = ori.sets[i].tile2;
    sel.size = ori.sets[i].member_ids.size();
    sel.theta_vote = ori.theta_votes[i];
    sel.h = planes[ori.sets[i].plane_index].h.matrix();
    diag.selected.push_back(sel);
  }

  result.final_matches = tile_refinement(ori.sets, ori.theta_votes, im1, im2, matcher, cfg, pool,
                                         &diag.tile_matches_raw, &diag.tile_matches_kept);
  diag.final_matches = result.final_matches.size();
  return result;
}

}  // namespace slime
