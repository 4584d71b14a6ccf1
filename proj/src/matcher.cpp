#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

#include "slime/matcher.hpp"

namespace slime {

namespace {

std::tuple<double, double, double, double, double, double, double, double, double, long>
match_key(const Match& m) {
  return {m.p.x.x(),       m.p.x.y(),  m.p_prime.x.x(), m.p_prime.x.y(), m.similarity,
          m.p.theta,       m.p.sigma,  m.p_prime.theta, m.p_prime.sigma,
          m.origin};
}

}  // namespace

void MatchSet::sort_canonical() {
  std::sort(matches.begin(), matches.end(),
            [](const Match& a, const Match& b) { return match_key(a) < match_key(b); });
}

MatchSet nn_match(const std::vector<DetectedFeature>& set1,
                  const std::vector<DetectedFeature>& set2, double nnr_threshold, long origin) {
  MatchSet out;
  if (set2.size() < 2 || set1.empty()) return out;
  if (!(nnr_threshold > 0.0) || nnr_threshold > 1.0)
    throw SizeError("nnr threshold must lie in (0, 1]");

  const double t2 = nnr_threshold * nnr_threshold;
  for (const auto& f1 : set1) {
    float best = std::numeric_limits<float>::infinity();
    float second = std::numeric_limits<float>::infinity();
    int best_idx = -1;
    const auto& v1 = f1.d.v;
    for (size_t j = 0; j < set2.size(); ++j) {
      const auto& v2 = set2[j].d.v;
      const size_t n = std::min(v1.size(), v2.size());
      float dist = 0.0f;
      for (size_t k = 0; k < n; ++k) {
        const float diff = v1[k] - v2[k];
        dist += diff * diff;
      }
      if (dist < best) {
        second = best;
        best = dist;
        best_idx = static_cast<int>(j);
      } else if (dist < second) {
        second = dist;
      }
    }
    if (best_idx < 0) continue;
    // ratio test on squared distances; d2 == 0 implies a tie, rejected
    const bool keep = second > 0.0f ? (static_cast<double>(best) / second < t2) : false;
    if (!keep) continue;
    Match m;
    m.p = f1.p;
    m.p_prime = set2[best_idx].p;
    m.similarity = std::sqrt(static_cast<double>(best));
    m.origin = origin;
    out.matches.push_back(m);
  }
  out.sort_canonical();
  return out;
}

namespace {

// --- Delaunay triangulation (Bowyer-Watson) over unique 2D positions ---

struct Triangle {
  int a, b, c;
  double cx, cy, r2;  // circumcircle, cached at creation
};

Triangle make_triangle(int a, int b, int c, const std::vector<Point2>& v) {
  Triangle t{a, b, c, 0.0, 0.0, -1.0};
  const Point2& pa = v[a];
  const Point2& pb = v[b];
  const Point2& pc = v[c];
  const double bx = pb.x() - pa.x(), by = pb.y() - pa.y();
  const double cx = pc.x() - pa.x(), cy = pc.y() - pa.y();
  const double d = 2.0 * (bx * cy - by * cx);
  if (std::abs(d) < 1e-18) return t;  // degenerate; r2 < 0 marks never-hit
  const double b2 = bx * bx + by * by;
  const double c2 = cx * cx + cy * cy;
  const double ux = (cy * b2 - by * c2) / d;
  const double uy = (bx * c2 - cx * b2) / d;
  t.cx = pa.x() + ux;
  t.cy = pa.y() + uy;
  t.r2 = ux * ux + uy * uy;
  return t;
}

// Adjacency lists of the Delaunay triangulation; empty when the input is
// degenerate (fewer than 3 unique points or all collinear).
std::vector<std::vector<int>> delaunay_adjacency(const std::vector<Point2>& pts) {
  const int n = static_cast<int>(pts.size());
  std::vector<std::vector<int>> adjacency(n);
  if (n < 3) return adjacency;

  double min_x = pts[0].x(), max_x = pts[0].x(), min_y = pts[0].y(), max_y = pts[0].y();
  for (const auto& p : pts) {
    min_x = std::min(min_x, p.x());
    max_x = std::max(max_x, p.x());
    min_y = std::min(min_y, p.y());
    max_y = std::max(max_y, p.y());
  }
  const double span = std::max({max_x - min_x, max_y - min_y, 1.0});
  const double cx = 0.5 * (min_x + max_x), cy = 0.5 * (min_y + max_y);

  std::vector<Point2> v = pts;
  v.push_back(Point2(cx - 30 * span, cy - 10 * span));
  v.push_back(Point2(cx + 30 * span, cy - 10 * span));
  v.push_back(Point2(cx, cy + 30 * span));
  std::vector<Triangle> tris{make_triangle(n, n + 1, n + 2, v)};

  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < n; ++i) {
    const double px = v[i].x(), py = v[i].y();
    std::vector<Triangle> keep;
    keep.reserve(tris.size() + 2);
    edges.clear();
    for (const auto& t : tris) {
      const double dx = px - t.cx, dy = py - t.cy;
      if (t.r2 >= 0.0 && dx * dx + dy * dy < t.r2) {
        auto note = [&](int p, int q) {
          if (p > q) std::swap(p, q);
          edges.emplace_back(p, q);
        };
        note(t.a, t.b);
        note(t.b, t.c);
        note(t.c, t.a);
      } else {
        keep.push_back(t);
      }
    }
    if (edges.empty()) continue;  // duplicate of an existing point
    std::sort(edges.begin(), edges.end());
    for (size_t e = 0; e < edges.size();) {
      size_t e2 = e;
      while (e2 < edges.size() && edges[e2] == edges[e]) ++e2;
      if (e2 - e == 1) keep.push_back(make_triangle(edges[e].first, edges[e].second, i, v));
      e = e2;
    }
    tris = std::move(keep);
  }

  std::vector<std::set<int>> nb(n);
  for (const auto& t : tris) {
    if (t.a >= n || t.b >= n || t.c >= n) continue;
    nb[t.a].insert(t.b);
    nb[t.a].insert(t.c);
    nb[t.b].insert(t.a);
    nb[t.b].insert(t.c);
    nb[t.c].insert(t.a);
    nb[t.c].insert(t.b);
  }
  for (int i = 0; i < n; ++i) adjacency[i].assign(nb[i].begin(), nb[i].end());
  return adjacency;
}

double median_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  double m = values[mid];
  if (values.size() % 2 == 0) {
    double lower = *std::max_element(values.begin(), values.begin() + mid);
    m = 0.5 * (m + lower);
  }
  return m;
}

bool all_collinear(const std::vector<Point2>& pts) {
  if (pts.size() < 3) return true;
  const Point2& a = pts[0];
  Point2 dir = Point2::Zero();
  for (size_t i = 1; i < pts.size(); ++i) {
    dir = pts[i] - a;
    if (dir.norm() > 1e-9) break;
  }
  if (dir.norm() <= 1e-9) return true;
  for (const auto& p : pts) {
    const Point2 d = p - a;
    if (std::abs(d.x() * dir.y() - d.y() * dir.x()) > 1e-9 * std::max(1.0, d.norm() * dir.norm()))
      return false;
  }
  return true;
}

}  // namespace

MatchSet delaunay_consistency_filter(const MatchSet& matches) {
  const int n = static_cast<int>(matches.size());
  if (n < 4) return matches;
  {
    std::vector<Point2> pts;
    pts.reserve(n);
    for (const auto& m : matches.matches) pts.push_back(m.p.x);
    if (all_collinear(pts)) return matches;
  }

  auto flow = [&](int i) -> Point2 {
    return matches.matches[i].p_prime.x - matches.matches[i].p.x;
  };

  // Worst similarity (largest descriptor distance) first; index breaks ties.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return matches.matches[a].similarity > matches.matches[b].similarity;
  });

  // Below this flow deviation everything counts as coherent; it keeps exact
  // translation fields from being split on floating-point dust.
  constexpr double kDeviationFloor = 1e-6;

  std::vector<char> alive(n, 1);

  for (int round = 0; round < 10; ++round) {
    const std::vector<char> before = alive;

    // Triangulate the surviving image-1 positions; co-located matches share
    // a site and count as mutual neighbors.
    std::vector<Point2> sites;
    std::vector<int> site_of(n, -1);
    std::map<std::pair<double, double>, int> site_index;
    for (int i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      const Point2& p = matches.matches[i].p.x;
      auto [it, inserted] = site_index.try_emplace({p.x(), p.y()}, static_cast<int>(sites.size()));
      if (inserted) sites.push_back(p);
      site_of[i] = it->second;
    }
    if (sites.size() < 3 || all_collinear(sites)) break;
    const auto site_adjacency = delaunay_adjacency(sites);
    std::vector<std::vector<int>> site_members(sites.size());
    for (int i = 0; i < n; ++i)
      if (alive[i]) site_members[site_of[i]].push_back(i);

    // Discarded matches keep the site of their position when it is still
    // populated; re-admission checks reuse it.
    auto site_lookup = [&](int i) -> int {
      const Point2& p = matches.matches[i].p.x;
      auto it = site_index.find({p.x(), p.y()});
      return it == site_index.end() ? -1 : it->second;
    };

    auto neighbor_median_flow = [&](int i, const std::vector<char>& live, Point2* out) -> bool {
      int effective_site = site_of[i] >= 0 ? site_of[i] : site_lookup(i);
      if (effective_site < 0) {
        // dead match at a vanished position: nearest surviving site
        double best = std::numeric_limits<double>::infinity();
        for (size_t s = 0; s < sites.size(); ++s) {
          const double d = (sites[s] - matches.matches[i].p.x).squaredNorm();
          if (d < best) {
            best = d;
            effective_site = static_cast<int>(s);
          }
        }
        if (effective_site < 0) return false;
      }
      std::vector<double> fx, fy;
      for (int j : site_members[effective_site])
        if (j != i && live[j]) {
          fx.push_back(flow(j).x());
          fy.push_back(flow(j).y());
        }
      for (int nb_site : site_adjacency[effective_site])
        for (int j : site_members[nb_site])
          if (j != i && live[j]) {
            fx.push_back(flow(j).x());
            fy.push_back(flow(j).y());
          }
      if (fx.empty()) return false;
      *out = Point2(median_of(fx), median_of(fy));
      return true;
    };

    // Deviations at the round start define the contraction threshold. The
    // global median is taken over one representative deviation per site so
    // co-located duplicates cannot compress it toward zero.
    std::vector<std::vector<double>> site_devs(sites.size());
    for (int i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      Point2 med;
      if (!neighbor_median_flow(i, alive, &med)) continue;
      site_devs[site_of[i]].push_back((flow(i) - med).norm());
    }
    std::vector<double> deviations;
    deviations.reserve(site_devs.size());
    for (auto& devs : site_devs)
      if (!devs.empty()) deviations.push_back(median_of(std::move(devs)));
    const double threshold = std::max(2.0 * median_of(deviations), kDeviationFloor);

    // Contraction, worst-similarity first, with medians over the survivors.
    for (int i : order) {
      if (!alive[i]) continue;
      Point2 med;
      if (!neighbor_median_flow(i, alive, &med)) continue;
      if ((flow(i) - med).norm() > threshold) alive[i] = 0;
    }

    // Expansion: re-admit discarded matches that agree with the survivors.
    for (int i : order) {
      if (alive[i]) continue;
      Point2 med;
      if (!neighbor_median_flow(i, alive, &med)) continue;
      if ((flow(i) - med).norm() <= threshold) alive[i] = 1;
    }

    if (alive == before) break;
  }

  MatchSet out;
  for (int i = 0; i < n; ++i)
    if (alive[i]) out.matches.push_back(matches.matches[i]);
  return out;
}

IngestMatcher::IngestMatcher(MatchSet matches) : matches_(std::move(matches)) {
  matches_.sort_canonical();
}

std::vector<DetectedFeature> IngestMatcher::detect_and_describe(
    const ImageRegion& region, int exclusion_margin,
    std::optional<double> orientation_override) const {
  (void)exclusion_margin;
  std::vector<DetectedFeature> out;
  for (const auto& m : matches_.matches) {
    const PatchPoint& p = region.image_index == 1 ? m.p : m.p_prime;
    const double sx = full_to_scaled(p.x.x(), region.scale_factor) + region.pad;
    const double sy = full_to_scaled(p.x.y(), region.scale_factor) + region.pad;
    if (!region.window.contains(sx, sy)) continue;
    DetectedFeature f;
    f.p = p;
    if (orientation_override) f.p.theta = *orientation_override;
    out.push_back(std::move(f));
  }
  return out;
}

MatchSet IngestMatcher::match_features(const std::vector<DetectedFeature>&,
                                       const std::vector<DetectedFeature>&, long) const {
  return {};  // pairing happens in match_pair, keyed on the stored records
}

MatchSet IngestMatcher::match_pair(const ImageRegion& r1, const ImageRegion& r2,
                                   std::optional<double> override1,
                                   std::optional<double> override2, long origin) const {
  MatchSet out;
  for (const auto& m : matches_.matches) {
    const double sx1 = full_to_scaled(m.p.x.x(), r1.scale_factor) + r1.pad;
    const double sy1 = full_to_scaled(m.p.x.y(), r1.scale_factor) + r1.pad;
    const double sx2 = full_to_scaled(m.p_prime.x.x(), r2.scale_factor) + r2.pad;
    const double sy2 = full_to_scaled(m.p_prime.x.y(), r2.scale_factor) + r2.pad;
    if (!r1.window.contains(sx1, sy1) || !r2.window.contains(sx2, sy2)) continue;
    Match copy = m;
    if (override1) copy.p.theta = *override1;
    if (override2) copy.p_prime.theta = *override2;
    copy.origin = origin;
    out.matches.push_back(copy);
  }
  out.sort_canonical();
  return out;
}

namespace {

double parse_field(const std::string& token, int line_number) {
  double value = 0.0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw ParseError("malformed numeric field '" + token + "'", line_number);
  if (!std::isfinite(value)) throw ParseError("non-finite field '" + token + "'", line_number);
  return value;
}

}  // namespace

MatchSet ingest_matches(std::istream& stream) {
  MatchSet out;
  std::string line;
  int line_number = 0;
  long record = 0;
  while (std::getline(stream, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') continue;

    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string token;
    while (std::getline(ss, token, '\t')) fields.push_back(token);
    if (fields.size() != 9)
      throw ParseError("expected 9 tab-separated fields, got " + std::to_string(fields.size()),
                       line_number);
    double v[9];
    for (int i = 0; i < 9; ++i) v[i] = parse_field(fields[i], line_number);
    if (v[3] <= 0.0 || v[7] <= 0.0) throw ParseError("sigma must be positive", line_number);
    if (v[8] < 0.0) throw ParseError("similarity must be non-negative", line_number);

    Match m;
    m.p.x = Point2(v[0], v[1]);
    m.p.theta = wrap_angle(v[2]);
    m.p.sigma = v[3];
    m.p_prime.x = Point2(v[4], v[5]);
    m.p_prime.theta = wrap_angle(v[6]);
    m.p_prime.sigma = v[7];
    m.similarity = v[8];
    m.origin = record++;
    out.matches.push_back(m);
  }
  out.sort_canonical();
  return out;
}

MatchSet ingest_matches_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SizeError("cannot open match file: " + path);
  return ingest_matches(in);
}

void emit_matches(std::ostream& stream, const MatchSet& matches) {
  stream << "# x\ty\ttheta\tsigma\tx'\ty'\ttheta'\tsigma'\tsimilarity\n";
  char buf[512];
  for (const auto& m : matches.matches) {
    std::snprintf(buf, sizeof(buf),
                  "%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\n", m.p.x.x(),
                  m.p.x.y(), m.p.theta, m.p.sigma, m.p_prime.x.x(), m.p_prime.x.y(),
                  m.p_prime.theta, m.p_prime.sigma, m.similarity);
    stream << buf;
  }
}

void emit_matches_file(const std::string& path, const MatchSet& matches) {
  std::ofstream out(path);
  if (!out) throw SizeError("cannot write match file: " + path);
  emit_matches(out, matches);
}

}  // namespace slime
