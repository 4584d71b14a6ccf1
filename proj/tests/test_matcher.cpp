#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "slime/matcher.hpp"
#include "test_support.hpp"

using namespace slime;
namespace st = slime::testing;

namespace {

ImageRegion whole_image_region(const RasterImage& img, int image_index = 1) {
  ImageRegion r;
  r.padded = &img;
  r.window = {0, 0, img.width, img.height};
  r.image_index = image_index;
  r.scale_factor = 1.0;
  r.pad = 0;
  r.cache_key = -1;
  return r;
}

RasterImage gaussian_blob_image(int w, int h, double cx, double cy, double sigma,
                                double amplitude = 0.4) {
  RasterImage img(w, h, 0.5f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      img.at(x, y) += static_cast<float>(amplitude * std::exp(-d2 / (2 * sigma * sigma)));
    }
  return img;
}

}  // namespace

TEST_CASE("detector basics") {
  BuiltinMatcher matcher;

  SUBCASE("constant image yields nothing") {
    RasterImage img(64, 64, 0.5f);
    CHECK(matcher.detect_and_describe(whole_image_region(img), 0, std::nullopt).empty());
  }

  SUBCASE("tiny region yields nothing") {
    RasterImage img = st::make_texture(15, 15, 3);
    CHECK(matcher.detect_and_describe(whole_image_region(img), 0, std::nullopt).empty());
  }

  SUBCASE("single blob of sigma 4 gives one centered keypoint") {
    RasterImage img = gaussian_blob_image(64, 64, 31.0, 31.0, 4.0);
    auto feats = matcher.detect_and_describe(whole_image_region(img), 0, std::nullopt);
    int near_center = 0;
    for (const auto& f : feats) {
      if ((f.p.x - Point2(31.0, 31.0)).norm() < 2.0) {
        ++near_center;
        CHECK(f.p.sigma > 4.0 / 1.5);
        CHECK(f.p.sigma < 4.0 * 1.5);
      }
    }
    CHECK(near_center == 1);
  }

  SUBCASE("orientation override is honored exactly") {
    RasterImage img = st::make_texture(96, 96, 17);
    auto feats = matcher.detect_and_describe(whole_image_region(img), 0, 0.7);
    REQUIRE(!feats.empty());
    for (const auto& f : feats) CHECK(f.p.theta == 0.7);
  }

  SUBCASE("exclusion margin is respected") {
    RasterImage img = st::make_texture(128, 128, 29);
    auto feats = matcher.detect_and_describe(whole_image_region(img), 32, std::nullopt);
    for (const auto& f : feats) {
      CHECK(f.p.x.x() >= 32.0);
      CHECK(f.p.x.x() <= 95.0);
      CHECK(f.p.x.y() >= 32.0);
      CHECK(f.p.x.y() <= 95.0);
    }
  }

  SUBCASE("descriptors are unit length") {
    RasterImage img = st::make_texture(96, 96, 41);
    auto feats = matcher.detect_and_describe(whole_image_region(img), 0, std::nullopt);
    REQUIRE(!feats.empty());
    for (const auto& f : feats) {
      double norm = 0.0;
      for (float v : f.d.v) norm += static_cast<double>(v) * v;
      CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);
      CHECK(f.d.v.size() == 128);
    }
  }

  SUBCASE("translation covariance on synthetic blobs") {
    RasterImage base(160, 160, 0.5f);
    auto rng = st::make_rng(53);
    std::uniform_real_distribution<double> upos(30.0, 100.0);
    std::vector<Point2> centers;
    for (int i = 0; i < 6; ++i) {
      const Point2 c(std::floor(upos(rng)), std::floor(upos(rng)));
      bool clash = false;
      for (const auto& o : centers)
        if ((o - c).norm() < 25.0) clash = true;
      if (clash) continue;
      centers.push_back(c);
      for (int y = 0; y < 160; ++y)
        for (int x = 0; x < 160; ++x) {
          const double d2 = (x - c.x()) * (x - c.x()) + (y - c.y()) * (y - c.y());
          base.at(x, y) += static_cast<float>(0.35 * std::exp(-d2 / (2 * 3.0 * 3.0)));
        }
    }
    const int dx = 17, dy = 9;
    RasterImage shifted(160, 160, 0.5f);
    for (int y = 0; y < 160; ++y)
      for (int x = 0; x < 160; ++x) shifted.at(x, y) = base.at_reflect(x - dx, y - dy);

    BuiltinMatcher m2;
    auto f1 = m2.detect_and_describe(whole_image_region(base), 0, std::nullopt);
    auto f2 = m2.detect_and_describe(whole_image_region(shifted), 0, std::nullopt);
    REQUIRE(!f1.empty());
    int matched = 0;
    for (const auto& a : f1) {
      if (a.p.x.x() > 120 || a.p.x.y() > 130) continue;  // shifted copy must stay inside
      for (const auto& b : f2)
        if ((b.p.x - (a.p.x + Point2(dx, dy))).norm() < 0.5) {
          ++matched;
          break;
        }
    }
    CHECK(matched >= static_cast<int>(f1.size()) / 2);
  }
}

TEST_CASE("nn_match") {
  auto make_feature = [](std::vector<float> v, double x = 0.0, double y = 0.0) {
    DetectedFeature f;
    double norm = 0.0;
    for (float a : v) norm += static_cast<double>(a) * a;
    norm = std::sqrt(norm);
    for (auto& a : v) a = static_cast<float>(a / norm);
    f.d.v = std::move(v);
    f.p.x = Point2(x, y);
    f.p.sigma = 1.0;
    return f;
  };

  SUBCASE("exact duplicate plus orthogonal candidate is kept") {
    std::vector<DetectedFeature> s1 = {make_feature({1, 0, 0, 0})};
    std::vector<DetectedFeature> s2 = {make_feature({1, 0, 0, 0}, 5, 5),
                                       make_feature({0, 1, 0, 0}, 9, 9)};
    MatchSet m = nn_match(s1, s2, 0.01);
    REQUIRE(m.size() == 1);
    CHECK(m.matches[0].p_prime.x == Point2(5, 5));
    CHECK(m.matches[0].similarity == doctest::Approx(0.0));
  }

  SUBCASE("tie between two identical candidates is rejected") {
    std::vector<DetectedFeature> s1 = {make_feature({1, 0, 0, 0})};
    std::vector<DetectedFeature> s2 = {make_feature({0, 1, 0, 0}), make_feature({0, 1, 0, 0})};
    CHECK(nn_match(s1, s2, 0.99).empty());
  }

  SUBCASE("fewer than 2 candidates yields no matches") {
    std::vector<DetectedFeature> s1 = {make_feature({1, 0})};
    std::vector<DetectedFeature> s2 = {make_feature({1, 0})};
    CHECK(nn_match(s1, s2, 0.9).empty());
  }

  SUBCASE("random sets equal the exhaustive-search oracle") {
    auto rng = st::make_rng(71);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<DetectedFeature> s1, s2;
    for (int i = 0; i < 20; ++i) {
      std::vector<float> v1(16), v2(16);
      for (auto& a : v1) a = static_cast<float>(u(rng));
      for (auto& a : v2) a = static_cast<float>(u(rng));
      s1.push_back(make_feature(v1, i, 0));
      s2.push_back(make_feature(v2, i, 1));
    }
    const double threshold = 0.97;
    MatchSet got = nn_match(s1, s2, threshold);

    // independent oracle: sort all distances per query
    int expected_count = 0;
    for (const auto& q : s1) {
      std::vector<std::pair<double, int>> dists;
      for (size_t j = 0; j < s2.size(); ++j) {
        double d2 = 0.0;
        for (size_t k = 0; k < 16; ++k) {
          const double diff = q.d.v[k] - s2[j].d.v[k];
          d2 += diff * diff;
        }
        dists.push_back({std::sqrt(d2), static_cast<int>(j)});
      }
      std::sort(dists.begin(), dists.end());
      if (dists[0].first / dists[1].first < threshold) {
        ++expected_count;
        bool found = false;
        for (const auto& m : got.matches)
          if (m.p.x == q.p.x && m.p_prime.x == s2[dists[0].second].p.x) found = true;
        CHECK(found);
      }
    }
    CHECK(static_cast<int>(got.size()) == expected_count);
  }
}

TEST_CASE("delaunay consistency filter") {
  SUBCASE("uniform translation flow is untouched") {
    MatchSet in;
    auto rng = st::make_rng(5);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    for (int i = 0; i < 30; ++i) {
      const double x = u(rng), y = u(rng);
      in.matches.push_back(st::make_match(x, y, x + 7.0, y - 3.0, 0, 1, 0, 1, 0.1 * i));
    }
    in.sort_canonical();
    MatchSet out = delaunay_consistency_filter(in);
    CHECK(out.size() == in.size());
  }

  SUBCASE("one reversed flow among a coherent grid is removed") {
    MatchSet in;
    for (int gy = 0; gy < 7; ++gy)
      for (int gx = 0; gx < 7; ++gx) {
        const double x = 10.0 * gx, y = 10.0 * gy;
        in.matches.push_back(st::make_match(x, y, x + 5.0, y + 2.0, 0, 1, 0, 1, 0.01));
      }
    in.matches.push_back(st::make_match(35.0 + 1.0, 35.0 + 1.0, 35.0 - 4.0, 35.0 - 1.0, 0, 1, 0, 1,
                                        0.9));  // reversed flow, worst rank
    in.sort_canonical();
    MatchSet out = delaunay_consistency_filter(in);
    CHECK(out.size() == 49);
    for (const auto& m : out.matches) CHECK((m.p_prime.x - m.p.x - Point2(5.0, 2.0)).norm() < 1e-9);
  }

  SUBCASE("3 matches pass through") {
    MatchSet in;
    in.matches.push_back(st::make_match(0, 0, 50, 50));
    in.matches.push_back(st::make_match(10, 0, 0, 0));
    in.matches.push_back(st::make_match(0, 10, -20, 30));
    MatchSet out = delaunay_consistency_filter(in);
    CHECK(out.size() == 3);
  }

  SUBCASE("collinear keypoints pass through") {
    MatchSet in;
    for (int i = 0; i < 8; ++i) in.matches.push_back(st::make_match(i * 5.0, 0.0, i * 5.0, 10.0));
    CHECK(delaunay_consistency_filter(in).size() == 8);
  }

  SUBCASE("idempotence and no growth") {
    auto rng = st::make_rng(31);
    std::uniform_real_distribution<double> u(0.0, 200.0);
    std::uniform_real_distribution<double> flow(-3.0, 3.0);
    MatchSet in;
    for (int i = 0; i < 60; ++i) {
      const double x = u(rng), y = u(rng);
      in.matches.push_back(
          st::make_match(x, y, x + 10.0 + flow(rng), y - 5.0 + flow(rng), 0, 1, 0, 1, 0.01 * i));
    }
    for (int i = 0; i < 6; ++i) {
      const double x = u(rng), y = u(rng);
      in.matches.push_back(st::make_match(x, y, u(rng), u(rng), 0, 1, 0, 1, 0.8 + 0.01 * i));
    }
    in.sort_canonical();
    MatchSet once = delaunay_consistency_filter(in);
    CHECK(once.size() <= in.size());
    MatchSet twice = delaunay_consistency_filter(once);
    REQUIRE(twice.size() == once.size());
    for (size_t i = 0; i < once.size(); ++i) {
      CHECK(twice.matches[i].p.x == once.matches[i].p.x);
      CHECK(twice.matches[i].p_prime.x == once.matches[i].p_prime.x);
    }
  }
}

TEST_CASE("match interchange format") {
  SUBCASE("empty stream") {
    std::istringstream in("");
    CHECK(ingest_matches(in).empty());
  }

  SUBCASE("comments and blank lines are skipped") {
    std::istringstream in("# header\n\n# another\n");
    CHECK(ingest_matches(in).empty());
  }

  SUBCASE("single record round-trips bit-identically") {
    MatchSet one;
    one.matches.push_back(st::make_match(1.0 / 3.0, 2.0 / 7.0, 123.456789012345, -0.25, 0.1,
                                         1.75, -2.9, 0.333333333333333314, 0.725));
    std::ostringstream out;
    emit_matches(out, one);
    std::istringstream in(out.str());
    MatchSet back = ingest_matches(in);
    REQUIRE(back.size() == 1);
    const Match& a = one.matches[0];
    const Match& b = back.matches[0];
    CHECK(a.p.x == b.p.x);
    CHECK(a.p.theta == b.p.theta);
    CHECK(a.p.sigma == b.p.sigma);
    CHECK(a.p_prime.x == b.p_prime.x);
    CHECK(a.p_prime.theta == b.p_prime.theta);
    CHECK(a.p_prime.sigma == b.p_prime.sigma);
    CHECK(a.similarity == b.similarity);
  }

  SUBCASE("sigma zero is rejected with the line number") {
    std::istringstream in("# c\n1\t2\t0\t0\t3\t4\t0\t1\t0.5\n");
    try {
      ingest_matches(in);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line_number == 2);
    }
  }

  SUBCASE("malformed field count is rejected with the line number") {
    std::istringstream in("1\t2\t3\n");
    try {
      ingest_matches(in);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line_number == 1);
    }
  }

  SUBCASE("non-finite values are rejected") {
    std::istringstream in("1\t2\t0\tinf\t3\t4\t0\t1\t0.5\n");
    CHECK_THROWS_AS(ingest_matches(in), ParseError);
  }

  SUBCASE("ingested thetas are wrapped and the set is sorted") {
    std::ostringstream record;
    record << "5\t6\t" << 7.0 << "\t1\t7\t8\t0\t1\t0.5\n";
    record << "1\t2\t0\t1\t3\t4\t0\t1\t0.5\n";
    std::istringstream in(record.str());
    MatchSet got = ingest_matches(in);
    REQUIRE(got.size() == 2);
    CHECK(got.matches[0].p.x.x() == 1.0);  // sorted by x
    CHECK(got.matches[1].p.theta == doctest::Approx(7.0 - 2 * std::numbers::pi));
  }
}

TEST_CASE("ingest matcher serves stored matches per region pair") {
  MatchSet stored;
  stored.matches.push_back(st::make_match(10, 10, 12, 11));
  stored.matches.push_back(st::make_match(100, 100, 103, 99));
  IngestMatcher matcher(stored);

  RasterImage img(256, 256, 0.5f);
  ImageRegion r1 = whole_image_region(img, 1);
  ImageRegion r2 = whole_image_region(img, 2);
  r1.window = {0, 0, 64, 64};
  r2.window = {0, 0, 64, 64};

  MatchSet got = matcher.match_pair(r1, r2, 0.25, 0.5, 7);
  REQUIRE(got.size() == 1);
  CHECK(got.matches[0].p.x == Point2(10, 10));
  CHECK(got.matches[0].p.theta == 0.25);
  CHECK(got.matches[0].p_prime.theta == 0.5);
  CHECK(got.matches[0].origin == 7);
}
