#include <cmath>
#include <numbers>
#include <set>

#include "doctest.h"
#include "slime/blocks.hpp"
#include "slime/image.hpp"
#include "test_support.hpp"

using namespace slime;
namespace st = slime::testing;

TEST_CASE("mirror index follows the reflect-101 oracle") {
  // n = 5: ... 2 1 | 0 1 2 3 4 | 3 2 ...
  CHECK(mirror_index(-1, 5) == 1);
  CHECK(mirror_index(-2, 5) == 2);
  CHECK(mirror_index(5, 5) == 3);
  CHECK(mirror_index(6, 5) == 2);
  CHECK(mirror_index(0, 1) == 0);
  CHECK(mirror_index(-3, 1) == 0);
}

TEST_CASE("pad_image") {
  RasterImage img = st::make_texture(40, 30, 123);

  SUBCASE("pad 0 is the identity") {
    RasterImage p = pad_image(img, 0);
    CHECK(p.width == 40);
    CHECK(p.samples == img.samples);
  }

  SUBCASE("pad 32 grows both dims by 64") {
    RasterImage p = pad_image(img, 32);
    CHECK(p.width == 40 + 64);
    CHECK(p.height == 30 + 64);
  }

  SUBCASE("corner reflection equals the mirror-index oracle") {
    RasterImage p = pad_image(img, 5);
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x) {
        const float expected = img.at(mirror_index(x - 5, 40), mirror_index(y - 5, 30));
        CHECK(p.at(x, y) == expected);
      }
  }
}

TEST_CASE("resample") {
  SUBCASE("factor 1 is the identity") {
    RasterImage img = st::make_texture(37, 23, 5);
    RasterImage r = resample(img, 1.0);
    CHECK(r.samples == img.samples);
  }

  SUBCASE("constant image stays constant (partition of unity)") {
    RasterImage img(50, 40, 0.37f);
    for (double f : {0.5, 0.75, 1.5, 3.0}) {
      RasterImage r = resample(img, f);
      CHECK(r.width == static_cast<int>(std::llround(50 * f)));
      CHECK(r.height == static_cast<int>(std::llround(40 * f)));
      for (float s : r.samples) CHECK(std::abs(s - 0.37f) < 1e-6f);
    }
  }

  SUBCASE("halving preserves the amplitude of a period-8 cosine") {
    const int w = 256, h = 16;
    RasterImage img(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(x, y) = 0.5f + 0.4f * std::cos(2.0 * std::numbers::pi * x / 8.0);
    RasterImage r = resample(img, 0.5);
    float lo = 1.0f, hi = 0.0f;
    for (int x = 8; x < r.width - 8; ++x) {  // skip boundary taps
      lo = std::min(lo, r.at(x, r.height / 2));
      hi = std::max(hi, r.at(x, r.height / 2));
    }
    const double amplitude = 0.5 * (hi - lo);
    CHECK(amplitude == doctest::Approx(0.4).epsilon(0.05));
  }

  SUBCASE("rejects factors outside (0, 8]") {
    RasterImage img(20, 20, 0.0f);
    CHECK_THROWS_AS(resample(img, 0.0), SizeError);
    CHECK_THROWS_AS(resample(img, 8.5), SizeError);
    CHECK_NOTHROW(resample(img, 8.0));
  }
}

namespace {

// every unpadded pixel must fall in at least one rect (padded coords)
bool axis_covered(const AxisLayout& layout, int length) {
  std::vector<char> covered(length, 0);
  for (size_t i = 0; i < layout.starts.size(); ++i)
    for (int x = layout.starts[i]; x < layout.starts[i] + layout.sizes[i] && x < length; ++x)
      covered[x] = 1;
  for (char c : covered)
    if (!c) return false;
  return true;
}

}  // namespace

TEST_CASE("axis layout obeys the stride band and coverage") {
  for (int length = 64; length <= 2500; ++length) {
    AxisLayout layout = layout_axis(length);
    REQUIRE(!layout.starts.empty());
    CHECK(layout.starts.front() == 0);
    for (size_t i = 0; i < layout.starts.size(); ++i) {
      CHECK(layout.sizes[i] <= kBlockSize);
      CHECK(layout.starts[i] + layout.sizes[i] <= length);
      if (i + 1 < layout.starts.size()) {
        const int stride = layout.starts[i + 1] - layout.starts[i];
        CHECK(stride >= kStrideMin);
        CHECK(stride <= kStrideMax);
        CHECK(layout.sizes[i] == kBlockSize);  // only the last block may shrink
      }
    }
    CHECK(layout.starts.back() + layout.sizes.back() == length);
    if (length > kBlockSize) CHECK(layout.sizes.back() >= 128);
    CHECK(axis_covered(layout, length));
  }
}

TEST_CASE("block count along an axis is monotone in the length") {
  size_t prev = 1;
  for (int length = 64; length <= 4000; ++length) {
    const size_t k = layout_axis(length).starts.size();
    CHECK(k >= prev);
    prev = k;
  }
}

TEST_CASE("block grid examples") {
  SUBCASE("512x512: scale 1 factor is 256/512 with a single block") {
    BlockGrid g = build_block_grid(512, 512);
    CHECK(g.levels[0].factor == doctest::Approx(0.5));
    CHECK(g.levels[0].scaled_width == 256);
    int s1_blocks = 0;
    for (const auto& b : g.blocks)
      if (b.scale_s == 1) ++s1_blocks;
    CHECK(s1_blocks == 1);
    // s = 2, 3 hold exactly s blocks along the min dimension
    CHECK(g.levels[1].scaled_width == 384);
    CHECK(g.levels[2].scaled_width == 512);
  }

  SUBCASE("256x256 gives a 1x1 grid at scale 1") {
    BlockGrid g = build_block_grid(256, 256);
    int s1_blocks = 0;
    for (const auto& b : g.blocks)
      if (b.scale_s == 1) ++s1_blocks;
    CHECK(s1_blocks == 1);
    CHECK(g.blocks[0].rect.w == 256);
    CHECK(g.blocks[0].rect.x0 == kBlockPad);
  }

  SUBCASE("too-small image") { CHECK_THROWS_AS(build_block_grid(63, 500), SizeError); }

  SUBCASE("grids are deterministic") {
    BlockGrid a = build_block_grid(777, 512);
    BlockGrid b = build_block_grid(777, 512);
    REQUIRE(a.blocks.size() == b.blocks.size());
    for (size_t i = 0; i < a.blocks.size(); ++i) {
      CHECK(a.blocks[i].rect.x0 == b.blocks[i].rect.x0);
      CHECK(a.blocks[i].rect.w == b.blocks[i].rect.w);
      CHECK(a.blocks[i].linear_index == b.blocks[i].linear_index);
    }
  }
}

TEST_CASE("grid coverage: every unpadded pixel in >= 1 block per scale and tile") {
  for (auto [w, h] : {std::pair{300, 200}, {512, 384}, {640, 480}}) {
    BlockGrid g = build_block_grid(w, h);
    for (const auto& level : g.levels) {
      std::vector<char> covered(static_cast<size_t>(level.scaled_width) * level.scaled_height, 0);
      for (const auto& b : g.blocks) {
        if (b.scale_s != level.s) continue;
        for (int y = b.rect.y0 - kBlockPad; y < b.rect.y0 - kBlockPad + b.rect.h; ++y)
          for (int x = b.rect.x0 - kBlockPad; x < b.rect.x0 - kBlockPad + b.rect.w; ++x)
            if (x >= 0 && x < level.scaled_width && y >= 0 && y < level.scaled_height)
              covered[static_cast<size_t>(y) * level.scaled_width + x] = 1;
      }
      for (char c : covered) REQUIRE(c == 1);
    }
    std::vector<char> tile_cover(static_cast<size_t>(w) * h, 0);
    for (const auto& t : g.tiles)
      for (int y = t.rect.y0 - kBlockPad; y < t.rect.y0 - kBlockPad + t.rect.h; ++y)
        for (int x = t.rect.x0 - kBlockPad; x < t.rect.x0 - kBlockPad + t.rect.w; ++x)
          if (x >= 0 && x < w && y >= 0 && y < h) tile_cover[static_cast<size_t>(y) * w + x] = 1;
    for (char c : tile_cover) REQUIRE(c == 1);
  }
}

TEST_CASE("every keypoint lies in 1..4 tiles on a 512x512 grid") {
  auto tiles = build_tile_grid(512, 512);
  for (int y = 0; y < 512; y += 3)
    for (int x = 0; x < 512; x += 3) {
      int hits = 0;
      for (const auto& t : tiles)
        if (t.rect.contains(x + kBlockPad, y + kBlockPad)) ++hits;
      REQUIRE(hits >= 1);
      REQUIRE(hits <= 4);
    }
}

TEST_CASE("tile grid equals the native-resolution block layout") {
  auto tiles = build_tile_grid(1024, 768);
  AxisLayout cols = layout_axis(1024);
  AxisLayout rows = layout_axis(768);
  REQUIRE(tiles.size() == cols.starts.size() * rows.starts.size());
  int c = 0;
  for (size_t i = 0; i < rows.starts.size(); ++i)
    for (size_t j = 0; j < cols.starts.size(); ++j) {
      CHECK(tiles[c].rect.x0 == cols.starts[j] + kBlockPad);
      CHECK(tiles[c].rect.y0 == rows.starts[i] + kBlockPad);
      CHECK(tiles[c].rect.w == cols.sizes[j]);
      CHECK(tiles[c].linear_index == c);
      ++c;
    }
}

TEST_CASE("scaled/full-resolution coordinate round trip is exact") {
  auto rng = st::make_rng(77);
  std::uniform_real_distribution<double> u(0.0, 1000.0);
  for (double factor : {0.25, 0.5, 2.0 / 3.0, 1.0, 1.5}) {
    for (int i = 0; i < 100; ++i) {
      const double full = u(rng);
      const double back = scaled_to_full(full_to_scaled(full, factor), factor);
      CHECK(std::abs(back - full) < 1e-9);
    }
  }
}
