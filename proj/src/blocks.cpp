#include "slime/blocks.hpp"

#include <algorithm>
#include <cmath>

namespace slime {

AxisLayout layout_axis(int length) {
  AxisLayout out;
  if (length <= kBlockSize) {
    out.starts = {0};
    out.sizes = {length};
    return out;
  }

  const int span = length - kBlockSize;  // distance covered by strides
  // Flush stride for k blocks; clamped to the allowed band, which crops the
  // last block instead of shifting it.
  const int k_min = 1 + (span + kStrideMax - 1) / kStrideMax;
  int best_k = -1;
  double best_score = 0.0;
  for (int k = k_min;; ++k) {
    double stride = static_cast<double>(span) / (k - 1);
    double clamped = std::max(stride, static_cast<double>(kStrideMin));
    int last_size = length - static_cast<int>(std::llround(clamped * (k - 1)));
    if (last_size < 128) break;  // larger k only shrinks the tail block further
    double score = std::abs(clamped - kDefaultStride);
    if (best_k < 0 || score < best_score - 1e-12) {
      best_k = k;
      best_score = score;
    }
  }

  const int k = best_k;
  const double stride =
      std::max(static_cast<double>(length - kBlockSize) / (k - 1), static_cast<double>(kStrideMin));
  for (int i = 0; i < k; ++i) {
    int start = static_cast<int>(std::llround(i * stride));
    out.starts.push_back(start);
    out.sizes.push_back(std::min(kBlockSize, length - start));
  }
  return out;
}

std::vector<Tile> build_tile_grid(int width, int height) {
  if (std::min(width, height) < kMinImageDim)
    throw SizeError("image too small for the tile grid (min dimension 64 px)");
  AxisLayout cols = layout_axis(width);
  AxisLayout rows = layout_axis(height);
  std::vector<Tile> tiles;
  int c = 0;
  for (size_t i = 0; i < rows.starts.size(); ++i)
    for (size_t j = 0; j < cols.starts.size(); ++j) {
      Tile t;
      t.grid_row = static_cast<int>(i);
      t.grid_col = static_cast<int>(j);
      t.rect = {cols.starts[j] + kBlockPad, rows.starts[i] + kBlockPad, cols.sizes[j],
                rows.sizes[i]};
      t.linear_index = c++;
      tiles.push_back(t);
    }
  return tiles;
}

BlockGrid build_block_grid(int width, int height) {
  if (std::min(width, height) < kMinImageDim)
    throw SizeError("image too small for the block grid (min dimension 64 px)");
  BlockGrid grid;
  grid.image_width = width;
  grid.image_height = height;
  grid.pad = kBlockPad;

  int w_index = 0;
  for (int s = 1; s <= 3; ++s) {
    ScaleLevel level;
    level.s = s;
    // s blocks at the default stride span 128 * (s + 1) px along the
    // minimum dimension.
    level.factor = static_cast<double>(kDefaultStride * (s + 1)) / std::min(width, height);
    level.scaled_width = std::max<int>(1, static_cast<int>(std::llround(width * level.factor)));
    level.scaled_height = std::max<int>(1, static_cast<int>(std::llround(height * level.factor)));
    grid.levels.push_back(level);

    AxisLayout cols = layout_axis(level.scaled_width);
    AxisLayout rows = layout_axis(level.scaled_height);
    for (size_t i = 0; i < rows.starts.size(); ++i)
      for (size_t j = 0; j < cols.starts.size(); ++j) {
        Block b;
        b.scale_s = s;
        b.grid_row = static_cast<int>(i);
        b.grid_col = static_cast<int>(j);
        b.rect = {cols.starts[j] + kBlockPad, rows.starts[i] + kBlockPad, cols.sizes[j],
                  rows.sizes[i]};
        b.linear_index = w_index++;
        b.scale_factor = level.factor;
        grid.blocks.push_back(b);
      }
  }

  grid.tiles = build_tile_grid(width, height);
  return grid;
}

}  // namespace slime
