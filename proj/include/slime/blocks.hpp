#pragma once

#include <vector>

#include "slime/image.hpp"

namespace slime {

constexpr int kBlockSize = 256;
constexpr int kBlockPad = 32;
constexpr int kDefaultStride = 128;
constexpr int kStrideMin = 86;   // 128 - 42
constexpr int kStrideMax = 170;  // 128 + 42
constexpr int kMinImageDim = 64;

// Axis-aligned rectangle, half-open, in the padded frame of its scale level.
struct Rect {
  int x0 = 0;
  int y0 = 0;
  int w = 0;
  int h = 0;

  bool contains(double x, double y) const {
    return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
  }
};

struct Block {
  int scale_s = 1;       // 1, 2 or 3
  int grid_row = 0;      // i
  int grid_col = 0;      // j
  Rect rect;             // padded scaled-frame coordinates
  int linear_index = 0;  // w, unique within the grid
  double scale_factor = 1.0;
};

// Native-resolution block; no scale factor is applied.
struct Tile {
  int grid_row = 0;  // a
  int grid_col = 0;  // b
  Rect rect;         // padded native-frame coordinates
  int linear_index = 0;  // c
};

struct ScaleLevel {
  int s = 1;
  double factor = 1.0;
  int scaled_width = 0;   // unpadded scaled dims
  int scaled_height = 0;
};

struct BlockGrid {
  int image_width = 0;
  int image_height = 0;
  int pad = kBlockPad;
  std::vector<ScaleLevel> levels;
  std::vector<Block> blocks;  // sorted by (s, i, j)
  std::vector<Tile> tiles;
};

// Positions and sizes of the blocks along one axis of unpadded length
// `length`. Strides land in [86, 170]; the last block may shrink below 256
// but stays >= 128 whenever the axis allows.
struct AxisLayout {
  std::vector<int> starts;  // unpadded coordinates
  std::vector<int> sizes;
};
AxisLayout layout_axis(int length);

// Multiscale grid: three levels scaled so the minimum dimension spans
// s = 1, 2, 3 blocks at the default stride, plus the native-resolution tile
// grid. Throws SizeError when min(dims) < 64.
BlockGrid build_block_grid(int width, int height);

std::vector<Tile> build_tile_grid(int width, int height);

// Keypoint coordinate mapping between a scale level and the full-resolution
// unpadded frame (pixel-center convention, matching resample()).
inline double scaled_to_full(double scaled_coord, double factor) {
  return (scaled_coord + 0.5) / factor - 0.5;
}
inline double full_to_scaled(double full_coord, double factor) {
  return (full_coord + 0.5) * factor - 0.5;
}

}  // namespace slime
