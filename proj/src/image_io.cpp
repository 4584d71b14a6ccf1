#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <vector>

#include "slime/image.hpp"

namespace slime {

namespace {

unsigned char to_byte(float v) {
  float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

// Skips whitespace and '#' comment runs in a PGM header.
void skip_pgm_separators(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

RasterImage load_pgm(std::istream& in) {
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") throw ParseError("not a PGM file", 1);
  skip_pgm_separators(in);
  int w = 0, h = 0, maxval = 0;
  in >> w;
  skip_pgm_separators(in);
  in >> h;
  skip_pgm_separators(in);
  in >> maxval;
  if (!in || w < 1 || h < 1 || maxval < 1 || maxval > 65535)
    throw ParseError("bad PGM header", 1);
  RasterImage img(w, h);
  const float scale = 1.0f / static_cast<float>(maxval);
  if (magic == "P5") {
    in.get();  // single separator byte after maxval
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> row(static_cast<size_t>(w) * bytes);
    for (int y = 0; y < h; ++y) {
      in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
      if (!in) throw ParseError("truncated PGM data", y + 4);
      for (int x = 0; x < w; ++x) {
        int v = bytes == 1 ? row[x] : (row[2 * x] << 8) | row[2 * x + 1];
        img.at(x, y) = v * scale;
      }
    }
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int v;
        in >> v;
        if (!in) throw ParseError("truncated PGM data", y + 4);
        img.at(x, y) = v * scale;
      }
  }
  return img;
}

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

RasterImage load_png(const std::string& path) {
  PngReadCloser ctx;
  ctx.fp = std::fopen(path.c_str(), "rb");
  if (!ctx.fp) throw SizeError("cannot open image file: " + path);
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info || setjmp(png_jmpbuf(ctx.png)))
    throw ParseError("failed to decode PNG: " + path, 1);
  png_init_io(ctx.png, ctx.fp);
  png_read_info(ctx.png, ctx.info);

  png_set_palette_to_rgb(ctx.png);
  png_set_expand_gray_1_2_4_to_8(ctx.png);
  png_set_strip_16(ctx.png);
  png_set_strip_alpha(ctx.png);
  png_read_update_info(ctx.png, ctx.info);

  const int w = static_cast<int>(png_get_image_width(ctx.png, ctx.info));
  const int h = static_cast<int>(png_get_image_height(ctx.png, ctx.info));
  const int channels = png_get_channels(ctx.png, ctx.info);
  if (channels != 1 && channels != 3) throw ParseError("unsupported PNG channel count", 1);

  std::vector<unsigned char> data(static_cast<size_t>(w) * h * channels);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = data.data() + static_cast<size_t>(y) * w * channels;
  png_read_image(ctx.png, rows.data());

  RasterImage img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const unsigned char* px = data.data() + (static_cast<size_t>(y) * w + x) * channels;
      float v;
      if (channels == 1)
        v = px[0] / 255.0f;
      else  // BT.601 luma
        v = (0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2]) / 255.0f;
      img.at(x, y) = v;
    }
  return img;
}

struct PngWriteCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngWriteCloser() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

void write_png(const std::string& path, int w, int h, int color_type,
               const std::vector<unsigned char>& data, int channels) {
  PngWriteCloser ctx;
  ctx.fp = std::fopen(path.c_str(), "wb");
  if (!ctx.fp) throw SizeError("cannot write image file: " + path);
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.png || !ctx.info || setjmp(png_jmpbuf(ctx.png)))
    throw SizeError("failed to encode PNG: " + path);
  png_init_io(ctx.png, ctx.fp);
  png_set_IHDR(ctx.png, ctx.info, w, h, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y)
    rows[y] = const_cast<png_bytep>(data.data() + static_cast<size_t>(y) * w * channels);
  png_write_image(ctx.png, rows.data());
  png_write_end(ctx.png, nullptr);
}

}  // namespace

RasterImage load_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw SizeError("cannot open image file: " + path);
  unsigned char magic[2] = {0, 0};
  probe.read(reinterpret_cast<char*>(magic), 2);
  probe.close();
  if (magic[0] == 'P' && (magic[1] == '5' || magic[1] == '2')) {
    std::ifstream in(path, std::ios::binary);
    return load_pgm(in);
  }
  if (magic[0] == 0x89 && magic[1] == 'P') return load_png(path);
  throw ParseError("unrecognized image format: " + path, 1);
}

void save_pgm(const std::string& path, const RasterImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SizeError("cannot write image file: " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) row[x] = to_byte(img.at(x, y));
    out.write(reinterpret_cast<const char*>(row.data()), img.width);
  }
}

void save_png_gray(const std::string& path, const RasterImage& img) {
  std::vector<unsigned char> data(static_cast<size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      data[static_cast<size_t>(y) * img.width + x] = to_byte(img.at(x, y));
  write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, data, 1);
}

void save_png_rgb(const std::string& path, const RgbImage& img) {
  write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, img.samples, 3);
}

void save_image(const std::string& path, const RasterImage& img) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".png")
    save_png_gray(path, img);
  else
    save_pgm(path, img);
}

}  // namespace slime
