#include "flowkd/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

#include "flowkd/error.hpp"

namespace flowkd {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

std::vector<std::vector<png_byte>> read_png_rows(const std::string& path, int& width, int& height,
                                                 int& channels, bool want_gray) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, Err::UnreadableFile, "cannot open " + path);

  png_byte header[8];
  require(std::fread(header, 1, 8, fp.get()) == 8 && !png_sig_cmp(header, 0, 8),
          Err::UnreadableFile, "not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(Err::UnreadableFile, "libpng failed on " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  if (want_gray)
    png_set_rgb_to_gray(png, 1, -1, -1);
  else
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  channels = static_cast<int>(png_get_channels(png, info));

  std::vector<std::vector<png_byte>> rows(static_cast<size_t>(height));
  std::vector<png_bytep> row_ptrs(static_cast<size_t>(height));
  const size_t rowbytes = png_get_rowbytes(png, info);
  for (int y = 0; y < height; ++y) {
    rows[static_cast<size_t>(y)].resize(rowbytes);
    row_ptrs[static_cast<size_t>(y)] = rows[static_cast<size_t>(y)].data();
  }
  png_read_image(png, row_ptrs.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return rows;
}

void write_png(const std::string& path, const std::vector<png_byte>& pixels, int width, int height,
               int color_type, int channels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, Err::UnreadableFile, "cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(Err::UnreadableFile, "libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> row_ptrs(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y)
    row_ptrs[static_cast<size_t>(y)] =
        const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * width * channels);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

png_byte to_byte(float v) {
  float s = v * 255.0f + 0.5f;
  if (s < 0.f) s = 0.f;
  if (s > 255.f) s = 255.f;
  return static_cast<png_byte>(s);
}

}  // namespace

TensorF read_png_rgb(const std::string& path) {
  int w = 0, h = 0, c = 0;
  auto rows = read_png_rows(path, w, h, c, false);
  require(c == 3, Err::UnreadableFile, "expected 3 channels after conversion: " + path);
  TensorF img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, y, x) =
            static_cast<float>(rows[static_cast<size_t>(y)][static_cast<size_t>(x) * 3 + ch]) /
            255.0f;
  return img;
}

TensorF read_png_gray(const std::string& path) {
  int w = 0, h = 0, c = 0;
  auto rows = read_png_rows(path, w, h, c, true);
  require(c == 1, Err::UnreadableFile, "expected 1 channel after conversion: " + path);
  TensorF img({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.at(y, x) = static_cast<float>(rows[static_cast<size_t>(y)][static_cast<size_t>(x)]) / 255.0f;
  return img;
}

void write_png_rgb(const std::string& path, const TensorF& img) {
  require(img.ndim() == 3 && img.dim(0) == 3, Err::ShapeMismatch, "write_png_rgb: (3,H,W) input");
  const int h = img.dim(1), w = img.dim(2);
  std::vector<png_byte> pixels(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        pixels[(static_cast<size_t>(y) * w + x) * 3 + c] = to_byte(img.at(c, y, x));
  write_png(path, pixels, w, h, PNG_COLOR_TYPE_RGB, 3);
}

void write_png_gray(const std::string& path, const TensorF& img) {
  require(img.ndim() == 2, Err::ShapeMismatch, "write_png_gray: (H,W) input");
  const int h = img.dim(0), w = img.dim(1);
  std::vector<png_byte> pixels(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) pixels[static_cast<size_t>(y) * w + x] = to_byte(img.at(y, x));
  write_png(path, pixels, w, h, PNG_COLOR_TYPE_GRAY, 1);
}

}  // namespace flowkd
