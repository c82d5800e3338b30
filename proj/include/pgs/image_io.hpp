#pragma once

#include <cstdio>
#include <csetjmp>
#include <cstring>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "pgs/core.hpp"

namespace pgs {

namespace detail {

struct FileHandle {
  FILE* f = nullptr;
  explicit FileHandle(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
  ~FileHandle() {
    if (f) std::fclose(f);
  }
  FileHandle(const FileHandle&) = delete;
  FileHandle& operator=(const FileHandle&) = delete;
};

inline ImageTensor from_rgb8(const std::vector<unsigned char>& rgb, int h, int w) {
  ImageTensor img;
  img.data = Tensor(3, h, w);
  const real inv = 1.0 / 255.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ci = 0; ci < 3; ++ci)
        img.data.at(ci, y, x) = rgb[(static_cast<size_t>(y) * w + x) * 3 + ci] * inv;
  return img;
}

struct PngErrorCtx {
  std::jmp_buf jb;
};

inline void png_error_fn(png_structp png, png_const_charp) {
  std::longjmp(static_cast<PngErrorCtx*>(png_get_error_ptr(png))->jb, 1);
}
inline void png_warn_fn(png_structp, png_const_charp) {}

inline ImageTensor read_png(const std::string& path) {
  FileHandle fh(path, "rb");
  if (!fh.f) throw DataError(cat("cannot open image '", path, "'"));
  PngErrorCtx ctx;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &ctx, png_error_fn, png_warn_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    throw DataError("libpng initialization failed");
  }
  std::vector<unsigned char> rgb;
  int h = 0, w = 0;
  if (setjmp(ctx.jb)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(cat("failed to decode PNG '", path, "'"));
  }
  png_init_io(png, fh.f);
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(cat("unsupported PNG layout in '", path, "'"));
  }
  rgb.resize(static_cast<size_t>(h) * w * 3);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = rgb.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_rgb8(rgb, h, w);
}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jb;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegErrorMgr*>(cinfo->err)->jb, 1);
}

inline ImageTensor read_jpeg(const std::string& path) {
  FileHandle fh(path, "rb");
  if (!fh.f) throw DataError(cat("cannot open image '", path, "'"));
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  if (setjmp(err.jb)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError(cat("failed to decode JPEG '", path, "'"));
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fh.f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  std::vector<unsigned char> rgb(static_cast<size_t>(h) * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = rgb.data() + static_cast<size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_rgb8(rgb, h, w);
}

}  // namespace detail

// Reads a PNG or JPEG (sniffed by magic bytes) as RGB in [0,1].
inline ImageTensor read_image(const std::string& path) {
  unsigned char magic[4] = {0, 0, 0, 0};
  {
    detail::FileHandle fh(path, "rb");
    if (!fh.f) throw DataError(cat("cannot open image '", path, "'"));
    if (std::fread(magic, 1, 4, fh.f) != 4)
      throw DataError(cat("'", path, "' is too short to be an image"));
  }
  if (magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' && magic[3] == 'G')
    return detail::read_png(path);
  if (magic[0] == 0xFF && magic[1] == 0xD8) return detail::read_jpeg(path);
  throw DataError(cat("'", path, "' is neither PNG nor JPEG"));
}

inline void write_png(const std::string& path, const ImageTensor& img) {
  img.validate();
  const int h = img.data.h, w = img.data.w;
  std::vector<unsigned char> rgb(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ci = 0; ci < 3; ++ci) {
        const real v = clamp01(img.data.at(ci, y, x));
        rgb[(static_cast<size_t>(y) * w + x) * 3 + ci] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  detail::FileHandle fh(path, "wb");
  if (!fh.f) throw DataError(cat("cannot open '", path, "' for writing"));
  detail::PngErrorCtx ctx;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, &ctx, detail::png_error_fn, detail::png_warn_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    throw DataError("libpng initialization failed");
  }
  if (setjmp(ctx.jb)) {
    png_destroy_write_struct(&png, &info);
    throw DataError(cat("failed to write PNG '", path, "'"));
  }
  png_init_io(png, fh.f);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = rgb.data() + static_cast<size_t>(y) * w * 3;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace pgs
