#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fvtb/errors.hpp"
#include "fvtb/image.hpp"

namespace fvtb {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return e;
}

}  // namespace detail

inline Image load_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image: " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw CorruptError("not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialization failed");
  }
  Image img;
  std::vector<png_byte> buf;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw CorruptError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int ch = png_get_channels(png, info);
  buf.resize(static_cast<std::size_t>(w) * h * ch);
  rows.resize(h);
  for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * ch;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  if (ch != 1 && ch != 3) throw CorruptError("unsupported PNG channel count: " + path.string());
  img = Image(w, h, ch);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

inline void save_png(const Image& img, const std::filesystem::path& path) {
  if (img.empty()) throw DimensionError("save_png: empty image");
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot write image: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<png_byte> buf(img.data.size());
  std::transform(img.data.begin(), img.data.end(), buf.begin(), detail::quantize8);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = buf.data() + static_cast<std::size_t>(y) * img.width * img.channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Binary PGM (P5) / PPM (P6), 8-bit.
inline Image load_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw CorruptError("unsupported PNM type: " + path.string());
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') in.ignore(1 << 20, '\n');
    if (!(in >> v)) throw CorruptError("bad PNM header: " + path.string());
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw CorruptError("bad PNM header: " + path.string());
  in.get();
  const int ch = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * ch);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw CorruptError("truncated PNM: " + path.string());
  Image img(w, h, ch);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<double>(buf[i]) / maxval;
  return img;
}

inline void save_pnm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.data.size());
  std::transform(img.data.begin(), img.data.end(), buf.begin(), detail::quantize8);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

/// Dispatches on extension: .png, .pgm/.ppm/.pnm.
inline Image load_image(const std::filesystem::path& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return load_pnm(path);
  return load_png(path);
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return save_pnm(img, path);
  save_png(img, path);
}

}  // namespace fvtb
