#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hitl/tensor.hpp"

namespace hitl {

/// 8-bit interleaved pixels as stored in PNG files.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
  bool operator==(const RawImage&) const = default;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// [C,H,W] in [0,1] -> interleaved 8-bit.
inline RawImage to_raw(const Tensor& chw) {
  RawImage r;
  r.channels = chw.dim(0);
  r.height = chw.dim(1);
  r.width = chw.dim(2);
  r.pixels.resize(r.channels * r.height * r.width);
  for (std::size_t c = 0; c < r.channels; ++c)
    for (std::size_t i = 0; i < r.height * r.width; ++i) r.pixels[i * r.channels + c] = to_byte(chw[c * r.height * r.width + i]);
  return r;
}

/// Interleaved 8-bit -> [C,H,W] in [0,1]; gray is replicated to `channels`.
inline Tensor from_raw(const RawImage& r, std::size_t channels) {
  Tensor t({channels, r.height, r.width});
  const std::size_t hw = r.height * r.width;
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t src = r.channels == 1 ? 0 : std::min(c, r.channels - 1);
    for (std::size_t i = 0; i < hw; ++i) t[c * hw + i] = static_cast<float>(r.pixels[i * r.channels + src]) / 255.0f;
  }
  return t;
}

namespace detail {

struct PngWriteBuffer {
  std::string bytes;
};

inline void png_write_to_buffer(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->bytes.append(reinterpret_cast<const char*>(data), len);
}

inline void png_flush_noop(png_structp) {}

struct PngReadBuffer {
  const std::string* bytes;
  std::size_t pos = 0;
};

inline void png_read_from_buffer(png_structp png, png_bytep out, png_size_t len) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->bytes->size() - buf->pos < len) png_error(png, "unexpected end of PNG data");
  std::copy_n(buf->bytes->data() + buf->pos, len, reinterpret_cast<char*>(out));
  buf->pos += len;
}

[[noreturn]] inline void png_throw(png_structp, png_const_charp msg) { throw IngestionError(std::string("PNG: ") + msg); }
inline void png_warn(png_structp, png_const_charp) {}

}  // namespace detail

inline std::string encode_png(const RawImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("encode_png supports gray or RGB");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_throw, detail::png_warn);
  png_infop info = png_create_info_struct(png);
  detail::PngWriteBuffer buf;
  try {
    png_set_write_fn(png, &buf, detail::png_write_to_buffer, detail::png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y) {
      png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return buf.bytes;
}

/// Decodes any 8/16-bit PNG to gray or RGB (alpha dropped, palettes expanded).
inline RawImage decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw IngestionError("not a PNG image");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_throw, detail::png_warn);
  png_infop info = png_create_info_struct(png);
  detail::PngReadBuffer buf{&bytes, 0};
  RawImage img;
  try {
    png_set_read_fn(png, &buf, detail::png_read_from_buffer);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_expand(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    if (img.channels != 1 && img.channels != 3) throw IngestionError("unsupported PNG channel layout");
    img.pixels.resize(img.width * img.height * img.channels);
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
    png_read_image(png, rows.data());
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Box-filter resampling of a [C,H,W] image: each output pixel averages the
/// source area it covers (with fractional edge weights).
inline Tensor resize_area(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == out_h && W == out_w) return img;
  // Per-axis weight tables: weights[o] = list of (src index, weight).
  auto table = [](std::size_t src_n, std::size_t dst_n) {
    std::vector<std::vector<std::pair<std::size_t, double>>> t(dst_n);
    const double scale = static_cast<double>(src_n) / static_cast<double>(dst_n);
    for (std::size_t o = 0; o < dst_n; ++o) {
      const double a = static_cast<double>(o) * scale, b = a + scale;
      for (auto s = static_cast<std::size_t>(std::floor(a)); s < src_n && static_cast<double>(s) < b; ++s) {
        const double w = std::min(b, static_cast<double>(s + 1)) - std::max(a, static_cast<double>(s));
        if (w > 0) t[o].emplace_back(s, w / scale);
      }
    }
    return t;
  };
  const auto ty = table(H, out_h), tx = table(W, out_w);
  Tensor out({C, out_h, out_w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (auto [sy, wy] : ty[oy])
          for (auto [sx, wx] : tx[ox]) acc += wy * wx * img[(c * H + sy) * W + sx];
        out[(c * out_h + oy) * out_w + ox] = static_cast<float>(acc);
      }
  return out;
}

}  // namespace hitl
