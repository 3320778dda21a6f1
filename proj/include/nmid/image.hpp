#pragma once

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nmid/common.hpp"

namespace nmid {

// Decoded pixels in [0,1], row-major, channel-interleaved.
class RasterImage {
 public:
  RasterImage() = default;

  RasterImage(int height, int width, int channels)
      : height_(height), width_(width), channels_(channels),
        pixels_(static_cast<std::size_t>(height) * width * channels, 0.0) {
    check_dims();
  }

  RasterImage(int height, int width, int channels, std::vector<double> pixels)
      : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
    check_dims();
    if (pixels_.size() != static_cast<std::size_t>(height_) * width_ * channels_) {
      throw ShapeError(cat("pixel buffer of ", pixels_.size(), " values does not match ", height_, "x", width_, "x",
                           channels_));
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return pixels_.size(); }
  bool empty() const { return pixels_.empty(); }

  double& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

  std::span<const double> pixels() const { return pixels_; }
  std::span<double> pixels() { return pixels_; }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  void check_dims() const {
    if (height_ <= 0 || width_ <= 0) throw ShapeError(cat("image dims must be positive, got ", height_, "x", width_));
    if (channels_ != 1 && channels_ != 3) throw ShapeError(cat("channels must be 1 or 3, got ", channels_));
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> pixels_;
};

// Bilinear sample of the source window [x0, x0+cw) x [y0, y0+ch) onto an
// out_h x out_w grid using pixel-center alignment. A full window with equal
// dims reproduces the source exactly.
inline RasterImage resample(const RasterImage& src, double y0, double x0, double ch, double cw, int out_h,
                            int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resample target dims must be positive");
  RasterImage dst(out_h, out_w, src.channels());
  const double sy = ch / out_h;
  const double sx = cw / out_w;
  const int H = src.height();
  const int W = src.width();
  for (int y = 0; y < out_h; ++y) {
    double fy = y0 + (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
    const int iy0 = static_cast<int>(std::floor(fy));
    const int iy1 = std::min(iy0 + 1, H - 1);
    const double wy = fy - iy0;
    for (int x = 0; x < out_w; ++x) {
      double fx = x0 + (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
      const int ix0 = static_cast<int>(std::floor(fx));
      const int ix1 = std::min(ix0 + 1, W - 1);
      const double wx = fx - ix0;
      for (int c = 0; c < src.channels(); ++c) {
        const double top = src.at(iy0, ix0, c) * (1.0 - wx) + src.at(iy0, ix1, c) * wx;
        const double bot = src.at(iy1, ix0, c) * (1.0 - wx) + src.at(iy1, ix1, c) * wx;
        dst.at(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

inline RasterImage resize_bilinear(const RasterImage& src, int out_h, int out_w) {
  if (src.height() == out_h && src.width() == out_w) return src;
  return resample(src, 0.0, 0.0, src.height(), src.width(), out_h, out_w);
}

inline RasterImage to_channels(const RasterImage& src, int channels) {
  if (src.channels() == channels) return src;
  RasterImage dst(src.height(), src.width(), channels);
  for (int y = 0; y < src.height(); ++y) {
    for (int x = 0; x < src.width(); ++x) {
      if (channels == 3) {
        for (int c = 0; c < 3; ++c) dst.at(y, x, c) = src.at(y, x, 0);
      } else {
        // ITU-R BT.601 luma
        dst.at(y, x, 0) = 0.299 * src.at(y, x, 0) + 0.587 * src.at(y, x, 1) + 0.114 * src.at(y, x, 2);
      }
    }
  }
  return dst;
}

// ---------------------------------------------------------------------------
// Codecs
// ---------------------------------------------------------------------------

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string encode_png(const RasterImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> raw(img.size());
  auto px = img.pixels();
  std::transform(px.begin(), px.end(), raw.begin(), quantize8);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, raw.data(), 0, nullptr)) {
    throw IoError(cat("png encode failed: ", image.message));
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, raw.data(), 0, nullptr)) {
    throw IoError(cat("png encode failed: ", image.message));
  }
  out.resize(size);
  return out;
}

inline RasterImage decode_png(std::string_view bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError(cat("png decode failed: ", image.message));
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = color ? 3 : 1;
  std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raw.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(cat("png decode failed: ", image.message));
  }
  std::vector<double> px(raw.size());
  std::transform(raw.begin(), raw.end(), px.begin(), [](std::uint8_t v) { return v / 255.0; });
  return RasterImage(static_cast<int>(image.height), static_cast<int>(image.width), channels, std::move(px));
}

namespace detail {
struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}
}  // namespace detail

inline RasterImage decode_jpeg(std::string_view bytes) {
  jpeg_decompress_struct cinfo{};
  detail::JpegErrorMgr err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  std::vector<std::uint8_t> raw;
  int width = 0, height = 0, channels = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(cat("jpeg decode failed: ", err.message));
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  width = static_cast<int>(cinfo.output_width);
  height = static_cast<int>(cinfo.output_height);
  channels = cinfo.output_components;
  raw.resize(static_cast<std::size_t>(width) * height * channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = raw.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::vector<double> px(raw.size());
  std::transform(raw.begin(), raw.end(), px.begin(), [](std::uint8_t v) { return v / 255.0; });
  return RasterImage(height, width, channels, std::move(px));
}

inline bool looks_like_png(std::string_view b) { return b.size() >= 8 && b.substr(0, 8) == "\x89PNG\r\n\x1a\n"; }
inline bool looks_like_jpeg(std::string_view b) { return b.size() >= 3 && b.substr(0, 3) == "\xFF\xD8\xFF"; }

inline RasterImage decode_image(std::string_view bytes) {
  if (looks_like_png(bytes)) return decode_png(bytes);
  if (looks_like_jpeg(bytes)) return decode_jpeg(bytes);
  throw FormatError("unrecognized image format (expected PNG or JPEG)");
}

inline std::string mime_for_bytes(std::string_view bytes) {
  if (looks_like_png(bytes)) return "image/png";
  if (looks_like_jpeg(bytes)) return "image/jpeg";
  return "application/octet-stream";
}

inline RasterImage read_image(const fs::path& path) {
  try {
    return decode_image(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(cat(path.string(), ": ", e.what()));
  }
}

inline void write_png(const fs::path& path, const RasterImage& img) { write_file(path, encode_png(img)); }

}  // namespace nmid
