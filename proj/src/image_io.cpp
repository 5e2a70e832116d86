#include "crackgen/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace crackgen {

Image8 to_image8(const Image& img) {
  Image8 out(img.channels(), img.height, img.width);
  out.data = (img.data.array().max(0.f).min(1.f) * 255.f).round().cast<std::uint8_t>().matrix();
  return out;
}

Image from_image8(const Image8& img) {
  Image out(img.channels(), img.height, img.width);
  out.data = img.data.cast<float>() / 255.f;
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

void write_raw(const std::filesystem::path& path, int width, int height, int channels, const std::uint8_t* bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("png: cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png: write failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(bytes + static_cast<size_t>(y) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_raw(const std::filesystem::path& path, int& width, int& height, int& channels) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("png: cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: decode failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_expand(png);
  png_set_packing(png);
  const int type = png_get_color_type(png, info);
  if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  channels = png_get_channels(png, info);
  bytes.resize(static_cast<size_t>(width) * height * channels);
  for (int y = 0; y < height; ++y) png_read_row(png, bytes.data() + static_cast<size_t>(y) * width * channels, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void write_png(const Image8& img, const std::filesystem::path& path) {
  if (img.channels() != 1 && img.channels() != 3)
    throw ShapeError("png: need 1 or 3 channels, got " + shape_string(img));
  // Column-major channels x pixels is interleaved HWC in memory.
  write_raw(path, static_cast<int>(img.width), static_cast<int>(img.height), static_cast<int>(img.channels()),
            img.data.data());
}

Image8 read_png(const std::filesystem::path& path) {
  int w = 0, h = 0, c = 0;
  auto bytes = read_raw(path, w, h, c);
  Image8 out(c, h, w);
  std::copy(bytes.begin(), bytes.end(), out.data.data());
  return out;
}

void write_mask_png(const Mask& mask, const std::filesystem::path& path) {
  Image8 img(1, mask.rows(), mask.cols());
  for (Index y = 0; y < mask.rows(); ++y)
    for (Index x = 0; x < mask.cols(); ++x) img(0, y, x) = mask(y, x);
  write_png(img, path);
}

Mask read_mask_png(const std::filesystem::path& path) {
  const Image8 img = read_png(path);
  if (img.channels() != 1) throw ShapeError("mask png must be grayscale: " + path.string());
  Mask m(img.height, img.width);
  for (Index y = 0; y < img.height; ++y)
    for (Index x = 0; x < img.width; ++x) m(y, x) = img(0, y, x);
  return m;
}

namespace {

// Row i of the result holds the coverage of source cells by target cell i.
Matrix<double> area_weights(Index src, Index dst) {
  Matrix<double> w = Matrix<double>::Zero(dst, src);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (Index i = 0; i < dst; ++i) {
    const double lo = i * scale, hi = (i + 1) * scale;
    for (Index s = static_cast<Index>(std::floor(lo)); s < src && s < hi; ++s) {
      const double overlap = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
      if (overlap > 0) w(i, s) = overlap / scale;
    }
  }
  return w;
}

}  // namespace

Image resize_area(const Image& img, Index height, Index width) {
  if (img.empty() || img.height == 0 || img.width == 0) throw ShapeError("resize: empty image");
  if (height < 1 || width < 1) throw ShapeError("resize: zero target size");
  if (height == img.height && width == img.width) return img;
  const Matrix<double> wy = area_weights(img.height, height), wx = area_weights(img.width, width);
  Image out(img.channels(), height, width);
  for (Index c = 0; c < img.channels(); ++c) {
    Matrix<double> plane(img.height, img.width);
    for (Index y = 0; y < img.height; ++y)
      for (Index x = 0; x < img.width; ++x) plane(y, x) = img(c, y, x);
    const Matrix<double> r = wy * plane * wx.transpose();
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x) out(c, y, x) = static_cast<float>(r(y, x));
  }
  return out;
}

Mask resize_nearest(const Mask& mask, Index height, Index width) {
  if (height == mask.rows() && width == mask.cols()) return mask;
  Mask out(height, width);
  for (Index y = 0; y < height; ++y) {
    const Index sy = std::min(mask.rows() - 1, static_cast<Index>((y + 0.5) * mask.rows() / height));
    for (Index x = 0; x < width; ++x) {
      const Index sx = std::min(mask.cols() - 1, static_cast<Index>((x + 0.5) * mask.cols() / width));
      out(y, x) = mask(sy, sx);
    }
  }
  return out;
}

Image preprocess(const Image8& img, Index target) {
  if (img.height == 0 || img.width == 0 || img.channels() == 0) throw ShapeError("preprocess: zero-dimension image");
  return resize_area(from_image8(img), target, target);
}

Image preprocess(const Image& img, Index target) {
  if (img.height == 0 || img.width == 0 || img.channels() == 0) throw ShapeError("preprocess: zero-dimension image");
  Image out = resize_area(img, target, target);
  out.data = out.data.array().max(0.f).min(1.f).matrix();
  return out;
}

}  // namespace crackgen
