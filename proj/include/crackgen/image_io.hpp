#pragma once

#include "crackgen/tensor.hpp"

#include <filesystem>

namespace crackgen {

/// 8-bit image, same channel-major layout as Tensor.
using Image8 = Tensor<std::uint8_t>;

Image8 to_image8(const Image& img);   // clamps to [0,1] and rounds
Image from_image8(const Image8& img);  // divides by 255

/// Lossless PNG I/O. 1-channel images are written as grayscale, 3-channel as RGB.
void write_png(const Image8& img, const std::filesystem::path& path);
Image8 read_png(const std::filesystem::path& path);

inline void write_png(const Image& img, const std::filesystem::path& path) { write_png(to_image8(img), path); }

void write_mask_png(const Mask& mask, const std::filesystem::path& path);
Mask read_mask_png(const std::filesystem::path& path);

/// Box-filter resampling with fractional pixel coverage. Integer-factor
/// downscaling reduces to exact block means; equal sizes copy.
Image resize_area(const Image& img, Index height, Index width);

/// Nearest-neighbour resampling of a mask (pixel centres).
Mask resize_nearest(const Mask& mask, Index height, Index width);

/// Resizes to target x target and maps into [0,1].
Image preprocess(const Image8& img, Index target);
Image preprocess(const Image& img, Index target);

}  // namespace crackgen
