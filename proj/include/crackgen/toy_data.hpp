#pragma once

#include "crackgen/dataset.hpp"
#include "crackgen/rng.hpp"

namespace crackgen {

/// Procedural stand-in for a real inspection dataset: textured panels
/// (louver stripes or ellipses) with dark crack polylines.
struct ToyDatasetConfig {
  int image_size = 64;
  int n_defective = 120;
  int n_defect_free = 60;
  double thickness_min = 1.0;  // pixels
  double thickness_max = 2.0;
  double length_min = 0.35;  // fraction of the image side
  double length_max = 0.8;
  double curvature_min = 0.18;  // sagitta / length for the curved class
  double curvature_max = 0.35;
  double contrast = 0.25;  // crack gray level below the local background median
  int max_cracks = 1;      // cracks per defective image, uniform in [1, max]
  std::uint64_t seed = 0;
  int first_defective_id = 1;
  int first_defect_free_id = 100001;

  void check() const;
};

struct ToyDataset {
  AnnotatedDataset defective;
  AnnotatedDataset defect_free;  // images only, no annotations
};

ToyDataset generate_toy_dataset(const ToyDatasetConfig& cfg);

/// Background texture alone (values are multiples of 1/255).
Image toy_background(int size, Rng& rng);

/// Generic texture corpus for pretraining the base model: saturated colours,
/// oriented gratings and blobs at random contrast. The panel domain is a
/// narrow corner of it.
std::vector<Image> generic_textures(int n, int size, std::uint64_t seed);

/// Crack polyline(s) for a class, in pixel coordinates.
std::vector<std::vector<Eigen::Vector2d>> toy_crack_paths(int class_id, const ToyDatasetConfig& cfg, Rng& rng);

/// Pixels whose centre lies within `radius` of a polyline.
Mask rasterize_paths(const std::vector<std::vector<Eigen::Vector2d>>& paths, double radius, Index height,
                     Index width);

/// Median gray level of the non-mask pixels in the (2r+1)^2 window around
/// (y, x); the window grows until it holds at least one background pixel.
double local_background_median(const Matrix<double>& gray, const Mask& mask, Index y, Index x, int r = 2);

}  // namespace crackgen
