#pragma once

#include "crackgen/checkpoint.hpp"
#include "crackgen/tensor.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crackgen {

/// Tight pixel bounds, COCO order (x, y, width, height). Empty mask -> all 0.
struct BBox {
  int x = 0, y = 0, w = 0, h = 0;
  int area() const { return w * h; }
  bool operator==(const BBox&) const = default;
};

BBox tight_bbox(const Mask& mask);

/// A class-labelled binary region.
struct MaskRegion {
  Mask bitmap;
  int class_id = 0;
  bool operator==(const MaskRegion& o) const {
    return class_id == o.class_id && bitmap.rows() == o.bitmap.rows() && bitmap.cols() == o.bitmap.cols() &&
           bitmap == o.bitmap;
  }
};
Index mask_area(const Mask& mask);

struct Category {
  int id = 0;
  std::string name;
  bool operator==(const Category&) const = default;
};

/// The five crack categories, ids 1..5.
std::vector<Category> crack_categories();

struct ImageRecord {
  int id = 0;
  std::string file_name;
  int width = 0, height = 0;
  Image pixels;  // empty when only the annotation file was loaded

  bool operator==(const ImageRecord& o) const {
    return id == o.id && file_name == o.file_name && width == o.width && height == o.height;
  }
};

struct Annotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  Mask mask;  // height x width of the image, 0/1
  BBox bbox;

  bool operator==(const Annotation& o) const {
    return id == o.id && image_id == o.image_id && category_id == o.category_id && bbox == o.bbox &&
           mask.rows() == o.mask.rows() && mask.cols() == o.mask.cols() && mask == o.mask;
  }
};

/// COCO-style instance dataset. Semantic equality ignores pixel payloads.
struct AnnotatedDataset {
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  std::vector<Category> categories = crack_categories();

  const ImageRecord* find_image(int id) const;
  std::vector<const Annotation*> annotations_for(int image_id) const;
  int max_image_id() const;
  int max_annotation_id() const;

  /// Appends an image and its instance masks with fresh ids.
  int add_image(Image pixels, const std::string& file_name, const std::vector<MaskRegion>& masks,
                std::optional<int> image_id = std::nullopt);

  /// Instance masks of one image in annotation order.
  std::vector<MaskRegion> regions(int image_id) const;

  /// Per-pixel class map (0 = background, later annotations win).
  Mask label_map(int image_id) const;

  bool operator==(const AnnotatedDataset&) const = default;
};

/// Aggregated validation failure; every issue names the offending ids.
class DatasetValidationError : public std::runtime_error {
 public:
  explicit DatasetValidationError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

std::vector<std::string> validation_issues(const AnnotatedDataset& ds);
void validate(const AnnotatedDataset& ds);  // throws DatasetValidationError

/// Uncompressed COCO RLE: column-major run lengths starting with a zero run.
std::vector<int> encode_rle(const Mask& mask);
Mask decode_rle(const std::vector<int>& counts, Index height, Index width);

/// Even-odd fill of a COCO polygon [x0, y0, x1, y1, ...] sampled at pixel
/// centres.
Mask rasterize_polygon(const std::vector<double>& xy, Index height, Index width);

Json to_coco_json(const AnnotatedDataset& ds);
/// Parses and validates; polygons are rasterised. Throws DatasetValidationError.
AnnotatedDataset from_coco_json(const Json& j);

void save_coco(const AnnotatedDataset& ds, const std::filesystem::path& path);
AnnotatedDataset load_coco(const std::filesystem::path& path);

/// Directory layout: images/, masks/ (per-image label maps), annotations.json.
void save_dataset(const AnnotatedDataset& ds, const std::filesystem::path& dir);
AnnotatedDataset load_dataset(const std::filesystem::path& dir);

/// Image ids shared by two datasets.
std::vector<int> shared_image_ids(const AnnotatedDataset& a, const AnnotatedDataset& b);

}  // namespace crackgen
