#include "crackgen/dataset.hpp"

#include "crackgen/image_io.hpp"
#include "crackgen/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

namespace crackgen {

BBox tight_bbox(const Mask& mask) {
  int x0 = INT32_MAX, y0 = INT32_MAX, x1 = -1, y1 = -1;
  for (Index x = 0; x < mask.cols(); ++x)
    for (Index y = 0; y < mask.rows(); ++y)
      if (mask(y, x)) {
        x0 = std::min<int>(x0, static_cast<int>(x));
        x1 = std::max<int>(x1, static_cast<int>(x));
        y0 = std::min<int>(y0, static_cast<int>(y));
        y1 = std::max<int>(y1, static_cast<int>(y));
      }
  if (x1 < 0) return {};
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

Index mask_area(const Mask& mask) { return (mask.array() != 0).count(); }

std::vector<Category> crack_categories() {
  std::vector<Category> out;
  const auto& names = crack_class_names();
  for (size_t i = 0; i < names.size(); ++i) out.push_back({static_cast<int>(i) + 1, names[i]});
  return out;
}

const ImageRecord* AnnotatedDataset::find_image(int id) const {
  for (const auto& im : images)
    if (im.id == id) return &im;
  return nullptr;
}

std::vector<const Annotation*> AnnotatedDataset::annotations_for(int image_id) const {
  std::vector<const Annotation*> out;
  for (const auto& a : annotations)
    if (a.image_id == image_id) out.push_back(&a);
  return out;
}

int AnnotatedDataset::max_image_id() const {
  int m = 0;
  for (const auto& im : images) m = std::max(m, im.id);
  return m;
}

int AnnotatedDataset::max_annotation_id() const {
  int m = 0;
  for (const auto& a : annotations) m = std::max(m, a.id);
  return m;
}

int AnnotatedDataset::add_image(Image pixels, const std::string& file_name,
                                const std::vector<MaskRegion>& masks, std::optional<int> image_id) {
  ImageRecord rec;
  rec.id = image_id ? *image_id : max_image_id() + 1;
  rec.file_name = file_name.empty() ? "img_" + std::to_string(rec.id) + ".png" : file_name;
  rec.height = static_cast<int>(pixels.height);
  rec.width = static_cast<int>(pixels.width);
  rec.pixels = std::move(pixels);
  images.push_back(std::move(rec));
  int next = max_annotation_id() + 1;
  for (const auto& r : masks) {
    if (mask_area(r.bitmap) == 0) continue;
    Annotation a;
    a.id = next++;
    a.image_id = images.back().id;
    a.category_id = r.class_id;
    a.mask = r.bitmap;
    a.bbox = tight_bbox(r.bitmap);
    annotations.push_back(std::move(a));
  }
  return images.back().id;
}

std::vector<MaskRegion> AnnotatedDataset::regions(int image_id) const {
  std::vector<MaskRegion> out;
  for (const auto& a : annotations)
    if (a.image_id == image_id) out.push_back({a.mask, a.category_id});
  return out;
}

Mask AnnotatedDataset::label_map(int image_id) const {
  const ImageRecord* im = find_image(image_id);
  if (!im) throw std::out_of_range("dataset: no image " + std::to_string(image_id));
  Mask out = Mask::Zero(im->height, im->width);
  for (const auto& a : annotations)
    if (a.image_id == image_id)
      for (Index y = 0; y < out.rows(); ++y)
        for (Index x = 0; x < out.cols(); ++x)
          if (a.mask(y, x)) out(y, x) = static_cast<std::uint8_t>(a.category_id);
  return out;
}

namespace {

std::string join_issues(const std::vector<std::string>& issues) {
  std::string s = "dataset validation failed (" + std::to_string(issues.size()) + " issue(s))";
  for (const auto& i : issues) s += "\n  " + i;
  return s;
}

}  // namespace

DatasetValidationError::DatasetValidationError(std::vector<std::string> issues)
    : std::runtime_error(join_issues(issues)), issues_(std::move(issues)) {}

std::vector<std::string> validation_issues(const AnnotatedDataset& ds) {
  std::vector<std::string> issues;
  std::map<int, const ImageRecord*> by_id;
  for (const auto& im : ds.images) {
    if (!by_id.emplace(im.id, &im).second) issues.push_back("image " + std::to_string(im.id) + ": duplicate id");
    if (im.width <= 0 || im.height <= 0) issues.push_back("image " + std::to_string(im.id) + ": empty size");
    if (!im.pixels.empty() && (im.pixels.height != im.height || im.pixels.width != im.width))
      issues.push_back("image " + std::to_string(im.id) + ": pixel payload size differs from record");
  }
  std::set<int> cats, ann_ids;
  for (const auto& c : ds.categories)
    if (!cats.insert(c.id).second) issues.push_back("category " + std::to_string(c.id) + ": duplicate id");
  for (const auto& a : ds.annotations) {
    const std::string tag = "annotation " + std::to_string(a.id);
    if (!ann_ids.insert(a.id).second) issues.push_back(tag + ": duplicate id");
    if (!cats.count(a.category_id)) issues.push_back(tag + ": unknown category " + std::to_string(a.category_id));
    auto it = by_id.find(a.image_id);
    if (it == by_id.end()) {
      issues.push_back(tag + ": dangling image_id " + std::to_string(a.image_id));
      continue;
    }
    if (a.mask.rows() != it->second->height || a.mask.cols() != it->second->width) {
      issues.push_back(tag + ": mask out of bounds of image " + std::to_string(a.image_id));
      continue;
    }
    if (mask_area(a.mask) == 0) issues.push_back(tag + ": empty mask");
    if (!(a.bbox == tight_bbox(a.mask))) issues.push_back(tag + ": bbox is not the tight bound of the mask");
  }
  return issues;
}

void validate(const AnnotatedDataset& ds) {
  auto issues = validation_issues(ds);
  if (!issues.empty()) throw DatasetValidationError(std::move(issues));
}

std::vector<int> encode_rle(const Mask& mask) {
  std::vector<int> counts;
  std::uint8_t current = 0;
  int run = 0;
  for (Index x = 0; x < mask.cols(); ++x)
    for (Index y = 0; y < mask.rows(); ++y) {
      const std::uint8_t v = mask(y, x) ? 1 : 0;
      if (v != current) {
        counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  counts.push_back(run);
  return counts;
}

Mask decode_rle(const std::vector<int>& counts, Index height, Index width) {
  Mask m = Mask::Zero(height, width);
  Index pos = 0;
  std::uint8_t v = 0;
  for (int c : counts) {
    if (c < 0 || pos + c > height * width) throw std::invalid_argument("rle: counts exceed mask size");
    for (int k = 0; k < c; ++k, ++pos) m(pos % height, pos / height) = v;
    v ^= 1;
  }
  if (pos != height * width) throw std::invalid_argument("rle: counts do not cover the mask");
  return m;
}

Mask rasterize_polygon(const std::vector<double>& xy, Index height, Index width) {
  if (xy.size() < 6 || xy.size() % 2) throw std::invalid_argument("polygon: need >= 3 vertices");
  Mask m = Mask::Zero(height, width);
  const size_t n = xy.size() / 2;
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      for (size_t i = 0, j = n - 1; i < n; j = i++) {
        const double xi = xy[2 * i], yi = xy[2 * i + 1], xj = xy[2 * j], yj = xy[2 * j + 1];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
      }
      m(y, x) = inside ? 1 : 0;
    }
  return m;
}

Json to_coco_json(const AnnotatedDataset& ds) {
  Json j;
  j["images"] = Json::array();
  for (const auto& im : ds.images)
    j["images"].push_back({{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}});
  j["annotations"] = Json::array();
  for (const auto& a : ds.annotations) {
    Json seg{{"size", {a.mask.rows(), a.mask.cols()}}, {"counts", encode_rle(a.mask)}};
    j["annotations"].push_back({{"id", a.id},
                                {"image_id", a.image_id},
                                {"category_id", a.category_id},
                                {"segmentation", std::move(seg)},
                                {"area", mask_area(a.mask)},
                                {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}},
                                {"iscrowd", 0}});
  }
  j["categories"] = Json::array();
  for (const auto& c : ds.categories) j["categories"].push_back({{"id", c.id}, {"name", c.name}});
  return j;
}

AnnotatedDataset from_coco_json(const Json& j) {
  AnnotatedDataset ds;
  std::vector<std::string> issues;
  for (const char* key : {"images", "annotations", "categories"})
    if (!j.contains(key) || !j.at(key).is_array()) issues.push_back(std::string("missing array '") + key + "'");
  if (!issues.empty()) throw DatasetValidationError(issues);

  ds.categories.clear();
  for (const auto& c : j.at("categories")) ds.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  std::map<int, std::pair<int, int>> sizes;
  for (const auto& im : j.at("images")) {
    ImageRecord r;
    r.id = im.at("id").get<int>();
    r.file_name = im.value("file_name", "");
    r.width = im.at("width").get<int>();
    r.height = im.at("height").get<int>();
    sizes.emplace(r.id, std::make_pair(r.height, r.width));
    ds.images.push_back(std::move(r));
  }
  for (const auto& aj : j.at("annotations")) {
    Annotation a;
    a.id = aj.at("id").get<int>();
    a.image_id = aj.at("image_id").get<int>();
    a.category_id = aj.at("category_id").get<int>();
    const std::string tag = "annotation " + std::to_string(a.id);
    const Json& seg = aj.at("segmentation");
    try {
      if (seg.is_object()) {
        const auto size = seg.at("size").get<std::vector<Index>>();
        if (size.size() != 2) throw std::invalid_argument("rle size must have two entries");
        a.mask = decode_rle(seg.at("counts").get<std::vector<int>>(), size[0], size[1]);
      } else {
        auto it = sizes.find(a.image_id);
        if (it == sizes.end()) {
          issues.push_back(tag + ": dangling image_id " + std::to_string(a.image_id));
          continue;
        }
        a.mask = Mask::Zero(it->second.first, it->second.second);
        for (const auto& poly : seg) {
          for (size_t k = 0; k + 1 < poly.size(); k += 2) {
            const double px = poly[k].get<double>(), py = poly[k + 1].get<double>();
            if (px < 0 || py < 0 || px > it->second.second || py > it->second.first)
              throw std::invalid_argument("polygon vertex outside the image");
          }
          a.mask = a.mask.cwiseMax(rasterize_polygon(poly.get<std::vector<double>>(), a.mask.rows(), a.mask.cols()));
        }
      }
    } catch (const std::exception& e) {
      issues.push_back(tag + ": bad segmentation (" + e.what() + ")");
      continue;
    }
    if (aj.contains("bbox")) {
      const auto b = aj.at("bbox").get<std::vector<double>>();
      if (b.size() != 4) {
        issues.push_back(tag + ": bbox must have four entries");
        continue;
      }
      a.bbox = {static_cast<int>(b[0]), static_cast<int>(b[1]), static_cast<int>(b[2]), static_cast<int>(b[3])};
      if (!seg.is_object() && !(a.bbox == tight_bbox(a.mask))) a.bbox = tight_bbox(a.mask);
    } else {
      a.bbox = tight_bbox(a.mask);
    }
    ds.annotations.push_back(std::move(a));
  }
  auto more = validation_issues(ds);
  issues.insert(issues.end(), more.begin(), more.end());
  if (!issues.empty()) throw DatasetValidationError(issues);
  return ds;
}

void save_coco(const AnnotatedDataset& ds, const std::filesystem::path& path) {
  validate(ds);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("coco: cannot write " + path.string());
  f << to_coco_json(ds).dump(1) << "\n";
}

AnnotatedDataset load_coco(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("coco: cannot read " + path.string());
  Json j;
  try {
    j = Json::parse(f);
  } catch (const Json::parse_error& e) {
    throw DatasetValidationError({"malformed JSON in " + path.string() + ": " + e.what()});
  }
  return from_coco_json(j);
}

void save_dataset(const AnnotatedDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const auto& im : ds.images) {
    if (!im.pixels.empty()) write_png(im.pixels, dir / "images" / im.file_name);
    write_mask_png(ds.label_map(im.id), dir / "masks" / (std::to_string(im.id) + ".png"));
  }
  save_coco(ds, dir / "annotations.json");
}

AnnotatedDataset load_dataset(const std::filesystem::path& dir) {
  AnnotatedDataset ds = load_coco(dir / "annotations.json");
  for (auto& im : ds.images) {
    const auto p = dir / "images" / im.file_name;
    if (std::filesystem::exists(p)) im.pixels = from_image8(read_png(p));
  }
  validate(ds);
  return ds;
}

std::vector<int> shared_image_ids(const AnnotatedDataset& a, const AnnotatedDataset& b) {
  std::set<int> ids;
  for (const auto& im : a.images) ids.insert(im.id);
  std::vector<int> out;
  for (const auto& im : b.images)
    if (ids.count(im.id)) out.push_back(im.id);
  return out;
}

}  // namespace crackgen
