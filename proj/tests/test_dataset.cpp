#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crackgen/augment.hpp"
#include "crackgen/dataset.hpp"
#include "crackgen/image_io.hpp"
#include "crackgen/toy_data.hpp"

#include <filesystem>
#include <fstream>
#include <set>

using namespace crackgen;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("crackgen_test_dataset_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Mask mask_from(Index h, Index w, std::initializer_list<std::pair<int, int>> yx) {
  Mask m = Mask::Zero(h, w);
  for (auto [y, x] : yx) m(y, x) = 1;
  return m;
}

AnnotatedDataset golden_fixture() {
  AnnotatedDataset ds;
  ds.images.push_back({1, "a.png", 4, 3, {}});
  ds.images.push_back({7, "b.png", 2, 2, {}});
  auto ann = [&](int id, int image, int cat, Mask m) {
    ds.annotations.push_back({id, image, cat, m, tight_bbox(m)});
  };
  ann(10, 1, 2, mask_from(3, 4, {{0, 1}, {1, 1}, {2, 1}}));
  ann(11, 1, 1, mask_from(3, 4, {{2, 2}, {2, 3}}));
  ann(12, 7, 5, mask_from(2, 2, {{0, 0}, {1, 1}}));
  return ds;
}

ToyDatasetConfig small_toy(int n_def, int n_free, std::uint64_t seed) {
  ToyDatasetConfig cfg;
  cfg.image_size = 32;
  cfg.n_defective = n_def;
  cfg.n_defect_free = n_free;
  cfg.max_cracks = 2;
  cfg.seed = seed;
  return cfg;
}

double l2(const Image& a, const Image& b) { return (a.data - b.data).cast<double>().norm(); }

}  // namespace

TEST_CASE("coco: empty dataset writes three empty arrays") {
  const fs::path dir = scratch("empty");
  AnnotatedDataset ds;
  ds.categories.clear();
  save_coco(ds, dir / "a.json");
  std::ifstream f(dir / "a.json");
  const Json j = Json::parse(f);
  CHECK(j.at("images").empty());
  CHECK(j.at("annotations").empty());
  CHECK(j.at("categories").empty());
  CHECK(load_coco(dir / "a.json") == ds);
}

TEST_CASE("coco: hand-built fixture matches the golden file field by field") {
  std::ifstream f(fs::path(CRACKGEN_TEST_DATA) / "golden_coco.json");
  const Json golden = Json::parse(f);
  const Json mine = to_coco_json(golden_fixture());
  REQUIRE(mine.at("annotations").size() == 3);
  for (const char* key : {"images", "annotations", "categories"}) {
    REQUIRE(mine.at(key).size() == golden.at(key).size());
    for (size_t i = 0; i < golden.at(key).size(); ++i) CHECK(mine.at(key)[i] == golden.at(key)[i]);
  }
  CHECK(mine == golden);
  CHECK(from_coco_json(golden) == golden_fixture());
}

TEST_CASE("coco: rle and polygon decoding") {
  const Mask m = mask_from(3, 4, {{0, 0}, {2, 3}, {1, 2}});
  CHECK(decode_rle(encode_rle(m), 3, 4) == m);
  CHECK(encode_rle(Mask::Zero(2, 2)) == std::vector<int>{4});
  CHECK_THROWS(decode_rle({3, 3}, 2, 2));
  // Axis-aligned square covering pixel centres x, y in {1, 2}.
  const Mask sq = rasterize_polygon({1, 1, 3, 1, 3, 3, 1, 3}, 4, 4);
  CHECK(mask_area(sq) == 4);
  CHECK(sq(1, 1) == 1);
  CHECK(sq(2, 2) == 1);
  CHECK(sq(0, 0) == 0);

  Json j = to_coco_json(golden_fixture());
  j["annotations"][0]["segmentation"] = Json::array({Json::array({1, 0, 2, 0, 2, 3, 1, 3})});
  const AnnotatedDataset ds = from_coco_json(j);
  CHECK(ds.annotations[0].mask == golden_fixture().annotations[0].mask);
}

TEST_CASE("coco: validation aggregates errors with ids") {
  Json j = to_coco_json(golden_fixture());
  j["annotations"][0]["image_id"] = 99;
  j["annotations"][1]["id"] = 12;
  j["annotations"][2]["segmentation"]["size"] = Json::array({5, 5});
  j["annotations"][2]["segmentation"]["counts"] = Json::array({0, 1, 24});
  try {
    from_coco_json(j);
    FAIL("expected a validation error");
  } catch (const DatasetValidationError& e) {
    std::string all;
    for (const auto& i : e.issues()) all += i + "\n";
    CHECK(all.find("annotation 10: dangling image_id 99") != std::string::npos);
    CHECK(all.find("annotation 12: duplicate id") != std::string::npos);
    CHECK(all.find("mask out of bounds") != std::string::npos);
    CHECK(e.issues().size() >= 3);
  }
  Json bad_bbox = to_coco_json(golden_fixture());
  bad_bbox["annotations"][1]["bbox"] = Json::array({0, 0, 1, 1});
  CHECK_THROWS_AS(from_coco_json(bad_bbox), DatasetValidationError);
}

TEST_CASE("coco: toy dataset round trip through the directory layout") {
  const auto toy = generate_toy_dataset(small_toy(6, 3, 5));
  const fs::path dir = scratch("roundtrip");
  save_dataset(toy.defective, dir);
  CHECK(fs::exists(dir / "annotations.json"));
  CHECK(fs::exists(dir / "masks"));
  const AnnotatedDataset back = load_dataset(dir);
  CHECK(back == toy.defective);
  for (size_t i = 0; i < back.images.size(); ++i) CHECK(back.images[i].pixels == toy.defective.images[i].pixels);
  CHECK(shared_image_ids(toy.defective, toy.defect_free).empty());
}

TEST_CASE("toy: determinism, empty defective set and crack contrast audit") {
  const auto cfg = small_toy(20, 4, 11);
  const auto a = generate_toy_dataset(cfg);
  const auto b = generate_toy_dataset(cfg);
  CHECK(to_coco_json(a.defective).dump() == to_coco_json(b.defective).dump());
  for (size_t i = 0; i < a.defective.images.size(); ++i) CHECK(a.defective.images[i].pixels == b.defective.images[i].pixels);
  for (size_t i = 0; i < a.defect_free.images.size(); ++i) CHECK(a.defect_free.images[i].pixels == b.defect_free.images[i].pixels);

  auto none = cfg;
  none.n_defective = 0;
  const auto c = generate_toy_dataset(none);
  CHECK(c.defective.annotations.empty());
  CHECK(c.defect_free.images.size() == 4);

  validate(a.defective);
  std::set<int> classes;
  int audited = 0;
  for (const auto& im : a.defective.images) {
    const Matrix<double> gray = grayscale(im.pixels).cast<double>();
    Mask all = Mask::Zero(im.height, im.width);
    for (const auto* ann : a.defective.annotations_for(im.id)) {
      all = all.cwiseMax(ann->mask);
      classes.insert(ann->category_id);
    }
    for (Index y = 0; y < im.height; ++y)
      for (Index x = 0; x < im.width; ++x) {
        if (!all(y, x)) continue;
        // Median of the non-crack pixels in the 5x5 neighbourhood (grown if empty).
        std::vector<double> v;
        for (int r = 2; v.empty(); ++r)
          for (Index yy = std::max<Index>(0, y - r); yy <= std::min<Index>(im.height - 1, y + r); ++yy)
            for (Index xx = std::max<Index>(0, x - r); xx <= std::min<Index>(im.width - 1, x + r); ++xx)
              if (!all(yy, xx)) v.push_back(gray(yy, xx));
        std::sort(v.begin(), v.end());
        const double med = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
        CHECK(med - gray(y, x) >= cfg.contrast - 1e-6);
        ++audited;
      }
  }
  CHECK(audited > 0);
  CHECK(classes.size() >= 4);
}

TEST_CASE("toy: class geometry follows the class definitions") {
  ToyDatasetConfig cfg;
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = toy_crack_paths(1, cfg, rng)[0];
    const auto v = toy_crack_paths(2, cfg, rng)[0];
    const Eigen::Vector2d dh = h.back() - h.front(), dv = v.back() - v.front();
    CHECK(std::abs(dh.y()) < std::abs(dh.x()) * 0.25);
    CHECK(std::abs(dv.x()) < std::abs(dv.y()) * 0.25);
    CHECK(toy_crack_paths(5, cfg, rng).size() >= 2);
  }
  CHECK_THROWS(toy_crack_paths(6, cfg, rng));
  auto bad = cfg;
  bad.image_size = 8;
  CHECK_THROWS(generate_toy_dataset(bad));
}

TEST_CASE("preprocess: identity, saturation and exact area means") {
  Image img(3, 4, 4);
  img.data = (Matrix<float>::Random(3, 16).array() * 0.5f + 0.5f).matrix();
  CHECK(preprocess(img, 4) == img);

  Image8 white(3, 5, 7);
  white.data.setConstant(255);
  const Image one = preprocess(white, 3);
  CHECK((one.data.array() == 1.0f).all());

  // 2x2 blocks of a 4x4 pattern -> block means.
  Image8 pat(1, 4, 4);
  const int v[4][4] = {{0, 255, 10, 20}, {255, 0, 30, 40}, {100, 100, 0, 0}, {100, 100, 0, 255}};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) pat(0, y, x) = static_cast<std::uint8_t>(v[y][x]);
  const Image m = preprocess(pat, 2);
  CHECK(m(0, 0, 0) == doctest::Approx(510.0 / 4 / 255).epsilon(1e-6));
  CHECK(m(0, 0, 1) == doctest::Approx(100.0 / 4 / 255).epsilon(1e-6));
  CHECK(m(0, 1, 0) == doctest::Approx(400.0 / 4 / 255).epsilon(1e-6));
  CHECK(m(0, 1, 1) == doctest::Approx(255.0 / 4 / 255).epsilon(1e-6));
  CHECK_THROWS_AS(preprocess(Image8(3, 0, 0), 4), ShapeError);
}

TEST_CASE("png: lossless round trip") {
  const fs::path dir = scratch("png");
  Image8 img(3, 5, 6);
  for (Index i = 0; i < img.data.size(); ++i) img.data(i) = static_cast<std::uint8_t>((i * 37) % 256);
  write_png(img, dir / "x.png");
  CHECK(read_png(dir / "x.png") == img);
  Mask m = mask_from(4, 3, {{1, 2}, {3, 0}});
  write_mask_png(m, dir / "m.png");
  CHECK(read_mask_png(dir / "m.png") == m);
}

TEST_CASE("augment: identity, quarter turn, distinct variants") {
  const auto toy = generate_toy_dataset(small_toy(3, 0, 2));
  const auto& im = toy.defective.images[0];
  const auto masks = toy.defective.regions(im.id);

  const AugmentedSample id = apply_augment(im.pixels, masks, AugmentParams{});
  CHECK(id.image == im.pixels);
  for (size_t i = 0; i < masks.size(); ++i) CHECK(id.masks[i] == masks[i]);

  AugmentParams rot;
  rot.quarter_turns = 1;
  const AugmentedSample r = apply_augment(im.pixels, masks, rot);
  for (size_t i = 0; i < masks.size(); ++i) CHECK(mask_area(r.masks[i].bitmap) == mask_area(masks[i].bitmap));
  // Counter-clockwise: top-right corner moves to top-left.
  CHECK(r.image(0, 0, 0) == im.pixels(0, 0, im.width - 1));

  const AugmentResult res = augment(im.pixels, masks, 99);
  REQUIRE(res.variants.size() + res.warnings.size() == 10);
  CHECK(res.variants.size() == 10);
  for (size_t a = 0; a < res.variants.size(); ++a)
    for (size_t b = a + 1; b < res.variants.size(); ++b) CHECK(l2(res.variants[a].image, res.variants[b].image) > 0);
  const AugmentResult again = augment(im.pixels, masks, 99);
  CHECK(again.variants[3].image == res.variants[3].image);
}

TEST_CASE("augment: masks move exactly like an image that equals them") {
  const auto toy = generate_toy_dataset(small_toy(8, 0, 4));
  Rng rng(8);
  AugmentConfig cfg;
  for (const auto& im : toy.defective.images) {
    const auto masks = toy.defective.regions(im.id);
    AugmentParams p = sample_augment_params(cfg, im.height, im.width, rng);
    p.contrast = 1.0;
    p.noise_sigma = 0.0;
    for (const auto& m : masks) {
      Image delta(3, im.height, im.width);
      for (Index y = 0; y < im.height; ++y)
        for (Index x = 0; x < im.width; ++x)
          for (int c = 0; c < 3; ++c) delta(c, y, x) = m.bitmap(y, x) ? 1.f : 0.f;
      const AugmentedSample out = apply_augment(delta, {m}, p);
      for (Index y = 0; y < out.image.height; ++y)
        for (Index x = 0; x < out.image.width; ++x) CHECK((out.image(0, y, x) == 1.f) == (out.masks[0].bitmap(y, x) == 1));
    }
  }
}

TEST_CASE("augment: draws that erase a mask are retried, then skipped with a warning") {
  Image img(3, 64, 64);
  img.data.setConstant(0.5f);
  const std::vector<MaskRegion> masks = {{mask_from(64, 64, {{0, 0}}), 1}};
  AugmentConfig cfg;
  cfg.quarter_turns = false;
  cfg.max_angle_deg = 0;
  cfg.max_shift = 0;
  cfg.max_zoom = 3.0;
  cfg.max_retries = 0;
  const AugmentResult res = augment(img, masks, 5, cfg);
  CHECK(res.variants.size() + res.warnings.size() == 10);
  CHECK(!res.warnings.empty());
  for (const auto& v : res.variants) CHECK(mask_area(v.masks[0].bitmap) > 0);
}

TEST_CASE("sadf: exact pool entries at zero perturbation, determinism, area audit, strategies") {
  const auto toy = generate_toy_dataset(small_toy(12, 5, 21));
  const auto pool = mask_pool(toy.defective);
  REQUIRE(!pool.empty());

  SadfConfig exact;
  exact.perturbation = 0;
  exact.masks_per_image = 2;
  for (const auto& p : build_sadf(toy.defect_free, pool, exact, 3))
    for (const auto& m : p.masks) {
      bool found = false;
      for (const auto& e : pool) found = found || e.region == m;
      CHECK(found);
    }

  const auto a = build_sadf(toy.defect_free, pool, SadfConfig{}, 4);
  const auto b = build_sadf(toy.defect_free, pool, SadfConfig{}, 4);
  REQUIRE(a.size() == toy.defect_free.images.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].masks == b[i].masks);
    CHECK(a[i].provenance == b[i].provenance);
    CHECK(a[i].provenance.find("pool[") != std::string::npos);
  }

  Rng rng(17);
  int within = 0;
  for (int i = 0; i < 100; ++i) {
    const auto& src = pool[static_cast<size_t>(i) % pool.size()].region.bitmap;
    const double ratio = static_cast<double>(mask_area(perturb_mask(src, 1.0, rng))) / static_cast<double>(mask_area(src));
    within += (ratio >= 0.8 && ratio <= 1.2) ? 1 : 0;
  }
  CHECK(within == 100);

  SadfConfig gen;
  gen.strategy = SadfStrategy::generated;
  CHECK_THROWS_AS(build_sadf(toy.defect_free, pool, gen, 0), OutOfScopeError);
  CHECK_THROWS(build_sadf(toy.defect_free, {}, SadfConfig{}, 0));

  const fs::path dir = scratch("external");
  write_mask_png(pool[0].region.bitmap, dir / "m0.png");
  write_mask_png(Mask::Ones(5, 5), dir / "small.png");
  std::ofstream(dir / "masks.json") << R"([{"file": "m0.png", "class_id": 3}])";
  SadfConfig ext;
  ext.strategy = SadfStrategy::external;
  const auto ext_pool = load_external_masks(dir);
  for (const auto& p : build_sadf(toy.defect_free, ext_pool, ext, 0)) CHECK(p.masks[0].bitmap == pool[0].region.bitmap);
  std::ofstream(dir / "masks.json") << R"([{"file": "small.png", "class_id": 3}])";
  CHECK_THROWS(build_sadf(toy.defect_free, load_external_masks(dir), ext, 0));
}
