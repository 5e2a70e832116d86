#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crackgen/augment.hpp"
#include "crackgen/driver.hpp"
#include "crackgen/toy_data.hpp"

#include <filesystem>

using namespace crackgen;

namespace {

Image constant_image(Index h, Index w, float v) {
  Image img(3, h, w);
  img.data.setConstant(v);
  return img;
}

Index count_equal(const Image& img, const Rgb8& c) {
  Index n = 0;
  for (Index p = 0; p < img.pixels(); ++p)
    if (img.data(0, p) == c[0] / 255.f && img.data(1, p) == c[1] / 255.f && img.data(2, p) == c[2] / 255.f) ++n;
  return n;
}

struct ProbeSets {
  std::vector<SourceItem> defective, defect_free;
};

ProbeSets probe_sets(int n, std::uint64_t seed) {
  ToyDatasetConfig cfg;
  cfg.n_defective = n;
  cfg.n_defect_free = n;
  cfg.seed = seed;
  const auto toy = generate_toy_dataset(cfg);
  const auto pool = mask_pool(toy.defective);
  ProbeSets s;
  for (const auto& im : toy.defective.images) s.defective.push_back({im.pixels, toy.defective.regions(im.id)});
  SadfConfig sc;
  sc.perturbation = 0;
  for (const auto& p : build_sadf(toy.defect_free, pool, sc, seed + 1)) s.defect_free.push_back({p.image, p.masks});
  return s;
}

}  // namespace

TEST_CASE("topology: constant image is all background") {
  for (float v : {0.f, 0.3f, 1.f}) {
    const Mask t = extract_topology(constant_image(64, 64, v), DriverConfig{});
    CHECK((t.array() == 0).all());
  }
}

TEST_CASE("topology: checkerboard, bright squares foreground and dark background") {
  // 16 px squares at factor 8 are 2x2 cells after downscaling; the 7x7 window
  // then averages to mid-gray on every cell.
  const Index n = 128, sq = 16;
  Image img(3, n, n);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) img(c, y, x) = ((y / sq) + (x / sq)) % 2 == 0 ? 0.8f : 0.2f;
  const Mask t = extract_topology(img, DriverConfig{});
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      const bool bright = ((y / sq) + (x / sq)) % 2 == 0;
      CHECK(t(y, x) == (bright ? 255 : 0));
    }
}

TEST_CASE("topology: window inside one square of a coarse checkerboard") {
  DriverConfig cfg;
  cfg.downscale_factor = 2;
  cfg.threshold_window = 5;
  const Index n = 96, sq = 24;
  Image img(3, n, n);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      const bool bright = ((y / sq) + (x / sq)) % 2 == 0;
      for (int c = 0; c < 3; ++c) img(c, y, x) = bright ? 0.8f : 0.2f;
    }
  const Mask t = extract_topology(img, cfg);
  const Index margin = cfg.downscale_factor * (cfg.threshold_window / 2 + 1);
  Index checked = 0;
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      const Index ly = y % sq, lx = x % sq;
      // Away from square borders the window sees one level only: pixel == mean,
      // which is background. Near a border a bright pixel sees darker neighbours.
      if (ly < margin || ly >= sq - margin || lx < margin || lx >= sq - margin) continue;
      ++checked;
      CHECK(t(y, x) == 0);
    }
  CHECK(checked > 0);
  // Bright pixels adjacent to a dark square are foreground, dark ones background.
  Index fg_bright = 0, fg_dark = 0;
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      const bool bright = ((y / sq) + (x / sq)) % 2 == 0;
      if (t(y, x)) (bright ? fg_bright : fg_dark) += 1;
    }
  CHECK(fg_bright > 0);
  CHECK(fg_dark == 0);
}

TEST_CASE("topology: determinism, errors, padding") {
  ToyDatasetConfig tc;
  tc.n_defective = 2;
  tc.n_defect_free = 0;
  const auto toy = generate_toy_dataset(tc);
  const Image& img = toy.defective.images[0].pixels;
  CHECK(extract_topology(img, DriverConfig{}) == extract_topology(img, DriverConfig{}));
  DriverConfig big;
  big.threshold_window = 9;
  CHECK_THROWS(extract_topology(img, big));  // 64 / 8 = 8 < 9
  DriverConfig even;
  even.threshold_window = 4;
  CHECK_THROWS(extract_topology(img, even));
  const Mask odd = extract_topology(constant_image(61, 70, 0.5f), DriverConfig{});
  CHECK(odd.rows() == 61);
  CHECK(odd.cols() == 70);
}

TEST_CASE("compose: empty, full and ten-pixel masks") {
  DriverConfig cfg;
  Mask topo(16, 16);
  for (Index y = 0; y < 16; ++y)
    for (Index x = 0; x < 16; ++x) topo(y, x) = (x + y) % 3 == 0 ? 255 : 0;

  const DriverImage plain = compose_driver(topo, {}, cfg);
  CHECK(plain.pixels.data.maxCoeff() == 50.f / 255.f);
  CHECK(driver_violations(plain, cfg).empty());

  const DriverImage full = compose_driver(topo, {{Mask::Ones(16, 16), 3}}, cfg);
  CHECK(count_equal(full.pixels, cfg.palette.at(3)) == 256);

  Mask ten = Mask::Zero(16, 16);
  for (int i = 0; i < 10; ++i) ten(4, 3 + i) = 1;
  const DriverImage d = compose_driver(topo, {{ten, 4}}, cfg);
  CHECK(count_equal(d.pixels, cfg.palette.at(4)) == 10);
  Index dim = 0;
  for (Index p = 0; p < d.pixels.pixels(); ++p) dim += d.pixels.data.col(p).maxCoeff() <= 50.f / 255.f + 1e-6f ? 1 : 0;
  CHECK(dim == 246);
  CHECK(driver_violations(d, cfg).empty());

  CHECK_THROWS(compose_driver(topo, {{ten, 9}}, cfg));
  CHECK_THROWS_AS(compose_driver(topo, {{Mask::Ones(8, 8), 1}}, cfg), ShapeError);
}

TEST_CASE("compose: later masks win overlaps and regions stay disjoint") {
  DriverConfig cfg;
  Mask a = Mask::Zero(8, 8), b = Mask::Zero(8, 8);
  a.block(0, 0, 4, 4).setOnes();
  b.block(2, 2, 4, 4).setOnes();
  const DriverImage d = compose_driver(Mask::Zero(8, 8), {{a, 1}, {b, 2}}, cfg);
  REQUIRE(d.regions.size() == 2);
  CHECK(mask_area(d.regions[0].bitmap) == 12);
  CHECK(mask_area(d.regions[1].bitmap) == 16);
  CHECK((d.regions[0].bitmap.array() * d.regions[1].bitmap.array() == 0).all());
  CHECK(driver_violations(d, cfg).empty());
}

TEST_CASE("config: palette and window constraints") {
  DriverConfig cfg;
  CHECK_NOTHROW(cfg.check());
  cfg.palette[2] = cfg.palette[1];
  CHECK_THROWS(cfg.check());
  cfg = DriverConfig{};
  cfg.palette[1] = {90, 90, 90};
  CHECK_THROWS(cfg.check());
  CHECK(DriverConfig{}.hash() == DriverConfig{}.hash());
  DriverConfig other;
  other.downscale_factor = 4;
  CHECK(other.hash() != DriverConfig{}.hash());
}

TEST_CASE("drivers of the toy set: invariants, determinism and quantization robustness") {
  ToyDatasetConfig tc;
  tc.n_defective = 40;
  tc.n_defect_free = 0;
  tc.max_cracks = 2;
  tc.seed = 9;
  const auto toy = generate_toy_dataset(tc);
  const DriverConfig cfg;
  Rng rng(4);
  int n = 0;
  for (const auto& im : toy.defective.images) {
    const auto masks = toy.defective.regions(im.id);
    const DriverImage d = make_driver(im.pixels, masks, cfg, std::to_string(im.id));
    CHECK(driver_violations(d, cfg).empty());
    CHECK(make_driver(im.pixels, masks, cfg).pixels == d.pixels);
    Image noisy = im.pixels;
    for (Index i = 0; i < noisy.data.size(); ++i) noisy.data(i) += static_cast<float>(rng.uniform(-0.49, 0.49) / 255.0);
    CHECK(make_driver(noisy, masks, cfg).pixels == d.pixels);
    ++n;
  }
  CHECK(n == 40);
}

TEST_CASE("drivers: png plus sidecar round trip and inpaint condition") {
  ToyDatasetConfig tc;
  tc.n_defective = 1;
  tc.n_defect_free = 0;
  const auto toy = generate_toy_dataset(tc);
  const auto& im = toy.defective.images[0];
  const DriverConfig cfg;
  const DriverImage d = make_driver(im.pixels, toy.defective.regions(im.id), cfg, "img1");
  const auto path = std::filesystem::temp_directory_path() / "crackgen_driver_test" / "d.png";
  save_driver(d, path);
  const DriverImage back = load_driver(path);
  CHECK(back.pixels == d.pixels);
  CHECK(back.regions == d.regions);
  CHECK(back.source_id == "img1");
  CHECK(back.config_hash == cfg.hash());

  const DriverImage c = make_inpaint_condition(im.pixels, toy.defective.regions(im.id), cfg);
  Mask any = Mask::Zero(im.height, im.width);
  for (const auto& r : c.regions) any = any.cwiseMax(r.bitmap);
  for (Index y = 0; y < im.height; ++y)
    for (Index x = 0; x < im.width; ++x)
      for (int ch = 0; ch < 3; ++ch)
        if (!any(y, x)) CHECK(c.pixels(ch, y, x) == im.pixels(ch, y, x));
  CHECK(count_equal(c.pixels, cfg.palette.at(c.regions[0].class_id)) >= mask_area(c.regions[0].bitmap));
}

TEST_CASE("origin probe: label-free split sits at chance") {
  const ProbeSets s = probe_sets(40, 31);
  OriginProbeConfig pc;
  pc.epochs = 15;
  const auto r = driver_origin_blindness_check(DriverConfig{}, s.defect_free, s.defect_free, pc);
  MESSAGE(r.text());
  CHECK(r.accuracy >= 0.25);
  CHECK(r.accuracy <= 0.75);
  CHECK_THROWS(driver_origin_blindness_check(DriverConfig{}, std::vector<SourceItem>(s.defective.begin(), s.defective.begin() + 5),
                                             s.defect_free, pc));
}

TEST_CASE("origin probe: coarse drivers hide origin, uncoarsened ones leak it") {
  const ProbeSets s = probe_sets(80, 5);
  OriginProbeConfig pc;
  const auto coarse = driver_origin_blindness_check(DriverConfig{}, s.defective, s.defect_free, pc);
  DriverConfig fine;
  fine.downscale_factor = 1;
  const auto leaky = driver_origin_blindness_check(fine, s.defective, s.defect_free, pc);
  MESSAGE("factor 8: " << coarse.text());
  MESSAGE("factor 1: " << leaky.text());
  CHECK(coarse.accuracy <= 0.65);
  CHECK(coarse.pass);
  CHECK(leaky.accuracy > coarse.accuracy);
}
