#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crackgen/metrics.hpp"
#include "crackgen/toy_data.hpp"

#include <cmath>

using namespace crackgen;

namespace {

Matrix<double> gaussian_rows(Index n, const Vector<double>& mean, Rng& rng) {
  Matrix<double> x(n, mean.size());
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < mean.size(); ++j) x(i, j) = mean(j) + rng.normal();
  return x;
}

Mask rect(Index h, Index w, Index y, Index x, Index rh, Index rw) {
  Mask m = Mask::Zero(h, w);
  m.block(y, x, rh, rw).setOnes();
  return m;
}

Instance inst(int image, int cls, Mask m, std::optional<double> score = std::nullopt) {
  return Instance{image, cls, std::move(m), score};
}

}  // namespace

TEST_CASE("fid: identity, symmetry and the offset-Gaussian limit") {
  Rng rng(11);
  const Vector<double> zero = Vector<double>::Zero(8);
  const Matrix<double> a = gaussian_rows(2000, zero, rng);
  CHECK(std::abs(fid(a, a)) < 1e-6);

  Vector<double> d(8);
  d << 1, -0.5, 0.25, 2, 0, -1, 0.5, 1.5;
  Rng ra(1), rb(2);
  const Matrix<double> x = gaussian_rows(10000, zero, ra);
  const Matrix<double> y = gaussian_rows(10000, d, rb);
  const double v = fid(x, y);
  CHECK(v == doctest::Approx(d.squaredNorm()).epsilon(0.05));
  CHECK(std::abs(fid(x, y) - fid(y, x)) < 1e-9);
  CHECK(v >= -1e-9);

  // Rank-deficient features (N < D) still produce a finite value.
  const Matrix<double> few = gaussian_rows(4, Vector<double>::Zero(16), rng);
  const Matrix<double> few2 = gaussian_rows(4, Vector<double>::Zero(16), rng);
  CHECK(std::isfinite(fid(few, few2)));
  CHECK_THROWS_AS(fid(a, Matrix<double>(10, 3)), ShapeError);
}

TEST_CASE("feature extractor: frozen, deterministic, persisted") {
  const auto& fx = FeatureExtractor::standard();
  CHECK(fx.feature_dim() == 32);
  CHECK(fx.version() == std::string("fx-v1"));
  CHECK(fx.hash() == "6bb534c5885fee304a36255bf6871fd65cbef55e8ddff0244de4aa00a5837d0f");
  ToyDatasetConfig tc;
  tc.n_defective = 2;
  tc.n_defect_free = 0;
  const auto toy = generate_toy_dataset(tc);
  const Image& img = toy.defective.images[0].pixels;
  const auto f = fx.features(img);
  CHECK(f == fx.features(img));
  CHECK(f.allFinite());
  CHECK(f.tail(16).maxCoeff() > 0);
  const auto back = FeatureExtractor::from_checkpoint(Checkpoint::from_bytes(fx.to_checkpoint().to_bytes()));
  CHECK(back.hash() == fx.hash());
  CHECK(back.features(img) == f);
}

TEST_CASE("pairwise l2: closed forms and brute-force oracle") {
  Image a(3, 4, 5), b(3, 4, 5);
  a.data.setConstant(0.5f);
  b.data.setConstant(0.5f);
  CHECK(pairwise_l2({a, a, a}) == 0.0);
  b.data.setConstant(0.5f + 1.f / 255.f);
  CHECK(pairwise_l2({a, b}) == doctest::Approx(std::sqrt(60.0)).epsilon(1e-6));
  CHECK_THROWS(pairwise_l2({a}));
  CHECK_THROWS_AS(pairwise_l2({a, Image(3, 4, 4)}), ShapeError);

  ToyDatasetConfig tc;
  tc.n_defective = 10;
  tc.n_defect_free = 0;
  tc.image_size = 16;
  std::vector<Image> imgs;
  for (const auto& im : generate_toy_dataset(tc).defective.images) imgs.push_back(im.pixels);
  double total = 0;
  int pairs = 0;
  for (size_t i = 0; i < imgs.size(); ++i)
    for (size_t j = i + 1; j < imgs.size(); ++j) {
      double ss = 0;
      for (Index y = 0; y < 16; ++y)
        for (Index x = 0; x < 16; ++x)
          for (int c = 0; c < 3; ++c) {
            const double d = 255.0 * imgs[i](c, y, x) - 255.0 * imgs[j](c, y, x);
            ss += d * d;
          }
      total += std::sqrt(ss);
      ++pairs;
    }
  CHECK(pairwise_l2(imgs) == total / pairs);
}

TEST_CASE("mutual information: hand case, identity, independence, degeneracy") {
  Matrix<double> a(4, 4), b(4, 4);
  // a: top half 0, bottom half 1. b: 0 on the first two rows' left half, else 1.
  a << 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1;
  b << 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1;
  const double expected = 0.25 * std::log(2.0) + 0.25 * std::log(2.0 / 3.0) + 0.5 * std::log(4.0 / 3.0);
  CHECK(mutual_information(a, b, 2).value == doctest::Approx(expected).epsilon(1e-12));
  CHECK(mutual_information(b, a, 2).value == doctest::Approx(expected).epsilon(1e-12));
  CHECK(mutual_information(a, b, 2, InfoUnit::bits).value == doctest::Approx(expected / std::log(2.0)).epsilon(1e-12));

  Rng rng(3);
  Matrix<double> u(64, 64), v(64, 64);
  for (Index i = 0; i < u.size(); ++i) {
    u.data()[i] = rng.uniform();
    v.data()[i] = rng.uniform();
  }
  CHECK(mutual_information(u, u, 32).value == doctest::Approx(histogram_entropy(u, 32)).epsilon(1e-12));
  CHECK(mutual_information(u, v, 16).value < 0.05);
  CHECK(mutual_information(u, v, 16).value >= 0);

  const auto flat = mutual_information(Matrix<double>::Constant(4, 4, 0.3), b, 8);
  CHECK(flat.degenerate);
  CHECK(flat.value == 0);
  CHECK_THROWS(mutual_information(a, b, 1));
  CHECK_THROWS_AS(mutual_information(a, Matrix<double>(3, 4)), ShapeError);
}

TEST_CASE("iou and hausdorff") {
  const Mask a = rect(20, 20, 2, 2, 5, 5);
  const Mask b = rect(20, 20, 10, 10, 3, 3);
  CHECK(iou(a, a).value == 1.0);
  CHECK(hausdorff(a, a).value == 0.0);
  CHECK(iou(a, b).value == 0.0);
  const Mask c = rect(20, 20, 4, 4, 5, 5);
  CHECK(iou(a, c).value == doctest::Approx(9.0 / 41.0));
  CHECK(iou(a, c).value == iou(c, a).value);

  const Mask empty = Mask::Zero(20, 20);
  CHECK(hausdorff(empty, a).value == 1.0);
  CHECK(hausdorff(a, empty).value == 1.0);
  CHECK(hausdorff(empty, empty).both_empty);
  CHECK(hausdorff(empty, empty).value == 0.0);
  CHECK(iou(empty, empty).both_empty);
  CHECK(iou(empty, empty).value == 1.0);

  // Single pixels: HD is their distance over the diagonal.
  const Mask p = rect(30, 40, 0, 0, 1, 1), q = rect(30, 40, 3, 4, 1, 1);
  CHECK(hausdorff(p, q).value == doctest::Approx(5.0 / 50.0));

  Rng rng(8);
  for (int k = 0; k < 50; ++k) {
    Mask x = Mask::Zero(12, 12), y = Mask::Zero(12, 12), z = Mask::Zero(12, 12);
    for (Index i = 0; i < 144; ++i) {
      x.data()[i] = rng.uniform() < 0.2;
      y.data()[i] = rng.uniform() < 0.2;
      z.data()[i] = rng.uniform() < 0.2;
    }
    const double xy = hausdorff(x, y).value, yz = hausdorff(y, z).value, xz = hausdorff(x, z).value;
    CHECK(xy == hausdorff(y, x).value);
    CHECK(xy >= 0);
    CHECK(xy <= 1);
    CHECK(xz <= xy + yz + 1e-12);
    const double j = iou(x, y).value;
    CHECK(j >= 0);
    CHECK(j <= 1);
  }
}

TEST_CASE("dataset pixel iou pools all pixels") {
  const Mask a = rect(4, 4, 0, 0, 2, 2), b = rect(4, 4, 0, 0, 2, 1);
  CHECK(dataset_pixel_iou({a, a}, {a, b}) == doctest::Approx(6.0 / 8.0));
  CHECK(mean_hausdorff({a, Mask::Zero(4, 4)}, {a, a}) == doctest::Approx(0.5));
}

TEST_CASE("coco map: perfect, empty, and a hand-computed curve") {
  std::vector<Instance> gt = {inst(1, 1, rect(32, 32, 0, 0, 4, 4)), inst(1, 1, rect(32, 32, 10, 10, 5, 3)),
                              inst(2, 2, rect(32, 32, 20, 5, 2, 9))};
  std::vector<Instance> perfect;
  for (const auto& g : gt) perfect.push_back(inst(g.image_id, g.class_id, g.mask, 1.0));
  const auto r = map_coco(perfect, gt);
  CHECK(r.bbox == doctest::Approx(1.0));
  CHECK(r.segm == doctest::Approx(1.0));
  CHECK(r.evaluated_classes == 2);

  const auto none = map_coco({}, gt);
  CHECK(none.bbox == 0.0);
  CHECK(none.segm == 0.0);

  // One class, three ground-truth instances. Ranked predictions: TP, FP, TP.
  // Recall 1/3, 1/3, 2/3; interpolated precision 1, 2/3, 2/3.
  // 34 recall points take 1, the next 33 take 2/3, the rest 0.
  std::vector<Instance> g3 = {inst(1, 1, rect(32, 32, 0, 0, 4, 4)), inst(1, 1, rect(32, 32, 10, 10, 4, 4)),
                              inst(1, 1, rect(32, 32, 20, 20, 4, 4))};
  std::vector<Instance> p3 = {inst(1, 1, g3[0].mask, 0.9), inst(1, 1, rect(32, 32, 0, 20, 3, 3), 0.8),
                              inst(1, 1, g3[1].mask, 0.7)};
  const double expected = (34.0 + 33.0 * 2.0 / 3.0) / 101.0;
  CHECK(average_precision(p3, g3, 0.5, false) == doctest::Approx(expected).epsilon(1e-12));
  const auto m3 = map_coco(p3, g3);
  CHECK(m3.segm == doctest::Approx(expected).epsilon(1e-12));
  CHECK(m3.bbox == doctest::Approx(expected).epsilon(1e-12));

  // Predictions in the wrong image never match.
  std::vector<Instance> wrong = {inst(2, 1, g3[0].mask, 0.9)};
  CHECK(map_coco(wrong, g3).segm == 0.0);
  CHECK_THROWS(map_coco({inst(1, 1, g3[0].mask)}, g3));
}

TEST_CASE("coco map: threshold sweep on a partial overlap") {
  // IoU of the prediction with its ground truth is 16/20 = 0.8, which passes
  // thresholds 0.50..0.80 (7 of 10).
  std::vector<Instance> gt = {inst(1, 3, rect(16, 16, 0, 0, 4, 5))};
  std::vector<Instance> pr = {inst(1, 3, rect(16, 16, 0, 0, 4, 4), 0.5)};
  CHECK(map_coco(pr, gt).segm == doctest::Approx(0.7));
  CHECK(map_coco(pr, gt).bbox == doctest::Approx(0.7));
}

TEST_CASE("metric report") {
  MetricReport r;
  r.config_hash = "abc";
  r.dataset_ids = {"toy"};
  r.set("fid", 1.5);
  CHECK_THROWS_AS(r.set("bad", std::nan("")), NumericError);
  const auto back = MetricReport::from_json(r.to_json());
  CHECK(back.get("fid") == 1.5);
  CHECK(back.config_hash == "abc");
  CHECK(r.to_text().find("fid 1.5") != std::string::npos);
}
