#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crackgen/segmentation.hpp"
#include "crackgen/toy_data.hpp"

using namespace crackgen;

namespace {

ToyDataset toy(int n, std::uint64_t seed, int first_id) {
  ToyDatasetConfig cfg;
  cfg.image_size = 16;
  cfg.n_defective = n;
  cfg.n_defect_free = 1;
  cfg.seed = seed;
  cfg.first_defective_id = first_id;
  cfg.first_defect_free_id = first_id + 50000;
  return generate_toy_dataset(cfg);
}

struct Split {
  AnnotatedDataset train, test, synthetic;
};

const Split& split() {
  static Split s = [] {
    Split out;
    out.train = toy(90, 11, 1).defective;
    out.test = toy(30, 12, 1001).defective;
    out.synthetic = toy(90, 13, 500001).defective;
    return out;
  }();
  return s;
}

Mask blank(int h, int w) { return Mask::Zero(h, w); }

}  // namespace

TEST_CASE("zero epochs returns the untrained model") {
  Segmentor m(SegmentorConfig{}, 3);
  const auto before = m.hash();
  SegmentorTrainConfig tc;
  tc.epochs = 0;
  const auto log = train_segmentor(m, split().train, tc);
  CHECK(log.untrained);
  CHECK(log.epoch_loss.empty());
  CHECK(m.hash() == before);
  tc.epochs = -1;
  CHECK_THROWS_AS(train_segmentor(m, split().train, tc), std::invalid_argument);
}

TEST_CASE("connected components use 8-connectivity") {
  Mask l = blank(6, 6);
  l(0, 0) = 1;
  l(1, 1) = 1;  // diagonal neighbour joins
  l(4, 4) = 1;
  l(4, 5) = 1;
  l(3, 0) = 2;
  const auto c1 = connected_components(l, 1);
  REQUIRE(c1.size() == 2);
  CHECK(mask_area(c1[0]) == 2);
  CHECK(mask_area(c1[1]) == 2);
  CHECK(connected_components(l, 2).size() == 1);
  CHECK(connected_components(blank(4, 4), 1).empty());
}

TEST_CASE("instance extraction on fixed masks") {
  // Weights that predict background everywhere give no instances.
  Segmentor m(SegmentorConfig{}, 5);
  auto& p = m.params();
  p["head.w"].setZero();
  p["head.b"].setZero();
  p["head.b"](0) = 10.f;
  Image img(3, 16, 16);
  img.data.setZero();
  CHECK(predict_instances(m, img).empty());

  // Train to reproduce two blobs of fixed classes, then check exact recovery.
  AnnotatedDataset ds;
  Image im(3, 16, 16);
  im.data.setConstant(0.7f);
  Mask a = blank(16, 16), b = blank(16, 16);
  for (int y = 2; y < 6; ++y)
    for (int x = 2; x < 6; ++x) a(y, x) = 1;
  for (int y = 10; y < 14; ++y)
    for (int x = 9; x < 14; ++x) b(y, x) = 1;
  for (Index y = 0; y < 16; ++y)
    for (Index x = 0; x < 16; ++x)
      if (a(y, x) || b(y, x))
        for (int c = 0; c < 3; ++c) im(c, y, x) = 0.2f;
  ds.add_image(im, "blobs.png", {MaskRegion{a, 1}, MaskRegion{b, 3}}, 1);
  Segmentor fit(SegmentorConfig{}, 6);
  SegmentorTrainConfig tc;
  tc.epochs = 300;
  tc.learning_rate = 3e-3;
  train_segmentor(fit, ds, tc);
  auto inst = predict_instances(fit, im, 0.0, 1);
  REQUIRE(inst.size() == 2);
  std::sort(inst.begin(), inst.end(), [](const auto& l, const auto& r) { return l.class_id < r.class_id; });
  CHECK(inst[0].class_id == 1);
  CHECK(inst[1].class_id == 3);
  CHECK(inst[0].mask == a);
  CHECK(inst[1].mask == b);
  CHECK(inst[0].bbox == BBox{2, 2, 4, 4});
  CHECK(inst[1].score > 0.5);
  CHECK(inst[1].score <= 1.0);
}

TEST_CASE("subset and split checks") {
  const auto& s = split();
  const auto sub = real_subset(s.train, 0.1, 4);
  CHECK(sub.images.size() == 9);
  CHECK(real_subset(s.train, 0.1, 4) == sub);
  CHECK(real_subset(s.train, 1e-6, 4).images.size() == 1);
  CHECK(real_subset(s.train, 1.0, 4) == s.train);
  CHECK(validation_issues(sub).empty());
  CHECK_THROWS_AS(real_subset(s.train, 0.0, 4), std::invalid_argument);

  CHECK_NOTHROW(check_split(s.test, {&s.train, &s.synthetic}));
  CHECK_THROWS_AS(check_split(s.test, {&s.train}, {1003}), SplitLeakageError);
  RegimeConfig rc;
  rc.seeds = {1};
  rc.train.epochs = 1;
  CHECK_THROWS_AS(evaluate_regimes(s.train, s.test, s.test, rc), SplitLeakageError);
  CHECK_THROWS_AS(evaluate_regimes(s.train, s.synthetic, s.test, rc, {1001}), SplitLeakageError);
  CHECK(parse_regime("synthetic_plus_real") == Regime::synthetic_plus_real);
  CHECK_THROWS(parse_regime("mixed"));
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 2, 3}) == 2.5);
}

TEST_CASE("training is deterministic and learns the toy task") {
  const auto& s = split();
  Segmentor a(SegmentorConfig{}, 1), b(SegmentorConfig{}, 1);
  SegmentorTrainConfig tc;
  tc.seed = 1;
  const auto la = train_segmentor(a, s.train, tc, &s.test);
  const auto lb = train_segmentor(b, s.train, tc, &s.test);
  CHECK(a.hash() == b.hash());
  CHECK(la.epoch_loss == lb.epoch_loss);
  CHECK(la.epoch_loss.back() < 0.5 * la.epoch_loss.front());
  MESSAGE("val iou first/last " << la.val_iou.front() << " / " << la.val_iou.back());
  const auto m = evaluate_segmentor(a, s.test);
  MESSAGE("iou " << m.iou << " segm " << m.segm_map << " bbox " << m.bbox_map << " hd " << m.hd);
  CHECK(m.iou > 50);
  CHECK(m.hd >= 0);
  CHECK(m.hd <= 1);
}

TEST_CASE("synthetic pretraining helps when real data is scarce") {
  const auto& s = split();
  RegimeConfig rc;
  rc.real_fraction = 0.1;
  const auto table = evaluate_regimes(s.train, s.synthetic, s.test, rc);
  MESSAGE(table.to_text());
  CHECK(table.rows.size() == 3);
  const auto& lo = table.row(Regime::real_only);
  const auto& hi = table.row(Regime::synthetic_plus_real);
  CHECK(lo.iou < hi.iou);
  CHECK(lo.segm_map < hi.segm_map);
  CHECK(lo.bbox_map < hi.bbox_map);
  CHECK(lo.hd > hi.hd);
  const auto again = evaluate_regimes(s.train, s.synthetic, s.test, rc);
  CHECK(again.to_json() == table.to_json());
  CHECK(table.row(Regime::real_only).seed_iou.size() == 3);
  const auto j = table.to_json();
  CHECK(j["rows"].size() == 3);
}
