#include "crackgen/segmentation.hpp"

#include "crackgen/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace crackgen {

Segmentor::Segmentor(SegmentorConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.num_classes < 1 || cfg_.width < 1) throw std::invalid_argument("segmentor: bad configuration");
  Rng rng(seed);
  const int w = cfg_.width;
  auto conv = [&](const std::string& name, int in, int out, int k) {
    params_.add(name + ".w", fan_in_uniform<float>(out, k * k * in, k * k * in, rng) * std::sqrt(3.f));
    params_.add(name + ".b", Matrix<float>::Zero(out, 1));
  };
  conv("enc0a", 3, w, 3);
  conv("enc0b", w, w, 3);
  conv("enc1a", w, 2 * w, 3);
  conv("enc1b", 2 * w, 2 * w, 3);
  conv("dec0", 3 * w, w, 3);
  conv("head", w, cfg_.num_classes + 1, 1);
}

std::string Segmentor::hash() const {
  return sha256_hex("segmentor:" + std::to_string(cfg_.num_classes) + "," + std::to_string(cfg_.width) +
                    params_.hash());
}

Var Segmentor::logits(Binder<float>& p, Var x) const {
  auto& g = p.graph();
  const auto& v = g.value(x);
  if (v.channels() != 3 || v.height % 2 != 0 || v.width % 2 != 0)
    throw ShapeError("segmentor: input " + shape_string(v) + " needs 3 channels and even sides");
  auto conv = [&](const std::string& n, Var in, int k) { return ops::conv2d(g, in, p(n + ".w"), p(n + ".b"), k); };
  Var s = ops::relu(g, conv("enc0b", ops::relu(g, conv("enc0a", x, 3)), 3));
  Var d = ops::relu(g, conv("enc1a", ops::avg_pool(g, s, 2), 3));
  d = ops::relu(g, conv("enc1b", d, 3));
  Var u = ops::relu(g, conv("dec0", ops::concat(g, ops::upsample(g, d, 2), s), 3));
  return conv("head", u, 1);
}

Tensor<float> Segmentor::probabilities(const Image& img) const {
  Graph<float> g;
  Binder<float> p(g, params_);
  Tensor<float> z = g.value(logits(p, g.constant(img)));
  for (Index j = 0; j < z.pixels(); ++j) {
    auto col = z.data.col(j);
    col = (col.array() - col.maxCoeff()).exp().matrix();
    col /= col.sum();
  }
  return z;
}

Mask Segmentor::predict_labels(const Image& img) const {
  const auto prob = probabilities(img);
  Mask out(img.height, img.width);
  for (Index j = 0; j < prob.pixels(); ++j) {
    Index k;
    prob.data.col(j).maxCoeff(&k);
    out(j / img.width, j % img.width) = static_cast<std::uint8_t>(k);
  }
  return out;
}

namespace {

std::vector<int> labels_of(const AnnotatedDataset& ds, int image_id) {
  const Mask m = ds.label_map(image_id);
  std::vector<int> out(static_cast<size_t>(m.size()));
  for (Index y = 0; y < m.rows(); ++y)
    for (Index x = 0; x < m.cols(); ++x) out[static_cast<size_t>(y * m.cols() + x)] = m(y, x);
  return out;
}

double validation_iou(const Segmentor& model, const AnnotatedDataset& val) {
  std::vector<Mask> pred, truth;
  for (const auto& im : val.images) {
    pred.push_back((model.predict_labels(im.pixels).array() > 0).cast<std::uint8_t>().matrix());
    truth.push_back((val.label_map(im.id).array() > 0).cast<std::uint8_t>().matrix());
  }
  return 100.0 * dataset_pixel_iou(pred, truth);
}

}  // namespace

SegmentorLog train_segmentor(Segmentor& model, const AnnotatedDataset& train, const SegmentorTrainConfig& cfg,
                             const AnnotatedDataset* validation, bool abort_on_divergence) {
  if (cfg.epochs < 0) throw std::invalid_argument("train_segmentor: epochs must be >= 0");
  SegmentorLog log;
  if (cfg.epochs == 0) {
    log.untrained = true;
    return log;
  }
  if (train.images.empty()) throw std::invalid_argument("train_segmentor: empty training set");
  std::vector<std::vector<int>> labels;
  for (const auto& im : train.images) labels.push_back(labels_of(train, im.id));
  std::vector<float> weights(static_cast<size_t>(model.config().num_classes + 1),
                             static_cast<float>(cfg.foreground_weight));
  weights[0] = 1.f;

  OptimizerConfig oc;
  oc.kind = OptimizerKind::adam;
  oc.learning_rate = cfg.learning_rate;
  oc.grad_clip = cfg.grad_clip;
  Optimizer<float> opt(model.params(), oc);
  ParameterSet<float> grads = model.params().zeros_like();
  Rng rng(cfg.seed);
  std::vector<size_t> order(train.images.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
    double total = 0;
    for (size_t k : order) {
      grads.set_zero();
      Graph<float> g;
      Binder<float> p(g, model.params(), &grads);
      Var l = ops::softmax_cross_entropy<float>(g, model.logits(p, g.constant(train.images[k].pixels)), labels[k],
                                                weights);
      const double v = g.scalar(l);
      if (!std::isfinite(v) || v > 1e6) {
        if (abort_on_divergence)
          throw NumericError("train_segmentor: divergence in epoch " + std::to_string(epoch), epoch);
        log.diverged = true;
        return log;
      }
      g.backward(l);
      opt.step(model.params(), grads);
      total += v;
    }
    log.epoch_loss.push_back(total / static_cast<double>(order.size()));
    if (validation && !validation->images.empty()) log.val_iou.push_back(validation_iou(model, *validation));
  }
  return log;
}

std::vector<Mask> connected_components(const Mask& labels, std::uint8_t value) {
  const Index h = labels.rows(), w = labels.cols();
  std::vector<Mask> out;
  Mask seen = Mask::Zero(h, w);
  std::vector<std::pair<Index, Index>> stack;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      if (labels(y, x) != value || seen(y, x)) continue;
      Mask comp = Mask::Zero(h, w);
      stack.assign(1, {y, x});
      seen(y, x) = 1;
      while (!stack.empty()) {
        const auto [cy, cx] = stack.back();
        stack.pop_back();
        comp(cy, cx) = 1;
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w || seen(ny, nx) || labels(ny, nx) != value) continue;
            seen(ny, nx) = 1;
            stack.emplace_back(ny, nx);
          }
      }
      out.push_back(std::move(comp));
    }
  return out;
}

std::vector<PredictedInstance> predict_instances(const Segmentor& model, const Image& img, double score_threshold,
                                                 int min_area) {
  const auto prob = model.probabilities(img);
  Mask labels(img.height, img.width);
  for (Index j = 0; j < prob.pixels(); ++j) {
    Index k;
    prob.data.col(j).maxCoeff(&k);
    labels(j / img.width, j % img.width) = static_cast<std::uint8_t>(k);
  }
  std::vector<PredictedInstance> out;
  for (int c = 1; c <= model.config().num_classes; ++c)
    for (auto& comp : connected_components(labels, static_cast<std::uint8_t>(c))) {
      const Index area = mask_area(comp);
      if (area < min_area) continue;
      double sum = 0;
      for (Index y = 0; y < comp.rows(); ++y)
        for (Index x = 0; x < comp.cols(); ++x)
          if (comp(y, x)) sum += prob(c, y, x);
      const double score = sum / static_cast<double>(area);
      if (score < score_threshold) continue;
      PredictedInstance inst;
      inst.bbox = tight_bbox(comp);
      inst.mask = std::move(comp);
      inst.class_id = c;
      inst.score = score;
      out.push_back(std::move(inst));
    }
  return out;
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::real_only: return "real_only";
    case Regime::synthetic_only: return "synthetic_only";
    case Regime::synthetic_plus_real: return "synthetic_plus_real";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  for (Regime r : {Regime::real_only, Regime::synthetic_only, Regime::synthetic_plus_real})
    if (to_string(r) == s) return r;
  throw std::invalid_argument("unknown regime '" + s + "'");
}

const RegimeRow& RegimeTable::row(Regime r) const {
  for (const auto& row : rows)
    if (row.regime == r) return row;
  throw std::out_of_range("regime table: no row " + to_string(r));
}

std::string RegimeTable::to_text() const {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << "real_fraction " << real_fraction << "\n";
  o << "regime segm_map bbox_map iou hd collapsed_seeds\n";
  for (const auto& r : rows)
    o << to_string(r.regime) << " " << r.segm_map << " " << r.bbox_map << " " << r.iou << " " << r.hd << " "
      << r.collapsed_seeds << "\n";
  return o.str();
}

Json RegimeTable::to_json() const {
  Json j;
  j["real_fraction"] = real_fraction;
  j["rows"] = Json::array();
  for (const auto& r : rows)
    j["rows"].push_back(Json{{"regime", to_string(r.regime)},
                             {"segm_map", r.segm_map},
                             {"bbox_map", r.bbox_map},
                             {"iou", r.iou},
                             {"hd", r.hd},
                             {"collapsed_seeds", r.collapsed_seeds},
                             {"seed_iou", r.seed_iou},
                             {"seed_segm_map", r.seed_segm_map},
                             {"seed_bbox_map", r.seed_bbox_map},
                             {"seed_hd", r.seed_hd}});
  return j;
}

AnnotatedDataset real_subset(const AnnotatedDataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("real_subset: fraction must be in (0, 1]");
  if (ds.images.empty()) throw std::invalid_argument("real_subset: empty dataset");
  const size_t n = ds.images.size();
  const size_t keep = std::max<size_t>(1, static_cast<size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  AnnotatedDataset out;
  out.categories = ds.categories;
  std::set<int> ids;
  for (size_t i : order) {
    out.images.push_back(ds.images[i]);
    ids.insert(ds.images[i].id);
  }
  for (const auto& a : ds.annotations)
    if (ids.count(a.image_id)) out.annotations.push_back(a);
  return out;
}

void check_split(const AnnotatedDataset& test, const std::vector<const AnnotatedDataset*>& training,
                 const std::vector<int>& extra_training_ids) {
  std::set<int> test_ids;
  for (const auto& im : test.images) test_ids.insert(im.id);
  std::vector<int> leaked;
  for (const auto* ds : training)
    for (const auto& im : ds->images)
      if (test_ids.count(im.id)) leaked.push_back(im.id);
  for (int id : extra_training_ids)
    if (test_ids.count(id)) leaked.push_back(id);
  if (!leaked.empty()) {
    std::string list;
    for (int id : leaked) list += (list.empty() ? "" : ", ") + std::to_string(id);
    throw SplitLeakageError("split leakage: test image ids used in training: " + list);
  }
}

RegimeMetrics evaluate_segmentor(const Segmentor& model, const AnnotatedDataset& test, int min_area) {
  std::vector<Mask> pred, truth;
  std::vector<Instance> pi, gi;
  for (const auto& im : test.images) {
    pred.push_back((model.predict_labels(im.pixels).array() > 0).cast<std::uint8_t>().matrix());
    truth.push_back((test.label_map(im.id).array() > 0).cast<std::uint8_t>().matrix());
    for (auto& p : predict_instances(model, im.pixels, 0.0, min_area))
      pi.push_back(Instance{im.id, p.class_id, std::move(p.mask), p.score});
    for (const auto& r : test.regions(im.id)) gi.push_back(Instance{im.id, r.class_id, r.bitmap, std::nullopt});
  }
  RegimeMetrics m;
  const auto ap = map_coco(pi, gi);
  m.segm_map = 100.0 * ap.segm;
  m.bbox_map = 100.0 * ap.bbox;
  m.iou = 100.0 * dataset_pixel_iou(pred, truth);
  m.hd = mean_hausdorff(pred, truth);
  return m;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty list");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

RegimeTable evaluate_regimes(const AnnotatedDataset& real_train, const AnnotatedDataset& synthetic,
                             const AnnotatedDataset& test, const RegimeConfig& cfg,
                             const std::vector<int>& generator_ids) {
  if (cfg.seeds.empty()) throw std::invalid_argument("evaluate_regimes: no seeds");
  if (test.images.empty()) throw std::invalid_argument("evaluate_regimes: empty test set");
  check_split(test, {&real_train, &synthetic}, generator_ids);
  RegimeTable table;
  table.real_fraction = cfg.real_fraction;
  for (Regime regime : cfg.regimes) {
    const bool needs_real = regime != Regime::synthetic_only, needs_synth = regime != Regime::real_only;
    if (needs_real && real_train.images.empty())
      throw std::invalid_argument("evaluate_regimes: " + to_string(regime) + " needs real training data");
    if (needs_synth && synthetic.images.empty())
      throw std::invalid_argument("evaluate_regimes: " + to_string(regime) + " needs synthetic data");
    RegimeRow row;
    row.regime = regime;
    for (auto seed : cfg.seeds) {
      Segmentor model(cfg.model, seed);
      SegmentorTrainConfig tc = cfg.train;
      tc.seed = seed;
      bool diverged = false;
      if (needs_synth) diverged = train_segmentor(model, synthetic, tc, nullptr, false).diverged;
      if (needs_real && !diverged) {
        const auto sub = real_subset(real_train, cfg.real_fraction, seed);
        tc.seed = seed + 7919;
        diverged = train_segmentor(model, sub, tc, nullptr, false).diverged;
      }
      RegimeMetrics m{0, 0, 0, 1};
      if (!diverged) m = evaluate_segmentor(model, test, cfg.min_area);
      row.seed_iou.push_back(m.iou);
      row.seed_segm_map.push_back(m.segm_map);
      row.seed_bbox_map.push_back(m.bbox_map);
      row.seed_hd.push_back(m.hd);
      row.collapsed_seeds += diverged || m.iou < cfg.collapse_floor_iou ? 1 : 0;
    }
    row.iou = median(row.seed_iou);
    row.segm_map = median(row.seed_segm_map);
    row.bbox_map = median(row.seed_bbox_map);
    row.hd = median(row.seed_hd);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace crackgen
