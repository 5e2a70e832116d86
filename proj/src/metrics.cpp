#include "crackgen/metrics.hpp"

#include "crackgen/ops.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace crackgen {

namespace {

constexpr int kStageChannels[3] = {8, 16, 16};

ParameterSet<double> standard_extractor_params() {
  Rng rng(FeatureExtractor::kSeed);
  ParameterSet<double> p;
  int cin = 3;
  for (int s = 0; s < 3; ++s) {
    const int cout = kStageChannels[s], fan = 9 * cin;
    const std::string name = "conv" + std::to_string(s);
    // He-uniform so ReLU activations keep their scale through the stages.
    p.add(name + ".w", fan_in_uniform<double>(cout, fan, fan, rng) * std::sqrt(6.0));
    p.add(name + ".b", fan_in_uniform<double>(cout, 1, fan, rng) * 0.1);
    cin = cout;
  }
  return p;
}

}  // namespace

const FeatureExtractor& FeatureExtractor::standard() {
  static const FeatureExtractor fx(standard_extractor_params(), kVersion);
  return fx;
}

FeatureExtractor::FeatureExtractor(ParameterSet<double> params, std::string version)
    : params_(std::move(params)), version_(std::move(version)) {
  for (int s = 0; s < 3; ++s) {
    const std::string name = "conv" + std::to_string(s);
    if (!params_.contains(name + ".w") || !params_.contains(name + ".b"))
      throw std::invalid_argument("feature extractor: missing " + name);
  }
}

Index FeatureExtractor::feature_dim() const { return 2 * params_["conv2.w"].rows(); }

std::string FeatureExtractor::hash() const { return sha256_hex(version_ + params_.hash()); }

Vector<double> FeatureExtractor::features(const Image& img) const {
  if (img.channels() != 3 || img.height % 4 != 0 || img.width % 4 != 0)
    throw ShapeError("feature extractor: input " + shape_string(img) + " needs 3 channels and sides divisible by 4");
  Graph<double> g;
  Binder<double> p(g, params_);
  Var h = g.constant(img.cast<double>());
  for (int s = 0; s < 3; ++s) {
    const std::string name = "conv" + std::to_string(s);
    h = ops::relu(g, ops::conv2d(g, h, p(name + ".w"), p(name + ".b"), 3));
    if (s < 2) h = ops::avg_pool(g, h, 2);
  }
  const Matrix<double>& a = g.value(h).data;
  const Index c = a.rows();
  Vector<double> f(2 * c);
  const Vector<double> mean = a.rowwise().mean();
  f.head(c) = mean;
  f.tail(c) = ((a.colwise() - mean).array().square().rowwise().sum() / static_cast<double>(a.cols())).sqrt().matrix();
  return f;
}

Matrix<double> FeatureExtractor::features(const std::vector<Image>& imgs) const {
  Matrix<double> out(static_cast<Index>(imgs.size()), feature_dim());
  for (size_t i = 0; i < imgs.size(); ++i) out.row(static_cast<Index>(i)) = features(imgs[i]).transpose();
  return out;
}

Checkpoint FeatureExtractor::to_checkpoint() const {
  Checkpoint ck;
  ck.meta["kind"] = "feature_extractor";
  ck.meta["version"] = version_;
  ck.meta["hash"] = hash();
  ck.put_params("fx.", params_);
  return ck;
}

FeatureExtractor FeatureExtractor::from_checkpoint(const Checkpoint& ck) {
  FeatureExtractor fx(ck.get_params<double>("fx."), ck.meta.at("version").get<std::string>());
  if (fx.hash() != ck.meta.at("hash").get<std::string>())
    throw std::runtime_error("feature extractor: hash mismatch");
  return fx;
}

// ---------------------------------------------------------------- FID

namespace {

struct Gaussian {
  Vector<double> mean;
  Matrix<double> cov;
};

Gaussian fit(const Matrix<double>& x) {
  if (x.rows() < 2) throw std::invalid_argument("fid: need at least 2 samples");
  Gaussian g;
  g.mean = x.colwise().mean().transpose();
  const Matrix<double> c = x.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  return g;
}

// Trace of sqrt(S1^{1/2} S2 S1^{1/2}); nullopt when a decomposition fails.
std::optional<double> trace_sqrt_product(const Matrix<double>& s1, const Matrix<double>& s2) {
  Eigen::SelfAdjointEigenSolver<Matrix<double>> e1(s1);
  if (e1.info() != Eigen::Success) return std::nullopt;
  const Vector<double> r = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Matrix<double> root = e1.eigenvectors() * r.asDiagonal() * e1.eigenvectors().transpose();
  Matrix<double> m = root * s2 * root;
  m = 0.5 * (m + m.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix<double>> e2(m, Eigen::EigenvaluesOnly);
  if (e2.info() != Eigen::Success) return std::nullopt;
  const double tr = e2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  if (!std::isfinite(tr)) return std::nullopt;
  return tr;
}

}  // namespace

double fid(const Matrix<double>& a, const Matrix<double>& b, const FidOptions& opt) {
  if (a.cols() != b.cols()) throw ShapeError("fid: feature dimensions differ");
  if (!a.allFinite() || !b.allFinite()) throw NumericError("fid: non-finite features");
  const Gaussian ga = fit(a), gb = fit(b);
  const Index d = a.cols();
  double eps = opt.epsilon;
  for (int attempt = 0; attempt <= opt.max_retries; ++attempt, eps *= 10) {
    const Matrix<double> s1 = ga.cov + eps * Matrix<double>::Identity(d, d);
    const Matrix<double> s2 = gb.cov + eps * Matrix<double>::Identity(d, d);
    // Symmetrise the cross term so fid(a,b) and fid(b,a) agree to rounding.
    const auto t12 = trace_sqrt_product(s1, s2);
    const auto t21 = trace_sqrt_product(s2, s1);
    if (!t12 || !t21) continue;
    const double cross = 0.5 * (*t12 + *t21);
    return (ga.mean - gb.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
  }
  throw NumericError("fid: covariance square root failed after regularisation");
}

// ---------------------------------------------------------------- variety

double pairwise_l2(const std::vector<Image>& images) {
  if (images.size() < 2) throw std::invalid_argument("pairwise_l2: need at least 2 images");
  for (const auto& im : images)
    if (!im.same_shape(images[0])) throw ShapeError("pairwise_l2: image shapes differ");
  double total = 0;
  long pairs = 0;
  for (size_t i = 0; i < images.size(); ++i)
    for (size_t j = i + 1; j < images.size(); ++j) {
      const float* a = images[i].data.data();
      const float* b = images[j].data.data();
      double ss = 0;
      for (Index k = 0; k < images[i].data.size(); ++k) {
        const double d = 255.0 * static_cast<double>(a[k]) - 255.0 * static_cast<double>(b[k]);
        ss += d * d;
      }
      total += std::sqrt(ss);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

namespace {

std::vector<int> bin_levels(const Matrix<double>& gray, int bins) {
  std::vector<int> out(static_cast<size_t>(gray.size()));
  for (Index i = 0; i < gray.size(); ++i) {
    const double v = std::clamp(gray.data()[i], 0.0, 1.0);
    out[static_cast<size_t>(i)] = std::min(static_cast<int>(v * bins), bins - 1);
  }
  return out;
}

double unit_scale(InfoUnit u) { return u == InfoUnit::bits ? 1.0 / std::log(2.0) : 1.0; }

double entropy_of(const std::vector<double>& counts, double n) {
  double h = 0;
  for (double c : counts)
    if (c > 0) h -= (c / n) * std::log(c / n);
  return h;
}

}  // namespace

double histogram_entropy(const Matrix<double>& gray, int bins, InfoUnit unit) {
  if (bins < 2) throw std::invalid_argument("entropy: bins must be >= 2");
  std::vector<double> counts(static_cast<size_t>(bins), 0.0);
  for (int b : bin_levels(gray, bins)) counts[static_cast<size_t>(b)] += 1;
  return entropy_of(counts, static_cast<double>(gray.size())) * unit_scale(unit);
}

MiResult mutual_information(const Matrix<double>& ga, const Matrix<double>& gb, int bins, InfoUnit unit) {
  if (bins < 2) throw std::invalid_argument("mutual_information: bins must be >= 2");
  if (ga.rows() != gb.rows() || ga.cols() != gb.cols()) throw ShapeError("mutual_information: shapes differ");
  if (ga.size() == 0) throw ShapeError("mutual_information: empty image");
  MiResult r;
  if (ga.maxCoeff() == ga.minCoeff() || gb.maxCoeff() == gb.minCoeff()) {
    r.degenerate = true;
    return r;
  }
  const auto la = bin_levels(ga, bins), lb = bin_levels(gb, bins);
  const size_t nb = static_cast<size_t>(bins);
  std::vector<double> joint(nb * nb, 0.0), pa(nb, 0.0), pb(nb, 0.0);
  for (size_t i = 0; i < la.size(); ++i) {
    joint[static_cast<size_t>(la[i]) * nb + static_cast<size_t>(lb[i])] += 1;
    pa[static_cast<size_t>(la[i])] += 1;
    pb[static_cast<size_t>(lb[i])] += 1;
  }
  const double n = static_cast<double>(la.size());
  double mi = 0;
  for (size_t i = 0; i < nb; ++i)
    for (size_t j = 0; j < nb; ++j) {
      const double c = joint[i * nb + j];
      if (c > 0) mi += (c / n) * std::log(c * n / (pa[i] * pb[j]));
    }
  r.value = std::max(0.0, mi) * unit_scale(unit);
  return r;
}

MiResult mutual_information(const Image& a, const Image& b, int bins, InfoUnit unit) {
  if (!a.same_shape(b)) throw ShapeError("mutual_information: shapes differ");
  return mutual_information(grayscale(a.cast<double>()), grayscale(b.cast<double>()), bins, unit);
}

PairwiseMi mean_pairwise_mi(const std::vector<Image>& images, int bins) {
  if (images.size() < 2) throw std::invalid_argument("mean_pairwise_mi: need at least 2 images");
  std::vector<Matrix<double>> gray;
  for (const auto& im : images) {
    if (!im.same_shape(images[0])) throw ShapeError("mean_pairwise_mi: image shapes differ");
    gray.push_back(grayscale(im.cast<double>()));
  }
  PairwiseMi out;
  double total = 0;
  for (size_t i = 0; i < gray.size(); ++i)
    for (size_t j = i + 1; j < gray.size(); ++j) {
      const auto r = mutual_information(gray[i], gray[j], bins);
      total += r.value;
      out.degenerate_pairs += r.degenerate ? 1 : 0;
      ++out.pairs;
    }
  out.mean = total / out.pairs;
  return out;
}

// ---------------------------------------------------------------- masks

namespace {

void check_same(const Mask& a, const Mask& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": mask shapes differ");
}

}  // namespace

MaskScore iou(const Mask& a, const Mask& b) {
  check_same(a, b, "iou");
  Index inter = 0, uni = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const bool x = a.data()[i] != 0, y = b.data()[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) return {1.0, true};
  return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

std::vector<std::pair<Index, Index>> boundary_points(const Mask& m) {
  std::vector<std::pair<Index, Index>> pts;
  const Index h = m.rows(), w = m.cols();
  auto on = [&](Index y, Index x) { return y >= 0 && y < h && x >= 0 && x < w && m(y, x) != 0; };
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      if (on(y, x) && (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1))) pts.emplace_back(y, x);
  return pts;
}

MaskScore hausdorff(const Mask& a, const Mask& b) {
  check_same(a, b, "hausdorff");
  const auto pa = boundary_points(a), pb = boundary_points(b);
  if (pa.empty() && pb.empty()) return {0.0, true};
  if (pa.empty() || pb.empty()) return {1.0, false};
  auto directed = [](const auto& from, const auto& to) {
    double worst = 0;
    for (const auto& [y0, x0] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [y1, x1] : to) {
        const double dy = static_cast<double>(y0 - y1), dx = static_cast<double>(x0 - x1);
        best = std::min(best, dy * dy + dx * dx);
        if (best == 0) break;
      }
      worst = std::max(worst, best);
    }
    return std::sqrt(worst);
  };
  const double diag = std::hypot(static_cast<double>(a.rows()), static_cast<double>(a.cols()));
  return {std::max(directed(pa, pb), directed(pb, pa)) / diag, false};
}

double dataset_pixel_iou(const std::vector<Mask>& pred, const std::vector<Mask>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("dataset_pixel_iou: list sizes differ");
  Index inter = 0, uni = 0;
  for (size_t k = 0; k < pred.size(); ++k) {
    check_same(pred[k], truth[k], "dataset_pixel_iou");
    for (Index i = 0; i < pred[k].size(); ++i) {
      const bool x = pred[k].data()[i] != 0, y = truth[k].data()[i] != 0;
      inter += x && y;
      uni += x || y;
    }
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double mean_hausdorff(const std::vector<Mask>& pred, const std::vector<Mask>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("mean_hausdorff: list sizes differ");
  if (pred.empty()) throw std::invalid_argument("mean_hausdorff: empty lists");
  double total = 0;
  for (size_t k = 0; k < pred.size(); ++k) total += hausdorff(pred[k], truth[k]).value;
  return total / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------- mAP

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

double box_iou(const BBox& a, const BBox& b) {
  const Index ix = std::max<Index>(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const Index iy = std::max<Index>(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = static_cast<double>(ix * iy);
  const double uni = static_cast<double>(a.w * a.h + b.w * b.h) - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

double instance_iou(const Instance& a, const Instance& b, bool use_bbox) {
  if (use_bbox) return box_iou(tight_bbox(a.mask), tight_bbox(b.mask));
  return iou(a.mask, b.mask).value;
}

}  // namespace

double average_precision(const std::vector<Instance>& preds, const std::vector<Instance>& truth, double threshold,
                         bool use_bbox) {
  if (truth.empty()) throw std::invalid_argument("average_precision: no ground truth");
  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& p : preds)
    if (!p.score) throw std::invalid_argument("average_precision: prediction without score");
  std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) { return *preds[i].score > *preds[j].score; });

  std::vector<bool> matched(truth.size(), false);
  std::vector<double> recall, precision;
  double tp = 0;
  for (size_t k = 0; k < order.size(); ++k) {
    const Instance& p = preds[order[k]];
    double best = threshold;
    std::optional<size_t> hit;
    for (size_t g = 0; g < truth.size(); ++g) {
      if (matched[g] || truth[g].image_id != p.image_id) continue;
      const double v = instance_iou(p, truth[g], use_bbox);
      if (v >= best) {
        best = v;
        hit = g;
      }
    }
    if (hit) {
      matched[*hit] = true;
      tp += 1;
    }
    recall.push_back(tp / static_cast<double>(truth.size()));
    precision.push_back(tp / static_cast<double>(k + 1));
  }
  for (size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) ap += precision[static_cast<size_t>(it - recall.begin())];
  }
  return ap / 101.0;
}

MapResult map_coco(const std::vector<Instance>& preds, const std::vector<Instance>& truth,
                   const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw std::invalid_argument("map_coco: no thresholds");
  for (const auto& p : preds)
    if (!p.score) throw std::invalid_argument("map_coco: prediction without score");
  std::map<int, std::pair<std::vector<Instance>, std::vector<Instance>>> by_class;
  for (const auto& g : truth) by_class[g.class_id].second.push_back(g);
  for (const auto& p : preds)
    if (by_class.count(p.class_id)) by_class[p.class_id].first.push_back(p);
  MapResult r;
  for (const auto& [cls, pg] : by_class) {
    double b = 0, s = 0;
    for (double t : thresholds) {
      b += average_precision(pg.first, pg.second, t, true);
      s += average_precision(pg.first, pg.second, t, false);
    }
    r.bbox += b / static_cast<double>(thresholds.size());
    r.segm += s / static_cast<double>(thresholds.size());
    ++r.evaluated_classes;
  }
  if (r.evaluated_classes > 0) {
    r.bbox /= r.evaluated_classes;
    r.segm /= r.evaluated_classes;
  }
  return r;
}

// ---------------------------------------------------------------- report

void MetricReport::set(const std::string& name, double value) {
  if (!std::isfinite(value)) throw NumericError("metric '" + name + "' is not finite");
  values_[name] = value;
}

double MetricReport::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("metric report: no value '" + name + "'");
  return it->second;
}

std::string MetricReport::to_text() const {
  std::ostringstream s;
  s.precision(10);
  s << "config_hash " << config_hash << "\n";
  for (const auto& id : dataset_ids) s << "dataset " << id << "\n";
  for (const auto& [k, v] : values_) s << k << " " << v << "\n";
  return s.str();
}

Json MetricReport::to_json() const {
  Json j;
  j["config_hash"] = config_hash;
  j["dataset_ids"] = dataset_ids;
  j["values"] = Json::object();
  for (const auto& [k, v] : values_) j["values"][k] = v;
  return j;
}

MetricReport MetricReport::from_json(const Json& j) {
  MetricReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.dataset_ids = j.at("dataset_ids").get<std::vector<std::string>>();
  for (const auto& [k, v] : j.at("values").items()) r.set(k, v.get<double>());
  return r;
}

void MetricReport::save(const std::filesystem::path& dir, const std::string& stem) const {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / (stem + ".txt")) << to_text();
  std::ofstream(dir / (stem + ".json")) << to_json().dump(2) << "\n";
}

}  // namespace crackgen
