#include "crackgen/hyper.hpp"

#include "crackgen/concept.hpp"
#include "crackgen/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace crackgen {

void HyperConfig::check() const {
  if (sites.empty()) throw std::invalid_argument("hypernetwork: no injection sites");
  for (const auto& s : sites)
    if (std::find(kDecoderBlocks.begin(), kDecoderBlocks.end(), s) == kDecoderBlocks.end())
      throw std::invalid_argument("hypernetwork: unknown injection site '" + s + "'");
  std::vector<std::string> sorted = sites;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw std::invalid_argument("hypernetwork: duplicate injection site");
}

void ConditionTrainingConfig::check() const {
  std::vector<std::string> errs;
  if (steps < 0) errs.push_back("steps must be >= 0");
  if (batch_size < 1) errs.push_back("batch_size must be >= 1");
  if (!(learning_rate > 0)) errs.push_back("learning_rate must be > 0");
  if (probe_size < 1) errs.push_back("probe_size must be >= 1");
  if (!errs.empty()) {
    std::string msg = "condition config:";
    for (const auto& e : errs) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

namespace {

struct Prepared {
  std::vector<Image> x;  // model space
};

Prepared prepare(const std::vector<ConditionSample>& data) {
  Prepared p;
  for (const auto& d : data) {
    if (!d.image.same_shape(HyperNetwork<float>::fit_driver(d.driver, d.image.height, d.image.width)))
      throw ShapeError("train_condition: image and driver shapes differ");
    p.x.push_back(to_model_space(d.image));
  }
  return p;
}

Var conditioned_loss(Graph<float>& g, Binder<float>& bp, Binder<float>& cp, Binder<float>& ap,
                     const Denoiser<float>& base, const HyperNetwork<float>& hyper, const Image& x,
                     const ConditionSample& sample, int t, const Image& eps, const NoiseSchedule& s,
                     ConditionLoss form) {
  EpsGraphFn<float> fn = [&](Graph<float>&, Var v, int tt) {
    return hyper.forward(bp, cp, ap, base, v, tt, sample.tokens, sample.driver);
  };
  if (form == ConditionLoss::x0) return reconstruction_term(g, fn, x, t, eps, s);
  Var pred = fn(g, g.constant(forward_sample(x, t, eps, s)), t);
  require_finite(g, pred, "train_condition");
  return ops::mse(g, pred, g.constant(eps));
}

struct Draw {
  size_t index;
  int t;
  Image eps;
};

Draw draw(Rng& rng, const std::vector<Image>& x, const NoiseSchedule& s) {
  Draw d;
  d.index = static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(x.size())));
  d.t = static_cast<int>(rng.uniform_int(s.steps()));
  d.eps = normal_tensor<float>(x[d.index].channels(), x[d.index].height, x[d.index].width, rng);
  return d;
}

}  // namespace

double condition_probe_loss(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                            const std::vector<ConditionSample>& data, const NoiseSchedule& s, ConditionLoss form,
                            int count, std::uint64_t seed) {
  if (data.empty()) return 0.0;
  const Prepared p = prepare(data);
  Rng rng(seed);
  double total = 0;
  for (int k = 0; k < count; ++k) {
    const Draw d = draw(rng, p.x, s);
    Graph<float> g;
    Binder<float> bp(g, base.params()), cp(g, hyper.copy().params()), ap(g, hyper.aux());
    total += g.scalar(conditioned_loss(g, bp, cp, ap, base, hyper, p.x[d.index], data[d.index], d.t, d.eps, s, form));
  }
  return total / count;
}

ConditionLog train_condition(const Denoiser<float>& base, HyperNetwork<float>& hyper,
                             const std::vector<ConditionSample>& data, const NoiseSchedule& s,
                             const ConditionTrainingConfig& cfg) {
  cfg.check();
  if (data.empty()) throw std::invalid_argument("train_condition: no training samples");
  hyper.verify_base(base);
  const Prepared p = prepare(data);
  ConditionLog log;
  const std::uint64_t probe_seed = cfg.seed ^ 0x2545f4914f6cdd1dULL;
  log.initial_probe_loss = condition_probe_loss(base, hyper, data, s, cfg.loss, cfg.probe_size, probe_seed);

  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.learning_rate = cfg.learning_rate;
  Optimizer<float> copy_opt(hyper.copy().params(), oc), aux_opt(hyper.aux(), oc);
  ParameterSet<float> copy_grads = hyper.copy().params().zeros_like(), aux_grads = hyper.aux().zeros_like();
  Rng rng(cfg.seed);
  const int epoch = static_cast<int>(data.size());
  for (int step = 0; step < cfg.steps; ++step) {
    copy_grads.set_zero();
    aux_grads.set_zero();
    double batch_loss = 0;
    try {
      for (int b = 0; b < cfg.batch_size; ++b) {
        const Draw d = draw(rng, p.x, s);
        Graph<float> g;
        Binder<float> bp(g, base.params()), cp(g, hyper.copy().params(), &copy_grads), ap(g, hyper.aux(), &aux_grads);
        Var l = conditioned_loss(g, bp, cp, ap, base, hyper, p.x[d.index], data[d.index], d.t, d.eps, s, cfg.loss);
        l = ops::scale(g, l, 1.0f / static_cast<float>(cfg.batch_size));
        batch_loss += g.scalar(l);
        g.backward(l);
      }
    } catch (const NumericError& e) {
      throw NumericError("train_condition: divergence at step " + std::to_string(step) + " (" + e.what() + ")", step);
    }
    if (!std::isfinite(batch_loss) || batch_loss > 1e6)
      throw NumericError("train_condition: divergence at step " + std::to_string(step), step);
    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (const auto& [_, gr] : copy_grads) sq += static_cast<double>(gr.squaredNorm());
      for (const auto& [_, gr] : aux_grads) sq += static_cast<double>(gr.squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) {
        const float f = static_cast<float>(cfg.grad_clip / norm);
        for (auto& [_, gr] : copy_grads) gr *= f;
        for (auto& [_, gr] : aux_grads) gr *= f;
      }
    }
    if (cfg.cosine_decay) {
      const double lr = cosine_learning_rate(cfg.learning_rate, step, cfg.steps);
      copy_opt.set_learning_rate(lr);
      aux_opt.set_learning_rate(lr);
    }
    copy_opt.step(hyper.copy().params(), copy_grads);
    aux_opt.step(hyper.aux(), aux_grads);
    log.losses.push_back(batch_loss);
    if ((step + 1) % epoch == 0) {
      hyper.verify_base(base);
      ++log.base_checks;
    }
  }
  hyper.verify_base(base);
  ++log.base_checks;
  log.final_probe_loss = condition_probe_loss(base, hyper, data, s, cfg.loss, cfg.probe_size, probe_seed);
  return log;
}

std::string LocationProbeReport::text() const {
  std::ostringstream o;
  o << "mask location probe: " << wins << "/" << trials << " trials favour the moved mask (mean IoU moved "
    << mean_iou_moved << ", random " << mean_iou_random << ") " << (pass() ? "PASS" : "FAIL");
  return o.str();
}

namespace {

Mask shifted(const Mask& m, Index dy, Index dx) {
  Mask out = Mask::Zero(m.rows(), m.cols());
  for (Index y = 0; y < m.rows(); ++y)
    for (Index x = 0; x < m.cols(); ++x)
      if (m(y, x)) out(y + dy, x + dx) = 1;
  return out;
}

// Uniform in-bounds translation of the mask's bounding box.
std::pair<Index, Index> random_shift(const BBox& b, Index h, Index w, Rng& rng) {
  const Index ny = rng.uniform_int(h - b.h + 1), nx = rng.uniform_int(w - b.w + 1);
  return {ny - b.y, nx - b.x};
}

}  // namespace

LocationProbeReport mask_location_probe(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                                        const std::vector<SourceItem>& items, const std::vector<int>& tokens,
                                        const DriverConfig& driver_cfg, const NoiseSchedule& s, int trials,
                                        std::uint64_t seed) {
  std::vector<const SourceItem*> usable;
  for (const auto& it : items)
    if (!it.masks.empty()) usable.push_back(&it);
  if (usable.empty()) throw std::invalid_argument("mask_location_probe: no items with masks");
  Rng rng(seed);
  LocationProbeReport rep;
  const int t = s.steps() / 2;
  for (int k = 0; k < trials; ++k) {
    const SourceItem& item = *usable[static_cast<size_t>(k) % usable.size()];
    const Index h = item.image.height, w = item.image.width;
    const Mask& orig = item.masks[0].bitmap;
    const BBox box = tight_bbox(orig);
    const Index area = mask_area(orig);
    Mask moved = orig;
    for (int attempt = 0; attempt < 64; ++attempt) {
      const auto [dy, dx] = random_shift(box, h, w, rng);
      Mask cand = shifted(orig, dy, dx);
      if (mask_area((cand.array() * orig.array()).matrix()) * 4 <= area) {
        moved = std::move(cand);
        break;
      }
    }
    const auto [ry, rx] = random_shift(box, h, w, rng);
    const Mask random = shifted(orig, ry, rx);
    auto masks_b = item.masks;
    masks_b[0].bitmap = moved;
    const Image da = make_driver(item.image, item.masks, driver_cfg).pixels;
    const Image db = make_driver(item.image, masks_b, driver_cfg).pixels;
    const Image x0 = to_model_space(item.image);
    const Image eps = normal_tensor<float>(3, h, w, rng);
    const Image xt = forward_sample(x0, t, eps, s);
    const Image ea = hyper.predict(base, xt, t, tokens, da);
    const Image eb = hyper.predict(base, xt, t, tokens, db);
    const Vector<float> diff = (ea.data - eb.data).cwiseAbs().colwise().sum().transpose();
    std::vector<Index> order(static_cast<size_t>(diff.size()));
    std::iota(order.begin(), order.end(), 0);
    const Index top = std::max<Index>(1, static_cast<Index>(std::lround(0.05 * static_cast<double>(diff.size()))));
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return diff(a) > diff(b); });
    Mask region = Mask::Zero(h, w);
    for (Index i = 0; i < top; ++i) region(order[static_cast<size_t>(i)] / w, order[static_cast<size_t>(i)] % w) = 1;
    const double im = iou(region, moved).value, ir = iou(region, random).value;
    rep.mean_iou_moved += im / trials;
    rep.mean_iou_random += ir / trials;
    rep.wins += im > ir ? 1 : 0;
    ++rep.trials;
  }
  return rep;
}

Checkpoint hyper_checkpoint(const HyperNetwork<float>& hyper, const std::string& kind) {
  Checkpoint ck;
  ck.meta["kind"] = kind;
  ck.meta["base_hash"] = hyper.base_hash();
  ck.meta["sites"] = hyper.config().sites;
  ck.meta["hyper_hash"] = hyper.hash();
  ck.put_params("copy.", hyper.copy().params());
  ck.put_params("aux.", hyper.aux());
  return ck;
}

HyperNetwork<float> hyper_from_checkpoint(const Checkpoint& ck, const Denoiser<float>& base) {
  const auto recorded = ck.meta.at("base_hash").get<std::string>();
  if (recorded != base.hash())
    throw std::invalid_argument("hypernetwork checkpoint was trained against base " + recorded.substr(0, 12) +
                                ", not " + base.hash().substr(0, 12));
  HyperConfig cfg;
  cfg.sites = ck.meta.at("sites").get<std::vector<std::string>>();
  auto copy = Denoiser<float>::from_parts(base.config(), base.vocab(), ck.get_params<float>("copy."));
  auto h = HyperNetwork<float>::from_parts(cfg, std::move(copy), ck.get_params<float>("aux."), recorded);
  if (ck.meta.contains("hyper_hash") && ck.meta.at("hyper_hash").get<std::string>() != h.hash())
    throw std::runtime_error("hypernetwork checkpoint: hash mismatch (corrupted file?)");
  return h;
}

}  // namespace crackgen
