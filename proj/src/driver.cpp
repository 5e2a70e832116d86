#include "crackgen/driver.hpp"

#include "crackgen/image_io.hpp"
#include "crackgen/ops.hpp"
#include "crackgen/optim.hpp"
#include "crackgen/params.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace crackgen {

std::map<int, Rgb8> DriverConfig::default_palette() {
  return {{1, {255, 0, 0}}, {2, {0, 255, 0}}, {3, {0, 0, 255}}, {4, {255, 255, 0}}, {5, {0, 255, 255}}};
}

void DriverConfig::check() const {
  std::vector<std::string> errs;
  if (downscale_factor < 1) errs.push_back("downscale_factor must be >= 1");
  if (threshold_window < 3 || threshold_window % 2 == 0) errs.push_back("threshold_window must be odd and >= 3");
  if (background_ceiling < 0 || background_ceiling > 255) errs.push_back("background_ceiling must be in [0,255]");
  for (const auto& [id, c] : palette) {
    if (*std::max_element(c.begin(), c.end()) <= 100)
      errs.push_back("palette colour for class " + std::to_string(id) + " needs a channel above 100");
    for (int v : c)
      if (v < 0 || v > 255) errs.push_back("palette colour for class " + std::to_string(id) + " outside [0,255]");
    if (*std::max_element(c.begin(), c.end()) <= background_ceiling)
      errs.push_back("palette colour for class " + std::to_string(id) + " is not above the background ceiling");
  }
  for (auto a = palette.begin(); a != palette.end(); ++a)
    for (auto b = std::next(a); b != palette.end(); ++b)
      if (a->second == b->second)
        errs.push_back("palette colours of classes " + std::to_string(a->first) + " and " + std::to_string(b->first) +
                       " coincide");
  if (!errs.empty()) {
    std::string msg = "driver config invalid:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
}

std::string DriverConfig::hash() const {
  std::ostringstream s;
  s.precision(17);
  s << "driver|" << downscale_factor << "|" << threshold_window << "|" << threshold_offset << "|" << background_ceiling;
  for (const auto& [id, c] : palette) s << "|" << id << ":" << c[0] << "," << c[1] << "," << c[2];
  return sha256_hex(s.str());
}

namespace {

Index mirror(Index i, Index n) {
  const Index period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

Mask extract_topology(const Image& image, const DriverConfig& cfg) {
  cfg.check();
  if (image.empty() || image.height == 0 || image.width == 0) throw ShapeError("extract_topology: empty image");
  if (image.channels() != 3) throw ShapeError("extract_topology: expected RGB, got " + shape_string(image));
  const Index f = cfg.downscale_factor, H = image.height, W = image.width;
  const Index h = (H + f - 1) / f, w = (W + f - 1) / f;
  if (cfg.threshold_window > std::min(h, w))
    throw std::invalid_argument("extract_topology: window " + std::to_string(cfg.threshold_window) +
                                " larger than the downscaled image (" + std::to_string(h) + "x" + std::to_string(w) + ")");
  // Block sums of 8-bit levels are exact integers.
  Matrix<double> gray(h, w);
  for (Index by = 0; by < h; ++by)
    for (Index bx = 0; bx < w; ++bx) {
      std::int64_t sum[3] = {0, 0, 0};
      for (Index dy = 0; dy < f; ++dy)
        for (Index dx = 0; dx < f; ++dx) {
          const Index y = mirror(by * f + dy, H), x = mirror(bx * f + dx, W);
          for (int c = 0; c < 3; ++c)
            sum[c] += std::lround(std::clamp(static_cast<double>(image(c, y, x)), 0.0, 1.0) * 255.0);
        }
      const double n = static_cast<double>(f * f);
      gray(by, bx) = 0.299 * (sum[0] / n) + 0.587 * (sum[1] / n) + 0.114 * (sum[2] / n);
    }
  const Index r = cfg.threshold_window / 2;
  const double offset = cfg.threshold_offset * 255.0;
  Mask small(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (Index dy = -r; dy <= r; ++dy)
        for (Index dx = -r; dx <= r; ++dx)
          acc += gray(std::clamp<Index>(y + dy, 0, h - 1), std::clamp<Index>(x + dx, 0, w - 1));
      const double mean = acc / static_cast<double>((2 * r + 1) * (2 * r + 1));
      small(y, x) = gray(y, x) > mean + offset ? 255 : 0;
    }
  Mask out(H, W);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) out(y, x) = small(y / f, x / f);
  return out;
}

DriverImage compose_driver(const Mask& topology, const std::vector<MaskRegion>& masks, const DriverConfig& cfg,
                           const std::string& source_id) {
  cfg.check();
  const Index H = topology.rows(), W = topology.cols();
  DriverImage d;
  d.source_id = source_id;
  d.config_hash = cfg.hash();
  d.pixels = Image(3, H, W);
  const float dim = static_cast<float>(cfg.background_ceiling) / 255.f;
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const std::uint8_t t = topology(y, x);
      if (t != 0 && t != 255) throw std::invalid_argument("compose_driver: topology must be binary {0,255}");
      const float v = t ? dim : 0.f;
      for (int c = 0; c < 3; ++c) d.pixels(c, y, x) = v;
    }
  Mask later = Mask::Zero(H, W);
  std::vector<MaskRegion> resolved(masks.size());
  for (size_t i = masks.size(); i-- > 0;) {
    const MaskRegion& m = masks[i];
    if (m.bitmap.rows() != H || m.bitmap.cols() != W)
      throw ShapeError("compose_driver: mask " + std::to_string(i) + " is out of bounds");
    if (!cfg.palette.count(m.class_id))
      throw std::invalid_argument("compose_driver: unknown class id " + std::to_string(m.class_id));
    resolved[i] = {Mask::Zero(H, W), m.class_id};
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        if (m.bitmap(y, x) && !later(y, x)) {
          resolved[i].bitmap(y, x) = 1;
          later(y, x) = 1;
        }
  }
  for (auto& r : resolved) {
    if (mask_area(r.bitmap) == 0) continue;
    const Rgb8 col = cfg.palette.at(r.class_id);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        if (r.bitmap(y, x))
          for (int c = 0; c < 3; ++c) d.pixels(c, y, x) = static_cast<float>(col[static_cast<size_t>(c)]) / 255.f;
    d.regions.push_back(std::move(r));
  }
  return d;
}

DriverImage make_driver(const Image& image, const std::vector<MaskRegion>& masks, const DriverConfig& cfg,
                        const std::string& source_id) {
  return compose_driver(extract_topology(image, cfg), masks, cfg, source_id);
}

DriverImage make_inpaint_condition(const Image& image, const std::vector<MaskRegion>& masks, const DriverConfig& cfg,
                                   const std::string& source_id) {
  if (image.channels() != 3) throw ShapeError("inpaint condition: expected RGB");
  // Reuse the overlap resolution of compose_driver, then restore the background.
  DriverImage d = compose_driver(Mask::Zero(image.height, image.width), masks, cfg, source_id);
  Mask any = Mask::Zero(image.height, image.width);
  for (const auto& r : d.regions) any = any.cwiseMax(r.bitmap);
  for (Index y = 0; y < image.height; ++y)
    for (Index x = 0; x < image.width; ++x)
      if (!any(y, x))
        for (int c = 0; c < 3; ++c) d.pixels(c, y, x) = image(c, y, x);
  d.config_hash = sha256_hex("inpaint|" + cfg.hash());
  return d;
}

std::vector<std::string> driver_violations(const DriverImage& d, const DriverConfig& cfg) {
  std::vector<std::string> out;
  const Index H = d.pixels.height, W = d.pixels.width;
  Mask owner = Mask::Zero(H, W);
  for (size_t i = 0; i < d.regions.size(); ++i) {
    const auto& r = d.regions[i];
    if (r.bitmap.rows() != H || r.bitmap.cols() != W) {
      out.push_back("region " + std::to_string(i) + " has the wrong size");
      continue;
    }
    const Rgb8 col = cfg.palette.at(r.class_id);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        if (!r.bitmap(y, x)) continue;
        if (owner(y, x)) out.push_back("regions overlap at (" + std::to_string(y) + "," + std::to_string(x) + ")");
        owner(y, x) = static_cast<std::uint8_t>(i + 1);
        for (int c = 0; c < 3; ++c)
          if (d.pixels(c, y, x) != static_cast<float>(col[static_cast<size_t>(c)]) / 255.f)
            out.push_back("pixel (" + std::to_string(y) + "," + std::to_string(x) + ") differs from palette");
      }
  }
  const double ceiling = cfg.background_ceiling / 255.0 + 1e-6;
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      if (!owner(y, x))
        for (int c = 0; c < 3; ++c)
          if (d.pixels(c, y, x) > ceiling) {
            out.push_back("background pixel (" + std::to_string(y) + "," + std::to_string(x) + ") above ceiling");
            break;
          }
  return out;
}

void save_driver(const DriverImage& d, const std::filesystem::path& png_path) {
  write_png(d.pixels, png_path);
  Json j;
  j["source_id"] = d.source_id;
  j["config_hash"] = d.config_hash;
  j["height"] = d.pixels.height;
  j["width"] = d.pixels.width;
  j["regions"] = Json::array();
  for (const auto& r : d.regions) j["regions"].push_back({{"class_id", r.class_id}, {"counts", encode_rle(r.bitmap)}});
  std::ofstream f(std::filesystem::path(png_path).replace_extension(".json"));
  f << j.dump(1) << "\n";
}

DriverImage load_driver(const std::filesystem::path& png_path) {
  DriverImage d;
  d.pixels = from_image8(read_png(png_path));
  std::ifstream f(std::filesystem::path(png_path).replace_extension(".json"));
  if (!f) throw std::runtime_error("driver: missing sidecar for " + png_path.string());
  const Json j = Json::parse(f);
  d.source_id = j.at("source_id").get<std::string>();
  d.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& r : j.at("regions"))
    d.regions.push_back({decode_rle(r.at("counts").get<std::vector<int>>(), d.pixels.height, d.pixels.width),
                         r.at("class_id").get<int>()});
  return d;
}

std::string OriginProbeReport::text() const {
  std::ostringstream s;
  s << "origin probe: held-out accuracy " << accuracy << " (train " << train_accuracy << ", n_train " << n_train
    << ", n_test " << n_test << ", threshold " << threshold << ") " << (pass ? "PASS" : "FAIL");
  return s.str();
}

namespace {

struct ProbeNet {
  ParameterSet<float> params;

  ProbeNet(int hidden, Rng& rng) {
    params.add("c1.w", fan_in_uniform<float>(hidden, 27, 27, rng));
    params.add("c1.b", Matrix<float>::Zero(hidden, 1));
    params.add("c2.w", fan_in_uniform<float>(hidden, 9 * hidden, 9 * hidden, rng));
    params.add("c2.b", Matrix<float>::Zero(hidden, 1));
    params.add("fc.w", fan_in_uniform<float>(1, hidden, hidden, rng));
    params.add("fc.b", Matrix<float>::Zero(1, 1));
  }

  Var logit(Binder<float>& p, Var x) const {
    auto& g = p.graph();
    Var h = ops::relu(g, ops::conv2d(g, x, p("c1.w"), p("c1.b"), 3));
    if (g.value(h).height % 2 == 0 && g.value(h).width % 2 == 0) h = ops::avg_pool(g, h, 2);
    h = ops::relu(g, ops::conv2d(g, h, p("c2.w"), p("c2.b"), 3));
    return ops::linear(g, p("fc.w"), ops::mean_columns(g, h), p("fc.b"));
  }
};

}  // namespace

OriginProbeReport driver_origin_blindness_check(const DriverConfig& cfg, const std::vector<SourceItem>& defective,
                                                const std::vector<SourceItem>& defect_free,
                                                const OriginProbeConfig& probe) {
  if (defective.size() < 10 || defect_free.size() < 10)
    throw std::invalid_argument("origin probe: need at least 10 items per set");
  std::vector<std::pair<Image, float>> items;
  for (const auto& s : defective) items.emplace_back(make_driver(s.image, s.masks, cfg).pixels, 1.f);
  for (const auto& s : defect_free) items.emplace_back(make_driver(s.image, s.masks, cfg).pixels, 0.f);

  Rng rng(probe.seed);
  std::vector<size_t> order(items.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
  const size_t n_test = std::max<size_t>(2, static_cast<size_t>(probe.test_fraction * static_cast<double>(items.size())));
  const std::vector<size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());

  ProbeNet net(probe.hidden, rng);
  OptimizerConfig oc;
  oc.kind = OptimizerKind::adam;
  oc.learning_rate = probe.learning_rate;
  Optimizer<float> opt(net.params, oc);
  ParameterSet<float> grads = net.params.zeros_like();
  for (int e = 0; e < probe.epochs; ++e) {
    for (size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
    for (size_t i : train) {
      grads.set_zero();
      Graph<float> g;
      Binder<float> p(g, net.params, &grads);
      Var l = ops::bce_with_logits(g, net.logit(p, g.constant(items[i].first)), items[i].second);
      g.backward(l);
      opt.step(net.params, grads);
    }
  }
  auto accuracy = [&](const std::vector<size_t>& idx) {
    int correct = 0;
    for (size_t i : idx) {
      Graph<float> g;
      Binder<float> p(g, net.params);
      const float z = g.scalar(net.logit(p, g.constant(items[i].first)));
      correct += ((z > 0) == (items[i].second > 0.5f)) ? 1 : 0;
    }
    return idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(idx.size());
  };
  OriginProbeReport r;
  r.n_train = static_cast<int>(train.size());
  r.n_test = static_cast<int>(test.size());
  r.accuracy = accuracy(test);
  r.train_accuracy = accuracy(train);
  r.threshold = 0.5 + probe.margin;
  r.pass = r.accuracy <= r.threshold;
  return r;
}

}  // namespace crackgen
