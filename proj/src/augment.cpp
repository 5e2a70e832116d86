#include "crackgen/augment.hpp"

#include "crackgen/image_io.hpp"

#include <cmath>
#include <fstream>

namespace crackgen {

AugmentParams sample_augment_params(const AugmentConfig& cfg, Index height, Index width, Rng& rng) {
  AugmentParams p;
  p.quarter_turns = cfg.quarter_turns && height == width ? static_cast<int>(rng.uniform_int(4)) : 0;
  p.zoom = rng.uniform(1.0, cfg.max_zoom);
  const double hw = width / (2 * p.zoom), hh = height / (2 * p.zoom);
  p.crop_cx = rng.uniform(hw, width - hw);
  p.crop_cy = rng.uniform(hh, height - hh);
  p.angle_deg = rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg);
  p.tx = rng.uniform(-cfg.max_shift, cfg.max_shift) * width;
  p.ty = rng.uniform(-cfg.max_shift, cfg.max_shift) * height;
  p.contrast = rng.uniform(1 - cfg.contrast_range, 1 + cfg.contrast_range);
  p.noise_sigma = rng.uniform(0, cfg.max_noise);
  p.noise_seed = rng.split();
  return p;
}

namespace {

Index reflect(Index i, Index n) {
  const Index period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// Source pixel for every output pixel after quarter turns and the affine map.
struct Sampler {
  Index in_h, in_w, out_h, out_w;
  std::vector<Index> src;  // out pixel -> in pixel index (y * in_w + x)
};

Sampler make_sampler(Index h, Index w, const AugmentParams& p) {
  const int k = ((p.quarter_turns % 4) + 4) % 4;
  const Index th = k % 2 ? w : h, tw = k % 2 ? h : w;  // size after quarter turns
  // (ty, tx) in turned frame -> (y, x) in source, rotating counter-clockwise.
  auto unturn = [&](Index y, Index x) -> std::pair<Index, Index> {
    switch (k) {
      case 1: return {x, w - 1 - y};
      case 2: return {h - 1 - y, w - 1 - x};
      case 3: return {h - 1 - x, y};
      default: return {y, x};
    }
  };
  Sampler s{h, w, th, tw, std::vector<Index>(static_cast<size_t>(th * tw))};
  const double a = p.angle_deg * M_PI / 180.0, ca = std::cos(a), sa = std::sin(a);
  const double cx = tw / 2.0, cy = th / 2.0;
  const double ccx = p.crop_cx < 0 ? cx : p.crop_cx, ccy = p.crop_cy < 0 ? cy : p.crop_cy;
  for (Index y = 0; y < th; ++y)
    for (Index x = 0; x < tw; ++x) {
      const double dx = x + 0.5 - cx - p.tx, dy = y + 0.5 - cy - p.ty;
      const double px = (ca * dx + sa * dy) / p.zoom + ccx;
      const double py = (-sa * dx + ca * dy) / p.zoom + ccy;
      const Index sy = reflect(static_cast<Index>(std::floor(py)), th);
      const Index sx = reflect(static_cast<Index>(std::floor(px)), tw);
      auto [oy, ox] = unturn(sy, sx);
      s.src[static_cast<size_t>(y * tw + x)] = oy * w + ox;
    }
  return s;
}

}  // namespace

AugmentedSample apply_augment(const Image& image, const std::vector<MaskRegion>& masks, const AugmentParams& p) {
  if (image.empty()) throw ShapeError("augment: empty image");
  if (p.zoom < 1.0) throw std::invalid_argument("augment: zoom must be >= 1");
  const Sampler s = make_sampler(image.height, image.width, p);
  AugmentedSample out;
  out.params = p;
  out.image = Image(image.channels(), s.out_h, s.out_w);
  for (Index q = 0; q < s.out_h * s.out_w; ++q) out.image.data.col(q) = image.data.col(s.src[static_cast<size_t>(q)]);
  for (const auto& m : masks) {
    if (m.bitmap.rows() != image.height || m.bitmap.cols() != image.width)
      throw ShapeError("augment: mask size differs from image");
    MaskRegion r{Mask(s.out_h, s.out_w), m.class_id};
    for (Index y = 0; y < s.out_h; ++y)
      for (Index x = 0; x < s.out_w; ++x) {
        const Index src = s.src[static_cast<size_t>(y * s.out_w + x)];
        r.bitmap(y, x) = m.bitmap(src / image.width, src % image.width);
      }
    out.masks.push_back(std::move(r));
  }
  if (p.contrast != 1.0) {
    const Vector<float> mean = out.image.data.rowwise().mean();
    const float c = static_cast<float>(p.contrast);
    out.image.data = ((c * out.image.data).colwise() + (1.f - c) * mean).eval();
  }
  if (p.noise_sigma > 0) {
    Rng rng(p.noise_seed);
    out.image.data += static_cast<float>(p.noise_sigma) * normal_matrix<float>(out.image.channels(), out.image.pixels(), rng);
  }
  out.image.data = out.image.data.array().max(0.f).min(1.f).matrix();
  return out;
}

AugmentResult augment(const Image& image, const std::vector<MaskRegion>& masks, std::uint64_t seed,
                      const AugmentConfig& cfg) {
  if (image.empty()) throw ShapeError("augment: empty image");
  Rng rng(seed);
  AugmentResult res;
  for (int v = 0; v < cfg.variants; ++v) {
    bool accepted = false;
    for (int attempt = 0; attempt <= cfg.max_retries && !accepted; ++attempt) {
      AugmentedSample s = apply_augment(image, masks, sample_augment_params(cfg, image.height, image.width, rng));
      bool ok = true;
      for (size_t i = 0; i < masks.size(); ++i)
        if (mask_area(masks[i].bitmap) > 0 && mask_area(s.masks[i].bitmap) == 0) ok = false;
      if (ok) {
        res.variants.push_back(std::move(s));
        accepted = true;
      }
    }
    if (!accepted)
      res.warnings.push_back("variant " + std::to_string(v) + " skipped: every draw erased a mask after " +
                             std::to_string(cfg.max_retries) + " retries");
  }
  return res;
}

AnnotatedDataset augment_dataset(const AnnotatedDataset& ds, std::uint64_t seed, const AugmentConfig& cfg) {
  AnnotatedDataset out = ds;
  Rng rng(seed);
  for (const auto& im : ds.images) {
    if (im.pixels.empty()) throw std::invalid_argument("augment_dataset: image " + std::to_string(im.id) + " has no pixels");
    auto res = augment(im.pixels, ds.regions(im.id), rng.split(), cfg);
    int k = 0;
    for (auto& v : res.variants) {
      const std::string stem = im.file_name.substr(0, im.file_name.rfind('.'));
      out.add_image(std::move(v.image), stem + "_aug" + std::to_string(k++) + ".png", v.masks);
    }
  }
  return out;
}

SadfStrategy parse_sadf_strategy(const std::string& s) {
  if (s == "random_perturbed") return SadfStrategy::random_perturbed;
  if (s == "external") return SadfStrategy::external;
  if (s == "generated") return SadfStrategy::generated;
  throw std::invalid_argument("unknown SADF strategy '" + s + "'");
}

std::string to_string(SadfStrategy s) {
  switch (s) {
    case SadfStrategy::random_perturbed: return "random_perturbed";
    case SadfStrategy::external: return "external";
    case SadfStrategy::generated: return "generated";
  }
  return "?";
}

Mask perturb_mask(const Mask& mask, double magnitude, Rng& rng) {
  if (magnitude == 0.0) return mask;
  const BBox box = tight_bbox(mask);
  if (box.area() == 0) return mask;
  const Index h = mask.rows(), w = mask.cols();
  for (int attempt = 0; attempt < 5; ++attempt) {
    const double a = magnitude * 8.0 * M_PI / 180.0 * rng.uniform(-1, 1);
    const double scale = 1 + magnitude * 0.08 * rng.uniform(-1, 1);
    const double want_dx = magnitude * 0.1 * w * rng.uniform(-1, 1), want_dy = magnitude * 0.1 * h * rng.uniform(-1, 1);
    const double cx = box.x + box.w / 2.0, cy = box.y + box.h / 2.0, ca = std::cos(a), sa = std::sin(a);
    Mask moved = Mask::Zero(h, w);
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const Index sx = static_cast<Index>(std::floor((ca * dx + sa * dy) / scale + cx));
        const Index sy = static_cast<Index>(std::floor((-sa * dx + ca * dy) / scale + cy));
        if (sx >= 0 && sx < w && sy >= 0 && sy < h) moved(y, x) = mask(sy, sx);
      }
    const BBox mb = tight_bbox(moved);
    if (mb.area() == 0) continue;
    const Index dx = std::clamp<Index>(std::lround(want_dx), -mb.x, w - (mb.x + mb.w));
    const Index dy = std::clamp<Index>(std::lround(want_dy), -mb.y, h - (mb.y + mb.h));
    Mask shifted = Mask::Zero(h, w);
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        if (moved(y, x)) shifted(y + dy, x + dx) = 1;
    // Boundary jitter: toggle equal numbers of inner and outer boundary
    // pixels, then pull the area back within 10% of the source area.
    auto boundary = [&](const Mask& m, bool inner) {
      std::vector<std::pair<Index, Index>> pts;
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          if ((m(y, x) != 0) != inner) continue;
          bool edge = false;
          for (auto [oy, ox] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
            const Index yy = y + oy, xx = x + ox;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            edge = edge || ((m(yy, xx) != 0) != inner);
          }
          if (edge) pts.emplace_back(y, x);
        }
      return pts;
    };
    auto pick = [&](std::vector<std::pair<Index, Index>>& pts) {
      const auto k = static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(pts.size())));
      std::swap(pts[k], pts.back());
      auto v = pts.back();
      pts.pop_back();
      return v;
    };
    Mask out = shifted;
    auto in_pts = boundary(shifted, true), out_pts = boundary(shifted, false);
    const auto n = static_cast<size_t>(std::lround(magnitude * 0.06 * static_cast<double>(std::min(in_pts.size(), out_pts.size()))));
    for (size_t k = 0; k < n; ++k) {
      auto [y0, x0] = pick(in_pts);
      out(y0, x0) = 0;
      auto [y1, x1] = pick(out_pts);
      out(y1, x1) = 1;
    }
    const double target = static_cast<double>(mask_area(mask));
    for (int guard = 0; guard < 4 * h * w; ++guard) {
      const double a = static_cast<double>(mask_area(out));
      if (a > 1.1 * target) {
        auto pts = boundary(out, true);
        if (pts.size() <= 1) break;
        auto [y, x] = pick(pts);
        out(y, x) = 0;
      } else if (a < 0.9 * target) {
        auto pts = boundary(out, false);
        if (pts.empty()) break;
        auto [y, x] = pick(pts);
        out(y, x) = 1;
      } else {
        break;
      }
    }
    if (mask_area(out) > 0) return out;
  }
  return mask;
}

std::vector<PoolMask> mask_pool(const AnnotatedDataset& ds) {
  std::vector<PoolMask> pool;
  for (const auto& a : ds.annotations)
    pool.push_back({{a.mask, a.category_id},
                    "image " + std::to_string(a.image_id) + " / annotation " + std::to_string(a.id)});
  return pool;
}

std::vector<PoolMask> load_external_masks(const std::filesystem::path& dir) {
  std::ifstream f(dir / "masks.json");
  if (!f) throw std::runtime_error("external masks: cannot read " + (dir / "masks.json").string());
  const Json j = Json::parse(f);
  std::vector<PoolMask> pool;
  for (const auto& e : j) {
    const std::string file = e.at("file").get<std::string>();
    Mask m = read_mask_png(dir / file);
    m = (m.array() != 0).cast<std::uint8_t>().matrix();
    pool.push_back({{std::move(m), e.at("class_id").get<int>()}, file});
  }
  return pool;
}

std::vector<SadfPair> build_sadf(const AnnotatedDataset& defect_free, const std::vector<PoolMask>& pool,
                                 const SadfConfig& cfg, std::uint64_t seed) {
  if (cfg.strategy == SadfStrategy::generated)
    throw OutOfScopeError("SADF strategy 'generated' (masks from a second network) is not provided");
  if (pool.empty()) throw std::invalid_argument("build_sadf: empty mask pool");
  if (defect_free.images.empty()) throw std::invalid_argument("build_sadf: no defect-free images");
  if (cfg.masks_per_image < 1 || cfg.pairs_per_image < 1) throw std::invalid_argument("build_sadf: counts must be >= 1");
  if (cfg.perturbation < 0) throw std::invalid_argument("build_sadf: perturbation must be >= 0");
  Rng rng(seed);
  std::vector<SadfPair> out;
  for (const auto& im : defect_free.images) {
    if (im.pixels.empty()) throw std::invalid_argument("build_sadf: image " + std::to_string(im.id) + " has no pixels");
    for (int p = 0; p < cfg.pairs_per_image; ++p) {
      SadfPair pair{im.id, im.pixels, {}, "image " + std::to_string(im.id) + " pair " + std::to_string(p) + ":"};
      for (int k = 0; k < cfg.masks_per_image; ++k) {
        const auto idx = static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(pool.size())));
        const PoolMask& src = pool[idx];
        if (src.region.bitmap.rows() != im.height || src.region.bitmap.cols() != im.width)
          throw std::invalid_argument("build_sadf: mask '" + src.source + "' is out of bounds for image " +
                                      std::to_string(im.id));
        MaskRegion r = src.region;
        if (cfg.strategy == SadfStrategy::random_perturbed) r.bitmap = perturb_mask(r.bitmap, cfg.perturbation, rng);
        pair.masks.push_back(std::move(r));
        pair.provenance += " pool[" + std::to_string(idx) + "] (" + src.source + ")";
      }
      pair.provenance += " strategy " + to_string(cfg.strategy);
      out.push_back(std::move(pair));
    }
  }
  return out;
}

}  // namespace crackgen
