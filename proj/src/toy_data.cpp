#include "crackgen/toy_data.hpp"

#include "crackgen/text.hpp"

#include <algorithm>
#include <cmath>

namespace crackgen {

void ToyDatasetConfig::check() const {
  if (image_size < 16) throw std::invalid_argument("toy: image_size must be >= 16");
  if (n_defective < 0 || n_defect_free < 0) throw std::invalid_argument("toy: counts must be >= 0");
  if (thickness_min <= 0 || thickness_max < thickness_min) throw std::invalid_argument("toy: bad thickness range");
  if (length_min <= 0 || length_max < length_min || length_max > 1) throw std::invalid_argument("toy: bad length range");
  if (curvature_max < curvature_min || curvature_min < 0) throw std::invalid_argument("toy: bad curvature range");
  if (contrast <= 0 || contrast >= 0.3) throw std::invalid_argument("toy: contrast must be in (0, 0.3)");
  if (max_cracks < 1) throw std::invalid_argument("toy: max_cracks must be >= 1");
}

Image toy_background(int size, Rng& rng) {
  const double level = rng.uniform(0.5, 0.72);
  double tint[3];
  for (double& t : tint) t = rng.uniform(-0.04, 0.04);
  const double gx = rng.uniform(-0.05, 0.05), gy = rng.uniform(-0.05, 0.05);
  Matrix<double> tex = Matrix<double>::Zero(size, size);
  if (rng.uniform() < 0.5) {
    // louver stripes
    const bool horizontal = rng.uniform() < 0.5;
    const double period = size * rng.uniform(0.18, 0.4);
    const double amp = rng.uniform(0.07, 0.14), phase = rng.uniform(0, 2 * M_PI);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        tex(y, x) = amp * std::sin(2 * M_PI * (horizontal ? y : x) / period + phase);
  } else {
    const int n = 2 + static_cast<int>(rng.uniform_int(3));
    for (int k = 0; k < n; ++k) {
      const double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
      const double rx = size * rng.uniform(0.15, 0.4), ry = size * rng.uniform(0.15, 0.4);
      const double amp = rng.uniform(0.06, 0.12) * (rng.uniform() < 0.5 ? -1 : 1);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double d = std::hypot((x + 0.5 - cx) / rx, (y + 0.5 - cy) / ry);
          tex(y, x) += amp / (1 + std::exp((d - 1) * 6));
        }
    }
  }
  Image img(3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double base = level + tex(y, x) + gx * (x / double(size) - 0.5) + gy * (y / double(size) - 0.5);
      const double noise = 0.015 * rng.normal();
      for (int c = 0; c < 3; ++c)
        img(c, y, x) = static_cast<float>(std::clamp(base + tint[c] + noise, 0.32, 0.98));
    }
  return quantize8(img);
}

std::vector<Image> generic_textures(int n, int size, std::uint64_t seed) {
  if (n < 0 || size < 1) throw std::invalid_argument("generic_textures: bad size");
  Rng rng(seed);
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) {
    double level[3];
    for (double& l : level) l = rng.uniform(0.1, 0.9);
    const double angle = rng.uniform(0, M_PI), period = size * rng.uniform(0.15, 1.0);
    const double amp = rng.uniform(0.0, 0.3), phase = rng.uniform(0, 2 * M_PI);
    const double cx = rng.uniform(0, size), cy = rng.uniform(0, size), r = size * rng.uniform(0.1, 0.5);
    const double blob = rng.uniform(-0.3, 0.3), noise_sigma = rng.uniform(0.0, 0.05);
    Image img(3, size, size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = (x + 0.5) * std::cos(angle) + (y + 0.5) * std::sin(angle);
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy) / r;
        const double v = amp * std::sin(2 * M_PI * u / period + phase) + blob / (1 + std::exp((d - 1) * 4)) +
                         noise_sigma * rng.normal();
        for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(std::clamp(level[c] + v, 0.0, 1.0));
      }
    out.push_back(quantize8(img));
  }
  return out;
}

namespace {

using Path = std::vector<Eigen::Vector2d>;

Path jittered_line(Eigen::Vector2d a, Eigen::Vector2d b, int segments, double jitter, Rng& rng) {
  Path p;
  const Eigen::Vector2d d = b - a;
  const Eigen::Vector2d n(-d.y(), d.x());
  const Eigen::Vector2d nn = n.norm() > 0 ? Eigen::Vector2d(n / n.norm()) : Eigen::Vector2d(0, 0);
  for (int i = 0; i <= segments; ++i) {
    const double s = double(i) / segments;
    const double j = (i == 0 || i == segments) ? 0.0 : jitter * rng.uniform(-1, 1);
    p.push_back(a + s * d + j * nn);
  }
  return p;
}

// Segment through a random centre with the given direction and length, with
// the centre chosen so both ends stay inside the image.
std::pair<Eigen::Vector2d, Eigen::Vector2d> place(double angle, double length, int size, Rng& rng) {
  const Eigen::Vector2d half = 0.5 * length * Eigen::Vector2d(std::cos(angle), std::sin(angle));
  const double mx = std::abs(half.x()) + 1, my = std::abs(half.y()) + 1;
  const Eigen::Vector2d c(rng.uniform(mx, std::max(mx, size - mx)), rng.uniform(my, std::max(my, size - my)));
  return {c - half, c + half};
}

double deg(double d) { return d * M_PI / 180.0; }

}  // namespace

std::vector<Path> toy_crack_paths(int class_id, const ToyDatasetConfig& cfg, Rng& rng) {
  const int size = cfg.image_size;
  const double length = size * rng.uniform(cfg.length_min, cfg.length_max);
  const double jitter = 0.04 * length;
  switch (class_id) {
    case 1: {  // horizontal
      auto [a, b] = place(deg(rng.uniform(-12, 12)), length, size, rng);
      return {jittered_line(a, b, 6, jitter, rng)};
    }
    case 2: {  // vertical
      auto [a, b] = place(deg(rng.uniform(78, 102)), length, size, rng);
      return {jittered_line(a, b, 6, jitter, rng)};
    }
    case 3: {  // diagonal
      const double angle = rng.uniform() < 0.5 ? rng.uniform(33, 57) : rng.uniform(123, 147);
      auto [a, b] = place(deg(angle), length, size, rng);
      return {jittered_line(a, b, 6, jitter, rng)};
    }
    case 4: {  // curved: quadratic Bezier arc
      auto [a, b] = place(rng.uniform(0, M_PI), length, size, rng);
      const Eigen::Vector2d d = b - a;
      Eigen::Vector2d n(-d.y(), d.x());
      n /= n.norm();
      const double sag = length * rng.uniform(cfg.curvature_min, cfg.curvature_max) * (rng.uniform() < 0.5 ? -1 : 1);
      const Eigen::Vector2d ctrl = 0.5 * (a + b) + 2 * sag * n;
      Path p;
      for (int i = 0; i <= 10; ++i) {
        const double s = i / 10.0;
        Eigen::Vector2d q = (1 - s) * (1 - s) * a + 2 * s * (1 - s) * ctrl + s * s * b;
        q = q.cwiseMax(Eigen::Vector2d(0.5, 0.5)).cwiseMin(Eigen::Vector2d(size - 0.5, size - 0.5));
        p.push_back(q);
      }
      return {p};
    }
    case 5: {  // branched
      auto [a, b] = place(rng.uniform(0, M_PI), length, size, rng);
      std::vector<Path> paths = {jittered_line(a, b, 6, jitter, rng)};
      const int branches = 1 + static_cast<int>(rng.uniform_int(2));
      const double main_angle = std::atan2(b.y() - a.y(), b.x() - a.x());
      for (int k = 0; k < branches; ++k) {
        const Eigen::Vector2d root = a + rng.uniform(0.3, 0.7) * (b - a);
        const double ang = main_angle + deg(rng.uniform(30, 60)) * (rng.uniform() < 0.5 ? -1 : 1);
        const double bl = length * rng.uniform(0.3, 0.5);
        Eigen::Vector2d tip = root + bl * Eigen::Vector2d(std::cos(ang), std::sin(ang));
        tip = tip.cwiseMax(Eigen::Vector2d(0.5, 0.5)).cwiseMin(Eigen::Vector2d(size - 0.5, size - 0.5));
        paths.push_back(jittered_line(root, tip, 3, 0.5 * jitter, rng));
      }
      return paths;
    }
    default:
      throw std::invalid_argument("toy: unknown class id " + std::to_string(class_id));
  }
}

Mask rasterize_paths(const std::vector<Path>& paths, double radius, Index height, Index width) {
  Mask m = Mask::Zero(height, width);
  for (const auto& path : paths)
    for (size_t i = 0; i + 1 < path.size(); ++i) {
      const Eigen::Vector2d a = path[i], b = path[i + 1], d = b - a;
      const double len2 = std::max(d.squaredNorm(), 1e-12);
      const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.x(), b.x()) - radius - 1)));
      const Index x1 = std::min<Index>(width - 1, static_cast<Index>(std::ceil(std::max(a.x(), b.x()) + radius + 1)));
      const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min(a.y(), b.y()) - radius - 1)));
      const Index y1 = std::min<Index>(height - 1, static_cast<Index>(std::ceil(std::max(a.y(), b.y()) + radius + 1)));
      for (Index y = y0; y <= y1; ++y)
        for (Index x = x0; x <= x1; ++x) {
          const Eigen::Vector2d p(x + 0.5, y + 0.5);
          const double s = std::clamp((p - a).dot(d) / len2, 0.0, 1.0);
          if ((a + s * d - p).norm() <= radius) m(y, x) = 1;
        }
    }
  return m;
}

double local_background_median(const Matrix<double>& gray, const Mask& mask, Index y, Index x, int r) {
  for (;; ++r) {
    std::vector<double> vals;
    for (Index yy = std::max<Index>(0, y - r); yy <= std::min<Index>(gray.rows() - 1, y + r); ++yy)
      for (Index xx = std::max<Index>(0, x - r); xx <= std::min<Index>(gray.cols() - 1, x + r); ++xx)
        if (!mask(yy, xx)) vals.push_back(gray(yy, xx));
    if (vals.empty()) {
      if (r > gray.rows() + gray.cols()) throw std::invalid_argument("local_background_median: no background");
      continue;
    }
    std::sort(vals.begin(), vals.end());
    const size_t n = vals.size();
    return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
  }
}

ToyDataset generate_toy_dataset(const ToyDatasetConfig& cfg) {
  cfg.check();
  Rng master(cfg.seed);
  ToyDataset out;
  const int size = cfg.image_size;
  const int n_classes = static_cast<int>(crack_class_names().size());
  for (int i = 0; i < cfg.n_defective; ++i) {
    Rng rng(master.split());
    Image img = toy_background(size, rng);
    const int n_cracks = 1 + static_cast<int>(rng.uniform_int(cfg.max_cracks));
    std::vector<MaskRegion> regions;
    for (int k = 0; k < n_cracks; ++k) {
      const int cls = 1 + static_cast<int>(rng.uniform_int(n_classes));
      const double thick = rng.uniform(cfg.thickness_min, cfg.thickness_max);
      const auto paths = toy_crack_paths(cls, cfg, rng);
      Mask m = rasterize_paths(paths, std::max(0.5, thick / 2) + 1e-9, size, size);
      for (auto& prev : regions) prev.bitmap = (prev.bitmap.array() * (1 - m.array())).matrix();  // later wins
      regions.push_back({m, cls});
    }
    std::erase_if(regions, [](const MaskRegion& r) { return mask_area(r.bitmap) == 0; });
    Mask all = Mask::Zero(size, size);
    for (const auto& r : regions) all = all.cwiseMax(r.bitmap);
    const Matrix<double> gray = grayscale(img).cast<double>();
    Image painted = img;
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x)
        if (all(y, x)) {
          const double target = local_background_median(gray, all, y, x) - cfg.contrast - rng.uniform(0, 0.03);
          const float v = static_cast<float>(std::floor(std::max(target, 0.0) * 255.0) / 255.0);
          for (int c = 0; c < 3; ++c) painted(c, y, x) = v;
        }
    const int id = cfg.first_defective_id + i;
    char name[32];
    std::snprintf(name, sizeof(name), "defective_%05d.png", id);
    out.defective.add_image(std::move(painted), name, regions, id);
  }
  Rng free_master(cfg.seed ^ 0x5eedf4eeULL);  // independent of n_defective
  for (int i = 0; i < cfg.n_defect_free; ++i) {
    Rng rng(free_master.split());
    const int id = cfg.first_defect_free_id + i;
    char name[32];
    std::snprintf(name, sizeof(name), "free_%05d.png", id);
    out.defect_free.add_image(toy_background(size, rng), name, {}, id);
  }
  return out;
}

}  // namespace crackgen
