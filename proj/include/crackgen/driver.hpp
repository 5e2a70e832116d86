#pragma once

#include "crackgen/dataset.hpp"

#include <array>
#include <map>

namespace crackgen {

using Rgb8 = std::array<int, 3>;

/// Topological-driver construction settings.
struct DriverConfig {
  int downscale_factor = 8;
  int threshold_window = 7;        // odd, >= 3
  double threshold_offset = 5.0 / 255.0;
  int background_ceiling = 50;     // topology foreground level, 0..255
  std::map<int, Rgb8> palette = default_palette();

  static std::map<int, Rgb8> default_palette();

  /// Throws std::invalid_argument listing every violated constraint.
  void check() const;
  std::string hash() const;
};

/// RGB conditioning image in [0,1]: dimmed topology plus palette masks.
struct DriverImage {
  Image pixels;
  std::vector<MaskRegion> regions;  // disjoint after overlap resolution
  std::string source_id;
  std::string config_hash;
};

/// Binary topology map (values 0/255) at the input resolution. The image is
/// first snapped to 8-bit levels, reflect-padded to a multiple of the factor,
/// area-downscaled, converted to luma, thresholded against the local window
/// mean (replicated borders) and upscaled by nearest neighbour.
Mask extract_topology(const Image& image, const DriverConfig& cfg);

/// Dims the topology to [0, ceiling/255], paints masks (later ones win) in
/// palette colours and returns the driver. Regions are stored resolved.
DriverImage compose_driver(const Mask& topology, const std::vector<MaskRegion>& masks, const DriverConfig& cfg,
                           const std::string& source_id = "");

DriverImage make_driver(const Image& image, const std::vector<MaskRegion>& masks, const DriverConfig& cfg,
                        const std::string& source_id = "");

/// Conditioning image of the inpainting baseline: the source image kept at
/// full resolution with palette masks pasted on top.
DriverImage make_inpaint_condition(const Image& image, const std::vector<MaskRegion>& masks, const DriverConfig& cfg,
                                   const std::string& source_id = "");

/// Empty when the background ceiling, palette exactness and disjointness hold.
std::vector<std::string> driver_violations(const DriverImage& d, const DriverConfig& cfg);

/// PNG plus JSON sidecar (source id, config hash, per-region class ids and
/// RLE bitmaps).
void save_driver(const DriverImage& d, const std::filesystem::path& png_path);
DriverImage load_driver(const std::filesystem::path& png_path);

struct OriginProbeConfig {
  double test_fraction = 0.3;
  int epochs = 30;
  double learning_rate = 3e-3;
  int hidden = 8;
  double margin = 0.15;  // PASS when accuracy <= 0.5 + margin
  std::uint64_t seed = 0;
};

struct OriginProbeReport {
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  int n_train = 0, n_test = 0;
  double threshold = 0.65;
  bool pass = false;
  std::string text() const;
};

struct SourceItem {
  Image image;
  std::vector<MaskRegion> masks;
};

/// Trains a small CNN to tell drivers of defective images from drivers of
/// defect-free images (with arbitrary masks) and reports held-out accuracy.
OriginProbeReport driver_origin_blindness_check(const DriverConfig& cfg, const std::vector<SourceItem>& defective,
                                                const std::vector<SourceItem>& defect_free,
                                                const OriginProbeConfig& probe = {});

}  // namespace crackgen
