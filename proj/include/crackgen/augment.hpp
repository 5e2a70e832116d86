#pragma once

#include "crackgen/dataset.hpp"
#include "crackgen/rng.hpp"

#include <filesystem>

namespace crackgen {

/// One draw of the offline augmentation: quarter turns, crop-zoom, small
/// rotation and translation (geometry, applied identically to masks), then
/// contrast and additive noise (image only).
struct AugmentParams {
  int quarter_turns = 0;
  double zoom = 1.0;             // >= 1; crops a window of side/zoom
  double crop_cx = -1, crop_cy = -1;  // crop centre in pixels; < 0 means image centre
  double angle_deg = 0.0;
  double tx = 0.0, ty = 0.0;     // pixels
  double contrast = 1.0;         // around the image mean
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

struct AugmentConfig {
  int variants = 10;
  double max_angle_deg = 15.0;
  double max_shift = 0.08;  // fraction of the side
  double max_zoom = 1.3;
  double contrast_range = 0.25;
  double max_noise = 0.03;
  bool quarter_turns = true;
  int max_retries = 8;
};

struct AugmentedSample {
  Image image;
  std::vector<MaskRegion> masks;
  AugmentParams params;
};

struct AugmentResult {
  std::vector<AugmentedSample> variants;
  std::vector<std::string> warnings;
};

AugmentParams sample_augment_params(const AugmentConfig& cfg, Index height, Index width, Rng& rng);

/// Applies one parameter set. Geometry uses nearest sampling with reflected
/// borders for image and masks alike, so a mask transforms exactly like an
/// image that equals it.
AugmentedSample apply_augment(const Image& image, const std::vector<MaskRegion>& masks, const AugmentParams& p);

/// `cfg.variants` independently seeded variants. A draw that erases a mask
/// entirely is re-drawn up to `max_retries` times, then skipped with a warning.
AugmentResult augment(const Image& image, const std::vector<MaskRegion>& masks, std::uint64_t seed,
                      const AugmentConfig& cfg = {});

/// Expands every image of a dataset with its augmented variants.
AnnotatedDataset augment_dataset(const AnnotatedDataset& ds, std::uint64_t seed, const AugmentConfig& cfg = {});

enum class SadfStrategy { random_perturbed, external, generated };
SadfStrategy parse_sadf_strategy(const std::string& s);
std::string to_string(SadfStrategy s);

/// Raised for the mask-generating-network strategy, which is not provided.
class OutOfScopeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct PoolMask {
  MaskRegion region;
  std::string source;  // e.g. "image 12 / annotation 40" or a file name
};

struct SadfConfig {
  SadfStrategy strategy = SadfStrategy::random_perturbed;
  double perturbation = 1.0;  // 0 reproduces pool entries exactly
  int masks_per_image = 1;
  int pairs_per_image = 1;
};

struct SadfPair {
  int image_id = 0;
  Image image;
  std::vector<MaskRegion> masks;
  std::string provenance;
};

/// Small random affine motion (rotation, scale, translation kept in bounds)
/// plus boundary jitter. magnitude 0 returns the input unchanged.
Mask perturb_mask(const Mask& mask, double magnitude, Rng& rng);

/// Every annotation of a dataset as a pool entry.
std::vector<PoolMask> mask_pool(const AnnotatedDataset& ds);

/// masks.json in `dir`: [{"file": "...png", "class_id": k}, ...].
std::vector<PoolMask> load_external_masks(const std::filesystem::path& dir);

/// Pairs defect-free images with masks drawn uniformly from the pool.
std::vector<SadfPair> build_sadf(const AnnotatedDataset& defect_free, const std::vector<PoolMask>& pool,
                                 const SadfConfig& cfg, std::uint64_t seed);

}  // namespace crackgen
