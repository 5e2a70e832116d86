#pragma once

#include "crackgen/checkpoint.hpp"
#include "crackgen/dataset.hpp"
#include "crackgen/tensor.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace crackgen {

/// Frozen random CNN used as the feature space for FID. Three 3x3 conv+ReLU
/// stages with two 2x average pools, then per-channel spatial mean and
/// standard deviation of the last stage.
class FeatureExtractor {
 public:
  static constexpr const char* kVersion = "fx-v1";
  static constexpr std::uint64_t kSeed = 0x5eed0f1d;

  /// The versioned extractor: weights drawn from kSeed.
  static const FeatureExtractor& standard();

  FeatureExtractor(ParameterSet<double> params, std::string version);

  Index feature_dim() const;
  const std::string& version() const { return version_; }
  std::string hash() const;

  /// Features of one RGB image (sides divisible by 4).
  Vector<double> features(const Image& img) const;
  /// N x D feature matrix.
  Matrix<double> features(const std::vector<Image>& imgs) const;

  Checkpoint to_checkpoint() const;
  static FeatureExtractor from_checkpoint(const Checkpoint& ck);

 private:
  ParameterSet<double> params_;
  std::string version_;
};

struct FidOptions {
  double epsilon = 1e-6;  // added to both covariance diagonals
  int max_retries = 6;    // epsilon grows 10x per retry
};

/// Frechet distance between Gaussians fitted to the rows of `a` and `b`.
double fid(const Matrix<double>& a, const Matrix<double>& b, const FidOptions& opt = {});

/// Mean over unordered pairs of the Euclidean distance in 0-255 units.
double pairwise_l2(const std::vector<Image>& images);

struct MiResult {
  double value = 0;
  bool degenerate = false;  // one of the images is constant
};

enum class InfoUnit { nats, bits };

/// Mutual information of the joint histogram of luma levels in [0,1].
MiResult mutual_information(const Image& a, const Image& b, int bins = 32, InfoUnit unit = InfoUnit::nats);
/// Same estimator on precomputed gray levels.
MiResult mutual_information(const Matrix<double>& gray_a, const Matrix<double>& gray_b, int bins = 32,
                            InfoUnit unit = InfoUnit::nats);
/// Histogram entropy of the luma levels.
double histogram_entropy(const Matrix<double>& gray, int bins = 32, InfoUnit unit = InfoUnit::nats);

/// Mean MI over unordered pairs; `degenerate_pairs` counts flagged pairs.
struct PairwiseMi {
  double mean = 0;
  int pairs = 0;
  int degenerate_pairs = 0;
};
PairwiseMi mean_pairwise_mi(const std::vector<Image>& images, int bins = 32);

struct MaskScore {
  double value = 0;
  bool both_empty = false;
};

/// Intersection over union of the nonzero pixels, in [0,1].
MaskScore iou(const Mask& a, const Mask& b);

/// Symmetric Hausdorff distance between the boundary pixels of two masks
/// divided by the image diagonal. Empty against nonempty is 1.
MaskScore hausdorff(const Mask& a, const Mask& b);

/// Boundary pixels: foreground with a 4-neighbour outside the mask.
std::vector<std::pair<Index, Index>> boundary_points(const Mask& m);

/// Pixel-level foreground IoU accumulated over a set of mask pairs.
double dataset_pixel_iou(const std::vector<Mask>& pred, const std::vector<Mask>& truth);
/// Mean normalized Hausdorff distance over mask pairs (both-empty pairs count 0).
double mean_hausdorff(const std::vector<Mask>& pred, const std::vector<Mask>& truth);

struct Instance {
  int image_id = 0;
  int class_id = 0;
  Mask mask;
  std::optional<double> score;  // required for predictions
};

struct MapResult {
  double bbox = 0;
  double segm = 0;
  int evaluated_classes = 0;
};

/// COCO thresholds 0.50:0.05:0.95.
std::vector<double> coco_iou_thresholds();

/// Average precision with 101-point interpolation for one class and one
/// threshold. Exposed for tests.
double average_precision(const std::vector<Instance>& preds, const std::vector<Instance>& truth, double threshold,
                         bool use_bbox);

/// Mean AP over classes present in the ground truth and over thresholds.
MapResult map_coco(const std::vector<Instance>& preds, const std::vector<Instance>& truth,
                   const std::vector<double>& thresholds = coco_iou_thresholds());

/// Named scalar metrics with provenance. Every value must be finite.
class MetricReport {
 public:
  std::string config_hash;
  std::vector<std::string> dataset_ids;

  void set(const std::string& name, double value);
  double get(const std::string& name) const;
  bool has(const std::string& name) const { return values_.count(name) != 0; }
  const std::map<std::string, double>& values() const { return values_; }

  std::string to_text() const;
  Json to_json() const;
  static MetricReport from_json(const Json& j);
  void save(const std::filesystem::path& dir, const std::string& stem = "metrics") const;

 private:
  std::map<std::string, double> values_;
};

}  // namespace crackgen
