#pragma once

#include "crackgen/dataset.hpp"
#include "crackgen/metrics.hpp"
#include "crackgen/optim.hpp"

namespace crackgen {

struct SegmentorConfig {
  int num_classes = 5;
  int width = 16;
};

/// Two-level encoder-decoder with a skip connection; num_classes + 1 logit
/// channels (channel 0 is background) at input resolution.
class Segmentor {
 public:
  Segmentor() = default;
  Segmentor(SegmentorConfig cfg, std::uint64_t seed);

  const SegmentorConfig& config() const { return cfg_; }
  ParameterSet<float>& params() { return params_; }
  const ParameterSet<float>& params() const { return params_; }
  std::string hash() const;

  Var logits(Binder<float>& p, Var x) const;
  /// Per-pixel class probabilities, (num_classes + 1) x H x W.
  Tensor<float> probabilities(const Image& img) const;
  /// Argmax class map.
  Mask predict_labels(const Image& img) const;

 private:
  SegmentorConfig cfg_;
  ParameterSet<float> params_;
};

struct SegmentorTrainConfig {
  int epochs = 30;
  double learning_rate = 3e-3;
  double foreground_weight = 5.0;  // CE weight of crack pixels vs background
  double grad_clip = 5.0;
  std::uint64_t seed = 0;
};

struct SegmentorLog {
  std::vector<double> epoch_loss;
  std::vector<double> val_iou;  // pixel foreground IoU x 100, empty without validation data
  bool untrained = false;       // zero epochs: random initialisation returned
  bool diverged = false;
};

/// Adam with batch size 1; an epoch visits every image once in seeded order.
/// Training continues from the current weights. Divergence (non-finite or
/// loss > 1e6) stops training and sets `diverged` when `abort_on_divergence`
/// is false, otherwise throws NumericError.
SegmentorLog train_segmentor(Segmentor& model, const AnnotatedDataset& train, const SegmentorTrainConfig& cfg,
                             const AnnotatedDataset* validation = nullptr, bool abort_on_divergence = true);

struct PredictedInstance {
  Mask mask;
  int class_id = 0;
  double score = 0;
  BBox bbox;
};

/// Argmax map, then one instance per 8-connected component of each class.
/// Score is the mean class probability over the component.
std::vector<PredictedInstance> predict_instances(const Segmentor& model, const Image& img,
                                                 double score_threshold = 0.0, int min_area = 2);

/// 8-connected components of the pixels of `labels` equal to `value`.
std::vector<Mask> connected_components(const Mask& labels, std::uint8_t value);

enum class Regime { real_only, synthetic_only, synthetic_plus_real };
std::string to_string(Regime r);
Regime parse_regime(const std::string& s);

struct RegimeConfig {
  std::vector<Regime> regimes = {Regime::real_only, Regime::synthetic_only, Regime::synthetic_plus_real};
  double real_fraction = 1.0;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  SegmentorConfig model;
  SegmentorTrainConfig train;
  double collapse_floor_iou = 50.0;  // IoU x 100 below which a run counts as collapsed
  int min_area = 2;
};

struct RegimeRow {
  Regime regime;
  // medians over seeds
  double segm_map = 0, bbox_map = 0, iou = 0, hd = 0;
  std::vector<double> seed_iou, seed_segm_map, seed_bbox_map, seed_hd;
  int collapsed_seeds = 0;
};

struct RegimeTable {
  double real_fraction = 1.0;
  std::vector<RegimeRow> rows;
  const RegimeRow& row(Regime r) const;
  std::string to_text() const;
  Json to_json() const;
};

/// Deterministic subset of ceil(fraction * n) images (at least one).
AnnotatedDataset real_subset(const AnnotatedDataset& ds, double fraction, std::uint64_t seed);

class SplitLeakageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws SplitLeakageError when the test ids meet any training ids.
void check_split(const AnnotatedDataset& test, const std::vector<const AnnotatedDataset*>& training,
                 const std::vector<int>& extra_training_ids = {});

struct RegimeMetrics {
  double segm_map = 0, bbox_map = 0, iou = 0, hd = 0;
};

/// Metrics of one model on a test set (mAP and IoU x 100, HD in [0,1]).
RegimeMetrics evaluate_segmentor(const Segmentor& model, const AnnotatedDataset& test, int min_area = 2);

/// Trains every regime for every seed and reports seed medians.
/// `real_train` is subset by cfg.real_fraction inside. `generator_ids` are
/// the real images the synthetic data generator was trained on.
RegimeTable evaluate_regimes(const AnnotatedDataset& real_train, const AnnotatedDataset& synthetic,
                             const AnnotatedDataset& test, const RegimeConfig& cfg,
                             const std::vector<int>& generator_ids = {});

double median(std::vector<double> v);

}  // namespace crackgen
