#pragma once

#include "crackgen/checkpoint.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace crackgen {

/// Invalid configuration. Carries every problem found, not just the first.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

struct DataSection {
  std::string source = "toy";  // "toy" or "directory"
  std::string real_dir;        // dataset directory (directory source)
  std::string defect_free_dir;
  int n_defective = 120;
  int n_defect_free = 60;
  int max_cracks = 1;
  double test_fraction = 0.25;
};

struct ModelSection {
  int base_channels = 8;
  int mid_channels = 16;
  int time_dim = 16;
  int embed_dim = 16;
  int schedule_steps = 50;
};

struct PretrainSection {
  int steps = 3000;
  int batch_size = 4;
  double learning_rate = 2e-3;
  std::string prompt = "a panel";
  bool cosine_decay = true;
  std::string corpus = "generic";  // "generic" textures or the "defect_free" images
  int corpus_size = 200;
};

struct ConceptSection {
  int steps = 0;
  int epochs = 10;  // steps = max(steps, epochs x concept images)
  double lambda = 1.0;
  double learning_rate = 3e-4;
  std::string optimizer = "adam";
  bool cosine_decay = true;
  int prior_set_size = -1;  // -1: min(200, 4 x concept images)
  std::string prompt = "an image of a [V]";
};

struct ConditionSection {
  int steps = 0;
  int epochs = 30;  // steps = max(steps, epochs x training images)
  double learning_rate = 1e-3;
  bool cosine_decay = true;
  int probe_trials = 20;
};

struct DriverSection {
  int downscale_factor = 2;
  int threshold_window = 5;
  double threshold_offset = 5.0 / 255.0;
};

struct SadfSection {
  std::string strategy = "random_perturbed";
  double perturbation = 1.0;
  int pairs_per_image = 1;
  std::string external_dir;
};

struct SynthesisSection {
  int samples_per_driver = 5;
};

struct MetricsSection {
  int variety_drivers = 10;  // m
  int variety_samples = 10;  // k
  int mi_bins = 32;
};

struct AblationSection {
  double fraction = 0.1;
};

struct DownstreamSection {
  int epochs = 15;
  double learning_rate = 3e-3;
  double foreground_weight = 5.0;
  int width = 16;
  std::vector<int> seeds = {1, 2, 3};
  double collapse_floor_iou = 50.0;
};

/// Every setting of a pipeline run. Text form is one `key = value` per line
/// with `#` comments; see config_keys() for the documented key list.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  int image_size = 16;
  DataSection data;
  ModelSection model;
  PretrainSection pretrain;
  ConceptSection concept_stage;
  ConditionSection condition;
  DriverSection driver;
  SadfSection sadf;
  SynthesisSection synthesis;
  MetricsSection metrics;
  AblationSection ablation;
  DownstreamSection downstream;

  /// Range and consistency problems; empty when valid.
  std::vector<std::string> issues() const;
  void check() const;  // throws ConfigError

  /// Resolved configuration, one line per key in registry order.
  std::string to_text() const;
  Json to_json() const;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

/// All accepted keys with a one-line description each.
std::vector<ConfigKey> config_keys();

/// Parses the text form over the defaults. Unknown keys, duplicates, malformed
/// lines and bad values are all collected into one ConfigError.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Overrides one key (used for --seed and tests); throws ConfigError.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace crackgen
