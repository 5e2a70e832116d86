#pragma once

#include "crackgen/augment.hpp"
#include "crackgen/hyper.hpp"

namespace crackgen {

inline constexpr int kMaxSamplesPerDriver = 15;

/// Driver-conditioned sampling request. Seeds must be distinct and number
/// between 1 and kMaxSamplesPerDriver.
struct SynthesisJob {
  DriverImage driver;
  std::string prompt;
  std::vector<std::uint64_t> seeds;

  void check() const;
};

/// "an image of a [V] with a <c1> and <c2> crack" over the distinct classes
/// of the regions in first-appearance order.
std::string prompt_for_regions(const std::vector<MaskRegion>& regions);

struct SynthesizedSample {
  Image image;
  std::vector<MaskRegion> annotations;  // the driver's regions, bit-exact
  std::uint64_t seed = 0;
};

/// One conditioned ancestral sample per seed.
std::vector<SynthesizedSample> synthesize(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                                          const SynthesisJob& job, const NoiseSchedule& s);

/// Which condition the hypernetwork was trained on.
enum class ConditionMode { topological, inpaint };
std::string to_string(ConditionMode m);

/// Condition image for a source image and masks under a mode.
DriverImage make_condition(ConditionMode mode, const Image& image, const std::vector<MaskRegion>& masks,
                           const DriverConfig& cfg, const std::string& source_id = "");

struct SynthesisConfig {
  int samples_per_driver = 5;
  ConditionMode mode = ConditionMode::topological;
  DriverConfig driver;
  std::uint64_t seed = 0;
  int first_image_id = 500001;  // keeps synthetic ids clear of real ones

  void check() const;
};

/// Per-driver seeds; a pure function of (seed, pair index, count).
std::vector<std::uint64_t> job_seeds(std::uint64_t seed, size_t pair_index, int count);

struct SynthesisFailure {
  int pair_image_id = 0;
  std::string message;
};

struct SynthesisOutput {
  AnnotatedDataset dataset;
  Json provenance = Json::array();  // one record per image
  std::vector<SynthesisFailure> failures;
};

/// Synthesizes every SADF pair. A failing job is recorded and skipped; the
/// remaining dataset is still valid.
SynthesisOutput synthesize_dataset(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                                   const std::vector<SadfPair>& pairs, const NoiseSchedule& s,
                                   const SynthesisConfig& cfg);

/// Dataset layout plus provenance.json.
void save_synthesis(const SynthesisOutput& out, const std::filesystem::path& dir);

/// Training pairs for condition learning: each image with the condition
/// extracted from itself and the prompt naming its classes.
std::vector<ConditionSample> condition_samples(const AnnotatedDataset& ds, const Vocabulary& vocab,
                                               ConditionMode mode, const DriverConfig& cfg);

}  // namespace crackgen
