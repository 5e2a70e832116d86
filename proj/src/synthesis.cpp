#include "crackgen/synthesis.hpp"

#include <fstream>
#include <set>

namespace crackgen {

void SynthesisJob::check() const {
  if (seeds.empty() || static_cast<int>(seeds.size()) > kMaxSamplesPerDriver)
    throw std::invalid_argument("synthesis job: samples per driver must be in [1, " +
                                std::to_string(kMaxSamplesPerDriver) + "], got " + std::to_string(seeds.size()));
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw std::invalid_argument("synthesis job: seeds must be distinct");
}

std::string prompt_for_regions(const std::vector<MaskRegion>& regions) {
  std::vector<std::string> names;
  for (const auto& r : regions) {
    const auto& n = crack_class_name(r.class_id);
    if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  }
  if (names.empty()) return build_prompt(PromptTemplate::concept_only);
  return build_prompt(PromptTemplate::concept_with_crack, names);
}

std::vector<SynthesizedSample> synthesize(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                                          const SynthesisJob& job, const NoiseSchedule& s) {
  job.check();
  hyper.verify_base(base);
  const auto tokens = tokenize(job.prompt, base.vocab());
  const Image& d = job.driver.pixels;
  const EpsFn<float> fn = hyper.eps_fn(base, tokens, d);
  std::vector<SynthesizedSample> out;
  for (auto seed : job.seeds) {
    SynthesizedSample smp;
    smp.image = quantize8(from_model_space(ancestral_sample(fn, s, seed, SampleShape{3, d.height, d.width})));
    smp.annotations = job.driver.regions;
    smp.seed = seed;
    out.push_back(std::move(smp));
  }
  return out;
}

std::string to_string(ConditionMode m) { return m == ConditionMode::topological ? "topological" : "inpaint"; }

DriverImage make_condition(ConditionMode mode, const Image& image, const std::vector<MaskRegion>& masks,
                           const DriverConfig& cfg, const std::string& source_id) {
  if (mode == ConditionMode::topological) return make_driver(image, masks, cfg, source_id);
  DriverImage d = make_inpaint_condition(image, masks, cfg);
  d.source_id = source_id;
  return d;
}

void SynthesisConfig::check() const {
  if (samples_per_driver < 1 || samples_per_driver > kMaxSamplesPerDriver)
    throw std::invalid_argument("synthesis: samples_per_driver must be in [1, " +
                                std::to_string(kMaxSamplesPerDriver) + "]");
  driver.check();
}

std::vector<std::uint64_t> job_seeds(std::uint64_t seed, size_t pair_index, int count) {
  Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (pair_index + 1)));
  std::vector<std::uint64_t> out;
  while (static_cast<int>(out.size()) < count) {
    const auto v = rng.next();
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

SynthesisOutput synthesize_dataset(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                                   const std::vector<SadfPair>& pairs, const NoiseSchedule& s,
                                   const SynthesisConfig& cfg) {
  cfg.check();
  hyper.verify_base(base);
  SynthesisOutput out;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const SadfPair& pair = pairs[i];
    try {
      SynthesisJob job;
      job.driver = make_condition(cfg.mode, pair.image, pair.masks, cfg.driver, std::to_string(pair.image_id));
      job.prompt = prompt_for_regions(job.driver.regions);
      job.seeds = job_seeds(cfg.seed, i, cfg.samples_per_driver);
      const auto samples = synthesize(base, hyper, job, s);
      for (const auto& smp : samples) {
        char name[64];
        std::snprintf(name, sizeof(name), "synth_%05d_%02d.png", static_cast<int>(i),
                      static_cast<int>(&smp - samples.data()));
        const int id = out.dataset.add_image(smp.image, name, smp.annotations,
                                             cfg.first_image_id + static_cast<int>(out.dataset.images.size()));
        out.provenance.push_back(Json{{"image_id", id},
                                      {"source_image_id", pair.image_id},
                                      {"pair_index", i},
                                      {"seed", smp.seed},
                                      {"prompt", job.prompt},
                                      {"condition", to_string(cfg.mode)},
                                      {"driver_config_hash", cfg.driver.hash()},
                                      {"hyper_hash", hyper.hash()},
                                      {"masks", pair.provenance}});
      }
    } catch (const std::exception& e) {
      out.failures.push_back({pair.image_id, e.what()});
    }
  }
  validate(out.dataset);
  return out;
}

void save_synthesis(const SynthesisOutput& out, const std::filesystem::path& dir) {
  save_dataset(out.dataset, dir);
  std::ofstream(dir / "provenance.json") << out.provenance.dump(1) << "\n";
  Json failures = Json::array();
  for (const auto& f : out.failures) failures.push_back(Json{{"source_image_id", f.pair_image_id}, {"error", f.message}});
  std::ofstream(dir / "failures.json") << failures.dump(1) << "\n";
}

std::vector<ConditionSample> condition_samples(const AnnotatedDataset& ds, const Vocabulary& vocab,
                                               ConditionMode mode, const DriverConfig& cfg) {
  std::vector<ConditionSample> out;
  for (const auto& im : ds.images) {
    const auto masks = ds.regions(im.id);
    const DriverImage d = make_condition(mode, im.pixels, masks, cfg, std::to_string(im.id));
    out.push_back({im.pixels, d.pixels, tokenize(prompt_for_regions(d.regions), vocab)});
  }
  return out;
}

}  // namespace crackgen
