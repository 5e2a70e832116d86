#pragma once

#include "crackgen/config.hpp"
#include "crackgen/metrics.hpp"
#include "crackgen/segmentation.hpp"
#include "crackgen/synthesis.hpp"

#include <iosfwd>
#include <map>

namespace crackgen {

/// Missing or stale upstream artifacts.
class PrereqError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage {
  gen_toy_data,
  learn_concept,
  learn_condition,
  extract_drivers,
  build_sadf,
  synthesize,
  inpaint_baseline,
  evaluate_metrics,
  run_ablation,
  train_downstream,
};

struct StageInfo {
  Stage stage;
  std::string command;  // CLI subcommand
  std::string dir;      // directory under the run root
  std::vector<Stage> upstream;
  std::string help;
};

/// Stages in run-all order.
const std::vector<StageInfo>& stage_table();
const StageInfo& stage_info(Stage s);
Stage parse_stage(const std::string& command);

extern const char* const kCodeVersion;

/// Record written to <stage dir>/manifest.json after a stage succeeds.
/// `hash` covers every other field, so a manifest plus the upstream hashes
/// it lists pins the exact inputs of the stage.
struct Manifest {
  std::string stage;
  std::string code_version;
  std::uint64_t seed = 0;
  Json config;
  std::map<std::string, std::string> upstream;   // stage command -> manifest hash
  std::map<std::string, std::string> artifacts;  // relative path -> sha256
  Json summary = Json::object();
  std::string hash;

  Json to_json() const;
  static Manifest from_json(const Json& j);
  std::string compute_hash() const;
};

std::filesystem::path stage_dir(const RunConfig& cfg, Stage s);
Manifest read_manifest(const std::filesystem::path& dir);

/// Verifies a finished stage: manifest present and self-consistent, artifact
/// files unchanged, produced with the same seed, and its own upstream chain
/// still current. Throws PrereqError with the command to run otherwise.
Manifest verify_stage(const RunConfig& cfg, Stage s);

/// Checks prerequisites, clears the stage directory, runs the stage and
/// writes its manifest.
Manifest run_stage(const RunConfig& cfg, Stage s, std::ostream& log);

/// Every stage in order.
std::vector<Manifest> run_all(const RunConfig& cfg, std::ostream& log);

/// Hash over all stage names and artifact hashes of a finished run;
/// independent of the output directory.
std::string run_fingerprint(const RunConfig& cfg);

/// Independent 64-bit stream for a named purpose.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

/// Linear betas with the standard endpoints scaled to T steps.
NoiseSchedule pipeline_schedule(const RunConfig& cfg, LossWeighting w);
DriverConfig pipeline_driver(const RunConfig& cfg);

/// Within-driver variety and realism of one generator (m drivers, k samples).
struct VarietyResult {
  double l2 = 0;   // mean within-driver pairwise L2
  double mi = 0;   // mean within-driver pairwise MI (nats)
  double fid = 0;  // all m*k samples vs the real reference set
  int degenerate_mi_pairs = 0;
};

VarietyResult variety_protocol(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                               const std::vector<SadfPair>& pairs, ConditionMode mode, const RunConfig& cfg,
                               const Matrix<double>& real_features);

void save_sadf_pairs(const std::vector<SadfPair>& pairs, const std::filesystem::path& dir);
std::vector<SadfPair> load_sadf_pairs(const std::filesystem::path& dir);

}  // namespace crackgen
