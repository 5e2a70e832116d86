#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crackgen/dataset.hpp"
#include "crackgen/pipeline.hpp"

#include <fstream>
#include <set>
#include <sstream>

using namespace crackgen;
namespace fs = std::filesystem;

namespace {

// Smallest configuration that still exercises every stage.
const char* const kTiny =
    "data.n_defective = 16\n"
    "data.n_defect_free = 10\n"
    "model.base_channels = 4\n"
    "model.mid_channels = 8\n"
    "model.time_dim = 8\n"
    "model.embed_dim = 8\n"
    "model.schedule_steps = 10\n"
    "pretrain.steps = 20\n"
    "pretrain.corpus_size = 8\n"
    "concept.steps = 4\n"
    "concept.epochs = 0\n"
    "condition.steps = 4\n"
    "condition.epochs = 0\n"
    "condition.probe_trials = 2\n"
    "synthesis.samples_per_driver = 2\n"
    "metrics.variety_drivers = 2\n"
    "metrics.variety_samples = 2\n"
    "ablation.fraction = 0.25\n"
    "downstream.epochs = 1\n"
    "downstream.width = 4\n"
    "downstream.seeds = 1\n";

RunConfig tiny(const std::string& name) {
  RunConfig c = parse_config(kTiny, "tiny");
  const fs::path dir = fs::temp_directory_path() / ("crackgen_test_pipeline_" + name);
  fs::remove_all(dir);
  c.out_dir = dir.string();
  return c;
}

std::string prereq_message(const RunConfig& cfg, Stage s) {
  std::ostringstream log;
  try {
    run_stage(cfg, s, log);
  } catch (const PrereqError& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

// One finished tiny run shared by the read-only checks.
const RunConfig& finished() {
  static RunConfig cfg = [] {
    auto c = tiny("full");
    std::ostringstream log;
    run_all(c, log);
    return c;
  }();
  return cfg;
}

}  // namespace

TEST_CASE("derive_seed is the leading 64 bits of sha256(seed/purpose)") {
  const auto h = sha256_hex(std::string("7/variety"));
  CHECK(derive_seed(7, "variety") == std::stoull(h.substr(0, 16), nullptr, 16));
  CHECK(derive_seed(7, "variety") == derive_seed(7, "variety"));
  CHECK(derive_seed(7, "variety") != derive_seed(8, "variety"));
  CHECK(derive_seed(7, "variety") != derive_seed(7, "split"));
}

TEST_CASE("stage table is topologically ordered") {
  std::set<Stage> seen;
  std::set<std::string> commands, dirs;
  for (const auto& info : stage_table()) {
    for (Stage up : info.upstream) CHECK(seen.count(up) == 1);
    seen.insert(info.stage);
    CHECK(parse_stage(info.command) == info.stage);
    commands.insert(info.command);
    dirs.insert(info.dir);
  }
  CHECK(commands.size() == stage_table().size());
  CHECK(dirs.size() == stage_table().size());
  CHECK_THROWS(parse_stage("learn-everything"));
}

TEST_CASE("schedule endpoints scale with T") {
  auto c = tiny("schedule");
  c.model.schedule_steps = 1000;
  const auto s = pipeline_schedule(c, LossWeighting::ones);
  CHECK(s.beta_start() == doctest::Approx(1e-4));
  CHECK(s.beta_end() == doctest::Approx(0.02));
  c.model.schedule_steps = 50;
  const auto t = pipeline_schedule(c, LossWeighting::ones);
  CHECK(t.steps() == 50);
  CHECK(t.beta_start() == doctest::Approx(2e-3));
  CHECK(t.beta_end() == doctest::Approx(0.4));
}

TEST_CASE("missing prerequisites name the stage to run") {
  const auto c = tiny("prereq");
  CHECK(contains(prereq_message(c, Stage::learn_condition), "gen-toy-data"));
  std::ostringstream log;
  run_stage(c, Stage::gen_toy_data, log);
  const auto msg = prereq_message(c, Stage::learn_condition);
  CHECK(contains(msg, "learn-concept"));
  CHECK(contains(msg, "missing prerequisite"));
  CHECK(contains(prereq_message(c, Stage::synthesize), "learn-concept"));
  CHECK_FALSE(fs::exists(stage_dir(c, Stage::learn_condition) / "manifest.json"));

  auto other = c;
  other.seed = 2;
  CHECK(contains(prereq_message(other, Stage::learn_concept), "seed 1, not 2"));
  fs::remove_all(c.out_dir);
}

TEST_CASE("manifest round-trips and hashes every field") {
  const auto m = read_manifest(stage_dir(finished(), Stage::learn_condition));
  CHECK(m.hash == m.compute_hash());
  CHECK(m.stage == "learn-condition");
  CHECK(m.code_version == kCodeVersion);
  CHECK(m.upstream.count("gen-toy-data") == 1);
  CHECK(m.upstream.count("learn-concept") == 1);
  CHECK(m.artifacts.count("hyper.ckpt") == 1);
  const auto back = Manifest::from_json(m.to_json());
  CHECK(back.to_json() == m.to_json());
  auto changed = m;
  changed.seed += 1;
  CHECK(changed.compute_hash() != m.hash);
  changed = m;
  changed.artifacts.begin()->second = "0";
  CHECK(changed.compute_hash() != m.hash);
}

TEST_CASE("finished run verifies and has the expected outputs") {
  const auto& c = finished();
  for (const auto& info : stage_table()) CHECK_NOTHROW(verify_stage(c, info.stage));

  const auto train = load_dataset(fs::path(c.out_dir) / "data" / "real_train");
  const auto test = load_dataset(fs::path(c.out_dir) / "data" / "real_test");
  CHECK(shared_image_ids(train, test).empty());
  CHECK(train.images.size() + test.images.size() == 16);

  for (const auto* sub : {"synth", "inpaint/dataset"}) {
    const auto ds = load_dataset(fs::path(c.out_dir) / sub);
    CHECK_MESSAGE(validation_issues(ds).empty(), sub);
    CHECK_FALSE(ds.images.empty());
  }

  std::ifstream f(fs::path(c.out_dir) / "ablation" / "ablation.json");
  const Json j = Json::parse(f);
  REQUIRE(j.at("rows").size() == 3);
  CHECK(j["rows"][0]["row"] == "condition-only");
  CHECK(j["rows"][1]["row"] == "concept+condition");
  CHECK(j["rows"][2]["row"] == "full-data reference");
  CHECK(j["fraction"] == 0.25);
}

TEST_CASE("run-all is deterministic and independent of the output directory") {
  const auto& a = finished();
  auto b = tiny("again");
  std::ostringstream log;
  run_all(b, log);
  CHECK(run_fingerprint(a) == run_fingerprint(b));
  for (const auto& info : stage_table())
    CHECK(read_manifest(stage_dir(a, info.stage)).artifacts == read_manifest(stage_dir(b, info.stage)).artifacts);
  fs::remove_all(b.out_dir);
}

TEST_CASE("tampering and reruns make dependants stale") {
  auto c = tiny("stale");
  std::ostringstream log;
  for (Stage s : {Stage::gen_toy_data, Stage::learn_concept, Stage::learn_condition}) run_stage(c, s, log);
  CHECK_NOTHROW(verify_stage(c, Stage::learn_condition));

  // Changed artifact.
  const auto ckpt = stage_dir(c, Stage::learn_condition) / "hyper.ckpt";
  { std::ofstream(ckpt, std::ios::app) << "x"; }
  CHECK_THROWS_WITH_AS(verify_stage(c, Stage::learn_condition), doctest::Contains("changed after it ran"), PrereqError);
  run_stage(c, Stage::learn_condition, log);
  CHECK_NOTHROW(verify_stage(c, Stage::learn_condition));

  // Upstream rerun with different settings.
  c.data.n_defective = 20;
  run_stage(c, Stage::gen_toy_data, log);
  CHECK_THROWS_WITH_AS(verify_stage(c, Stage::learn_concept), doctest::Contains("is stale"), PrereqError);
  CHECK_THROWS_AS(verify_stage(c, Stage::learn_condition), PrereqError);
  CHECK_THROWS_AS(run_stage(c, Stage::learn_condition, log), PrereqError);

  // Edited manifest.
  run_stage(c, Stage::learn_concept, log);
  const auto mpath = stage_dir(c, Stage::learn_concept) / "manifest.json";
  std::string text;
  {
    std::ifstream in(mpath);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  const auto pos = text.find("\"seed\": 1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 9, "\"seed\": 2");
  { std::ofstream(mpath) << text; }
  CHECK_THROWS_WITH_AS(verify_stage(c, Stage::learn_concept), doctest::Contains("does not match its hash"), PrereqError);
  fs::remove_all(c.out_dir);
}

TEST_CASE("invalid configuration is rejected before any work") {
  auto c = tiny("invalid");
  c.downstream.seeds.clear();
  std::ostringstream log;
  CHECK_THROWS_AS(run_stage(c, Stage::gen_toy_data, log), ConfigError);
  CHECK_FALSE(fs::exists(c.out_dir));
}
