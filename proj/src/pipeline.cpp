#include "crackgen/pipeline.hpp"

#include "crackgen/concept.hpp"
#include "crackgen/image_io.hpp"
#include "crackgen/toy_data.hpp"
#include "crackgen/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>

namespace crackgen {

namespace fs = std::filesystem;

const char* const kCodeVersion = CRACKGEN_VERSION;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const Json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << j.dump(2) << "\n";
}

Json read_json(const fs::path& p) { return Json::parse(read_file(p)); }

std::map<std::string, std::string> hash_artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    out[rel] = sha256_hex(read_file(e.path()));
  }
  return out;
}

}  // namespace

const std::vector<StageInfo>& stage_table() {
  using S = Stage;
  static const std::vector<StageInfo> t = {
      {S::gen_toy_data, "gen-toy-data", "data", {}, "generate (or import) and split the datasets"},
      {S::learn_concept, "learn-concept", "concept", {S::gen_toy_data},
       "pretrain the base model and learn the concept with prior preservation"},
      {S::learn_condition, "learn-condition", "condition", {S::gen_toy_data, S::learn_concept},
       "train the hypernetwork on topological drivers"},
      {S::extract_drivers, "extract-drivers", "drivers", {S::gen_toy_data},
       "write drivers of the real training images and run the origin probe"},
      {S::build_sadf, "build-sadf", "sadf", {S::gen_toy_data}, "pair defect-free images with shuffled masks"},
      {S::synthesize, "synthesize", "synth", {S::learn_concept, S::learn_condition, S::build_sadf},
       "synthesize the self-annotated dataset"},
      {S::inpaint_baseline, "inpaint-baseline", "inpaint", {S::gen_toy_data, S::learn_concept, S::build_sadf},
       "train and run the inpainting-style baseline"},
      {S::evaluate_metrics, "evaluate-metrics", "metrics",
       {S::gen_toy_data, S::learn_concept, S::learn_condition, S::build_sadf, S::synthesize, S::inpaint_baseline},
       "variety (L2, MI) and FID of both generators"},
      {S::run_ablation, "run-ablation", "ablation",
       {S::gen_toy_data, S::learn_concept, S::learn_condition, S::build_sadf},
       "condition-only vs concept+condition at reduced data"},
      {S::train_downstream, "train-downstream", "downstream", {S::gen_toy_data, S::synthesize, S::run_ablation},
       "segmentor regimes at full and reduced real data"},
  };
  return t;
}

const StageInfo& stage_info(Stage s) {
  for (const auto& i : stage_table())
    if (i.stage == s) return i;
  throw std::logic_error("unknown stage");
}

Stage parse_stage(const std::string& command) {
  for (const auto& i : stage_table())
    if (i.command == command) return i.stage;
  throw std::invalid_argument("unknown stage '" + command + "'");
}

Json Manifest::to_json() const {
  Json j;
  j["stage"] = stage;
  j["code_version"] = code_version;
  j["seed"] = seed;
  j["config"] = config;
  j["upstream"] = Json(upstream);
  j["artifacts"] = Json(artifacts);
  j["summary"] = summary;
  j["hash"] = hash;
  return j;
}

Manifest Manifest::from_json(const Json& j) {
  Manifest m;
  m.stage = j.at("stage").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config");
  m.upstream = j.at("upstream").get<std::map<std::string, std::string>>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  m.summary = j.at("summary");
  m.hash = j.at("hash").get<std::string>();
  return m;
}

std::string Manifest::compute_hash() const {
  Json j = to_json();
  j.erase("hash");
  return sha256_hex(j.dump());
}

fs::path stage_dir(const RunConfig& cfg, Stage s) { return fs::path(cfg.out_dir) / stage_info(s).dir; }

Manifest read_manifest(const fs::path& dir) { return Manifest::from_json(read_json(dir / "manifest.json")); }

Manifest verify_stage(const RunConfig& cfg, Stage s) {
  const auto& info = stage_info(s);
  const fs::path dir = stage_dir(cfg, s);
  const std::string rerun = "; run `crackgen " + info.command + " --config <file>` first";
  if (!fs::exists(dir / "manifest.json"))
    throw PrereqError("missing prerequisite: stage '" + info.command + "' has no manifest in " + dir.string() + rerun);
  Manifest m;
  try {
    m = read_manifest(dir);
  } catch (const std::exception& e) {
    throw PrereqError("unreadable manifest of stage '" + info.command + "': " + e.what() + rerun);
  }
  if (m.hash != m.compute_hash())
    throw PrereqError("manifest of stage '" + info.command + "' does not match its hash" + rerun);
  if (m.seed != cfg.seed)
    throw PrereqError("stage '" + info.command + "' was run with seed " + std::to_string(m.seed) + ", not " +
                      std::to_string(cfg.seed) + rerun);
  if (hash_artifacts(dir) != m.artifacts)
    throw PrereqError("artifacts of stage '" + info.command + "' changed after it ran" + rerun);
  for (Stage up : info.upstream) {
    const auto& ui = stage_info(up);
    const Manifest um = verify_stage(cfg, up);
    auto it = m.upstream.find(ui.command);
    if (it == m.upstream.end() || it->second != um.hash)
      throw PrereqError("stage '" + info.command + "' is stale: '" + ui.command + "' was rerun after it" + rerun);
  }
  return m;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
  const std::string h = sha256_hex(std::to_string(seed) + "/" + purpose);
  return std::stoull(h.substr(0, 16), nullptr, 16);
}

NoiseSchedule pipeline_schedule(const RunConfig& cfg, LossWeighting w) {
  const double scale = 1000.0 / cfg.model.schedule_steps;
  return make_schedule(cfg.model.schedule_steps, 1e-4 * scale, std::min(0.999, 0.02 * scale), ScheduleKind::linear,
                       false, w);
}

DriverConfig pipeline_driver(const RunConfig& cfg) {
  DriverConfig d;
  d.downscale_factor = cfg.driver.downscale_factor;
  d.threshold_window = cfg.driver.threshold_window;
  d.threshold_offset = cfg.driver.threshold_offset;
  return d;
}

void save_sadf_pairs(const std::vector<SadfPair>& pairs, const fs::path& dir) {
  AnnotatedDataset ds;
  Json prov = Json::array();
  for (size_t i = 0; i < pairs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "pair_%05zu.png", i);
    const int id = ds.add_image(pairs[i].image, name, pairs[i].masks, static_cast<int>(i) + 1);
    prov.push_back(Json{{"pair_id", id}, {"defect_free_id", pairs[i].image_id}, {"provenance", pairs[i].provenance}});
  }
  save_dataset(ds, dir);
  write_json(dir / "pairs.json", prov);
}

std::vector<SadfPair> load_sadf_pairs(const fs::path& dir) {
  const auto ds = load_dataset(dir);
  const Json prov = read_json(dir / "pairs.json");
  std::vector<SadfPair> out;
  for (const auto& p : prov) {
    const int id = p.at("pair_id").get<int>();
    const ImageRecord* im = ds.find_image(id);
    if (!im) throw std::runtime_error("sadf: pairs.json names missing image " + std::to_string(id));
    out.push_back({p.at("defect_free_id").get<int>(), im->pixels, ds.regions(id), p.at("provenance").get<std::string>()});
  }
  return out;
}

VarietyResult variety_protocol(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                               const std::vector<SadfPair>& pairs, ConditionMode mode, const RunConfig& cfg,
                               const Matrix<double>& real_features) {
  const int m = std::min<int>(cfg.metrics.variety_drivers, static_cast<int>(pairs.size()));
  if (m < 1) throw std::invalid_argument("variety protocol: no SADF pairs");
  const auto s = pipeline_schedule(cfg, LossWeighting::snr);
  const auto dcfg = pipeline_driver(cfg);
  const std::uint64_t seed = derive_seed(cfg.seed, "variety");
  VarietyResult r;
  std::vector<Image> all;
  for (int i = 0; i < m; ++i) {
    const auto& p = pairs[static_cast<size_t>(i)];
    SynthesisJob job;
    job.driver = make_condition(mode, p.image, p.masks, dcfg, "sadf " + std::to_string(i));
    job.prompt = prompt_for_regions(p.masks);
    job.seeds = job_seeds(seed, static_cast<size_t>(i), cfg.metrics.variety_samples);
    std::vector<Image> imgs;
    for (auto& smp : synthesize(base, hyper, job, s)) imgs.push_back(std::move(smp.image));
    r.l2 += pairwise_l2(imgs) / m;
    const auto mi = mean_pairwise_mi(imgs, cfg.metrics.mi_bins);
    r.mi += mi.mean / m;
    r.degenerate_mi_pairs += mi.degenerate_pairs;
    all.insert(all.end(), imgs.begin(), imgs.end());
  }
  r.fid = fid(FeatureExtractor::standard().features(all), real_features);
  return r;
}

namespace {

struct RealData {
  AnnotatedDataset train, test, defect_free;
};

RealData load_real(const RunConfig& cfg) {
  const fs::path d = stage_dir(cfg, Stage::gen_toy_data);
  return {load_dataset(d / "real_train"), load_dataset(d / "real_test"), load_dataset(d / "defect_free")};
}

std::vector<Image> images_of(const AnnotatedDataset& ds) {
  std::vector<Image> out;
  for (const auto& im : ds.images) out.push_back(im.pixels);
  return out;
}

Matrix<double> real_reference_features(const RealData& real) {
  auto imgs = images_of(real.train);
  for (auto& im : images_of(real.test)) imgs.push_back(std::move(im));
  return FeatureExtractor::standard().features(imgs);
}

AnnotatedDataset without_ids(const AnnotatedDataset& ds, const std::set<int>& drop) {
  AnnotatedDataset out;
  out.categories = ds.categories;
  for (const auto& im : ds.images)
    if (!drop.count(im.id)) out.images.push_back(im);
  for (const auto& a : ds.annotations)
    if (!drop.count(a.image_id)) out.annotations.push_back(a);
  return out;
}

std::vector<int> ids_of(const AnnotatedDataset& ds) {
  std::vector<int> out;
  for (const auto& im : ds.images) out.push_back(im.id);
  return out;
}

Json log_tail(const std::vector<double>& v, size_t n = 20) {
  Json j = Json::array();
  for (size_t i = v.size() > n ? v.size() - n : 0; i < v.size(); ++i) j.push_back(v[i]);
  return j;
}

// Base model: a general texture model standing in for a pretrained network,
// trained with the class prompt.
Denoiser<float> pretrain_base(const RunConfig& cfg, const RealData& real, DiffusionTrainLog& log) {
  const DenoiserConfig dc{3, cfg.model.base_channels, cfg.model.mid_channels, cfg.model.time_dim, cfg.model.embed_dim};
  Denoiser<float> base(dc, Vocabulary::standard(cfg.model.embed_dim), derive_seed(cfg.seed, "base-init"));
  const auto images = cfg.pretrain.corpus == "generic"
                          ? generic_textures(cfg.pretrain.corpus_size, cfg.image_size, derive_seed(cfg.seed, "corpus"))
                          : images_of(real.defect_free);
  const std::vector<std::vector<int>> toks(images.size(), tokenize(cfg.pretrain.prompt, base.vocab()));
  DiffusionTrainConfig tc;
  tc.steps = cfg.pretrain.steps;
  tc.batch_size = cfg.pretrain.batch_size;
  tc.learning_rate = cfg.pretrain.learning_rate;
  tc.cosine_decay = cfg.pretrain.cosine_decay;
  tc.seed = derive_seed(cfg.seed, "base-train");
  log = train_denoiser(base, images, toks, pipeline_schedule(cfg, LossWeighting::ones), tc);
  return base;
}

// Step budgets scale with the data (a fixed number of epochs) but never
// drop below the configured minimum.
int training_steps(int min_steps, int epochs, std::size_t n) {
  return std::max(min_steps, epochs * static_cast<int>(n));
}

struct ConceptOutcome {
  Denoiser<float> model;
  ConceptLog log;
};

ConceptOutcome run_concept(const RunConfig& cfg, const Denoiser<float>& base, const AnnotatedDataset& concept_data,
                           const std::string& label) {
  const auto s = pipeline_schedule(cfg, LossWeighting::snr);
  const auto images = images_of(concept_data);
  const int n = cfg.concept_stage.prior_set_size < 0 ? default_prior_set_size(static_cast<int>(images.size()))
                                                      : cfg.concept_stage.prior_set_size;
  const SampleShape shape{3, cfg.image_size, cfg.image_size};
  const auto prior =
      generate_prior_set(base, cfg.pretrain.prompt, n, derive_seed(cfg.seed, label + "-prior"), s, shape);
  ConceptTrainingConfig cc;
  cc.lambda = cfg.concept_stage.lambda;
  cc.steps = training_steps(cfg.concept_stage.steps, cfg.concept_stage.epochs, images.size());
  cc.learning_rate = cfg.concept_stage.learning_rate;
  cc.prior_set_size = n;
  cc.optimizer = cfg.concept_stage.optimizer == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  cc.cosine_decay = cfg.concept_stage.cosine_decay;
  cc.seed = derive_seed(cfg.seed, label + "-train");
  auto r = learn_concept(base, images, cfg.concept_stage.prompt, prior, s, cc);
  return {std::move(r.model), std::move(r.log)};
}

HyperNetwork<float> run_condition(const RunConfig& cfg, const Denoiser<float>& model, const AnnotatedDataset& data,
                                  ConditionMode mode, const std::string& label, ConditionLog& log) {
  HyperNetwork<float> hyper(model, HyperConfig{}, derive_seed(cfg.seed, label + "-init"));
  ConditionTrainingConfig cc;
  cc.steps = training_steps(cfg.condition.steps, cfg.condition.epochs, data.images.size());
  cc.learning_rate = cfg.condition.learning_rate;
  cc.cosine_decay = cfg.condition.cosine_decay;
  cc.seed = derive_seed(cfg.seed, label + "-train");
  log = train_condition(model, hyper, condition_samples(data, model.vocab(), mode, pipeline_driver(cfg)),
                        pipeline_schedule(cfg, LossWeighting::snr), cc);
  return hyper;
}

Json condition_summary(const ConditionLog& log) {
  return Json{{"initial_probe_loss", log.initial_probe_loss},
              {"final_probe_loss", log.final_probe_loss},
              {"base_checks", log.base_checks},
              {"loss_tail", log_tail(log.losses)}};
}

SynthesisOutput synthesize_pairs(const RunConfig& cfg, const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                                 const std::vector<SadfPair>& pairs, ConditionMode mode, const std::string& label) {
  SynthesisConfig sc;
  sc.samples_per_driver = cfg.synthesis.samples_per_driver;
  sc.mode = mode;
  sc.driver = pipeline_driver(cfg);
  sc.seed = derive_seed(cfg.seed, label);
  return synthesize_dataset(base, hyper, pairs, pipeline_schedule(cfg, LossWeighting::snr), sc);
}

Json synthesis_summary(const SynthesisOutput& out) {
  return Json{{"images", out.dataset.images.size()},
              {"annotations", out.dataset.annotations.size()},
              {"failures", out.failures.size()},
              {"validation_issues", validation_issues(out.dataset).size()}};
}

Denoiser<float> load_concept_model(const RunConfig& cfg) {
  return load_denoiser(stage_dir(cfg, Stage::learn_concept) / "concept.ckpt").model;
}

Json variety_json(const VarietyResult& v) {
  return Json{{"l2", v.l2}, {"mi", v.mi}, {"fid", v.fid}, {"degenerate_mi_pairs", v.degenerate_mi_pairs}};
}

// ---- stages -------------------------------------------------------------

Json stage_data(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  AnnotatedDataset defective, defect_free;
  if (cfg.data.source == "toy") {
    ToyDatasetConfig tc;
    tc.image_size = cfg.image_size;
    tc.n_defective = cfg.data.n_defective;
    tc.n_defect_free = cfg.data.n_defect_free;
    tc.max_cracks = cfg.data.max_cracks;
    tc.seed = derive_seed(cfg.seed, "toy");
    auto toy = generate_toy_dataset(tc);
    defective = std::move(toy.defective);
    defect_free = std::move(toy.defect_free);
  } else {
    defective = load_dataset(cfg.data.real_dir);
    defect_free = load_dataset(cfg.data.defect_free_dir);
    std::vector<std::string> issues;
    for (const auto* ds : {&defective, &defect_free})
      for (const auto& im : ds->images)
        if (im.width != cfg.image_size || im.height != cfg.image_size)
          issues.push_back("image " + std::to_string(im.id) + " (" + im.file_name + ") is " +
                           std::to_string(im.width) + "x" + std::to_string(im.height) + ", image_size is " +
                           std::to_string(cfg.image_size));
    if (!issues.empty()) throw ConfigError(std::move(issues));
    if (!shared_image_ids(defective, defect_free).empty())
      throw ConfigError({"defective and defect-free datasets share image ids"});
  }
  const auto test = real_subset(defective, cfg.data.test_fraction, derive_seed(cfg.seed, "split"));
  const auto test_ids = ids_of(test);
  const auto train = without_ids(defective, std::set<int>(test_ids.begin(), test_ids.end()));
  check_split(test, {&train, &defect_free});
  save_dataset(train, dir / "real_train");
  save_dataset(test, dir / "real_test");
  save_dataset(defect_free, dir / "defect_free");
  log << "  " << train.images.size() << " train / " << test.images.size() << " test defective, "
      << defect_free.images.size() << " defect-free\n";
  return Json{{"train_images", train.images.size()},
              {"test_images", test.images.size()},
              {"defect_free_images", defect_free.images.size()},
              {"test_ids", test_ids}};
}

Json stage_concept(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  DiffusionTrainLog plog;
  const auto base = pretrain_base(cfg, real, plog);
  save_denoiser(base, pipeline_schedule(cfg, LossWeighting::ones), dir / "base.ckpt");
  log << "  base pretrained, running loss " << plog.final_running_loss << "\n";
  auto c = run_concept(cfg, base, real.train, "concept");
  Checkpoint ck = denoiser_checkpoint(c.model, pipeline_schedule(cfg, LossWeighting::snr), "concept");
  ck.meta["base_hash"] = base.hash();
  ck.meta["prior_clamp_policy"] = "clamp-[0,1]";
  ck.save(dir / "concept.ckpt");
  log << "  concept loss " << c.log.initial_concept_loss << " -> " << c.log.final_concept_loss << ", prior loss "
      << c.log.initial_prior_loss << " -> " << c.log.final_prior_loss << "\n";
  return Json{{"base_hash", base.hash()},
              {"concept_hash", c.model.hash()},
              {"pretrain_running_loss", plog.final_running_loss},
              {"prior_set_size", c.log.prior_set_size},
              {"prior_clamp_policy", "clamp-[0,1]"},
              {"initial_concept_loss", c.log.initial_concept_loss},
              {"final_concept_loss", c.log.final_concept_loss},
              {"initial_prior_loss", c.log.initial_prior_loss},
              {"final_prior_loss", c.log.final_prior_loss}};
}

Json stage_condition(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  const auto model = load_concept_model(cfg);
  const std::string before = model.hash();
  ConditionLog clog;
  const auto hyper = run_condition(cfg, model, real.train, ConditionMode::topological, "condition", clog);
  if (model.hash() != before) throw BaseMutationError("base model changed during condition learning");
  hyper_checkpoint(hyper).save(dir / "hyper.ckpt");
  std::vector<SourceItem> items;
  for (const auto& im : real.train.images) items.push_back({im.pixels, real.train.regions(im.id)});
  const auto probe = mask_location_probe(model, hyper, items, tokenize(cfg.concept_stage.prompt, model.vocab()),
                                         pipeline_driver(cfg), pipeline_schedule(cfg, LossWeighting::snr),
                                         cfg.condition.probe_trials, derive_seed(cfg.seed, "location-probe"));
  log << "  probe loss " << clog.initial_probe_loss << " -> " << clog.final_probe_loss << "; " << probe.text() << "\n";
  Json j = condition_summary(clog);
  j["base_hash_before"] = before;
  j["base_hash_after"] = model.hash();
  j["hyper_hash"] = hyper.hash();
  j["location_probe"] = Json{{"trials", probe.trials}, {"wins", probe.wins}, {"pass", probe.pass()},
                             {"mean_iou_moved", probe.mean_iou_moved}, {"mean_iou_random", probe.mean_iou_random}};
  return j;
}

Json stage_drivers(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  const auto dcfg = pipeline_driver(cfg);
  int violations = 0;
  std::vector<SourceItem> defective, free_items;
  for (const auto& im : real.train.images) {
    const auto regions = real.train.regions(im.id);
    const auto d = make_driver(im.pixels, regions, dcfg, "real " + std::to_string(im.id));
    violations += static_cast<int>(driver_violations(d, dcfg).size());
    save_driver(d, dir / (std::to_string(im.id) + ".png"));
    defective.push_back({im.pixels, regions});
  }
  SadfConfig sc;
  sc.perturbation = 0;
  for (const auto& p : build_sadf(real.defect_free, mask_pool(real.train), sc, derive_seed(cfg.seed, "probe-pairs")))
    free_items.push_back({p.image, p.masks});
  const size_t n = std::min(defective.size(), free_items.size());
  defective.resize(n);
  free_items.resize(n);
  const auto probe = driver_origin_blindness_check(dcfg, defective, free_items);
  log << "  " << real.train.images.size() << " drivers, " << violations << " violations; " << probe.text() << "\n";
  return Json{{"drivers", real.train.images.size()},
              {"violations", violations},
              {"config_hash", dcfg.hash()},
              {"origin_probe", Json{{"accuracy", probe.accuracy},
                                    {"threshold", probe.threshold},
                                    {"pass", probe.pass},
                                    {"n_train", probe.n_train},
                                    {"n_test", probe.n_test}}}};
}

Json stage_sadf(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  SadfConfig sc;
  sc.strategy = parse_sadf_strategy(cfg.sadf.strategy);
  sc.perturbation = cfg.sadf.perturbation;
  sc.pairs_per_image = cfg.sadf.pairs_per_image;
  const auto pool = sc.strategy == SadfStrategy::external ? load_external_masks(cfg.sadf.external_dir)
                                                          : mask_pool(real.train);
  const auto pairs = build_sadf(real.defect_free, pool, sc, derive_seed(cfg.seed, "sadf"));
  save_sadf_pairs(pairs, dir);
  log << "  " << pairs.size() << " pairs from a pool of " << pool.size() << " masks\n";
  return Json{{"pairs", pairs.size()}, {"pool", pool.size()}, {"strategy", to_string(sc.strategy)}};
}

Json stage_synthesize(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto model = load_concept_model(cfg);
  const auto hyper = hyper_from_checkpoint(Checkpoint::load(stage_dir(cfg, Stage::learn_condition) / "hyper.ckpt"), model);
  const auto pairs = load_sadf_pairs(stage_dir(cfg, Stage::build_sadf));
  const auto out = synthesize_pairs(cfg, model, hyper, pairs, ConditionMode::topological, "synthesis");
  save_synthesis(out, dir);
  log << "  " << out.dataset.images.size() << " images, " << out.failures.size() << " failed pairs\n";
  return synthesis_summary(out);
}

Json stage_inpaint(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  const auto model = load_concept_model(cfg);
  ConditionLog clog;
  const auto hyper = run_condition(cfg, model, real.train, ConditionMode::inpaint, "inpaint", clog);
  hyper_checkpoint(hyper, "inpaint-hypernetwork").save(dir / "hyper.ckpt");
  const auto pairs = load_sadf_pairs(stage_dir(cfg, Stage::build_sadf));
  const auto out = synthesize_pairs(cfg, model, hyper, pairs, ConditionMode::inpaint, "inpaint-synthesis");
  save_synthesis(out, dir / "dataset");
  log << "  probe loss " << clog.initial_probe_loss << " -> " << clog.final_probe_loss << ", "
      << out.dataset.images.size() << " images\n";
  Json j = synthesis_summary(out);
  j["condition"] = condition_summary(clog);
  return j;
}

Json stage_metrics(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  const auto model = load_concept_model(cfg);
  const auto ours = hyper_from_checkpoint(Checkpoint::load(stage_dir(cfg, Stage::learn_condition) / "hyper.ckpt"), model);
  const auto base_inp = hyper_from_checkpoint(Checkpoint::load(stage_dir(cfg, Stage::inpaint_baseline) / "hyper.ckpt"), model);
  const auto pairs = load_sadf_pairs(stage_dir(cfg, Stage::build_sadf));
  const auto ref = real_reference_features(real);
  const auto a = variety_protocol(model, ours, pairs, ConditionMode::topological, cfg, ref);
  const auto b = variety_protocol(model, base_inp, pairs, ConditionMode::inpaint, cfg, ref);
  const auto synth = load_dataset(stage_dir(cfg, Stage::synthesize));
  MetricReport rep;
  Json settings = cfg.to_json();
  settings.erase("out_dir");  // artifacts must not depend on where they are written
  rep.config_hash = sha256_hex(settings.dump());
  rep.set("ours.l2", a.l2);
  rep.set("ours.mi", a.mi);
  rep.set("ours.fid", a.fid);
  rep.set("inpaint.l2", b.l2);
  rep.set("inpaint.mi", b.mi);
  rep.set("inpaint.fid", b.fid);
  rep.set("synthetic_dataset.fid", fid(FeatureExtractor::standard().features(images_of(synth)), ref));
  rep.set("variety.m", std::min<int>(cfg.metrics.variety_drivers, static_cast<int>(pairs.size())));
  rep.set("variety.k", cfg.metrics.variety_samples);
  rep.save(dir, "metrics");
  log << rep.to_text();
  return Json{{"ours", variety_json(a)},
              {"inpaint", variety_json(b)},
              {"feature_extractor", FeatureExtractor::standard().hash()},
              {"report", rep.to_json()}};
}

Json stage_ablation(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  const auto pairs = load_sadf_pairs(stage_dir(cfg, Stage::build_sadf));
  const auto ref = real_reference_features(real);
  const auto subset = real_subset(real.train, cfg.ablation.fraction, derive_seed(cfg.seed, "scarce-subset"));
  save_dataset(subset, dir / "real_subset");
  const auto base = load_denoiser(stage_dir(cfg, Stage::learn_concept) / "base.ckpt").model;

  ConditionLog l1, l2;
  const auto h1 = run_condition(cfg, base, subset, ConditionMode::topological, "ablation-condition-only", l1);
  const auto v1 = variety_protocol(base, h1, pairs, ConditionMode::topological, cfg, ref);

  const auto c2 = run_concept(cfg, base, subset, "ablation-concept");
  const auto h2 = run_condition(cfg, c2.model, subset, ConditionMode::topological, "ablation-concept-condition", l2);
  const auto v2 = variety_protocol(c2.model, h2, pairs, ConditionMode::topological, cfg, ref);

  const auto full = load_concept_model(cfg);
  const auto h3 = hyper_from_checkpoint(Checkpoint::load(stage_dir(cfg, Stage::learn_condition) / "hyper.ckpt"), full);
  const auto v3 = variety_protocol(full, h3, pairs, ConditionMode::topological, cfg, ref);

  denoiser_checkpoint(c2.model, pipeline_schedule(cfg, LossWeighting::snr), "concept").save(dir / "concept.ckpt");
  hyper_checkpoint(h2).save(dir / "hyper.ckpt");

  Json rows = Json::array();
  const std::pair<const char*, const VarietyResult*> named[] = {
      {"condition-only", &v1}, {"concept+condition", &v2}, {"full-data reference", &v3}};
  std::ostringstream text;
  text << "fraction " << cfg.ablation.fraction << "\nrow fid\n";
  for (const auto& [name, v] : named) {
    rows.push_back(Json{{"row", name}, {"fid", v->fid}, {"l2", v->l2}, {"mi", v->mi}});
    text << name << " " << v->fid << "\n";
  }
  std::ofstream(dir / "ablation.txt") << text.str();
  write_json(dir / "ablation.json", Json{{"fraction", cfg.ablation.fraction}, {"rows", rows}});
  log << text.str();
  Json j{{"fraction", cfg.ablation.fraction}, {"subset_images", subset.images.size()}, {"rows", rows}};
  j["concept_final_loss"] = c2.log.final_concept_loss;
  return j;
}

Json stage_downstream(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  const auto real = load_real(cfg);
  const auto synth = load_dataset(stage_dir(cfg, Stage::synthesize));
  const fs::path abl = stage_dir(cfg, Stage::run_ablation);
  const auto subset = load_dataset(abl / "real_subset");
  RegimeConfig rc;
  rc.seeds.clear();
  for (int s : cfg.downstream.seeds) rc.seeds.push_back(static_cast<std::uint64_t>(s));
  rc.model.width = cfg.downstream.width;
  rc.train.epochs = cfg.downstream.epochs;
  rc.train.learning_rate = cfg.downstream.learning_rate;
  rc.train.foreground_weight = cfg.downstream.foreground_weight;
  rc.collapse_floor_iou = cfg.downstream.collapse_floor_iou;
  const auto full = evaluate_regimes(real.train, synth, real.test, rc, ids_of(real.train));
  // Only the annotated real data shrinks; the synthetic set is the same. The
  // subset is the one the ablation used, so it is passed whole.
  auto scarce = evaluate_regimes(subset, synth, real.test, rc, ids_of(real.train));
  scarce.real_fraction = cfg.ablation.fraction;
  std::ofstream(dir / "regimes_full.txt") << full.to_text();
  std::ofstream(dir / "regimes_scarce.txt") << scarce.to_text();
  write_json(dir / "regimes.json", Json{{"full", full.to_json()}, {"scarce", scarce.to_json()}});
  log << full.to_text() << scarce.to_text();
  return Json{{"full", full.to_json()}, {"scarce", scarce.to_json()}, {"collapse_floor_iou", rc.collapse_floor_iou}};
}

using StageFn = std::function<Json(const RunConfig&, const fs::path&, std::ostream&)>;

StageFn stage_fn(Stage s) {
  switch (s) {
    case Stage::gen_toy_data: return stage_data;
    case Stage::learn_concept: return stage_concept;
    case Stage::learn_condition: return stage_condition;
    case Stage::extract_drivers: return stage_drivers;
    case Stage::build_sadf: return stage_sadf;
    case Stage::synthesize: return stage_synthesize;
    case Stage::inpaint_baseline: return stage_inpaint;
    case Stage::evaluate_metrics: return stage_metrics;
    case Stage::run_ablation: return stage_ablation;
    case Stage::train_downstream: return stage_downstream;
  }
  throw std::logic_error("unknown stage");
}

}  // namespace

Manifest run_stage(const RunConfig& cfg, Stage s, std::ostream& log) {
  cfg.check();
  const auto& info = stage_info(s);
  Manifest m;
  m.stage = info.command;
  m.code_version = kCodeVersion;
  m.seed = cfg.seed;
  m.config = cfg.to_json();
  for (Stage up : info.upstream) m.upstream[stage_info(up).command] = verify_stage(cfg, up).hash;
  const fs::path dir = stage_dir(cfg, s);
  fs::remove_all(dir);
  fs::create_directories(dir);
  log << "[" << info.command << "] " << info.help << "\n";
  const auto start = std::chrono::steady_clock::now();
  m.summary = stage_fn(s)(cfg, dir, log);
  log << "  done in " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s\n";
  m.artifacts = hash_artifacts(dir);
  m.hash = m.compute_hash();
  write_json(dir / "manifest.json", m.to_json());
  return m;
}

std::vector<Manifest> run_all(const RunConfig& cfg, std::ostream& log) {
  std::vector<Manifest> out;
  for (const auto& info : stage_table()) out.push_back(run_stage(cfg, info.stage, log));
  Json j{{"fingerprint", run_fingerprint(cfg)}, {"stages", Json::array()}};
  for (const auto& m : out) j["stages"].push_back(Json{{"stage", m.stage}, {"manifest_hash", m.hash}});
  write_json(fs::path(cfg.out_dir) / "run.json", j);
  return out;
}

std::string run_fingerprint(const RunConfig& cfg) {
  std::string acc;
  for (const auto& info : stage_table()) {
    const fs::path dir = stage_dir(cfg, info.stage);
    if (!fs::exists(dir / "manifest.json")) continue;
    acc += info.command + "\n";
    for (const auto& [path, h] : read_manifest(dir).artifacts) acc += path + " " + h + "\n";
  }
  return sha256_hex(acc);
}

}  // namespace crackgen
