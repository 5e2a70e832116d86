#include "crackgen/config.hpp"

#include "crackgen/augment.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace crackgen {

namespace {

std::string join_issues(const std::vector<std::string>& issues) {
  std::string out = "invalid configuration (" + std::to_string(issues.size()) + " problem" +
                    (issues.size() == 1 ? "" : "s") + "):";
  for (const auto& i : issues) out += "\n  - " + i;
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_double(const std::string& s, double& out) {
  try {
    size_t n = 0;
    out = std::stod(s, &n);
    return n == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

struct Binding {
  std::string name, doc;
  std::function<bool(RunConfig&, const std::string&)> set;  // false on a malformed value
  std::function<std::string(const RunConfig&)> get;
  std::function<Json(const RunConfig&)> json;
};

template <typename T>
using Field = std::function<T&(RunConfig&)>;

Binding int_key(std::string name, std::string doc, Field<int> f) {
  return {std::move(name), std::move(doc),
          [f](RunConfig& c, const std::string& v) { return parse_number(v, f(c)); },
          [f](const RunConfig& c) { return std::to_string(f(const_cast<RunConfig&>(c))); },
          [f](const RunConfig& c) { return Json(f(const_cast<RunConfig&>(c))); }};
}

Binding u64_key(std::string name, std::string doc, Field<std::uint64_t> f) {
  return {std::move(name), std::move(doc),
          [f](RunConfig& c, const std::string& v) { return parse_number(v, f(c)); },
          [f](const RunConfig& c) { return std::to_string(f(const_cast<RunConfig&>(c))); },
          [f](const RunConfig& c) { return Json(f(const_cast<RunConfig&>(c))); }};
}

Binding real_key(std::string name, std::string doc, Field<double> f) {
  return {std::move(name), std::move(doc),
          [f](RunConfig& c, const std::string& v) { return parse_double(v, f(c)); },
          [f](const RunConfig& c) { return format_double(f(const_cast<RunConfig&>(c))); },
          [f](const RunConfig& c) { return Json(f(const_cast<RunConfig&>(c))); }};
}

Binding text_key(std::string name, std::string doc, Field<std::string> f) {
  return {std::move(name), std::move(doc),
          [f](RunConfig& c, const std::string& v) {
            f(c) = v;
            return true;
          },
          [f](const RunConfig& c) { return f(const_cast<RunConfig&>(c)); },
          [f](const RunConfig& c) { return Json(f(const_cast<RunConfig&>(c))); }};
}

Binding bool_key(std::string name, std::string doc, Field<bool> f) {
  return {std::move(name), std::move(doc),
          [f](RunConfig& c, const std::string& v) {
            if (v != "true" && v != "false") return false;
            f(c) = v == "true";
            return true;
          },
          [f](const RunConfig& c) { return std::string(f(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [f](const RunConfig& c) { return Json(f(const_cast<RunConfig&>(c))); }};
}

Binding int_list_key(std::string name, std::string doc, Field<std::vector<int>> f) {
  return {std::move(name), std::move(doc),
          [f](RunConfig& c, const std::string& v) {
            std::vector<int> out;
            std::stringstream in(v);
            for (std::string item; std::getline(in, item, ',');) {
              int x;
              if (!parse_number(trim(item), x)) return false;
              out.push_back(x);
            }
            f(c) = out;
            return true;
          },
          [f](const RunConfig& c) {
            std::string s;
            for (int x : f(const_cast<RunConfig&>(c))) s += (s.empty() ? "" : ",") + std::to_string(x);
            return s;
          },
          [f](const RunConfig& c) { return Json(f(const_cast<RunConfig&>(c))); }};
}

const std::vector<Binding>& registry() {
  static const std::vector<Binding> keys = {
      u64_key("seed", "global seed; every stage derives its streams from it", [](RunConfig& c) -> auto& { return c.seed; }),
      text_key("out_dir", "output root (CRACKGEN_OUT or --out override it)", [](RunConfig& c) -> auto& { return c.out_dir; }),
      int_key("image_size", "square image side in pixels", [](RunConfig& c) -> auto& { return c.image_size; }),
      text_key("data.source", "toy | directory", [](RunConfig& c) -> auto& { return c.data.source; }),
      text_key("data.real_dir", "annotated defective dataset directory (directory source)",
               [](RunConfig& c) -> auto& { return c.data.real_dir; }),
      text_key("data.defect_free_dir", "defect-free image dataset directory (directory source)",
               [](RunConfig& c) -> auto& { return c.data.defect_free_dir; }),
      int_key("data.n_defective", "toy defective images", [](RunConfig& c) -> auto& { return c.data.n_defective; }),
      int_key("data.n_defect_free", "toy defect-free images", [](RunConfig& c) -> auto& { return c.data.n_defect_free; }),
      int_key("data.max_cracks", "toy cracks per defective image", [](RunConfig& c) -> auto& { return c.data.max_cracks; }),
      real_key("data.test_fraction", "share of defective images held out for testing",
               [](RunConfig& c) -> auto& { return c.data.test_fraction; }),
      int_key("model.base_channels", "denoiser width at full resolution",
              [](RunConfig& c) -> auto& { return c.model.base_channels; }),
      int_key("model.mid_channels", "denoiser width at the two coarser levels",
              [](RunConfig& c) -> auto& { return c.model.mid_channels; }),
      int_key("model.time_dim", "timestep embedding size", [](RunConfig& c) -> auto& { return c.model.time_dim; }),
      int_key("model.embed_dim", "token embedding size", [](RunConfig& c) -> auto& { return c.model.embed_dim; }),
      int_key("model.schedule_steps", "diffusion steps T (linear betas scaled to T)",
              [](RunConfig& c) -> auto& { return c.model.schedule_steps; }),
      int_key("pretrain.steps", "base model training steps", [](RunConfig& c) -> auto& { return c.pretrain.steps; }),
      int_key("pretrain.batch_size", "base model batch size", [](RunConfig& c) -> auto& { return c.pretrain.batch_size; }),
      real_key("pretrain.learning_rate", "base model Adam step", [](RunConfig& c) -> auto& { return c.pretrain.learning_rate; }),
      text_key("pretrain.prompt", "class prompt of the base model and prior set",
               [](RunConfig& c) -> auto& { return c.pretrain.prompt; }),
      bool_key("pretrain.cosine_decay", "anneal the learning rate to 0 (true | false)",
               [](RunConfig& c) -> auto& { return c.pretrain.cosine_decay; }),
      text_key("pretrain.corpus", "generic (procedural textures) | defect_free (the defect-free images)",
               [](RunConfig& c) -> auto& { return c.pretrain.corpus; }),
      int_key("pretrain.corpus_size", "generic corpus images", [](RunConfig& c) -> auto& { return c.pretrain.corpus_size; }),
      int_key("concept.steps", "minimum concept fine-tuning steps", [](RunConfig& c) -> auto& { return c.concept_stage.steps; }),
      int_key("concept.epochs", "steps = max(concept.steps, epochs x concept images)", [](RunConfig& c) -> auto& { return c.concept_stage.epochs; }),
      real_key("concept.lambda", "prior-preservation weight", [](RunConfig& c) -> auto& { return c.concept_stage.lambda; }),
      real_key("concept.learning_rate", "concept step size", [](RunConfig& c) -> auto& { return c.concept_stage.learning_rate; }),
      text_key("concept.optimizer", "sgd | adam", [](RunConfig& c) -> auto& { return c.concept_stage.optimizer; }),
      int_key("concept.prior_set_size", "prior images; -1 picks min(200, 4 x concept images)",
              [](RunConfig& c) -> auto& { return c.concept_stage.prior_set_size; }),
      bool_key("concept.cosine_decay", "anneal the learning rate to 0 (true | false)",
               [](RunConfig& c) -> auto& { return c.concept_stage.cosine_decay; }),
      text_key("concept.prompt", "concept training prompt", [](RunConfig& c) -> auto& { return c.concept_stage.prompt; }),
      int_key("condition.steps", "minimum hypernetwork training steps", [](RunConfig& c) -> auto& { return c.condition.steps; }),
      int_key("condition.epochs", "steps = max(condition.steps, epochs x training images)", [](RunConfig& c) -> auto& { return c.condition.epochs; }),
      real_key("condition.learning_rate", "hypernetwork Adam step",
               [](RunConfig& c) -> auto& { return c.condition.learning_rate; }),
      bool_key("condition.cosine_decay", "anneal the learning rate to 0 (true | false)",
               [](RunConfig& c) -> auto& { return c.condition.cosine_decay; }),
      int_key("condition.probe_trials", "mask-location probe trials",
              [](RunConfig& c) -> auto& { return c.condition.probe_trials; }),
      int_key("driver.downscale_factor", "topology resolution divisor",
              [](RunConfig& c) -> auto& { return c.driver.downscale_factor; }),
      int_key("driver.threshold_window", "adaptive threshold window (odd)",
              [](RunConfig& c) -> auto& { return c.driver.threshold_window; }),
      real_key("driver.threshold_offset", "adaptive threshold offset in [0,1] gray units",
               [](RunConfig& c) -> auto& { return c.driver.threshold_offset; }),
      text_key("sadf.strategy", "random_perturbed | external | generated", [](RunConfig& c) -> auto& { return c.sadf.strategy; }),
      real_key("sadf.perturbation", "mask perturbation magnitude", [](RunConfig& c) -> auto& { return c.sadf.perturbation; }),
      int_key("sadf.pairs_per_image", "pairs per defect-free image", [](RunConfig& c) -> auto& { return c.sadf.pairs_per_image; }),
      text_key("sadf.external_dir", "mask directory for the external strategy",
               [](RunConfig& c) -> auto& { return c.sadf.external_dir; }),
      int_key("synthesis.samples_per_driver", "images per SADF pair",
              [](RunConfig& c) -> auto& { return c.synthesis.samples_per_driver; }),
      int_key("metrics.variety_drivers", "drivers m of the variety protocol",
              [](RunConfig& c) -> auto& { return c.metrics.variety_drivers; }),
      int_key("metrics.variety_samples", "samples k per driver of the variety protocol",
              [](RunConfig& c) -> auto& { return c.metrics.variety_samples; }),
      int_key("metrics.mi_bins", "histogram bins for mutual information", [](RunConfig& c) -> auto& { return c.metrics.mi_bins; }),
      real_key("ablation.fraction", "share of real training data in the ablation",
               [](RunConfig& c) -> auto& { return c.ablation.fraction; }),
      int_key("downstream.epochs", "segmentor epochs per training set", [](RunConfig& c) -> auto& { return c.downstream.epochs; }),
      real_key("downstream.learning_rate", "segmentor Adam step",
               [](RunConfig& c) -> auto& { return c.downstream.learning_rate; }),
      real_key("downstream.foreground_weight", "cross-entropy weight of crack pixels",
               [](RunConfig& c) -> auto& { return c.downstream.foreground_weight; }),
      int_key("downstream.width", "segmentor width", [](RunConfig& c) -> auto& { return c.downstream.width; }),
      int_list_key("downstream.seeds", "comma-separated segmentor seeds", [](RunConfig& c) -> auto& { return c.downstream.seeds; }),
      real_key("downstream.collapse_floor_iou", "IoU x 100 below which a run counts as collapsed",
               [](RunConfig& c) -> auto& { return c.downstream.collapse_floor_iou; }),
  };
  return keys;
}

const Binding* find_key(const std::string& name) {
  for (const auto& b : registry())
    if (b.name == name) return &b;
  return nullptr;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> issues) : std::runtime_error(join_issues(issues)), issues_(std::move(issues)) {}

std::vector<ConfigKey> config_keys() {
  std::vector<ConfigKey> out;
  for (const auto& b : registry()) out.push_back({b.name, b.doc});
  return out;
}

std::vector<std::string> RunConfig::issues() const {
  std::vector<std::string> out;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) out.push_back(msg);
  };
  need(image_size >= 8 && image_size % 4 == 0, "image_size must be a multiple of 4 and >= 8");
  need(!out_dir.empty(), "out_dir must not be empty");
  need(data.source == "toy" || data.source == "directory", "data.source must be 'toy' or 'directory'");
  if (data.source == "directory") {
    need(!data.real_dir.empty(), "data.real_dir is required when data.source = directory");
    need(!data.defect_free_dir.empty(), "data.defect_free_dir is required when data.source = directory");
  }
  need(data.n_defective >= 4, "data.n_defective must be >= 4");
  need(data.n_defect_free >= 1, "data.n_defect_free must be >= 1");
  need(data.max_cracks >= 1, "data.max_cracks must be >= 1");
  need(data.test_fraction > 0 && data.test_fraction < 1, "data.test_fraction must be in (0, 1)");
  need(model.base_channels >= 1 && model.mid_channels >= 1, "model channel counts must be >= 1");
  need(model.time_dim >= 2 && model.time_dim % 2 == 0, "model.time_dim must be even and >= 2");
  need(model.embed_dim >= 1, "model.embed_dim must be >= 1");
  need(model.schedule_steps >= 2, "model.schedule_steps must be >= 2");
  need(pretrain.steps >= 0, "pretrain.steps must be >= 0");
  need(pretrain.batch_size >= 1, "pretrain.batch_size must be >= 1");
  need(pretrain.learning_rate > 0, "pretrain.learning_rate must be > 0");
  need(pretrain.corpus == "generic" || pretrain.corpus == "defect_free", "pretrain.corpus must be 'generic' or 'defect_free'");
  need(pretrain.corpus_size >= 1, "pretrain.corpus_size must be >= 1");
  need(concept_stage.steps >= 0, "concept.steps must be >= 0");
  need(concept_stage.epochs >= 0, "concept.epochs must be >= 0");
  need(condition.epochs >= 0, "condition.epochs must be >= 0");
  need(concept_stage.lambda >= 0, "concept.lambda must be >= 0");
  need(concept_stage.learning_rate > 0, "concept.learning_rate must be > 0");
  need(concept_stage.optimizer == "sgd" || concept_stage.optimizer == "adam", "concept.optimizer must be 'sgd' or 'adam'");
  need(concept_stage.prior_set_size >= -1, "concept.prior_set_size must be >= -1");
  need(condition.steps >= 0, "condition.steps must be >= 0");
  need(condition.learning_rate > 0, "condition.learning_rate must be > 0");
  need(condition.probe_trials >= 1, "condition.probe_trials must be >= 1");
  need(driver.downscale_factor >= 1 && image_size % std::max(1, driver.downscale_factor) == 0,
       "driver.downscale_factor must be >= 1 and divide image_size");
  need(driver.threshold_window >= 3 && driver.threshold_window % 2 == 1, "driver.threshold_window must be odd and >= 3");
  need(driver.threshold_offset >= 0 && driver.threshold_offset < 1, "driver.threshold_offset must be in [0, 1)");
  try {
    const auto s = parse_sadf_strategy(sadf.strategy);
    if (s == SadfStrategy::external) need(!sadf.external_dir.empty(), "sadf.external_dir is required for the external strategy");
  } catch (const std::exception&) {
    out.push_back("sadf.strategy must be random_perturbed, external or generated");
  }
  need(sadf.perturbation >= 0, "sadf.perturbation must be >= 0");
  need(sadf.pairs_per_image >= 1, "sadf.pairs_per_image must be >= 1");
  need(synthesis.samples_per_driver >= 1 && synthesis.samples_per_driver <= 15,
       "synthesis.samples_per_driver must be in [1, 15]");
  need(metrics.variety_drivers >= 1, "metrics.variety_drivers must be >= 1");
  need(metrics.variety_samples >= 2, "metrics.variety_samples must be >= 2");
  need(metrics.mi_bins >= 2, "metrics.mi_bins must be >= 2");
  need(ablation.fraction > 0 && ablation.fraction <= 1, "ablation.fraction must be in (0, 1]");
  need(downstream.epochs >= 0, "downstream.epochs must be >= 0");
  need(downstream.learning_rate > 0, "downstream.learning_rate must be > 0");
  need(downstream.foreground_weight > 0, "downstream.foreground_weight must be > 0");
  need(downstream.width >= 1, "downstream.width must be >= 1");
  need(!downstream.seeds.empty(), "downstream.seeds must list at least one seed");
  need(std::set<int>(downstream.seeds.begin(), downstream.seeds.end()).size() == downstream.seeds.size(),
       "downstream.seeds must be distinct");
  return out;
}

void RunConfig::check() const {
  auto list = issues();
  if (!list.empty()) throw ConfigError(std::move(list));
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& b : registry()) out += b.name + " = " + b.get(*this) + "\n";
  return out;
}

Json RunConfig::to_json() const {
  Json j = Json::object();
  for (const auto& b : registry()) j[b.name] = b.json(*this);
  return j;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Binding* b = find_key(key);
  if (!b) throw ConfigError({"unknown key '" + key + "'"});
  if (!b->set(cfg, value)) throw ConfigError({"bad value '" + value + "' for key '" + key + "'"});
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::vector<std::string> issues;
  std::set<std::string> seen;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      issues.push_back(where + "expected 'key = value', got '" + line + "'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const Binding* b = find_key(key);
    if (!b) {
      issues.push_back(where + "unknown key '" + key + "'");
      continue;
    }
    if (!seen.insert(key).second) issues.push_back(where + "duplicate key '" + key + "'");
    if (!b->set(cfg, value)) issues.push_back(where + "bad value '" + value + "' for key '" + key + "'");
  }
  for (auto& i : cfg.issues()) issues.push_back(origin + ": " + i);
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError({"cannot read config file " + path.string()});
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace crackgen
