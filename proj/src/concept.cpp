#include "crackgen/concept.hpp"

#include "crackgen/trainer.hpp"

namespace crackgen {

namespace {

OptimizerConfig optimizer_config(const ConceptTrainingConfig& cfg) {
  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.learning_rate = cfg.learning_rate;
  oc.grad_clip = cfg.grad_clip;
  return oc;
}

std::vector<Image> model_space(const std::vector<Image>& images) {
  std::vector<Image> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(to_model_space(im));
  return out;
}

struct Draw {
  size_t index;
  int t;
  Image eps;
};

Draw draw(Rng& rng, const std::vector<Image>& data, const NoiseSchedule& s) {
  Draw d;
  d.index = static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(data.size())));
  d.t = static_cast<int>(rng.uniform_int(s.steps()));
  const Image& x = data[d.index];
  d.eps = normal_tensor<float>(x.channels(), x.height, x.width, rng);
  return d;
}

void check_loss(double v, int step, const char* who) {
  if (!std::isfinite(v) || v > 1e6)
    throw NumericError(std::string(who) + ": divergence at step " + std::to_string(step), step);
}

// Runs one optimisation step, tagging numeric failures with the step index.
template <typename F>
void guarded_step(int step, const char* who, F&& body) {
  try {
    body();
  } catch (const NumericError& e) {
    if (e.step() >= 0) throw;
    throw NumericError(std::string(who) + ": divergence at step " + std::to_string(step) + " (" + e.what() + ")",
                       step);
  }
}

// Keeps only the [V] column of the text table trainable.
void freeze_template_columns(ParameterSet<float>& grads, const Vocabulary& vocab) {
  auto& g = grads["text.table"];
  const int keep = vocab.index(kRareToken);
  for (Index c = 0; c < g.cols(); ++c)
    if (c != keep) g.col(c).setZero();
}

}  // namespace

void ConceptTrainingConfig::check() const {
  std::vector<std::string> errs;
  if (!(lambda >= 0)) errs.push_back("lambda must be >= 0");
  if (steps < 0) errs.push_back("steps must be >= 0");
  if (!(learning_rate > 0)) errs.push_back("learning_rate must be > 0");
  if (prior_set_size && *prior_set_size < 0) errs.push_back("prior_set_size must be >= 0");
  if (probe_size < 1) errs.push_back("probe_size must be >= 1");
  if (!errs.empty()) {
    std::string msg = "concept config:";
    for (const auto& e : errs) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

int default_prior_set_size(int concept_images) { return std::min(200, 4 * concept_images); }

PriorDataset generate_prior_set(const Denoiser<float>& frozen, const std::string& class_prompt, int n,
                                std::uint64_t seed, const NoiseSchedule& s, SampleShape shape) {
  if (n < 0) throw std::invalid_argument("generate_prior_set: n must be >= 0");
  PriorDataset p;
  p.prompt = class_prompt;
  p.tokens = tokenize(class_prompt, frozen.vocab());
  p.model_hash = frozen.hash();
  Rng rng(seed);
  for (int i = 0; i < n; ++i) p.seeds.push_back(rng.next());
  p.images = sample_images(frozen, p.tokens, s, p.seeds, shape);
  return p;
}

double probe_loss(const Denoiser<float>& model, const std::vector<Image>& images, const std::vector<int>& tokens,
                  const NoiseSchedule& s, int count, std::uint64_t seed) {
  if (images.empty()) return 0.0;
  const auto data = model_space(images);
  Rng rng(seed);
  const auto fn = eps_graph_fn(model, tokens);
  double total = 0;
  for (int k = 0; k < count; ++k) {
    const Draw d = draw(rng, data, s);
    Graph<float> g;
    total += g.scalar(reconstruction_term(g, fn, data[d.index], d.t, d.eps, s));
  }
  return total / count;
}

ConceptResult learn_concept(const Denoiser<float>& model, const std::vector<Image>& concept_images,
                            const std::string& concept_prompt, const PriorDataset& prior, const NoiseSchedule& s,
                            const ConceptTrainingConfig& cfg) {
  cfg.check();
  if (concept_images.empty()) throw std::invalid_argument("learn_concept: no concept images");
  if (!prior.images.empty() && prior.model_hash != model.hash())
    throw std::invalid_argument("learn_concept: prior set was not generated by this model");

  ConceptResult r{model, {}};
  Denoiser<float>& m = r.model;
  const auto c = tokenize(concept_prompt, model.vocab());
  const auto data = model_space(concept_images);
  const auto prior_data = model_space(prior.images);
  r.log.prior_set_size = static_cast<int>(prior.images.size());

  const std::uint64_t probe_seed = cfg.seed ^ 0x9e3779b97f4a7c15ULL;
  r.log.initial_concept_loss = probe_loss(m, concept_images, c, s, cfg.probe_size, probe_seed);
  r.log.initial_prior_loss = probe_loss(m, prior.images, prior.tokens, s, cfg.probe_size, probe_seed);

  // Separate streams so the concept draws do not depend on the prior set.
  Rng rng(cfg.seed);
  Rng prior_rng(cfg.seed + 0x51ed27);
  Optimizer<float> opt(m.params(), optimizer_config(cfg));
  ParameterSet<float> grads = m.params().zeros_like();
  for (int step = 0; step < cfg.steps; ++step) guarded_step(step, "learn_concept", [&] {
    grads.set_zero();
    const Draw d = draw(rng, data, s);
    Graph<float> g;
    Binder<float> p(g, m.params(), &grads);
    std::function<EpsGraphFn<float>(const std::vector<int>&)> by_prompt = [&](const std::vector<int>& tok) {
      return EpsGraphFn<float>([&, tok](Graph<float>&, Var x, int t) { return m.forward(p, x, t, tok).eps; });
    };
    double prior_value = 0;
    PriorLossTerms<float> terms;
    if (!prior_data.empty()) {
      const Draw q = draw(prior_rng, prior_data, s);
      terms = prior_preservation_loss(g, by_prompt, data[d.index], c, prior_data[q.index], prior.tokens, d.t, q.t,
                                      d.eps, q.eps, cfg.lambda, s);
      if (cfg.lambda == 0.0) {
        Graph<float> side;
        prior_value = side.scalar(reconstruction_term(side, eps_graph_fn(m, prior.tokens), prior_data[q.index], q.t,
                                                      q.eps, s));
      } else {
        prior_value = g.scalar(terms.prior);
      }
    } else {
      terms = prior_preservation_loss(g, by_prompt, data[d.index], c, data[d.index], c, d.t, d.t, d.eps, d.eps, 0.0, s);
    }
    const double total = g.scalar(terms.total);
    check_loss(total, step, "learn_concept");
    g.backward(terms.total);
    if (cfg.freeze_template_words) freeze_template_columns(grads, m.vocab());
    if (cfg.cosine_decay) opt.set_learning_rate(cosine_learning_rate(cfg.learning_rate, step, cfg.steps));
    opt.step(m.params(), grads);
    r.log.recon.push_back(g.scalar(terms.recon));
    r.log.prior.push_back(prior_value);
    r.log.total.push_back(total);
  });
  r.log.final_concept_loss = probe_loss(m, concept_images, c, s, cfg.probe_size, probe_seed);
  r.log.final_prior_loss = probe_loss(m, prior.images, prior.tokens, s, cfg.probe_size, probe_seed);
  return r;
}

std::vector<double> fine_tune(Denoiser<float>& model, const std::vector<Image>& images,
                              const std::vector<int>& tokens, const NoiseSchedule& s,
                              const ConceptTrainingConfig& cfg) {
  if (images.empty()) throw std::invalid_argument("fine_tune: no images");
  const auto data = model_space(images);
  Rng rng(cfg.seed);
  Optimizer<float> opt(model.params(), optimizer_config(cfg));
  ParameterSet<float> grads = model.params().zeros_like();
  std::vector<double> losses;
  for (int step = 0; step < cfg.steps; ++step) guarded_step(step, "fine_tune", [&] {
    grads.set_zero();
    const Draw d = draw(rng, data, s);
    Graph<float> g;
    Var l = reconstruction_term(g, eps_graph_fn(model, tokens, &grads), data[d.index], d.t, d.eps, s);
    const double v = g.scalar(l);
    check_loss(v, step, "fine_tune");
    g.backward(l);
    if (cfg.freeze_template_words) freeze_template_columns(grads, model.vocab());
    if (cfg.cosine_decay) opt.set_learning_rate(cosine_learning_rate(cfg.learning_rate, step, cfg.steps));
    opt.step(model.params(), grads);
    losses.push_back(v);
  });
  return losses;
}

}  // namespace crackgen
