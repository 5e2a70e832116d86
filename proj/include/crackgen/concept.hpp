#pragma once

#include "crackgen/diffusion.hpp"
#include "crackgen/optim.hpp"

#include <optional>

namespace crackgen {

/// Images sampled from the frozen pre-adaptation model with the class prompt.
struct PriorDataset {
  std::vector<Image> images;  // clamped to [0,1]
  std::string prompt;
  std::vector<int> tokens;
  std::vector<std::uint64_t> seeds;
  std::string model_hash;
  std::string clamp_policy = "clamp-[0,1]";
};

/// Draws `n` prior images with per-image seeds derived from `seed`.
PriorDataset generate_prior_set(const Denoiser<float>& frozen, const std::string& class_prompt, int n,
                                std::uint64_t seed, const NoiseSchedule& s, SampleShape shape);

/// 4x the concept-set size, capped at 200.
int default_prior_set_size(int concept_images);

struct ConceptTrainingConfig {
  double lambda = 1.0;
  int steps = 400;
  double learning_rate = 0.05;
  std::optional<int> prior_set_size;  // empty = default_prior_set_size
  OptimizerKind optimizer = OptimizerKind::sgd;
  double grad_clip = 1.0;
  bool freeze_template_words = false;
  int probe_size = 32;  // fixed (image, t, eps) triples for before/after loss
  bool cosine_decay = false;  // anneal the learning rate to 0 over `steps`
  std::uint64_t seed = 0;

  void check() const;
};

template <typename Scalar>
struct PriorLossTerms {
  Var total, recon, prior;
};

/// One noisy reconstruction term: omega_t * mean((x0_hat(x_t) - x)^2) where
/// x0_hat is recovered from the noise prediction.
template <typename Scalar>
Var reconstruction_term(Graph<Scalar>& g, const EpsGraphFn<Scalar>& model, const Tensor<Scalar>& x, int t,
                        const Tensor<Scalar>& eps, const NoiseSchedule& s) {
  Var xt = g.constant(forward_sample(x, t, eps, s));
  Var pred = model(g, xt, t);
  require_finite(g, pred, "reconstruction_term");
  Var l = ops::mse(g, reconstruct_x0(g, xt, pred, t, s), g.constant(x));
  return s.omega(t) == 1.0 ? l : ops::scale(g, l, static_cast<Scalar>(s.omega(t)));
}

/// Reconstruction term on (x, c) plus lambda times the same term on the prior
/// pair (x_pr, c_pr). `model(c)` maps a token list to the graph predictor.
/// With lambda == 0 the prior branch is not recorded and total is recon.
template <typename Scalar>
PriorLossTerms<Scalar> prior_preservation_loss(Graph<Scalar>& g,
                                               const std::function<EpsGraphFn<Scalar>(const std::vector<int>&)>& model,
                                               const Tensor<Scalar>& x, const std::vector<int>& c,
                                               const Tensor<Scalar>& x_pr, const std::vector<int>& c_pr, int t,
                                               int t_prime, const Tensor<Scalar>& eps,
                                               const Tensor<Scalar>& eps_prime, double lambda, const NoiseSchedule& s) {
  if (!(lambda >= 0)) throw std::invalid_argument("prior_preservation_loss: lambda must be >= 0");
  PriorLossTerms<Scalar> out;
  out.recon = reconstruction_term(g, model(c), x, t, eps, s);
  if (lambda == 0.0) {
    out.total = out.recon;
    return out;
  }
  out.prior = reconstruction_term(g, model(c_pr), x_pr, t_prime, eps_prime, s);
  out.total = ops::axpby(g, Scalar(1), out.recon, static_cast<Scalar>(lambda), out.prior);
  return out;
}

struct ConceptLog {
  std::vector<double> recon, prior, total;
  double initial_concept_loss = 0, final_concept_loss = 0;
  double initial_prior_loss = 0, final_prior_loss = 0;
  int prior_set_size = 0;
};

struct ConceptResult {
  Denoiser<float> model;
  ConceptLog log;
};

/// Mean reconstruction term over a fixed set of (image, t, eps) draws.
double probe_loss(const Denoiser<float>& model, const std::vector<Image>& images, const std::vector<int>& tokens,
                  const NoiseSchedule& s, int count, std::uint64_t seed);

/// Phase 1: fine-tunes a copy of `model` on `concept_images` with the concept
/// prompt, regularised by the prior set. The input model is not modified.
ConceptResult learn_concept(const Denoiser<float>& model, const std::vector<Image>& concept_images,
                            const std::string& concept_prompt, const PriorDataset& prior, const NoiseSchedule& s,
                            const ConceptTrainingConfig& cfg);

/// Plain fine-tuning on the reconstruction term only; returns per-step loss.
std::vector<double> fine_tune(Denoiser<float>& model, const std::vector<Image>& images,
                              const std::vector<int>& tokens, const NoiseSchedule& s,
                              const ConceptTrainingConfig& cfg);

}  // namespace crackgen
