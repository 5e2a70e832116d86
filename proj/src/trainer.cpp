#include "crackgen/trainer.hpp"

#include "crackgen/optim.hpp"

namespace crackgen {

DiffusionTrainLog train_denoiser(Denoiser<float>& model, const std::vector<Image>& images,
                                 const std::vector<std::vector<int>>& tokens, const NoiseSchedule& s,
                                 const DiffusionTrainConfig& cfg) {
  if (images.empty()) throw std::invalid_argument("train_denoiser: no images");
  if (tokens.size() != images.size()) throw std::invalid_argument("train_denoiser: one prompt per image");
  std::vector<Image> data;
  data.reserve(images.size());
  for (const auto& im : images) data.push_back(to_model_space(im));

  Rng rng(cfg.seed);
  OptimizerConfig ocfg;
  ocfg.kind = OptimizerKind::adam;
  ocfg.learning_rate = cfg.learning_rate;
  ocfg.grad_clip = cfg.grad_clip;
  Optimizer<float> opt(model.params(), ocfg);
  ParameterSet<float> grads = model.params().zeros_like();

  DiffusionTrainLog log;
  double running = -1;
  for (int step = 0; step < cfg.steps; ++step) {
    grads.set_zero();
    double batch_loss = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto i = static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(data.size())));
      const int t = static_cast<int>(rng.uniform_int(s.steps()));
      const Image eps = normal_tensor<float>(data[i].channels(), data[i].height, data[i].width, rng);
      Graph<float> g;
      Binder<float> p(g, model.params(), &grads);
      EpsGraphFn<float> fn = [&](Graph<float>&, Var x, int tt) {
        return model.forward(p, x, tt, tokens[i]).eps;
      };
      Var loss = ops::scale(g, loss_eps(g, fn, data[i], t, eps, s), 1.0f / static_cast<float>(cfg.batch_size));
      batch_loss += g.scalar(loss);
      g.backward(loss);
    }
    if (!std::isfinite(batch_loss) || batch_loss > 1e6)
      throw NumericError("train_denoiser: divergence at step " + std::to_string(step), step);
    if (cfg.cosine_decay) opt.set_learning_rate(cosine_learning_rate(cfg.learning_rate, step, cfg.steps));
    opt.step(model.params(), grads);
    log.losses.push_back(batch_loss);
    running = running < 0 ? batch_loss : cfg.ema_decay * running + (1 - cfg.ema_decay) * batch_loss;
    log.steps_run = step + 1;
    if (cfg.stop_loss > 0 && step >= 50 && running < cfg.stop_loss) break;
  }
  log.final_running_loss = running;
  return log;
}

std::vector<Image> sample_images(const Denoiser<float>& model, const std::vector<int>& tokens,
                                 const NoiseSchedule& s, const std::vector<std::uint64_t>& seeds,
                                 SampleShape shape) {
  std::vector<Image> out;
  out.reserve(seeds.size());
  const EpsFn<float> fn = eps_fn(model, tokens);
  for (auto seed : seeds) out.push_back(from_model_space(ancestral_sample(fn, s, seed, shape)));
  return out;
}

}  // namespace crackgen
