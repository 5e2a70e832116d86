#pragma once

// Forward noising, the epsilon-prediction objective and the ancestral sampler.

#include "crackgen/denoiser.hpp"
#include "crackgen/schedule.hpp"

#include <cmath>
#include <functional>
#include <string>

namespace crackgen {

/// Records an epsilon prediction for x_t at step t on a graph.
template <typename Scalar>
using EpsGraphFn = std::function<Var(Graph<Scalar>&, Var x_t, int t)>;

/// Gradient-free epsilon prediction.
template <typename Scalar>
using EpsFn = std::function<Tensor<Scalar>(const Tensor<Scalar>& x_t, int t)>;

inline void check_step(const NoiseSchedule& s, int t) {
  if (t < 0 || t >= s.steps())
    throw std::out_of_range("step " + std::to_string(t) + " outside [0, " + std::to_string(s.steps()) + ")");
}

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <typename Scalar>
Tensor<Scalar> forward_sample(const Tensor<Scalar>& x0, int t, const Tensor<Scalar>& eps,
                              const NoiseSchedule& s) {
  check_step(s, t);
  if (!x0.same_shape(eps))
    throw ShapeError("forward_sample: x0 " + shape_string(x0) + " vs eps " + shape_string(eps));
  const double ab = s.alpha_bar(t);
  if (ab == 1.0) return x0;
  if (ab == 0.0) return eps;
  const Scalar a = static_cast<Scalar>(std::sqrt(ab));
  const Scalar b = static_cast<Scalar>(std::sqrt(1.0 - ab));
  return Tensor<Scalar>(a * x0.data + b * eps.data, x0.height, x0.width);
}

/// x0 reconstruction implied by an epsilon prediction:
/// (x_t - sqrt(1 - alpha_bar) eps_hat) / sqrt(alpha_bar).
template <typename Scalar>
Var reconstruct_x0(Graph<Scalar>& g, Var x_t, Var eps_hat, int t, const NoiseSchedule& s) {
  const double ab = s.alpha_bar(t);
  const Scalar inv = static_cast<Scalar>(1.0 / std::sqrt(ab));
  return ops::axpby(g, inv, x_t, static_cast<Scalar>(-std::sqrt(1.0 - ab)) * inv, eps_hat);
}

template <typename Scalar>
void require_finite(const Graph<Scalar>& g, Var v, const std::string& what) {
  if (!g.data(v).allFinite()) throw NumericError(what + ": model output contains NaN/Inf");
}

/// omega_t * mean((eps - eps_theta(x_t, t))^2), recorded on a graph.
template <typename Scalar>
Var loss_eps(Graph<Scalar>& g, const EpsGraphFn<Scalar>& model, const Tensor<Scalar>& x0, int t,
             const Tensor<Scalar>& eps, const NoiseSchedule& s) {
  Var xt = g.constant(forward_sample(x0, t, eps, s));
  Var pred = model(g, xt, t);
  require_finite(g, pred, "loss_eps");
  if (!g.value(pred).same_shape(eps))
    throw ShapeError("loss_eps: prediction " + shape_string(g.value(pred)) + " vs eps " + shape_string(eps));
  Var l = ops::mse(g, pred, g.constant(eps));
  return s.omega(t) == 1.0 ? l : ops::scale(g, l, static_cast<Scalar>(s.omega(t)));
}

template <typename Scalar>
double loss_eps_value(const EpsGraphFn<Scalar>& model, const Tensor<Scalar>& x0, int t,
                      const Tensor<Scalar>& eps, const NoiseSchedule& s) {
  Graph<Scalar> g;
  return static_cast<double>(g.scalar(loss_eps(g, model, x0, t, eps, s)));
}

/// Adapts a Denoiser (with fixed prompt tokens) to the graph interface.
template <typename Scalar>
EpsGraphFn<Scalar> eps_graph_fn(const Denoiser<Scalar>& model, std::vector<int> tokens,
                                ParameterSet<Scalar>* grads = nullptr,
                                std::function<bool(const std::string&)> trainable = {}) {
  return [&model, tokens = std::move(tokens), grads, trainable](Graph<Scalar>& g, Var x, int t) {
    Binder<Scalar> p(g, model.params(), grads, trainable);
    return model.forward(p, x, t, tokens).eps;
  };
}

template <typename Scalar>
EpsFn<Scalar> eps_fn(const Denoiser<Scalar>& model, std::vector<int> tokens) {
  return [&model, tokens = std::move(tokens)](const Tensor<Scalar>& x, int t) {
    return model.predict(x, t, tokens);
  };
}

struct SampleShape {
  Index channels = 3, height = 16, width = 16;
};

/// Reverse process from x_T ~ N(0, I): x_{t-1} = mu_theta(x_t, t) + sigma_t z,
/// mu_theta = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_theta) / sqrt(alpha_t).
/// No noise is added on the final step.
template <typename Scalar>
Tensor<Scalar> ancestral_sample(const EpsFn<Scalar>& model, const NoiseSchedule& s, std::uint64_t seed,
                                SampleShape shape) {
  Rng rng(seed);
  Tensor<Scalar> x = normal_tensor<Scalar>(shape.channels, shape.height, shape.width, rng);
  for (int t = s.steps() - 1; t >= 0; --t) {
    const Tensor<Scalar> eps = model(x, t);
    if (!eps.same_shape(x)) throw ShapeError("ancestral_sample: model output shape mismatch");
    const double ab = s.alpha_bar(t);
    const double coef = s.beta(t) / std::sqrt(std::max(1.0 - ab, 1e-20));
    const Scalar inv_sqrt_alpha = static_cast<Scalar>(1.0 / std::sqrt(s.alpha(t)));
    x.data = inv_sqrt_alpha * (x.data - static_cast<Scalar>(coef) * eps.data);
    if (t > 0) {
      const Scalar sig = static_cast<Scalar>(s.sigma(t));
      x.data += sig * normal_matrix<Scalar>(x.channels(), x.pixels(), rng);
    }
    if (!x.data.allFinite())
      throw NumericError("ancestral_sample: non-finite value at step " + std::to_string(t), t);
  }
  return x;
}

/// Images live in [0,1]; the diffusion model works on 2x - 1.
template <typename Scalar>
Tensor<Scalar> to_model_space(const Tensor<Scalar>& img) {
  return Tensor<Scalar>((img.data.array() * Scalar(2) - Scalar(1)).matrix(), img.height, img.width);
}

/// Inverse of to_model_space followed by clamping to [0,1].
template <typename Scalar>
Tensor<Scalar> from_model_space(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(((x.data.array() + Scalar(1)) * Scalar(0.5)).max(Scalar(0)).min(Scalar(1)).matrix(),
                        x.height, x.width);
}

/// Peak signal-to-noise ratio for signals in [0,1].
template <typename Scalar>
double psnr(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const double mse = (a.data - b.data).template cast<double>().squaredNorm() / static_cast<double>(a.data.size());
  return mse == 0.0 ? INFINITY : 10.0 * std::log10(1.0 / mse);
}

/// Plain epsilon-objective trainer for a Denoiser on a fixed image set with a
/// single prompt. Used to build the generic prior model and in the overfit
/// oracle.
struct DiffusionTrainConfig {
  int steps = 1000;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  double stop_loss = 0.0;    // stop once the running loss drops below this (0 = never)
  double ema_decay = 0.98;   // running-loss smoothing
  bool cosine_decay = false; // anneal the learning rate to 0 over `steps`
};

struct DiffusionTrainLog {
  std::vector<double> losses;
  double final_running_loss = 0.0;
  int steps_run = 0;
};

}  // namespace crackgen
