#pragma once

#include "crackgen/ops.hpp"
#include "crackgen/optim.hpp"
#include "crackgen/params.hpp"

#include <utility>
#include <vector>

namespace crackgen {

struct CodecConfig {
  int in_channels = 3;
  int latent_channels = 4;
  int hidden_channels = 16;
  int downscale_factor = 2;
  double kl_weight = 1e-3;

  bool operator==(const CodecConfig&) const = default;
};

template <typename Scalar>
struct LatentMoments {
  Var mean;
  Var logvar;
};

/// Small KL-regularised autoencoder. The encoder emits per-pixel Gaussian
/// moments at 1/downscale_factor resolution; both directions combine a
/// nonlinear path with a linear 1x1 skip.
template <typename Scalar>
class LatentCodec {
 public:
  LatentCodec() = default;
  LatentCodec(CodecConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.downscale_factor < 1) throw std::invalid_argument("codec: downscale_factor must be >= 1");
    Rng rng(seed);
    const int c = cfg_.in_channels, l = cfg_.latent_channels, h = cfg_.hidden_channels;
    auto conv = [&](const std::string& name, int cin, int cout, int k) {
      params_.add(name + ".w", fan_in_uniform<Scalar>(cout, k * k * cin, k * k * cin, rng));
      params_.add(name + ".b", fan_in_uniform<Scalar>(cout, 1, k * k * cin, rng));
    };
    conv("enc.conv", c, h, 3);
    conv("enc.out", h, 2 * l, 1);
    conv("enc.skip", c, 2 * l, 1);
    conv("dec.conv", l, h, 3);
    conv("dec.out", h, c, 3);
    conv("dec.skip", l, c, 1);
  }

  /// Sets the codec to pass the input channels straight through the skip
  /// paths (mean = pooled input, logvar = 0, decode = upsampled latent).
  void identity_init() {
    if (cfg_.latent_channels < cfg_.in_channels)
      throw std::invalid_argument("codec: identity init needs latent_channels >= in_channels");
    for (const char* n : {"enc.out.w", "enc.out.b", "dec.out.w", "dec.out.b", "enc.skip.b", "dec.skip.b"})
      params_[n].setZero();
    params_["enc.skip.w"].setZero();
    params_["dec.skip.w"].setZero();
    for (int c = 0; c < cfg_.in_channels; ++c) {
      params_["enc.skip.w"](c, c) = Scalar(1);
      params_["dec.skip.w"](c, c) = Scalar(1);
    }
  }

  const CodecConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  void check_shape(const Tensor<Scalar>& x) const {
    if (x.channels() != cfg_.in_channels || x.height % cfg_.downscale_factor != 0 ||
        x.width % cfg_.downscale_factor != 0)
      throw ShapeError("codec: input " + shape_string(x) + " incompatible with downscale factor " +
                       std::to_string(cfg_.downscale_factor));
  }

  LatentMoments<Scalar> encode(Binder<Scalar>& p, Var x) const {
    auto& g = p.graph();
    check_shape(g.value(x));
    const int f = cfg_.downscale_factor, l = cfg_.latent_channels;
    Var h = ops::silu(g, ops::conv2d(g, x, p("enc.conv.w"), p("enc.conv.b"), 3));
    h = pool(g, h, f);
    Var moments = ops::conv2d(g, h, p("enc.out.w"), p("enc.out.b"), 1);
    moments = ops::add(g, moments, ops::conv2d(g, pool(g, x, f), p("enc.skip.w"), p("enc.skip.b"), 1));
    return {ops::slice_rows(g, moments, 0, l), ops::slice_rows(g, moments, l, l)};
  }

  Var decode(Binder<Scalar>& p, Var z) const {
    auto& g = p.graph();
    if (g.value(z).channels() != cfg_.latent_channels)
      throw ShapeError("codec: latent has " + std::to_string(g.value(z).channels()) + " channels");
    const int f = cfg_.downscale_factor;
    Var h = ops::silu(g, ops::conv2d(g, z, p("dec.conv.w"), p("dec.conv.b"), 3));
    h = up(g, h, f);
    Var out = ops::conv2d(g, h, p("dec.out.w"), p("dec.out.b"), 3);
    return ops::add(g, out, up(g, ops::conv2d(g, z, p("dec.skip.w"), p("dec.skip.b"), 1), f));
  }

  /// reconstruction MSE + kl_weight * KL(N(mean, var) || N(0, I)).
  /// With an empty `eps` the latent mean is decoded.
  Var loss(Binder<Scalar>& p, Var x, const Matrix<Scalar>& eps = {}) const {
    auto& g = p.graph();
    auto [mean, logvar] = encode(p, x);
    Var z = eps.size() == 0 ? mean : ops::reparameterize(g, mean, logvar, eps);
    Var recon = ops::mse(g, decode(p, z), x);
    if (cfg_.kl_weight == 0.0) return recon;
    return ops::axpby(g, Scalar(1), recon, static_cast<Scalar>(cfg_.kl_weight), ops::kl_standard_normal(g, mean, logvar));
  }

  std::pair<Tensor<Scalar>, Tensor<Scalar>> encode(const Tensor<Scalar>& x) const {
    Graph<Scalar> g;
    Binder<Scalar> p(g, params_);
    auto m = encode(p, g.constant(x));
    return {g.value(m.mean), g.value(m.logvar)};
  }

  Tensor<Scalar> decode(const Tensor<Scalar>& z) const {
    Graph<Scalar> g;
    Binder<Scalar> p(g, params_);
    return g.value(decode(p, g.constant(z)));
  }

  double loss_value(const Tensor<Scalar>& x, const Matrix<Scalar>& eps = {}) const {
    Graph<Scalar> g;
    Binder<Scalar> p(g, params_);
    return static_cast<double>(g.scalar(loss(p, g.constant(x), eps)));
  }

  /// Mean reconstruction MSE of decode(mean(encode(x))) over a set.
  double reconstruction_mse(const std::vector<Tensor<Scalar>>& xs) const {
    double total = 0;
    for (const auto& x : xs) {
      const auto z = encode(x).first;
      total += (decode(z).data - x.data).template cast<double>().squaredNorm() / static_cast<double>(x.data.size());
    }
    return xs.empty() ? 0.0 : total / static_cast<double>(xs.size());
  }

  /// Adam on codec_loss with reparameterised latents; returns per-step loss.
  std::vector<double> train(const std::vector<Tensor<Scalar>>& xs, int steps, double lr, std::uint64_t seed) {
    if (xs.empty()) throw std::invalid_argument("codec: empty training set");
    Rng rng(seed);
    OptimizerConfig oc;
    oc.kind = OptimizerKind::adam;
    oc.learning_rate = lr;
    Optimizer<Scalar> opt(params_, oc);
    ParameterSet<Scalar> grads = params_.zeros_like();
    std::vector<double> losses;
    for (int s = 0; s < steps; ++s) {
      grads.set_zero();
      const auto& x = xs[static_cast<size_t>(rng.uniform_int(static_cast<std::int64_t>(xs.size())))];
      Graph<Scalar> g;
      Binder<Scalar> p(g, params_, &grads);
      const int f = cfg_.downscale_factor;
      const Matrix<Scalar> eps = normal_matrix<Scalar>(cfg_.latent_channels, (x.height / f) * (x.width / f), rng);
      Var l = loss(p, g.constant(x), eps);
      losses.push_back(static_cast<double>(g.scalar(l)));
      g.backward(l);
      opt.step(params_, grads);
    }
    return losses;
  }

 private:
  static Var pool(Graph<Scalar>& g, Var x, int f) { return f == 1 ? x : ops::avg_pool(g, x, f); }
  static Var up(Graph<Scalar>& g, Var x, int f) { return f == 1 ? x : ops::upsample(g, x, f); }

  CodecConfig cfg_;
  ParameterSet<Scalar> params_;
};

}  // namespace crackgen
