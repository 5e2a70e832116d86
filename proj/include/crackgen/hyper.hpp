#pragma once

#include "crackgen/checkpoint.hpp"
#include "crackgen/diffusion.hpp"
#include "crackgen/driver.hpp"
#include "crackgen/optim.hpp"

namespace crackgen {

struct HyperConfig {
  std::vector<std::string> sites = {"mid", "dec1", "dec0"};  // subset of kDecoderBlocks

  void check() const;
};

/// Raised when the frozen base changes during condition learning.
class BaseMutationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trainable copy of the adapted model plus a driver stem and zero-initialised
/// 1x1 couplings. The copy sees the driver through the stem at three
/// resolutions; its decoder block outputs pass through the couplings and are
/// added to the matching blocks of the frozen base.
template <typename Scalar>
class HyperNetwork {
 public:
  HyperNetwork() = default;

  HyperNetwork(const Denoiser<Scalar>& base, HyperConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), copy_(base), base_hash_(base.hash()) {
    cfg_.check();
    Rng rng(seed);
    const int c0 = base.config().base_channels, c1 = base.config().mid_channels, cin = base.config().in_channels;
    auto conv = [&](const std::string& name, int in, int out, int k) {
      aux_.add(name + ".w", fan_in_uniform<Scalar>(out, k * k * in, k * k * in, rng));
      aux_.add(name + ".b", fan_in_uniform<Scalar>(out, 1, k * k * in, rng));
    };
    conv("stem.conv1", cin, c0, 3);
    conv("stem.conv2", c0, c0, 3);
    conv("stem.down0", c0, c1, 1);
    conv("stem.mid", c0, c1, 1);
    for (const auto& site : cfg_.sites) {
      const int ch = base.block_channels(site);
      aux_.add("couple." + site + ".w", Matrix<Scalar>::Zero(ch, ch));
      aux_.add("couple." + site + ".b", Matrix<Scalar>::Zero(ch, 1));
    }
  }

  const HyperConfig& config() const { return cfg_; }
  const std::string& base_hash() const { return base_hash_; }
  Denoiser<Scalar>& copy() { return copy_; }
  const Denoiser<Scalar>& copy() const { return copy_; }
  ParameterSet<Scalar>& aux() { return aux_; }
  const ParameterSet<Scalar>& aux() const { return aux_; }

  void verify_base(const Denoiser<Scalar>& base) const {
    if (base.hash() != base_hash_)
      throw BaseMutationError("hypernetwork: base model hash " + base.hash().substr(0, 12) +
                              " does not match recorded " + base_hash_.substr(0, 12));
  }

  /// Driver resized to the input resolution: identical sizes pass through,
  /// integer multiples are area-averaged, anything else is an error.
  static Tensor<Scalar> fit_driver(const Tensor<Scalar>& driver, Index height, Index width) {
    if (driver.channels() != 3) throw ShapeError("hypernetwork: driver must be RGB, got " + shape_string(driver));
    if (driver.height == height && driver.width == width) return driver;
    if (driver.height % height != 0 || driver.width % width != 0 || driver.height / height != driver.width / width)
      throw ShapeError("hypernetwork: driver " + shape_string(driver) + " incompatible with " +
                       shape_string(3, height, width));
    const Index f = driver.height / height;
    Tensor<Scalar> out(3, height, width);
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x)
        for (Index c = 0; c < 3; ++c) {
          Scalar sum = 0;
          for (Index dy = 0; dy < f; ++dy)
            for (Index dx = 0; dx < f; ++dx) sum += driver(c, y * f + dy, x * f + dx);
          out(c, y, x) = sum / static_cast<Scalar>(f * f);
        }
    return out;
  }

  /// Residuals for the base, one per site.
  std::map<std::string, Var> residuals(Binder<Scalar>& copy_p, Binder<Scalar>& aux_p, Var x, int t,
                                       const std::vector<int>& tokens, const Tensor<Scalar>& driver) const {
    auto& g = copy_p.graph();
    const Tensor<Scalar>& xin = g.value(x);
    const Tensor<Scalar> d = to_model_space(fit_driver(driver, xin.height, xin.width));
    Var h = ops::silu(g, ops::conv2d(g, g.constant(d), aux_p("stem.conv1.w"), aux_p("stem.conv1.b"), 3));
    h = ops::conv2d(g, h, aux_p("stem.conv2.w"), aux_p("stem.conv2.b"), 3);
    BlockInputs<Scalar> in;
    in.level_features["in"] = h;
    in.level_features["down0"] =
        ops::conv2d(g, ops::avg_pool(g, h, 2), aux_p("stem.down0.w"), aux_p("stem.down0.b"), 1);
    in.level_features["mid_in"] = ops::conv2d(g, ops::avg_pool(g, h, 4), aux_p("stem.mid.w"), aux_p("stem.mid.b"), 1);
    const auto out = copy_.forward(copy_p, x, t, tokens, in);
    std::map<std::string, Var> res;
    for (const auto& site : cfg_.sites)
      res[site] = ops::conv2d(g, out.blocks.at(site), aux_p("couple." + site + ".w"), aux_p("couple." + site + ".b"), 1);
    return res;
  }

  /// Conditioned noise prediction recorded on a graph.
  Var forward(Binder<Scalar>& base_p, Binder<Scalar>& copy_p, Binder<Scalar>& aux_p, const Denoiser<Scalar>& base,
              Var x, int t, const std::vector<int>& tokens, const Tensor<Scalar>& driver) const {
    BlockInputs<Scalar> extra;
    extra.residuals = residuals(copy_p, aux_p, x, t, tokens, driver);
    return base.forward(base_p, x, t, tokens, extra).eps;
  }

  Tensor<Scalar> predict(const Denoiser<Scalar>& base, const Tensor<Scalar>& x, int t,
                         const std::vector<int>& tokens, const Tensor<Scalar>& driver) const {
    Graph<Scalar> g;
    Binder<Scalar> bp(g, base.params()), cp(g, copy_.params()), ap(g, aux_);
    return g.value(forward(bp, cp, ap, base, g.constant(x), t, tokens, driver));
  }

  EpsFn<Scalar> eps_fn(const Denoiser<Scalar>& base, std::vector<int> tokens, Tensor<Scalar> driver) const {
    return [this, &base, tokens = std::move(tokens), driver = std::move(driver)](const Tensor<Scalar>& x, int t) {
      return predict(base, x, t, tokens, driver);
    };
  }

  std::string hash() const {
    std::string sites;
    for (const auto& s : cfg_.sites) sites += s + ",";
    return sha256_hex("hyper:" + sites + base_hash_ + copy_.hash() + aux_.hash());
  }

  static HyperNetwork from_parts(HyperConfig cfg, Denoiser<Scalar> copy, ParameterSet<Scalar> aux,
                                 std::string base_hash) {
    HyperNetwork h;
    h.cfg_ = std::move(cfg);
    h.cfg_.check();
    h.copy_ = std::move(copy);
    h.aux_ = std::move(aux);
    h.base_hash_ = std::move(base_hash);
    return h;
  }

 private:
  HyperConfig cfg_;
  Denoiser<Scalar> copy_;
  ParameterSet<Scalar> aux_;
  std::string base_hash_;
};

/// Training pair: an image, the driver extracted from it, and its prompt.
struct ConditionSample {
  Image image;
  Image driver;
  std::vector<int> tokens;
};

enum class ConditionLoss { x0, eps };

struct ConditionTrainingConfig {
  int steps = 3000;
  int batch_size = 1;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double grad_clip = 1.0;
  ConditionLoss loss = ConditionLoss::x0;
  int probe_size = 32;
  bool cosine_decay = false;  // anneal the learning rate to 0 over `steps`
  std::uint64_t seed = 0;

  void check() const;
};

struct ConditionLog {
  std::vector<double> losses;
  double initial_probe_loss = 0, final_probe_loss = 0;
  int base_checks = 0;  // number of successful base hash verifications
};

/// Mean conditioned loss over a fixed set of (sample, t, eps) draws.
double condition_probe_loss(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                            const std::vector<ConditionSample>& data, const NoiseSchedule& s, ConditionLoss form,
                            int count, std::uint64_t seed);

/// Phase 2. Trains the copy and the auxiliary parameters; the base is bound
/// read-only and its hash is re-verified after every epoch.
ConditionLog train_condition(const Denoiser<float>& base, HyperNetwork<float>& hyper,
                             const std::vector<ConditionSample>& data, const NoiseSchedule& s,
                             const ConditionTrainingConfig& cfg);

struct LocationProbeReport {
  int trials = 0;
  int wins = 0;
  double mean_iou_moved = 0, mean_iou_random = 0;
  bool pass() const { return 2 * wins > trials; }
  std::string text() const;
};

/// Moves one mask of a source item and checks that the largest 5% of the
/// x0-prediction change lands on the moved mask more than on a random mask of
/// equal area.
LocationProbeReport mask_location_probe(const Denoiser<float>& base, const HyperNetwork<float>& hyper,
                                        const std::vector<SourceItem>& items, const std::vector<int>& tokens,
                                        const DriverConfig& driver_cfg, const NoiseSchedule& s, int trials,
                                        std::uint64_t seed);

Checkpoint hyper_checkpoint(const HyperNetwork<float>& hyper, const std::string& kind = "hypernetwork");
/// Errors when `base` is not the model the hypernetwork was trained against.
HyperNetwork<float> hyper_from_checkpoint(const Checkpoint& ck, const Denoiser<float>& base);

}  // namespace crackgen
