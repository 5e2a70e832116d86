#pragma once

#include "crackgen/ops.hpp"
#include "crackgen/params.hpp"
#include "crackgen/text.hpp"

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace crackgen {

/// Layer sizes of the U-Net style noise predictor.
struct DenoiserConfig {
  int in_channels = 3;
  int base_channels = 16;
  int mid_channels = 32;
  int time_dim = 32;
  int embed_dim = 64;

  bool operator==(const DenoiserConfig&) const = default;
};

/// Decoder blocks, in evaluation order. These are the residual injection sites.
inline const std::array<std::string, 3> kDecoderBlocks = {"mid", "dec1", "dec0"};

/// Extra inputs a hypernetwork uses to steer the backbone.
template <typename Scalar>
struct BlockInputs {
  /// Residual added to the output of each named decoder block.
  std::map<std::string, Var> residuals;
  /// Feature added after conv_in (full res), down0 (half res) and before mid
  /// (quarter res), keyed "in", "down0", "mid_in".
  std::map<std::string, Var> level_features;
};

template <typename Scalar>
struct DenoiserOutputs {
  Var eps;
  std::map<std::string, Var> blocks;  // decoder block outputs after residuals
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> timestep_features(int t, int dim) {
  Matrix<Scalar> f(dim, 1);
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / std::max(half, 1));
    f(k, 0) = static_cast<Scalar>(std::sin(t * freq));
    f(half + k, 0) = static_cast<Scalar>(std::cos(t * freq));
  }
  return f;
}

}  // namespace detail

/// Epsilon-predicting U-Net with timestep and prompt conditioning. The prompt
/// embedding table ("text.table") lives in the parameter set so concept
/// learning can train the rare-token row together with the backbone.
template <typename Scalar>
class Denoiser {
 public:
  Denoiser() = default;

  Denoiser(DenoiserConfig cfg, Vocabulary vocab, std::uint64_t seed)
      : cfg_(cfg), vocab_(std::move(vocab)) {
    Rng rng(seed);
    const int c0 = cfg_.base_channels, c1 = cfg_.mid_channels, e = cfg_.embed_dim;
    auto conv = [&](const std::string& name, int cin, int cout, int k) {
      params_.add(name + ".w", fan_in_uniform<Scalar>(cout, k * k * cin, k * k * cin, rng));
      params_.add(name + ".b", fan_in_uniform<Scalar>(cout, 1, k * k * cin, rng));
    };
    auto dense = [&](const std::string& name, int in, int out) {
      params_.add(name + ".w", fan_in_uniform<Scalar>(out, in, in, rng));
      params_.add(name + ".b", fan_in_uniform<Scalar>(out, 1, in, rng));
    };
    auto block = [&](const std::string& name, int cin, int cout) {
      conv(name + ".conv1", cin, cout, 3);
      dense(name + ".film", e, 2 * cout);
      conv(name + ".conv2", cout, cout, 3);
      if (cin != cout) conv(name + ".skip", cin, cout, 1);
    };
    params_.add("text.table", init_embedding_table<Scalar>(vocab_, rng));
    dense("time.lin1", cfg_.time_dim, e);
    dense("time.lin2", e, e);
    params_.add("text.proj.w", fan_in_uniform<Scalar>(e, vocab_.embedding_dim(), vocab_.embedding_dim(), rng));
    conv("conv_in", cfg_.in_channels, c0, 3);
    block("enc0", c0, c0);
    conv("down0", c0, c1, 3);
    block("enc1", c1, c1);
    block("mid", c1, c1);
    conv("up1", 2 * c1, c1, 3);
    block("dec1", c1, c1);
    conv("up0", c1 + c0, c0, 3);
    block("dec0", c0, c0);
    conv("conv_out", c0, cfg_.in_channels, 3);
  }

  const DenoiserConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  /// Channel count at a decoder block.
  int block_channels(const std::string& block) const {
    return block == "dec0" ? cfg_.base_channels : cfg_.mid_channels;
  }
  /// Spatial downscale factor at a decoder block.
  static int block_factor(const std::string& block) {
    return block == "mid" ? 4 : block == "dec1" ? 2 : 1;
  }

  /// Conditioning embedding (embed_dim x 1) from timestep and prompt tokens.
  Var embedding(Binder<Scalar>& p, int t, const std::vector<int>& tokens) const {
    auto& g = p.graph();
    Var tf = g.constant(detail::timestep_features<Scalar>(t, cfg_.time_dim));
    Var h = ops::silu(g, ops::linear(g, p("time.lin1.w"), tf, p("time.lin1.b")));
    h = ops::linear(g, p("time.lin2.w"), h, p("time.lin2.b"));
    if (!tokens.empty()) {
      Var words = ops::gather_columns(g, p("text.table"), tokens);
      Var pooled = ops::mean_columns(g, words);
      h = ops::add(g, h, ops::linear(g, p("text.proj.w"), pooled));
    }
    return ops::silu(g, h);
  }

  DenoiserOutputs<Scalar> forward(Binder<Scalar>& p, Var x, int t, const std::vector<int>& tokens,
                                  const BlockInputs<Scalar>& extra = {}) const {
    auto& g = p.graph();
    const Tensor<Scalar>& xin = g.value(x);
    if (xin.channels() != cfg_.in_channels || xin.height % 4 != 0 || xin.width % 4 != 0)
      throw ShapeError("denoiser: input " + shape_string(xin) + " needs " +
                       std::to_string(cfg_.in_channels) + " channels and sides divisible by 4");
    Var emb = embedding(p, t, tokens);
    auto feature = [&](const std::string& key) {
      auto it = extra.level_features.find(key);
      return it == extra.level_features.end() ? Var{} : it->second;
    };
    DenoiserOutputs<Scalar> out;
    auto site = [&](const std::string& name, Var h) {
      auto it = extra.residuals.find(name);
      if (it != extra.residuals.end()) h = ops::add(g, h, it->second);
      out.blocks[name] = h;
      return h;
    };

    Var h0 = ops::add(g, conv(p, "conv_in", x, 3), feature("in"));
    Var s0 = res_block(p, "enc0", h0, emb);
    Var h1 = ops::add(g, conv(p, "down0", ops::avg_pool(g, s0, 2), 3), feature("down0"));
    Var s1 = res_block(p, "enc1", h1, emb);
    Var m = ops::add(g, ops::avg_pool(g, s1, 2), feature("mid_in"));
    m = site("mid", res_block(p, "mid", m, emb));
    Var u1 = conv(p, "up1", ops::concat(g, ops::upsample(g, m, 2), s1), 3);
    u1 = site("dec1", res_block(p, "dec1", u1, emb));
    Var u0 = conv(p, "up0", ops::concat(g, ops::upsample(g, u1, 2), s0), 3);
    u0 = site("dec0", res_block(p, "dec0", u0, emb));
    out.eps = conv(p, "conv_out", ops::silu(g, u0), 3);
    return out;
  }

  /// Gradient-free evaluation of the noise prediction.
  Tensor<Scalar> predict(const Tensor<Scalar>& x, int t, const std::vector<int>& tokens) const {
    Graph<Scalar> g;
    Binder<Scalar> p(g, params_);
    Var xv = g.constant(x);
    return g.value(forward(p, xv, t, tokens).eps);
  }

  /// Hash over configuration, vocabulary and parameters.
  std::string hash() const {
    std::string desc = describe();
    desc += params_.hash();
    return sha256_hex(desc);
  }

  std::string describe() const {
    std::string s = "denoiser:" + std::to_string(cfg_.in_channels) + "," + std::to_string(cfg_.base_channels) +
                    "," + std::to_string(cfg_.mid_channels) + "," + std::to_string(cfg_.time_dim) + "," +
                    std::to_string(cfg_.embed_dim) + ";vocab:" + std::to_string(vocab_.embedding_dim());
    for (const auto& tok : vocab_.tokens()) s += "|" + tok;
    return s;
  }

  template <typename Other>
  Denoiser<Other> cast() const {
    Denoiser<Other> out;
    out.cfg_ = cfg_;
    out.vocab_ = vocab_;
    out.params_ = params_.template cast<Other>();
    return out;
  }

  /// Assembles a model from loaded parts; parameter names must match the
  /// architecture exactly.
  static Denoiser from_parts(DenoiserConfig cfg, Vocabulary vocab, ParameterSet<Scalar> params) {
    Denoiser ref(cfg, vocab, 0);
    for (const auto& [name, m] : ref.params_) {
      if (!params.contains(name)) throw std::invalid_argument("denoiser: missing parameter '" + name + "'");
      if (params[name].rows() != m.rows() || params[name].cols() != m.cols())
        throw ShapeError("denoiser: parameter '" + name + "' has wrong shape");
    }
    if (params.count() != ref.params_.count()) throw std::invalid_argument("denoiser: unexpected parameters");
    ref.params_ = std::move(params);
    return ref;
  }

  bool operator==(const Denoiser& o) const {
    return cfg_ == o.cfg_ && vocab_ == o.vocab_ && params_ == o.params_;
  }

 private:
  template <typename>
  friend class Denoiser;

  static Var conv(Binder<Scalar>& p, const std::string& name, Var x, int k) {
    return ops::conv2d(p.graph(), x, p(name + ".w"), p(name + ".b"), k);
  }

  Var res_block(Binder<Scalar>& p, const std::string& name, Var x, Var emb) const {
    auto& g = p.graph();
    const Index cout = p.graph().data(p(name + ".conv2.w")).rows();
    Var h = conv(p, name + ".conv1", ops::silu(g, x), 3);
    Var film = ops::linear(g, p(name + ".film.w"), emb, p(name + ".film.b"));
    h = ops::modulate(g, h, ops::slice_rows(g, film, 0, cout), ops::slice_rows(g, film, cout, cout));
    h = conv(p, name + ".conv2", ops::silu(g, h), 3);
    Var skip = params_.contains(name + ".skip.w") ? conv(p, name + ".skip", x, 1) : x;
    return ops::add(g, skip, h);
  }

  DenoiserConfig cfg_;
  Vocabulary vocab_ = Vocabulary::standard();
  ParameterSet<Scalar> params_;
};

}  // namespace crackgen
