#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crackgen/checkpoint.hpp"
#include "crackgen/codec.hpp"
#include "crackgen/diffusion.hpp"
#include "crackgen/trainer.hpp"

#include "gradcheck.hpp"

#include <cmath>
#include <filesystem>
#include <thread>

using namespace crackgen;

TEST_CASE("schedule: zero betas leave data untouched") {
  const auto s = make_schedule(3, 0.0, 0.0, ScheduleKind::linear, /*test_mode=*/true);
  CHECK(s.alpha_bars() == std::vector<double>{1.0, 1.0, 1.0});
  CHECK_THROWS_AS(make_schedule(3, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("schedule: full-noise limit") {
  const auto s = make_schedule(1, 1.0 - 1e-12, 1.0 - 1e-12);
  CHECK(s.alpha_bar(0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(s.alpha_bar(0) > 0.0);
}

TEST_CASE("schedule: T=1000 linear terminal alpha_bar matches high-precision product") {
  // 50-digit cumulative product of (1 - beta_t), beta_t linear 1e-4 -> 0.02.
  constexpr double kOracle = 0.000040358297653756833148;
  const auto s = full_schedule();
  REQUIRE(s.steps() == 1000);
  CHECK(std::abs(s.alpha_bar(999) - kOracle) / kOracle < 1e-10);

  // Brute-force long double product as a second, in-test route.
  long double prod = 1.0L;
  for (int t = 0; t < 1000; ++t) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * t / 999.0L);
  CHECK(std::abs(s.alpha_bar(999) - static_cast<double>(prod)) / static_cast<double>(prod) < 1e-10);
}

TEST_CASE("schedule: invalid arguments") {
  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.5, 0.1), std::invalid_argument);
}

TEST_CASE("schedule: invariants hold for random beta vectors") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 1 + static_cast<int>(rng.uniform_int(300));
    std::vector<double> betas(static_cast<size_t>(T));
    for (auto& b : betas) b = rng.uniform(1e-6, 0.999);
    const auto s = schedule_from_betas(betas);
    REQUIRE(static_cast<int>(s.alphas().size()) == T);
    REQUIRE(static_cast<int>(s.alpha_bars().size()) == T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
      prod *= 1.0 - betas[static_cast<size_t>(t)];
      CHECK(std::abs(s.alpha_bar(t) - prod) <= 1e-12 * prod);
      CHECK(s.sigma(t) >= 0.0);
      if (t > 0) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
  }
}

TEST_CASE("forward_sample: endpoint identities") {
  Rng rng(1);
  const auto x0 = normal_tensor<double>(3, 4, 4, rng);
  const auto eps = normal_tensor<double>(3, 4, 4, rng);
  const auto identity = make_schedule(2, 0.0, 0.0, ScheduleKind::linear, true);
  CHECK(forward_sample(x0, 1, eps, identity) == x0);

  // 0.1^400 underflows, so this table reaches alpha_bar == 0 exactly.
  const auto terminal = schedule_from_betas(std::vector<double>(400, 0.9));
  REQUIRE(terminal.alpha_bar(399) == 0.0);
  CHECK(forward_sample(x0, 399, eps, terminal) == eps);

  CHECK_THROWS_AS(forward_sample(x0, 2, eps, identity), std::out_of_range);
  CHECK_THROWS_AS(forward_sample(x0, -1, eps, identity), std::out_of_range);
  const auto wrong = normal_tensor<double>(3, 4, 2, rng);
  CHECK_THROWS_AS(forward_sample(x0, 0, wrong, identity), ShapeError);
}

TEST_CASE("forward_sample: closed form matches the iterated one-step chain (Monte Carlo, 3 SE)") {
  const auto s = fast_schedule();
  REQUIRE(s.steps() == 50);
  const std::vector<double> pixels = {-1.0, -0.25, 0.4, 1.0};
  const int trials = 10000;
  for (int t : {0, 9, 24, 49}) {
    Rng chain_rng(1000 + t), closed_rng(2000 + t);
    for (double x0v : pixels) {
      double sum_chain = 0, sq_chain = 0, sum_closed = 0, sq_closed = 0;
      Tensor<double> x0(1, 1, 1);
      x0.data(0, 0) = x0v;
      for (int i = 0; i < trials; ++i) {
        double x = x0v;
        for (int k = 0; k <= t; ++k) x = std::sqrt(1.0 - s.beta(k)) * x + std::sqrt(s.beta(k)) * chain_rng.normal();
        sum_chain += x;
        sq_chain += x * x;
        Tensor<double> eps(1, 1, 1);
        eps.data(0, 0) = closed_rng.normal();
        const double y = forward_sample(x0, t, eps, s).data(0, 0);
        sum_closed += y;
        sq_closed += y * y;
      }
      const double n = trials;
      const double m_chain = sum_chain / n, m_closed = sum_closed / n;
      const double v_chain = (sq_chain - n * m_chain * m_chain) / (n - 1);
      const double v_closed = (sq_closed - n * m_closed * m_closed) / (n - 1);
      const double se_mean = std::sqrt(v_chain / n + v_closed / n);
      const double se_var = std::sqrt(2.0 * v_chain * v_chain / (n - 1) + 2.0 * v_closed * v_closed / (n - 1));
      CHECK(std::abs(m_chain - m_closed) < 3 * se_mean);
      CHECK(std::abs(v_chain - v_closed) < 3 * se_var);
      // Against the analytic marginal too.
      const double ab = s.alpha_bar(t);
      CHECK(std::abs(m_chain - std::sqrt(ab) * x0v) < 3 * std::sqrt(v_chain / n));
    }
  }
}

TEST_CASE("forward_sample: terminal Gaussianity for the default schedule") {
  const auto s = full_schedule();
  Rng rng(5);
  Tensor<double> x0(3, 2, 2);
  x0.data.setConstant(1.0);
  x0.data(1, 2) = -1.0;
  const int n = 10000;
  Matrix<double> sum = Matrix<double>::Zero(3, 4), sq = Matrix<double>::Zero(3, 4);
  for (int i = 0; i < n; ++i) {
    const auto eps = normal_tensor<double>(3, 2, 2, rng);
    const auto xt = forward_sample(x0, s.steps() - 1, eps, s);
    sum += xt.data;
    sq += xt.data.cwiseAbs2();
  }
  const Matrix<double> mean = sum / n;
  const Matrix<double> var = (sq - n * mean.cwiseAbs2()) / (n - 1);
  CHECK(mean.cwiseAbs().maxCoeff() < 0.05);
  CHECK((var.array() - 1.0).abs().maxCoeff() < 0.1);
}

TEST_CASE("loss_eps: oracle models") {
  const auto s = fast_schedule();
  Rng rng(9);
  const auto x0 = normal_tensor<double>(3, 4, 4, rng);

  SUBCASE("a model that returns the true noise has zero loss") {
    const auto eps = normal_tensor<double>(3, 4, 4, rng);
    EpsGraphFn<double> exact = [&](Graph<double>& g, Var, int) { return g.constant(eps); };
    CHECK(loss_eps_value(exact, x0, 7, eps, s) == 0.0);
  }

  SUBCASE("a zero model has unit expected loss") {
    EpsGraphFn<double> zero = [](Graph<double>& g, Var x, int) {
      return g.constant(Tensor<double>(Matrix<double>::Zero(3, 16), g.value(x).height, g.value(x).width));
    };
    const int n = 10000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const auto eps = normal_tensor<double>(3, 4, 4, rng);
      const double l = loss_eps_value(zero, x0, static_cast<int>(rng.uniform_int(50)), eps, s);
      sum += l;
      sq += l * l;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
    CHECK(std::abs(mean - 1.0) < 3 * se);
  }

  SUBCASE("non-finite model output is reported") {
    EpsGraphFn<double> bad = [](Graph<double>& g, Var x, int) {
      Tensor<double> v = g.value(x);
      v.data(0, 0) = std::nan("");
      return g.constant(v);
    };
    const auto eps = normal_tensor<double>(3, 4, 4, rng);
    CHECK_THROWS_AS(loss_eps_value(bad, x0, 3, eps, s), NumericError);
  }
}

TEST_CASE("loss_eps: analytic gradient of a tiny two-layer model matches central differences") {
  Rng rng(21);
  ParameterSet<double> params;
  params.add("l1.w", normal_matrix<double>(4, 27, rng) * 0.3);
  params.add("l1.b", normal_matrix<double>(4, 1, rng) * 0.1);
  params.add("l2.w", normal_matrix<double>(3, 36, rng) * 0.3);
  params.add("l2.b", normal_matrix<double>(3, 1, rng) * 0.1);
  const auto s = fast_schedule();
  const auto x0 = normal_tensor<double>(3, 8, 8, rng);
  const auto eps = normal_tensor<double>(3, 8, 8, rng);
  const int t = 17;

  auto loss_with = [&](ParameterSet<double>& ps, ParameterSet<double>* grads) {
    Graph<double> g;
    Binder<double> p(g, ps, grads);
    EpsGraphFn<double> tiny = [&](Graph<double>& gr, Var x, int) {
      Var h = ops::silu(gr, ops::conv2d(gr, x, p("l1.w"), p("l1.b"), 3));
      return ops::conv2d(gr, h, p("l2.w"), p("l2.b"), 3);
    };
    Var l = loss_eps(g, tiny, x0, t, eps, s);
    if (grads) g.backward(l);
    return g.scalar(l);
  };
  CHECK(testing::max_relative_gradient_error(params, loss_with) < 1e-4);
}

TEST_CASE("loss_eps: full denoiser gradient matches central differences") {
  Denoiser<double> model(DenoiserConfig{3, 4, 6, 8, 8}, Vocabulary::standard(8), 3);
  Rng rng(4);
  const auto x0 = normal_tensor<double>(3, 8, 8, rng);
  const auto eps = normal_tensor<double>(3, 8, 8, rng);
  const auto s = fast_schedule();
  const auto tokens = tokenize("an image of a [V]", model.vocab());
  auto loss_with = [&](ParameterSet<double>& ps, ParameterSet<double>* grads) {
    Graph<double> g;
    Binder<double> p(g, ps, grads);
    EpsGraphFn<double> fn = [&](Graph<double>&, Var x, int tt) { return model.forward(p, x, tt, tokens).eps; };
    Var l = loss_eps(g, fn, x0, 30, eps, s);
    if (grads) g.backward(l);
    return g.scalar(l);
  };
  CHECK(testing::max_relative_gradient_error(model.params(), loss_with, 6) < 1e-4);
}

TEST_CASE("denoiser: output shape and determinism") {
  Denoiser<float> model(DenoiserConfig{}, Vocabulary::standard(), 11);
  Rng rng(2);
  const auto x = normal_tensor<float>(3, 16, 16, rng);
  const auto tokens = tokenize("an image of a [V]", model.vocab());
  const auto a = model.predict(x, 5, tokens);
  const auto b = model.predict(x, 5, tokens);
  CHECK(a.same_shape(x));
  CHECK(a == b);
  CHECK_THROWS_AS(model.predict(normal_tensor<float>(3, 6, 6, rng), 0, tokens), ShapeError);
}

TEST_CASE("denoiser: concurrent evaluation equals sequential evaluation") {
  Denoiser<float> model(DenoiserConfig{}, Vocabulary::standard(), 12);
  Rng rng(3);
  std::vector<Image> inputs;
  for (int i = 0; i < 4; ++i) inputs.push_back(normal_tensor<float>(3, 16, 16, rng));
  std::vector<Image> sequential, parallel(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) sequential.push_back(model.predict(inputs[i], 3, {}));
  std::vector<std::thread> threads;
  for (size_t i = 0; i < inputs.size(); ++i)
    threads.emplace_back([&, i] { parallel[i] = model.predict(inputs[i], 3, {}); });
  for (auto& th : threads) th.join();
  for (size_t i = 0; i < inputs.size(); ++i) CHECK(parallel[i] == sequential[i]);
}

TEST_CASE("ancestral_sample: determinism, finiteness and overflow reporting") {
  Denoiser<float> model(DenoiserConfig{}, Vocabulary::standard(), 5);
  const auto s = fast_schedule();
  const auto fn = eps_fn(model, {});
  const auto a = ancestral_sample(fn, s, 77, SampleShape{3, 16, 16});
  const auto b = ancestral_sample(fn, s, 77, SampleShape{3, 16, 16});
  const auto c = ancestral_sample(fn, s, 78, SampleShape{3, 16, 16});
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.data.allFinite());

  EpsFn<float> exploding = [](const Tensor<float>& x, int) {
    Tensor<float> out = x;
    out.data.setConstant(1e38f);
    return out;
  };
  try {
    ancestral_sample(exploding, s, 1, SampleShape{3, 4, 4});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.step() >= 0);
    CHECK(e.step() < s.steps());
    CHECK(std::string(e.what()).find("step " + std::to_string(e.step())) != std::string::npos);
  }
}

TEST_CASE("codec: KL term vanishes at the standard-normal fixed point") {
  Graph<double> g;
  Var mu = g.constant(Tensor<double>(3, 2, 2));
  Var lv = g.constant(Tensor<double>(3, 2, 2));
  CHECK(g.scalar(ops::kl_standard_normal(g, mu, lv)) == 0.0);
}

TEST_CASE("codec: identity-initialised codec with kl_weight 0 reduces to reconstruction MSE") {
  CodecConfig cfg;
  cfg.kl_weight = 0.0;
  cfg.downscale_factor = 1;
  LatentCodec<double> codec(cfg, 3);
  codec.identity_init();
  Rng rng(8);
  const auto x = normal_tensor<double>(3, 4, 4, rng);
  const auto [mean, logvar] = codec.encode(x);
  CHECK(logvar.data.cwiseAbs().maxCoeff() == 0.0);
  CHECK(codec.decode(mean) == x);
  CHECK(codec.loss_value(x) == 0.0);
  const Matrix<double> eps = normal_matrix<double>(4, 16, rng);
  const auto z = Tensor<double>(mean.data + eps, 4, 4);
  const double recon = (codec.decode(z).data - x.data).squaredNorm() / 48.0;
  CHECK(codec.loss_value(x, eps) == doctest::Approx(recon).epsilon(1e-14));
}

TEST_CASE("codec: shapes and errors") {
  LatentCodec<float> codec(CodecConfig{}, 1);
  Rng rng(2);
  const auto x = normal_tensor<float>(3, 8, 8, rng);
  const auto [mean, logvar] = codec.encode(x);
  CHECK(mean.channels() == 4);
  CHECK(mean.height == 4);
  CHECK(codec.decode(mean).same_shape(x));
  CHECK(std::isfinite(codec.loss_value(x)));
  CHECK_THROWS_AS(codec.encode(normal_tensor<float>(3, 7, 8, rng)), ShapeError);
}

TEST_CASE("codec: gradient of codec_loss matches central differences") {
  CodecConfig cfg;
  cfg.hidden_channels = 4;
  cfg.latent_channels = 2;
  cfg.kl_weight = 0.5;
  LatentCodec<double> codec(cfg, 4);
  Rng rng(6);
  const auto x = normal_tensor<double>(3, 4, 4, rng);
  const Matrix<double> eps = normal_matrix<double>(2, 4, rng);
  auto loss_with = [&](ParameterSet<double>& ps, ParameterSet<double>* grads) {
    Graph<double> g;
    Binder<double> p(g, ps, grads);
    Var l = codec.loss(p, g.constant(x), eps);
    if (grads) g.backward(l);
    return g.scalar(l);
  };
  CHECK(testing::max_relative_gradient_error(codec.params(), loss_with) < 1e-4);
}

TEST_CASE("codec: training improves reconstruction at least fivefold") {
  Rng rng(10);
  std::vector<Image> data;
  for (int i = 0; i < 16; ++i) {
    Image im(3, 16, 16);
    const float a = static_cast<float>(rng.uniform(0.2, 0.8));
    for (Index y = 0; y < 16; ++y)
      for (Index x = 0; x < 16; ++x)
        for (Index c = 0; c < 3; ++c)
          im(c, y, x) = a + 0.2f * std::sin(0.4f * static_cast<float>(x + c) + static_cast<float>(i)) *
                                std::cos(0.3f * static_cast<float>(y));
    data.push_back(im);
  }
  LatentCodec<float> codec(CodecConfig{}, 2);
  const double before = codec.reconstruction_mse(data);
  codec.train(data, 600, 3e-3, 1);
  const double after = codec.reconstruction_mse(data);
  MESSAGE("codec mse before " << before << " after " << after);
  CHECK(after * 5.0 <= before);
}

TEST_CASE("checkpoint: denoiser round trip is bit-exact") {
  Denoiser<float> model(DenoiserConfig{}, Vocabulary::standard(), 42);
  const auto s = fast_schedule(LossWeighting::snr);
  const auto path = std::filesystem::temp_directory_path() / "crackgen_test_ckpt.bin";
  save_denoiser(model, s, path);
  const auto loaded = load_denoiser(path);
  CHECK(loaded.model == model);
  CHECK(loaded.model.hash() == model.hash());
  CHECK(loaded.schedule == s);
  CHECK(Checkpoint::load(path).to_bytes() == denoiser_checkpoint(model, s).to_bytes());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: corrupt and mismatched files are rejected") {
  Checkpoint ck;
  ck.put<double>("a", Matrix<double>::Identity(2, 3));
  auto bytes = ck.to_bytes();
  CHECK(Checkpoint::from_bytes(bytes) == ck);
  CHECK_THROWS(Checkpoint::from_bytes("garbage"));
  CHECK_THROWS(Checkpoint::from_bytes(bytes.substr(0, bytes.size() - 4)));
  CHECK_THROWS(ck.get<float>("a"));
}

TEST_CASE("trainer: overfitting a single small image lowers the loss") {
  Denoiser<float> model(DenoiserConfig{}, Vocabulary::standard(), 7);
  Rng rng(1);
  Image im(3, 16, 16);
  im.data = (Matrix<float>::Random(3, 256).array() * 0.5f + 0.5f).matrix();
  DiffusionTrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 4;
  cfg.learning_rate = 2e-3;
  const auto log = train_denoiser(model, {im}, {{}}, fast_schedule(), cfg);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += log.losses[static_cast<size_t>(i)];
    last += log.losses[log.losses.size() - 1 - static_cast<size_t>(i)];
  }
  CHECK(last < first);
}
