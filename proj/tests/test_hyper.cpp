#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crackgen/hyper.hpp"
#include "crackgen/toy_data.hpp"
#include "crackgen/trainer.hpp"

using namespace crackgen;

namespace {

const DenoiserConfig kSmall{3, 8, 16, 16, 16};

DriverConfig small_driver() {
  DriverConfig d;
  d.downscale_factor = 2;
  d.threshold_window = 5;
  return d;
}

struct Setup {
  std::vector<SourceItem> items;
  std::vector<ConditionSample> samples;
  Denoiser<float> base;
};

const Setup& setup() {
  static const Setup s = [] {
    ToyDatasetConfig cfg;
    cfg.image_size = 16;
    cfg.n_defective = 32;
    cfg.n_defect_free = 0;
    cfg.seed = 41;
    const auto toy = generate_toy_dataset(cfg);
    Setup out{{}, {}, Denoiser<float>(kSmall, Vocabulary::standard(16), 8)};
    std::vector<Image> images;
    for (const auto& im : toy.defective.images) {
      const auto masks = toy.defective.regions(im.id);
      out.items.push_back({im.pixels, masks});
      const auto prompt =
          build_prompt(PromptTemplate::concept_with_crack, {crack_class_name(masks[0].class_id)});
      out.samples.push_back({im.pixels, make_driver(im.pixels, masks, small_driver()).pixels,
                             tokenize(prompt, out.base.vocab())});
      images.push_back(im.pixels);
    }
    DiffusionTrainConfig tc;
    tc.steps = 300;
    tc.learning_rate = 2e-3;
    std::vector<std::vector<int>> toks;
    for (const auto& smp : out.samples) toks.push_back(smp.tokens);
    train_denoiser(out.base, images, toks, fast_schedule(), tc);
    return out;
  }();
  return s;
}

}  // namespace

TEST_CASE("hypernetwork: identity at initialisation") {
  const auto& base = setup().base;
  const HyperNetwork<float> h(base, HyperConfig{}, 3);
  CHECK(h.base_hash() == base.hash());
  CHECK(h.copy() == base);
  for (const auto& [name, m] : h.aux())
    if (name.rfind("couple.", 0) == 0) CHECK((m.array() == 0.f).all());
  Rng rng(2);
  for (int k = 0; k < 5; ++k) {
    const auto x = normal_tensor<float>(3, 16, 16, rng);
    const auto& smp = setup().samples[static_cast<size_t>(k)];
    const int t = static_cast<int>(rng.uniform_int(50));
    CHECK(h.predict(base, x, t, smp.tokens, smp.driver) == base.predict(x, t, smp.tokens));
    CHECK(h.predict(base, x, t, smp.tokens, setup().samples[10].driver) == base.predict(x, t, smp.tokens));
  }
}

TEST_CASE("hypernetwork: one coupling weight changes the output; determinism") {
  const auto& base = setup().base;
  HyperNetwork<float> h(base, HyperConfig{}, 3);
  Rng rng(4);
  const auto x = normal_tensor<float>(3, 16, 16, rng);
  const auto& smp = setup().samples[0];
  const auto before = h.predict(base, x, 20, smp.tokens, smp.driver);
  CHECK(h.predict(base, x, 20, smp.tokens, smp.driver) == before);
  h.aux()["couple.dec0.w"](2, 5) = 0.5f;
  const auto after = h.predict(base, x, 20, smp.tokens, smp.driver);
  CHECK((after.data - before.data).norm() > 0);
}

TEST_CASE("hypernetwork: configuration and driver shape policy") {
  CHECK_THROWS(HyperConfig{{"enc0"}}.check());
  CHECK_THROWS(HyperConfig{{}}.check());
  CHECK_THROWS(HyperConfig{{"mid", "mid"}}.check());
  const auto& base = setup().base;
  const HyperNetwork<float> only_mid(base, HyperConfig{{"mid"}}, 1);
  CHECK(only_mid.aux().contains("couple.mid.w"));
  CHECK_FALSE(only_mid.aux().contains("couple.dec0.w"));

  Image big(3, 32, 32);
  big.data.setConstant(0.25f);
  const auto fitted = HyperNetwork<float>::fit_driver(big, 16, 16);
  CHECK(fitted.height == 16);
  CHECK(fitted.data.maxCoeff() == 0.25f);
  CHECK_THROWS_AS(HyperNetwork<float>::fit_driver(Image(3, 20, 20), 16, 16), ShapeError);
  const HyperNetwork<float> h(base, HyperConfig{}, 3);
  Rng rng(1);
  CHECK_THROWS_AS(h.predict(base, normal_tensor<float>(3, 16, 16, rng), 3, {}, Image(3, 12, 12)), ShapeError);
}

TEST_CASE("hypernetwork: base mutation is detected") {
  Denoiser<float> base = setup().base;
  HyperNetwork<float> h(base, HyperConfig{}, 3);
  base.params()["conv_in.b"](0, 0) += 1e-6f;
  CHECK_THROWS_AS(h.verify_base(base), BaseMutationError);
  ConditionTrainingConfig cfg;
  cfg.steps = 1;
  CHECK_THROWS_AS(train_condition(base, h, setup().samples, fast_schedule(LossWeighting::snr), cfg),
                  BaseMutationError);
}

TEST_CASE("hypernetwork: training, frozen base, sensitivity and location probe") {
  const auto& base = setup().base;
  const auto s = fast_schedule(LossWeighting::snr);
  const std::string base_hash = base.hash();
  HyperNetwork<float> h(base, HyperConfig{}, 3);

  ConditionTrainingConfig zero;
  zero.steps = 0;
  const std::string h0 = h.hash();
  train_condition(base, h, setup().samples, s, zero);
  CHECK(h.hash() == h0);

  ConditionTrainingConfig cfg;
  cfg.steps = 6000;
  cfg.seed = 5;
  const auto log = train_condition(base, h, setup().samples, s, cfg);
  MESSAGE("condition loss " << log.initial_probe_loss << " -> " << log.final_probe_loss);
  CHECK(base.hash() == base_hash);
  CHECK(log.base_checks == 6000 / 32 + 1);
  CHECK(log.losses.size() == 6000);
  CHECK(log.final_probe_loss * 2 <= log.initial_probe_loss);

  Rng rng(9);
  const auto x = normal_tensor<float>(3, 16, 16, rng);
  const auto& a = setup().samples[0];
  const auto& b = setup().samples[1];
  CHECK((h.predict(base, x, 25, a.tokens, a.driver).data - h.predict(base, x, 25, a.tokens, b.driver).data).norm() >
        0);

  const auto rep = mask_location_probe(base, h, setup().items, a.tokens, small_driver(), s, 20, 17);
  MESSAGE(rep.text());
  CHECK(rep.trials == 20);
  CHECK(rep.pass());

  const auto ck = Checkpoint::from_bytes(hyper_checkpoint(h).to_bytes());
  const auto back = hyper_from_checkpoint(ck, base);
  CHECK(back.hash() == h.hash());
  CHECK(back.predict(base, x, 25, a.tokens, a.driver) == h.predict(base, x, 25, a.tokens, a.driver));
  Denoiser<float> other = base;
  other.params()["conv_in.b"](0, 0) += 1.f;
  CHECK_THROWS(hyper_from_checkpoint(ck, other));

  // Same seed, same data: identical result.
  HyperNetwork<float> h2(base, HyperConfig{}, 3);
  cfg.steps = 40;
  HyperNetwork<float> h3(base, HyperConfig{}, 3);
  train_condition(base, h2, setup().samples, s, cfg);
  train_condition(base, h3, setup().samples, s, cfg);
  CHECK(h2.hash() == h3.hash());
}
