#pragma once

#include "crackgen/diffusion.hpp"

namespace crackgen {

/// Fits a Denoiser to `images` (values in [0,1]) with the epsilon objective.
/// `tokens[i]` is the prompt for image i (empty = unconditional).
DiffusionTrainLog train_denoiser(Denoiser<float>& model, const std::vector<Image>& images,
                                 const std::vector<std::vector<int>>& tokens, const NoiseSchedule& s,
                                 const DiffusionTrainConfig& cfg);

/// Samples `count` images (in [0,1]) from a model with a fixed prompt.
std::vector<Image> sample_images(const Denoiser<float>& model, const std::vector<int>& tokens,
                                 const NoiseSchedule& s, const std::vector<std::uint64_t>& seeds,
                                 SampleShape shape);

}  // namespace crackgen
