#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "histosynth/nn_common.hpp"
#include "histosynth/patch.hpp"
#include "histosynth/rng.hpp"

namespace histosynth::gan {

struct LossWeights {
  double adversarial = 1.0;
  double feature_matching = 10.0;
  double kl = 0.05;
};

struct GanConfig {
  int image_size = 64;
  int base_channels = 32;
  int style_dim = 64;
  int spade_hidden = 32;
  /// Kernel of the γ/β heads; 1 makes the modulation purely per-pixel.
  int spade_kernel = 3;
  int num_discriminators = 2;
  double learning_rate = 1e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 16;
  int steps = 0;
  LossWeights weights;
  std::string snapshot_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const GanConfig& c);
void from_json(const nlohmann::json& j, GanConfig& c);

struct StyleVector {
  std::vector<float> values;
};

/// Per-sample, per-channel normalisation over spatial positions with ε = 1e-5
/// in the denominator; a constant channel maps to 0.
torch::Tensor normalize_activations(const torch::Tensor& x, double eps = 1e-5);

/// Spatially-adaptive normalisation: normalize(x) ⊙ γ(mask) + β(mask), with γ
/// and β predicted from the one-hot mask by a shared conv + ReLU followed by
/// one conv each. The mask is resized (nearest) to the activation size.
class SpadeNormImpl : public torch::nn::Module {
public:
  SpadeNormImpl(int channels, int label_channels, int hidden, int kernel);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask);
  std::pair<torch::Tensor, torch::Tensor> modulation(const torch::Tensor& mask);

  torch::nn::Conv2d shared{nullptr}, gamma{nullptr}, beta{nullptr};
};
TORCH_MODULE(SpadeNorm);

/// Applies `norm` to activations [C,h,w] or [N,C,h,w] under a one-hot mask;
/// checks shapes first.
torch::Tensor spade_modulation(const torch::Tensor& activations, const torch::Tensor& mask, SpadeNorm& norm);

class SpadeResBlockImpl : public torch::nn::Module {
public:
  SpadeResBlockImpl(int fin, int fout, const GanConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask);

private:
  bool learned_shortcut_;
  SpadeNorm norm0_{nullptr}, norm1_{nullptr}, norm_s_{nullptr};
  torch::nn::Conv2d conv0_{nullptr}, conv1_{nullptr}, conv_s_{nullptr};
};
TORCH_MODULE(SpadeResBlock);

class SpadeGeneratorImpl : public torch::nn::Module {
public:
  explicit SpadeGeneratorImpl(const GanConfig& cfg);
  torch::Tensor forward(const torch::Tensor& style, const torch::Tensor& mask);

private:
  int start_size_;
  int start_channels_;
  torch::nn::Linear fc_{nullptr};
  torch::nn::ModuleList blocks_;
  torch::nn::Conv2d to_rgb_{nullptr};
};
TORCH_MODULE(SpadeGenerator);

/// Variational style encoder: image → (μ, log σ²).
class StyleEncoderImpl : public torch::nn::Module {
public:
  explicit StyleEncoderImpl(const GanConfig& cfg);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& image);

private:
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear mu_{nullptr}, logvar_{nullptr};
};
TORCH_MODULE(StyleEncoder);

/// PatchGAN on (image, one-hot mask); returns every intermediate feature map,
/// the last one being the patch logits.
class PatchDiscriminatorImpl : public torch::nn::Module {
public:
  explicit PatchDiscriminatorImpl(const GanConfig& cfg);
  std::vector<torch::Tensor> forward(const torch::Tensor& input);

private:
  torch::nn::ModuleList layers_;
};
TORCH_MODULE(PatchDiscriminator);

class MultiscaleDiscriminatorImpl : public torch::nn::Module {
public:
  explicit MultiscaleDiscriminatorImpl(const GanConfig& cfg);
  std::vector<std::vector<torch::Tensor>> forward(torch::Tensor input);

private:
  torch::nn::ModuleList discriminators_;
};
TORCH_MODULE(MultiscaleDiscriminator);

struct StepLosses {
  std::int64_t step = 0;
  double discriminator = 0;
  double adversarial = 0;
  double feature_matching = 0;
  double kl = 0;
  double generator = 0;  ///< weighted generator total
};

/// Generator, style encoder, discriminators, their optimizers and the RNG
/// state: everything a checkpoint holds.
class GanModel {
public:
  static GanModel create(const GanConfig& config, std::uint64_t seed);
  static GanModel load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Alternating generator/discriminator updates on uniformly drawn batches.
  /// Throws nn::NonFiniteLoss on divergence.
  std::vector<StepLosses> train(const Dataset& data, int steps);

  /// Deterministic in (weights, mask, style).
  RgbImage generate(const SubtypeMask& mask, const StyleVector& style);
  /// Style drawn from N(0, I) with the given seed.
  RgbImage generate(const SubtypeMask& mask, std::uint64_t seed);
  StyleVector random_style(std::uint64_t seed) const;

  const GanConfig& config() const noexcept { return config_; }
  std::int64_t step() const noexcept { return step_; }
  SpadeGenerator& generator() noexcept { return generator_; }
  StyleEncoder& encoder() noexcept { return encoder_; }
  MultiscaleDiscriminator& discriminator() noexcept { return discriminator_; }

  /// Bitwise comparison of weights, optimizer moments, step and RNG states.
  bool identical_to(const GanModel& other) const;

private:
  GanModel() = default;
  void make_optimizers();

  GanConfig config_;
  std::int64_t step_ = 0;
  Rng data_rng_;
  torch::Generator noise_;
  SpadeGenerator generator_{nullptr};
  StyleEncoder encoder_{nullptr};
  MultiscaleDiscriminator discriminator_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
};

/// Fresh model trained for config.steps steps.
GanModel train_gan(const Dataset& data, const GanConfig& config, std::uint64_t seed);

}  // namespace histosynth::gan
