#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "histosynth/nn_common.hpp"
#include "histosynth/patch.hpp"
#include "histosynth/rng.hpp"

namespace histosynth::diffusion {

// ---------------------------------------------------------------- schedule

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

/// β and ᾱ tables of length T+1; index 0 is the clean state (β_0 = 0, ᾱ_0 = 1).
class NoiseSchedule {
public:
  /// Linear β from beta_start to beta_end. With `rescale`, both endpoints are
  /// multiplied by 1000/T so short schedules still end near pure noise.
  static NoiseSchedule linear(int T, double beta_start = 1e-4, double beta_end = 0.02, bool rescale = true);
  static NoiseSchedule cosine(int T, double offset = 0.008);
  /// Validates 0 < β_1 ≤ … ≤ β_T < 1. `betas` holds β_1..β_T.
  static NoiseSchedule from_betas(const std::vector<double>& betas);

  int steps() const noexcept { return static_cast<int>(betas_.size()) - 1; }
  double beta(int t) const;
  double alpha_bar(int t) const;
  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }

private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

/// x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε. Throws when t ∉ [0, T] or shapes differ.
torch::Tensor q_forward(const NoiseSchedule& schedule, const torch::Tensor& x0, int t, const torch::Tensor& noise);
/// Batched form: `t` holds one step per leading-dimension entry.
torch::Tensor q_forward(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                        const torch::Tensor& noise);

// ---------------------------------------------------------------- geometry

/// Majority code per f×f block, ties to the lowest code. Throws when the mask
/// side is not divisible by f.
SubtypeMask downsample_mask(const SubtypeMask& mask, int f);
/// Nearest-neighbour expansion by f; downsample_mask inverts it exactly.
SubtypeMask upsample_mask(const SubtypeMask& mask, int f);
/// Latent positions whose f×f pixel footprint contains no region pixel.
Grid<std::uint8_t> footprint_outside(const Grid<std::uint8_t>& region, int f);

// ---------------------------------------------------------------- autoencoder

struct AutoencoderConfig {
  int image_size = 64;
  int compression_factor = 4;
  int latent_channels = 3;
  int codebook_size = 256;
  int base_channels = 32;
  double commitment = 0.25;
  double learning_rate = 2e-4;
  int batch_size = 16;
  int steps = 0;
  /// Codes unused over this many steps are re-seeded from encoder outputs; 0 disables.
  int restart_interval = 200;
  /// Batch draws: "uniform", or a patch sampling kind weighted by class histograms.
  std::string batch_sampling = "uniform";
  std::string snapshot_dir;

  void validate() const;
  int latent_size() const noexcept { return image_size / compression_factor; }
};

void to_json(nlohmann::json& j, const AutoencoderConfig& c);
void from_json(const nlohmann::json& j, AutoencoderConfig& c);

class VqAutoencoderImpl : public torch::nn::Module {
public:
  explicit VqAutoencoderImpl(const AutoencoderConfig& cfg);

  /// [N,3,H,W] in [-1,1] → pre-quantisation latents [N,c,H/f,W/f].
  torch::Tensor encode(const torch::Tensor& images);
  struct Quantized {
    torch::Tensor values;  ///< straight-through quantised latents
    torch::Tensor codes;   ///< [N,h,w] codebook indices
    torch::Tensor codebook_loss;
    torch::Tensor commitment_loss;
  };
  Quantized quantize(const torch::Tensor& latents);
  /// Decoder only; expects quantised latents.
  torch::Tensor decode_quantized(const torch::Tensor& latents);
  /// Quantise then decode.
  torch::Tensor decode(const torch::Tensor& latents);

  torch::Tensor codebook;  ///< [K, c]

private:
  torch::nn::Sequential encoder_{nullptr}, decoder_{nullptr};
};
TORCH_MODULE(VqAutoencoder);

struct AeStepLosses {
  std::int64_t step = 0;
  double reconstruction = 0;
  double codebook = 0;
  double commitment = 0;
  double total = 0;
};

class Autoencoder {
public:
  static Autoencoder create(const AutoencoderConfig& config, std::uint64_t seed);
  static Autoencoder load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::vector<AeStepLosses> train(const Dataset& data, int steps);
  /// Sets the latent scale to 1/std of the encoded corpus.
  void calibrate_scale(const Dataset& data);

  /// Scaled pre-quantisation latent [c, h, w].
  torch::Tensor encode(const RgbImage& image);
  torch::Tensor encode_batch(const torch::Tensor& images);
  /// Inverse of encode: unscale, quantise, decode.
  RgbImage decode(const torch::Tensor& latent);
  torch::Tensor decode_batch(const torch::Tensor& latents);
  RgbImage reconstruct(const RgbImage& image);

  const AutoencoderConfig& config() const noexcept { return config_; }
  double scale() const noexcept { return scale_; }
  std::int64_t step() const noexcept { return step_; }
  VqAutoencoder& module() noexcept { return net_; }
  bool identical_to(const Autoencoder& other) const;

private:
  Autoencoder() = default;
  void check_image(int h, int w) const;
  void initialise_codebook(const torch::Tensor& latents);
  void restart_dead_codes(const torch::Tensor& latents);

  AutoencoderConfig config_;
  std::int64_t step_ = 0;
  double scale_ = 1.0;
  bool codebook_ready_ = false;
  Rng data_rng_;
  torch::Generator noise_;
  VqAutoencoder net_{nullptr};
  torch::Tensor usage_;
  std::unique_ptr<torch::optim::Adam> opt_;
};

double psnr(const RgbImage& a, const RgbImage& b);

// ---------------------------------------------------------------- denoiser

enum class SamplerKind { ancestral, strided };

std::string to_string(SamplerKind k);
SamplerKind sampler_kind_from_string(const std::string& s);

struct LdmConfig {
  int timesteps = 200;
  ScheduleKind schedule = ScheduleKind::linear;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool rescale_schedule = true;
  int model_channels = 64;
  std::vector<int> channel_mult{1, 2, 2};
  int res_blocks = 1;
  double learning_rate = 1e-6;
  int batch_size = 16;
  int steps = 0;
  SamplerKind sampler = SamplerKind::strided;
  int sample_steps = 50;
  /// Train on the eight flips/rotations of every patch.
  bool augment = true;
  /// As AutoencoderConfig::batch_sampling.
  std::string batch_sampling = "uniform";
  std::string snapshot_dir;

  void validate() const;
  NoiseSchedule make_schedule() const;
};

void to_json(nlohmann::json& j, const LdmConfig& c);
void from_json(const nlohmann::json& j, LdmConfig& c);

class DenoiserImpl : public torch::nn::Module {
public:
  DenoiserImpl(const LdmConfig& cfg, int latent_channels);
  /// ε̂ from x_t [N,c,h,w], integer steps t [N] and one-hot masks [N,K,h,w].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& mask);

private:
  int model_channels_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d in_{nullptr};
  torch::nn::ModuleList down_, up_;
  std::vector<int> down_kinds_, up_kinds_;  // 0 = residual block, 1 = resample
  torch::nn::ModuleList mid_;
  torch::nn::Sequential out_{nullptr};
};
TORCH_MODULE(Denoiser);

struct LdmStepLosses {
  std::int64_t step = 0;
  double mse = 0;
};

/// Denoiser plus the autoencoder it was trained against.
class LatentDiffusion {
public:
  static LatentDiffusion create(const LdmConfig& config, std::shared_ptr<Autoencoder> ae, std::uint64_t seed);
  /// Throws ValidationError when the autoencoder's compression factor,
  /// latent channels, image size or latent scale differ from the ones recorded.
  static LatentDiffusion load(const std::filesystem::path& path, std::shared_ptr<Autoencoder> ae);
  void save(const std::filesystem::path& path) const;

  std::vector<LdmStepLosses> train(const Dataset& data, int steps);
  /// Mean ε-MSE over `batches` batches of the given latents, noise and steps
  /// drawn from `seed`; does not touch the training state.
  double evaluate_mse(const torch::Tensor& latents, const torch::Tensor& masks, int batches, std::uint64_t seed);

  /// Changes the inference sampler; training state is unaffected.
  void set_sampler(SamplerKind kind, int sample_steps);

  RgbImage sample(const SubtypeMask& mask, std::uint64_t seed);
  /// One call per batch; each item draws its noise from its own seed.
  std::vector<RgbImage> sample_batch(const std::vector<SubtypeMask>& masks, const std::vector<std::uint64_t>& seeds);
  /// Re-synthesises pixels inside `tumor_region` under `mask`; every other
  /// pixel is copied from `image`.
  RgbImage inpaint(const RgbImage& image, const SubtypeMask& mask, const Grid<std::uint8_t>& tumor_region,
                   std::uint64_t seed);

  const LdmConfig& config() const noexcept { return config_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  std::int64_t step() const noexcept { return step_; }
  Autoencoder& autoencoder() noexcept { return *ae_; }
  Denoiser& denoiser() noexcept { return net_; }
  bool identical_to(const LatentDiffusion& other) const;

  /// Encoded training pairs: latents [N,c,h,w] and one-hot masks [N,K,h,w].
  std::pair<torch::Tensor, torch::Tensor> encode_dataset(const Dataset& data, bool augment);

private:
  LatentDiffusion() = default;
  std::vector<int> sampling_steps() const;
  torch::Tensor reverse_step(const torch::Tensor& x, int t, int t_prev, const torch::Tensor& mask,
                             std::vector<torch::Generator>& gens);
  void check_mask(const SubtypeMask& mask) const;

  LdmConfig config_;
  NoiseSchedule schedule_;
  std::int64_t step_ = 0;
  Rng data_rng_;
  torch::Generator noise_;
  std::shared_ptr<Autoencoder> ae_;
  Denoiser net_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_;
  // Cache of the encoded training set, keyed by the dataset identity.
  std::string cache_key_;
  torch::Tensor cache_latents_, cache_masks_;
};

}  // namespace histosynth::diffusion
