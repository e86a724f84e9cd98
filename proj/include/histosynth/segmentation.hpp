#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "histosynth/evaluation.hpp"
#include "histosynth/nn_common.hpp"
#include "histosynth/patch.hpp"
#include "histosynth/sampling.hpp"

namespace histosynth::seg {

struct SegConfig {
  int image_size = 64;
  /// Residual stages in the encoder (1–4); each halves the resolution.
  int encoder_depth = 4;
  /// Basic blocks per stage; the default is the ResNet-34 layout.
  std::vector<int> blocks_per_stage{3, 4, 6, 3};
  int base_channels = 64;
  bool use_pretrained_encoder = false;
  std::string pretrained_encoder_path;
  double learning_rate = 1e-6;
  int batch_size = 16;
  int epochs = 10;
  /// Optimizer steps per epoch; 0 means one pass worth of draws (ceil(n / batch_size)).
  int steps_per_epoch = 0;
  double lambda_dice = 0.5;
  double lambda_ce = 0.5;
  double threshold = 0.5;
  SamplingStrategy sampling;
  std::string snapshot_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const SegConfig& c);
void from_json(const nlohmann::json& j, SegConfig& c);

/// λ_dice·(1 − soft-Dice) + λ_ce·mean BCE with soft-Dice = (2Σpy+1)/(Σp+Σy+1)
/// over all elements and p clamped to [1e-7, 1−1e-7] inside the logarithms.
/// Throws when shapes differ, the target is not 0/1 or p leaves [0, 1].
torch::Tensor dice_ce_loss(const torch::Tensor& probabilities, const torch::Tensor& target, double lambda_dice = 0.5,
                           double lambda_ce = 0.5);

class BasicBlockImpl : public torch::nn::Module {
public:
  BasicBlockImpl(int in, int out, int stride);
  torch::Tensor forward(const torch::Tensor& x);

private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, down_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr}, down_norm_{nullptr};
};
TORCH_MODULE(BasicBlock);

/// Residual encoder; forward returns the stem output followed by every stage output.
class ResidualEncoderImpl : public torch::nn::Module {
public:
  explicit ResidualEncoderImpl(const SegConfig& cfg);
  std::vector<torch::Tensor> forward(const torch::Tensor& x);
  std::vector<int> channels() const { return channels_; }

private:
  torch::nn::Sequential stem_{nullptr};
  torch::nn::ModuleList stages_;
  std::vector<int> channels_;
};
TORCH_MODULE(ResidualEncoder);

/// U-Net with the residual encoder and a single tumor logit per pixel.
class UNetImpl : public torch::nn::Module {
public:
  explicit UNetImpl(const SegConfig& cfg);
  torch::Tensor forward(const torch::Tensor& images);
  ResidualEncoder& encoder() { return encoder_; }

private:
  ResidualEncoder encoder_{nullptr};
  torch::nn::ModuleList decoder_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNet);

struct BinaryPrediction {
  Grid<float> probabilities;
  BinaryMask binary;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_dice = 0;
};

class Segmenter {
public:
  static Segmenter create(const SegConfig& config, std::uint64_t seed);
  static Segmenter load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Pure function of (weights, image).
  BinaryPrediction predict(const RgbImage& image);
  std::vector<BinaryPrediction> predict_batch(const std::vector<RgbImage>& images);
  /// Pooled report over the given items.
  EvalReport evaluate(const Dataset& data, const EvalOptions& options = {});

  const SegConfig& config() const noexcept { return config_; }
  const std::vector<EpochRecord>& history() const noexcept { return history_; }
  int best_epoch() const noexcept { return best_epoch_; }
  std::int64_t step() const noexcept { return step_; }
  UNet& network() noexcept { return net_; }

private:
  friend Segmenter train_segmenter(const Dataset&, const Dataset&, const SegConfig&, std::uint64_t);
  Segmenter() = default;

  SegConfig config_;
  std::int64_t step_ = 0;
  int best_epoch_ = -1;
  std::vector<EpochRecord> history_;
  UNet net_{nullptr};
};

/// Trains on `train`, scores every epoch on `val` and keeps the weights of the
/// epoch with the highest validation Dice (earliest on ties). Batches are drawn
/// by the configured sampler; with an empty `val` the last epoch is kept.
Segmenter train_segmenter(const Dataset& train, const Dataset& val, const SegConfig& config, std::uint64_t seed);

/// Writes only the encoder weights, in the format use_pretrained_encoder reads.
void save_encoder_weights(Segmenter& model, const std::filesystem::path& path);

}  // namespace histosynth::seg
