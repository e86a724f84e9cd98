#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "histosynth/grid.hpp"
#include "histosynth/patch.hpp"

namespace histosynth::nn {

/// [3,H,W] float in [-1, 1].
torch::Tensor image_to_tensor(const RgbImage& image);
/// Inverse of image_to_tensor with rounding and clamping; accepts [3,H,W] or [1,3,H,W].
RgbImage tensor_to_image(const torch::Tensor& t);
/// [kNumClasses,H,W] float one-hot encoding of subtype codes.
torch::Tensor one_hot(const SubtypeMask& mask);
/// [H,W] float tumor indicator.
torch::Tensor tumor_tensor(const SubtypeMask& mask);

torch::Generator make_generator(std::uint64_t seed);

/// Pins torch to one intra-op and one inter-op thread. Reductions then run in
/// a fixed order, which keeps results bit-identical across machines.
void use_single_thread();

/// Builds modules under a process-wide lock with the global torch seed set, so
/// parameter initialisation is reproducible even when several runs share a process.
template <typename F>
auto seeded_init(std::uint64_t seed, F&& make) {
  static std::mutex mutex;
  std::lock_guard lock(mutex);
  torch::manual_seed(seed);
  return make();
}

/// Thrown when a training loss becomes NaN or infinite. Carries the offending
/// batch so it can be inspected or written out.
class NonFiniteLoss : public std::runtime_error {
public:
  NonFiniteLoss(std::string what, std::int64_t step, std::map<std::string, double> losses,
                torch::Tensor images, torch::Tensor masks)
      : std::runtime_error(std::move(what)), step(step), losses(std::move(losses)),
        images(std::move(images)), masks(std::move(masks)) {}

  std::int64_t step;
  std::map<std::string, double> losses;
  torch::Tensor images;
  torch::Tensor masks;
};

/// Throws NonFiniteLoss if any entry is not finite; writes the batch to
/// `snapshot_dir` first when one is given.
void check_finite(std::string_view trainer, std::int64_t step, const std::map<std::string, double>& losses,
                  const torch::Tensor& images, const torch::Tensor& masks,
                  const std::filesystem::path& snapshot_dir = {});

// Checkpoints are single-file torch archives. Every container carries a kind
// tag, a format version, the resolved config as JSON text, the optimizer step
// and the RNG states needed to resume bit-identically.

inline constexpr std::int64_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::string kind;
  std::int64_t format_version = kCheckpointVersion;
  nlohmann::json config;
  std::int64_t step = 0;
  std::string data_rng_state;
};

void write_header(torch::serialize::OutputArchive& archive, const CheckpointHeader& header);
CheckpointHeader read_header(torch::serialize::InputArchive& archive, std::string_view expected_kind);

void write_module(torch::serialize::OutputArchive& archive, const std::string& key, const torch::nn::Module& module);
void read_module(torch::serialize::InputArchive& archive, const std::string& key, torch::nn::Module& module);
void write_optimizer(torch::serialize::OutputArchive& archive, const std::string& key, const torch::optim::Adam& opt);
void read_optimizer(torch::serialize::InputArchive& archive, const std::string& key, torch::optim::Adam& opt);
/// Positional bitwise comparison of Adam moments and step counts.
bool same_optimizer_state(const torch::optim::Adam& a, const torch::optim::Adam& b);

/// Saves atomically (temp file then rename).
void save_archive(torch::serialize::OutputArchive& archive, const std::filesystem::path& path);
torch::serialize::InputArchive open_archive(const std::filesystem::path& path);

/// True when every parameter and buffer of the two modules is bitwise equal.
bool same_weights(const torch::nn::Module& a, const torch::nn::Module& b);

}  // namespace histosynth::nn
