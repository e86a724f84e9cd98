#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "histosynth/patch.hpp"
#include "histosynth/rng.hpp"

namespace histosynth {

/// Draws a fresh subtype for every instance of the patch, i.i.d. uniform over
/// `classes`, in ascending instance-id order. Background pixels and instance
/// geometry are untouched.
SubtypeMask randomize_instance_subtypes(const LabeledPatch& patch, std::span<const Subtype> classes,
                                        std::uint64_t seed);

enum class SamplingKind { tumor_sampled, subtype_sampled };

std::string_view to_string(SamplingKind k) noexcept;
SamplingKind sampling_kind_from_string(std::string_view s);

struct SamplingStrategy {
  SamplingKind kind = SamplingKind::subtype_sampled;
  std::uint64_t seed = 0;
  /// Share of draws that return a background-only patch, when any exist.
  double background_fraction = 0.2;
};

using ClassHistogram = std::array<std::int64_t, kNumClasses>;

/// Infinite weighted stream of patch indices.
///
/// tumor_sampled draws every tumor-bearing patch with equal probability.
/// subtype_sampled groups patches by their dominant tumor subtype and gives
/// each patch of group k weight 1/P_k, where P_k is the number of class-k
/// pixels in that group; the expected drawn tumor-pixel count is then equal
/// for every subtype present. Absent subtypes are skipped with a warning.
class TrainingSampler {
public:
  TrainingSampler(std::vector<ClassHistogram> histograms, SamplingStrategy strategy);

  std::size_t next();

  /// Probability of drawing each patch.
  const std::vector<double>& probabilities() const noexcept { return probabilities_; }
  const std::vector<Subtype>& excluded_subtypes() const noexcept { return excluded_; }
  /// Dominant tumor subtype of a patch, background for tumor-free patches.
  Subtype dominant(std::size_t index) const { return dominant_.at(index); }

private:
  std::vector<ClassHistogram> histograms_;
  SamplingStrategy strategy_;
  Rng rng_;
  std::vector<Subtype> dominant_;
  std::vector<Subtype> excluded_;
  std::vector<double> probabilities_;
  std::vector<double> cumulative_;
};

std::vector<ClassHistogram> class_histograms(const Dataset& items);

enum class GenMethod { gan, diffusion, inpaint };

std::string_view to_string(GenMethod m) noexcept;
GenMethod gen_method_from_string(std::string_view s);

struct MixSpec {
  /// Synthetic item count as a multiple of the real item count.
  double ratio = 1.0;
  GenMethod method = GenMethod::diffusion;
  std::uint64_t seed = 0;
};

/// ⌊ratio·n⌋ computed so that decimal ratios such as 0.5 or 2.0 round exactly.
std::size_t synthetic_count(double ratio, std::size_t real_count);

/// All real items plus ⌊ratio·|real|⌋ synthetic items drawn without
/// replacement, shuffled together. Throws ResourceError if the pool is short.
Dataset mix_real_synthetic(const Dataset& real, const Dataset& synthetic, const MixSpec& spec);

}  // namespace histosynth
