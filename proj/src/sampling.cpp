#include "histosynth/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <spdlog/spdlog.h>

#include "histosynth/error.hpp"

namespace histosynth {

SubtypeMask randomize_instance_subtypes(const LabeledPatch& patch, std::span<const Subtype> classes,
                                        std::uint64_t seed) {
  if (classes.empty()) throw ValidationError("randomize_instance_subtypes: empty class list");
  for (auto c : classes)
    if (!is_tumor(c)) throw ValidationError("randomize_instance_subtypes: background is not a tumor class");
  if (!patch.mask.same_shape(patch.instances)) throw ValidationError("mask and instance map differ in shape");

  std::map<std::uint16_t, std::uint8_t> assignment;
  for (auto id : patch.instances.values())
    if (id > 0) assignment.emplace(id, 0);
  Rng rng(seed);
  for (auto& [id, c] : assignment) c = code(classes[rng.below(classes.size())]);

  SubtypeMask out = patch.mask;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (patch.instances[i] > 0) out[i] = assignment[patch.instances[i]];
  return out;
}

std::string_view to_string(SamplingKind k) noexcept {
  return k == SamplingKind::tumor_sampled ? "tumor_sampled" : "subtype_sampled";
}

SamplingKind sampling_kind_from_string(std::string_view s) {
  if (s == "tumor_sampled") return SamplingKind::tumor_sampled;
  if (s == "subtype_sampled") return SamplingKind::subtype_sampled;
  throw ValidationError("unknown sampling strategy '" + std::string(s) + "'");
}

TrainingSampler::TrainingSampler(std::vector<ClassHistogram> histograms, SamplingStrategy strategy)
    : histograms_(std::move(histograms)), strategy_(strategy), rng_(strategy.seed) {
  if (histograms_.empty()) throw ValidationError("TrainingSampler: no patches");
  if (strategy_.background_fraction < 0 || strategy_.background_fraction > 1)
    throw ValidationError("background_fraction must lie in [0, 1]");

  std::array<std::int64_t, kNumClasses> group_pixels{};
  std::size_t n_tumor = 0, n_background = 0;
  for (const auto& h : histograms_) {
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c)
      if (h[c] > 0 && (best == 0 || h[c] > h[best])) best = c;
    dominant_.push_back(static_cast<Subtype>(best));
    if (best == 0) {
      ++n_background;
    } else {
      ++n_tumor;
      group_pixels[best] += h[best];
    }
  }
  if (strategy_.kind == SamplingKind::subtype_sampled) {
    for (auto s : kTumorSubtypes)
      if (group_pixels[code(s)] == 0) {
        excluded_.push_back(s);
        spdlog::warn("subtype {} absent from the corpus; excluded from balancing", name(s));
      }
  }

  const double bg_share = n_tumor == 0 ? 1.0 : (n_background == 0 ? 0.0 : strategy_.background_fraction);
  std::vector<double> weight(histograms_.size(), 0.0);
  double tumor_total = 0.0;
  for (std::size_t i = 0; i < histograms_.size(); ++i) {
    const auto d = code(dominant_[i]);
    if (d == 0) continue;
    weight[i] = strategy_.kind == SamplingKind::tumor_sampled ? 1.0 : 1.0 / static_cast<double>(group_pixels[d]);
    tumor_total += weight[i];
  }
  probabilities_.resize(histograms_.size());
  for (std::size_t i = 0; i < histograms_.size(); ++i)
    probabilities_[i] = code(dominant_[i]) == 0 ? bg_share / static_cast<double>(n_background)
                                                : (1.0 - bg_share) * weight[i] / tumor_total;
  cumulative_.resize(probabilities_.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < probabilities_.size(); ++i) cumulative_[i] = (acc += probabilities_[i]);
}

std::size_t TrainingSampler::next() {
  const double u = rng_.uniform() * cumulative_.back();
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
  // Skip zero-probability entries that share a cumulative value with their predecessor.
  while (probabilities_[i] == 0.0 && i + 1 < probabilities_.size()) ++i;
  return i;
}

std::vector<ClassHistogram> class_histograms(const Dataset& items) {
  std::vector<ClassHistogram> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back(class_histogram(item.patch.mask));
  return out;
}

std::string_view to_string(GenMethod m) noexcept {
  switch (m) {
    case GenMethod::gan: return "gan";
    case GenMethod::diffusion: return "diffusion";
    case GenMethod::inpaint: return "inpaint";
  }
  return "diffusion";
}

GenMethod gen_method_from_string(std::string_view s) {
  if (s == "gan") return GenMethod::gan;
  if (s == "diffusion") return GenMethod::diffusion;
  if (s == "inpaint") return GenMethod::inpaint;
  throw ValidationError("unknown generation method '" + std::string(s) + "'");
}

std::size_t synthetic_count(double ratio, std::size_t real_count) {
  if (!(ratio >= 0) || !std::isfinite(ratio)) throw ValidationError("mix ratio must be finite and non-negative");
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(real_count) + 1e-9));
}

Dataset mix_real_synthetic(const Dataset& real, const Dataset& synthetic, const MixSpec& spec) {
  const std::size_t want = synthetic_count(spec.ratio, real.size());
  if (want > synthetic.size())
    throw ResourceError("synthetic pool too small: need " + std::to_string(want) + " items, have " +
                        std::to_string(synthetic.size()) + " (short by " +
                        std::to_string(want - synthetic.size()) + ")");
  if (want == 0) return real;
  Rng rng(spec.seed);
  std::vector<std::size_t> pool(synthetic.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (std::size_t i = 0; i < want; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);

  Dataset out = real;
  out.reserve(real.size() + want);
  for (std::size_t i = 0; i < want; ++i) out.push_back(synthetic[pool[i]]);
  rng.shuffle(out);
  return out;
}

}  // namespace histosynth
