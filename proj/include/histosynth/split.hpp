#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace histosynth {

enum class SplitSet { train, val, test };

std::string_view to_string(SplitSet s) noexcept;
SplitSet split_set_from_string(std::string_view s);

using SplitMap = std::map<std::string, SplitSet>;

struct SplitCounts {
  int train = 24;
  int val = 8;
  int test = 8;
  int total() const noexcept { return train + val + test; }
};

/// Slide-level train/val/test assignment. With score bins, every bin is spread
/// over the three sets in proportion to the counts; bins are laid out
/// contiguously over a label sequence in which every prefix tracks the target
/// proportions, so each (bin, set) share is within two slides of exact and
/// exact whenever bin sizes are multiples of the sequence period (40 slides,
/// 24-8-8, 10 per bin gives 6-2-2). Deterministic given the seed.
SplitMap make_split(const std::vector<std::string>& slide_ids, SplitCounts counts,
                    const std::optional<std::vector<int>>& score_bins, std::uint64_t seed);

}  // namespace histosynth
