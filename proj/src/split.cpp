#include "histosynth/split.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "histosynth/error.hpp"
#include "histosynth/rng.hpp"

namespace histosynth {

std::string_view to_string(SplitSet s) noexcept {
  switch (s) {
    case SplitSet::train: return "train";
    case SplitSet::val: return "val";
    case SplitSet::test: return "test";
  }
  return "train";
}

SplitSet split_set_from_string(std::string_view s) {
  if (s == "train") return SplitSet::train;
  if (s == "val") return SplitSet::val;
  if (s == "test") return SplitSet::test;
  throw ValidationError("unknown split set '" + std::string(s) + "'");
}

namespace {

// Label sequence of length n in which every prefix holds each set close to its
// target share: position i goes to the set furthest behind counts[s]·(i+1)/n.
std::vector<SplitSet> interleaved_labels(SplitCounts counts) {
  const int n = counts.total();
  const std::array<int, 3> target{counts.train, counts.val, counts.test};
  std::array<int, 3> assigned{};
  std::vector<SplitSet> labels;
  labels.reserve(n);
  for (int i = 0; i < n; ++i) {
    int best = -1;
    long best_deficit = 0;
    for (int s = 0; s < 3; ++s) {
      if (assigned[s] >= target[s]) continue;
      // Deficit scaled by n to stay in integers.
      const long deficit = static_cast<long>(target[s]) * (i + 1) - static_cast<long>(assigned[s]) * n;
      if (best < 0 || deficit > best_deficit) {
        best = s;
        best_deficit = deficit;
      }
    }
    ++assigned[best];
    labels.push_back(static_cast<SplitSet>(best));
  }
  return labels;
}

}  // namespace

SplitMap make_split(const std::vector<std::string>& slide_ids, SplitCounts counts,
                    const std::optional<std::vector<int>>& score_bins, std::uint64_t seed) {
  if (counts.train < 0 || counts.val < 0 || counts.test < 0)
    throw ValidationError("split counts must be non-negative");
  if (counts.total() != static_cast<int>(slide_ids.size()))
    throw ValidationError("split counts sum to " + std::to_string(counts.total()) + " but " +
                          std::to_string(slide_ids.size()) + " slides were given");
  if (score_bins && score_bins->size() != slide_ids.size())
    throw ValidationError("score bin list length differs from slide list length");
  if (std::set<std::string>(slide_ids.begin(), slide_ids.end()).size() != slide_ids.size())
    throw ValidationError("duplicate slide ids");

  Rng rng(seed);
  std::vector<std::size_t> order(slide_ids.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  if (score_bins) {
    // Group by bin, keeping the shuffled order inside each bin.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return (*score_bins)[a] < (*score_bins)[b]; });
  }
  const auto labels = interleaved_labels(counts);
  SplitMap split;
  for (std::size_t i = 0; i < order.size(); ++i) split[slide_ids[order[i]]] = labels[i];
  return split;
}

}  // namespace histosynth
