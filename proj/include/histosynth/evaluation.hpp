#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "histosynth/grid.hpp"
#include "histosynth/subtype.hpp"

namespace histosynth {

using BinaryMask = Grid<std::uint8_t>;

/// 2|P∩T| / (|P|+|T|); two empty masks score 1.
double dice_score(const BinaryMask& pred, const BinaryMask& target);

/// Fraction of each present tumor subtype's pixels predicted as tumor.
/// Subtypes without support are absent from the result.
std::map<Subtype, double> per_subtype_recall(const BinaryMask& pred, const SubtypeMask& mask);

enum class VarianceKind { population, sample };

/// Variance of the recalls of `classes` (HER2 levels by default).
/// Throws ValidationError listing any class without a recall.
double subtype_variance(const std::map<Subtype, double>& recalls,
                        std::span<const Subtype> classes = kHer2Subtypes,
                        VarianceKind kind = VarianceKind::population);

struct ConfusionRow {
  double tumor = 0.0;
  double background = 0.0;
};

struct EvalReport {
  double dice = 0.0;
  std::map<Subtype, double> recalls;
  double subtype_variance = 0.0;
  std::map<Subtype, ConfusionRow> confusion_rows;
  std::map<Subtype, std::int64_t> support;
};

struct EvalOptions {
  /// Average per-patch values instead of pooling pixels over the test set.
  bool per_patch = false;
  VarianceKind variance = VarianceKind::population;
  std::vector<Subtype> variance_classes{kHer2Subtypes.begin(), kHer2Subtypes.end()};
};

/// Collects predictions patch by patch and produces an EvalReport.
class EvalAccumulator {
public:
  explicit EvalAccumulator(EvalOptions options = {}) : options_(std::move(options)) {}

  void add(const BinaryMask& pred, const SubtypeMask& mask);
  EvalReport report() const;
  std::size_t patches() const noexcept { return patches_; }

private:
  EvalOptions options_;
  std::size_t patches_ = 0;
  std::int64_t intersection_ = 0, pred_total_ = 0, target_total_ = 0;
  std::map<Subtype, std::int64_t> support_, hits_;
  // Per-patch mode sums.
  double dice_sum_ = 0.0;
  std::map<Subtype, double> recall_sum_;
  std::map<Subtype, int> recall_n_;
};

struct MetricStats {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation, 0 for a single run
  double min = 0.0;
  double max = 0.0;
};

MetricStats describe(std::span<const double> values);

struct RunAggregate {
  std::vector<EvalReport> runs;
  std::vector<std::uint64_t> seeds;
  MetricStats dice;
  MetricStats subtype_variance;
  std::map<Subtype, MetricStats> recalls;
  std::map<Subtype, ConfusionRow> mean_confusion_rows;
};

RunAggregate aggregate_runs(const std::vector<EvalReport>& reports, std::vector<std::uint64_t> seeds = {});

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);
void to_json(nlohmann::json& j, const MetricStats& s);
void to_json(nlohmann::json& j, const RunAggregate& a);

}  // namespace histosynth
