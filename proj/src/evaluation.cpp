#include "histosynth/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "histosynth/error.hpp"

namespace histosynth {

using nlohmann::json;

namespace {

void require_binary(const BinaryMask& m, const char* what) {
  for (auto v : m.values())
    if (v > 1) throw ValidationError(std::string(what) + " mask is not binary");
}

}  // namespace

double dice_score(const BinaryMask& pred, const BinaryMask& target) {
  if (!pred.same_shape(target)) throw ValidationError("dice_score: shape mismatch");
  require_binary(pred, "predicted");
  require_binary(target, "target");
  std::int64_t inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p += pred[i];
    t += target[i];
    inter += pred[i] & target[i];
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

std::map<Subtype, double> per_subtype_recall(const BinaryMask& pred, const SubtypeMask& mask) {
  if (!pred.same_shape(mask)) throw ValidationError("per_subtype_recall: shape mismatch");
  std::array<std::int64_t, kNumClasses> support{}, hits{};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto c = mask[i];
    if (c == 0 || !is_valid_code(c)) continue;
    ++support[c];
    if (pred[i]) ++hits[c];
  }
  std::map<Subtype, double> out;
  for (auto s : kTumorSubtypes)
    if (support[code(s)] > 0)
      out[s] = static_cast<double>(hits[code(s)]) / static_cast<double>(support[code(s)]);
  return out;
}

double subtype_variance(const std::map<Subtype, double>& recalls, std::span<const Subtype> classes,
                        VarianceKind kind) {
  std::string missing;
  std::vector<double> values;
  for (auto s : classes) {
    auto it = recalls.find(s);
    if (it == recalls.end())
      missing += (missing.empty() ? "" : ", ") + std::string(name(s));
    else
      values.push_back(it->second);
  }
  if (!missing.empty()) throw ValidationError("subtype_variance: no recall for " + missing);
  if (values.empty()) throw ValidationError("subtype_variance: empty class list");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  if (kind == VarianceKind::sample) {
    if (values.size() < 2) throw ValidationError("subtype_variance: sample variance needs two classes");
    return ss / (n - 1.0);
  }
  return ss / n;
}

void EvalAccumulator::add(const BinaryMask& pred, const SubtypeMask& mask) {
  if (!pred.same_shape(mask)) throw ValidationError("EvalAccumulator: shape mismatch");
  require_binary(pred, "predicted");
  ++patches_;
  std::int64_t inter = 0, p = 0, t = 0;
  std::map<Subtype, std::int64_t> sup, hit;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool tumor = mask[i] > 0;
    p += pred[i];
    t += tumor;
    inter += pred[i] && tumor;
    if (tumor) {
      const auto s = static_cast<Subtype>(mask[i]);
      ++sup[s];
      if (pred[i]) ++hit[s];
    }
  }
  intersection_ += inter;
  pred_total_ += p;
  target_total_ += t;
  for (const auto& [s, n] : sup) {
    support_[s] += n;
    hits_[s] += hit[s];
    recall_sum_[s] += static_cast<double>(hit[s]) / static_cast<double>(n);
    ++recall_n_[s];
  }
  dice_sum_ += p + t == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

EvalReport EvalAccumulator::report() const {
  if (patches_ == 0) throw ValidationError("EvalAccumulator: no patches added");
  EvalReport r;
  r.support = support_;
  if (options_.per_patch) {
    r.dice = dice_sum_ / static_cast<double>(patches_);
    for (const auto& [s, sum] : recall_sum_) r.recalls[s] = sum / recall_n_.at(s);
  } else {
    r.dice = pred_total_ + target_total_ == 0
                 ? 1.0
                 : 2.0 * static_cast<double>(intersection_) / static_cast<double>(pred_total_ + target_total_);
    for (const auto& [s, n] : support_) r.recalls[s] = static_cast<double>(hits_.at(s)) / static_cast<double>(n);
  }
  for (const auto& [s, rec] : r.recalls) r.confusion_rows[s] = {rec, 1.0 - rec};
  r.subtype_variance = subtype_variance(r.recalls, options_.variance_classes, options_.variance);
  return r;
}

MetricStats describe(std::span<const double> values) {
  if (values.empty()) throw ValidationError("describe: no values");
  MetricStats s;
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

RunAggregate aggregate_runs(const std::vector<EvalReport>& reports, std::vector<std::uint64_t> seeds) {
  if (reports.empty()) throw ValidationError("aggregate_runs: no reports");
  RunAggregate a;
  a.runs = reports;
  a.seeds = std::move(seeds);
  std::vector<double> dice, var;
  std::map<Subtype, std::vector<double>> rec;
  for (const auto& r : reports) {
    dice.push_back(r.dice);
    var.push_back(r.subtype_variance);
    for (const auto& [s, v] : r.recalls) rec[s].push_back(v);
  }
  a.dice = describe(dice);
  a.subtype_variance = describe(var);
  for (const auto& [s, v] : rec) {
    a.recalls[s] = describe(v);
    a.mean_confusion_rows[s] = {a.recalls[s].mean, 1.0 - a.recalls[s].mean};
  }
  return a;
}

namespace {

template <typename V, typename F>
json subtype_map(const std::map<Subtype, V>& m, F&& f) {
  json j = json::object();
  for (const auto& [s, v] : m) j[std::string(name(s))] = f(v);
  return j;
}

Subtype subtype_key(const std::string& k) {
  auto s = subtype_from_name(k);
  if (!s) throw ValidationError("unknown subtype key '" + k + "'");
  return *s;
}

}  // namespace

void to_json(json& j, const EvalReport& r) {
  j = {{"dice", r.dice},
       {"recalls", subtype_map(r.recalls, [](double v) { return v; })},
       {"subtype_variance", r.subtype_variance},
       {"confusion_rows", subtype_map(r.confusion_rows, [](const ConfusionRow& c) { return json{c.tumor, c.background}; })},
       {"support", subtype_map(r.support, [](std::int64_t v) { return v; })}};
}

void from_json(const json& j, EvalReport& r) {
  r.dice = j.at("dice").get<double>();
  r.subtype_variance = j.at("subtype_variance").get<double>();
  r.recalls.clear();
  r.confusion_rows.clear();
  r.support.clear();
  for (const auto& [k, v] : j.at("recalls").items()) r.recalls[subtype_key(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("confusion_rows").items())
    r.confusion_rows[subtype_key(k)] = {v.at(0).get<double>(), v.at(1).get<double>()};
  for (const auto& [k, v] : j.at("support").items()) r.support[subtype_key(k)] = v.get<std::int64_t>();
}

void to_json(json& j, const MetricStats& s) {
  j = {{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}};
}

void to_json(json& j, const RunAggregate& a) {
  j = {{"runs", a.runs},
       {"seeds", a.seeds},
       {"dice", a.dice},
       {"subtype_variance", a.subtype_variance},
       {"recalls", subtype_map(a.recalls, [](const MetricStats& s) { return json(s); })},
       {"mean_confusion_rows",
        subtype_map(a.mean_confusion_rows, [](const ConfusionRow& c) { return json{c.tumor, c.background}; })}};
}

}  // namespace histosynth
