#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "histosynth/error.hpp"
#include "histosynth/harness.hpp"

namespace histosynth::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Group {
  std::string condition;
  std::vector<EvalReport> reports;
  std::vector<std::uint64_t> seeds;
};

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

// Linear-interpolation quantile of sorted values.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Box {
  double min, q1, median, q3, max;
};

Box box_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return {v.front(), quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75), v.back()};
}

void boxplot_panel(std::ostringstream& svg, double x0, double y0, double w, double h, const std::string& title,
                   const std::vector<std::string>& labels, const std::vector<std::vector<double>>& values) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& v : values)
    for (double x : v) lo = std::min(lo, x), hi = std::max(hi, x);
  if (!(hi > lo)) {
    const double pad = std::max(std::abs(lo) * 0.05, 1e-3);
    lo -= pad;
    hi += pad;
  }
  const double pad = (hi - lo) * 0.08;
  lo -= pad;
  hi += pad;
  const auto ypix = [&](double v) { return y0 + h - (v - lo) / (hi - lo) * h; };
  svg << "<text x='" << x0 + w / 2 << "' y='" << y0 - 12 << "' text-anchor='middle' font-size='14'>" << escape(title)
      << "</text>\n";
  svg << "<rect x='" << x0 << "' y='" << y0 << "' width='" << w << "' height='" << h
      << "' fill='none' stroke='#444'/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    svg << "<line x1='" << x0 - 4 << "' x2='" << x0 + w << "' y1='" << ypix(v) << "' y2='" << ypix(v)
        << "' stroke='#ddd'/>\n";
    svg << "<text x='" << x0 - 6 << "' y='" << ypix(v) + 4 << "' text-anchor='end' font-size='10'>" << fixed(v, 3)
        << "</text>\n";
  }
  const double step = w / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double cx = x0 + step * (static_cast<double>(i) + 0.5);
    const double bw = std::min(40.0, step * 0.5);
    const auto b = box_of(values[i]);
    svg << "<g class='box' data-condition='" << escape(labels[i]) << "' data-min='" << b.min << "' data-max='" << b.max
        << "' data-median='" << b.median << "'>\n";
    svg << "<line x1='" << cx << "' x2='" << cx << "' y1='" << ypix(b.min) << "' y2='" << ypix(b.max)
        << "' stroke='#333'/>\n";
    for (double v : {b.min, b.max})
      svg << "<line x1='" << cx - bw / 4 << "' x2='" << cx + bw / 4 << "' y1='" << ypix(v) << "' y2='" << ypix(v)
          << "' stroke='#333'/>\n";
    svg << "<rect x='" << cx - bw / 2 << "' y='" << ypix(b.q3) << "' width='" << bw << "' height='"
        << std::max(1.0, ypix(b.q1) - ypix(b.q3)) << "' fill='#9ecae1' stroke='#333'/>\n";
    svg << "<line x1='" << cx - bw / 2 << "' x2='" << cx + bw / 2 << "' y1='" << ypix(b.median) << "' y2='"
        << ypix(b.median) << "' stroke='#c00' stroke-width='2'/>\n";
    for (double v : values[i]) svg << "<circle cx='" << cx << "' cy='" << ypix(v) << "' r='2.5' fill='#222'/>\n";
    svg << "</g>\n";
    svg << "<text transform='translate(" << cx << "," << y0 + h + 12 << ") rotate(35)' font-size='11'>"
        << escape(labels[i]) << "</text>\n";
  }
}

void confusion_panel(std::ostringstream& svg, double x0, double y0, const std::string& title,
                     const std::map<Subtype, ConfusionRow>& rows) {
  const double cw = 70, ch = 28;
  svg << "<text x='" << x0 + 90 + cw << "' y='" << y0 - 28 << "' text-anchor='middle' font-size='14'>"
      << escape(title) << "</text>\n";
  svg << "<text x='" << x0 + 90 + cw / 2 << "' y='" << y0 - 8 << "' text-anchor='middle' font-size='11'>tumor</text>\n";
  svg << "<text x='" << x0 + 90 + cw * 1.5 << "' y='" << y0 - 8
      << "' text-anchor='middle' font-size='11'>background</text>\n";
  int r = 0;
  for (auto s : kTumorSubtypes) {
    const double y = y0 + ch * r++;
    svg << "<text x='" << x0 + 84 << "' y='" << y + ch / 2 + 4 << "' text-anchor='end' font-size='11'>"
        << std::string(name(s)) << "</text>\n";
    const auto it = rows.find(s);
    for (int c = 0; c < 2; ++c) {
      const double x = x0 + 90 + cw * c;
      if (it == rows.end()) {
        svg << "<rect x='" << x << "' y='" << y << "' width='" << cw << "' height='" << ch
            << "' fill='#eee' stroke='#fff'/>\n";
        svg << "<text x='" << x + cw / 2 << "' y='" << y + ch / 2 + 4
            << "' text-anchor='middle' font-size='11'>n/a</text>\n";
        continue;
      }
      const double v = c == 0 ? it->second.tumor : it->second.background;
      const int shade = static_cast<int>(std::lround(255 - 180 * v));
      svg << "<rect x='" << x << "' y='" << y << "' width='" << cw << "' height='" << ch << "' fill='rgb(" << shade
          << "," << shade << ",255)' stroke='#fff'/>\n";
      svg << "<text x='" << x + cw / 2 << "' y='" << y + ch / 2 + 4 << "' text-anchor='middle' font-size='11'>"
          << fixed(v, 2) << "</text>\n";
    }
  }
}

json confusion_json(const std::map<Subtype, ConfusionRow>& rows) {
  json j = json::object();
  for (const auto& [s, row] : rows) j[std::string(name(s))] = {{"tumor", row.tumor}, {"background", row.background}};
  return j;
}

}  // namespace

ReportBundle emit_report(const std::vector<RunRecord>& records, const fs::path& out_dir, const ReportOptions& options) {
  std::vector<Group> groups;
  for (const auto& r : records) {
    if (r.state != RunState::done || !r.report) continue;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) { return g.condition == r.condition; });
    if (it == groups.end()) {
      groups.push_back({r.condition, {}, {}});
      it = groups.end() - 1;
    }
    it->reports.push_back(*r.report);
    it->seeds.push_back(r.seed);
  }
  if (groups.empty()) throw ValidationError("emit_report: no completed runs");

  std::string reference = options.reference;
  if (reference.empty()) {
    for (const auto& g : groups)
      if (g.condition == "subtype_sampled") reference = g.condition;
    if (reference.empty())
      for (const auto& g : groups)
        if (g.condition.find('@') == std::string::npos) {
          reference = g.condition;
          break;
        }
  }

  std::vector<RunAggregate> aggs;
  for (const auto& g : groups) aggs.push_back(aggregate_runs(g.reports, g.seeds));
  const RunAggregate* ref = nullptr;
  for (std::size_t i = 0; i < groups.size(); ++i)
    if (groups[i].condition == reference) ref = &aggs[i];

  json conditions = json::array();
  std::ostringstream table;
  table << "condition                runs  dice (mean ± std)     subtype variance (mean ± std)  Δdice     Δvariance %\n";
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& a = aggs[i];
    json c = a;
    c["condition"] = groups[i].condition;
    json dice_values = json::array(), var_values = json::array();
    for (const auto& r : a.runs) {
      dice_values.push_back(r.dice);
      var_values.push_back(r.subtype_variance);
    }
    c["dice_values"] = dice_values;
    c["subtype_variance_values"] = var_values;
    c["mean_confusion_rows"] = confusion_json(a.mean_confusion_rows);
    std::string d_dice = "n/a", d_var = "n/a";
    if (ref != nullptr) {
      const double dd = a.dice.mean - ref->dice.mean;
      c["delta_dice"] = dd;
      d_dice = (dd >= 0 ? "+" : "") + fixed(dd);
      if (ref->subtype_variance.mean > 0) {
        const double pct = 100.0 * (a.subtype_variance.mean - ref->subtype_variance.mean) / ref->subtype_variance.mean;
        c["variance_change_pct"] = pct;
        c["variance_reduction_pct"] = -pct;
        d_var = (pct >= 0 ? "+" : "") + fixed(pct, 1);
      } else {
        c["variance_change_pct"] = nullptr;
        c["variance_reduction_pct"] = nullptr;
      }
    } else {
      c["delta_dice"] = nullptr;
      c["variance_change_pct"] = nullptr;
      c["variance_reduction_pct"] = nullptr;
    }
    conditions.push_back(c);
    char line[256];
    std::snprintf(line, sizeof line, "%-24s %4zu  %.4f ± %.4f       %.6f ± %.6f            %-9s %s\n",
                  groups[i].condition.c_str(), a.runs.size(), a.dice.mean, a.dice.std, a.subtype_variance.mean,
                  a.subtype_variance.std, d_dice.c_str(), d_var.c_str());
    table << line;
  }
  if (ref != nullptr) table << "\nrelative fields are computed against " << reference << "\n";

  // Confusion figure: the requested pair, else the reference and the last other condition.
  std::vector<std::string> pair = options.confusion_conditions;
  if (pair.empty()) {
    if (!reference.empty()) pair.push_back(reference);
    for (auto it = groups.rbegin(); it != groups.rend(); ++it)
      if (it->condition != reference) {
        pair.push_back(it->condition);
        break;
      }
    if (pair.empty()) pair.push_back(groups.front().condition);
  }
  json confusion = json::object();
  std::ostringstream conf_svg;
  conf_svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << 280 * pair.size() + 40
           << "' height='260' font-family='sans-serif'>\n";
  for (std::size_t k = 0; k < pair.size(); ++k) {
    const auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) { return g.condition == pair[k]; });
    if (it == groups.end()) throw ValidationError("emit_report: no completed runs for condition '" + pair[k] + "'");
    const auto& rows = aggs[static_cast<std::size_t>(it - groups.begin())].mean_confusion_rows;
    confusion[pair[k]] = confusion_json(rows);
    confusion_panel(conf_svg, 20 + 280.0 * k, 60, pair[k], rows);
  }
  conf_svg << "</svg>\n";

  std::vector<std::string> labels;
  std::vector<std::vector<double>> dice, variance;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    labels.push_back(groups[i].condition);
    dice.emplace_back();
    variance.emplace_back();
    for (const auto& r : aggs[i].runs) {
      dice.back().push_back(r.dice);
      variance.back().push_back(r.subtype_variance);
    }
  }
  const double panel_w = std::max(220.0, 70.0 * static_cast<double>(groups.size()));
  std::ostringstream box_svg;
  box_svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << 2 * panel_w + 180
          << "' height='420' font-family='sans-serif'>\n";
  boxplot_panel(box_svg, 70, 40, panel_w, 260, "Tumor Dice", labels, dice);
  boxplot_panel(box_svg, 150 + panel_w, 40, panel_w, 260, "Subtype variance", labels, variance);
  box_svg << "</svg>\n";

  ReportBundle bundle;
  bundle.summary = {{"reference", reference.empty() ? json(nullptr) : json(reference)},
                    {"conditions", conditions},
                    {"confusion", confusion}};
  fs::create_directories(out_dir);
  bundle.summary_txt = out_dir / "summary.txt";
  bundle.summary_json = out_dir / "summary.json";
  bundle.boxplots_svg = out_dir / "boxplots.svg";
  bundle.confusion_svg = out_dir / "confusion.svg";
  std::ofstream(bundle.summary_txt) << table.str();
  std::ofstream(bundle.summary_json) << bundle.summary.dump(2) << '\n';
  std::ofstream(bundle.boxplots_svg) << box_svg.str();
  std::ofstream(bundle.confusion_svg) << conf_svg.str();
  return bundle;
}

}  // namespace histosynth::harness
