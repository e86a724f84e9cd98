#include "histosynth/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "histosynth/error.hpp"

namespace histosynth {

using nlohmann::json;

void validate(const AnnotationDocument& doc, int width, int height) {
  std::set<int> seen;
  for (const auto& r : doc.regions) {
    const std::string who = "instance " + std::to_string(r.instance_id);
    if (r.instance_id <= 0 || r.instance_id > 0xFFFF)
      throw ValidationError(who + ": instance_id must be in [1, 65535]");
    if (!seen.insert(r.instance_id).second)
      throw ValidationError(who + ": duplicate instance_id in slide " + doc.slide_id);
    if (!is_tumor(r.subtype)) throw ValidationError(who + ": region may not carry background code 0");
    if (r.polygon.size() < 3)
      throw ValidationError(who + ": degenerate polygon with " + std::to_string(r.polygon.size()) +
                            " vertices");
    for (const auto& p : r.polygon) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw ValidationError(who + ": non-finite vertex");
      if (width > 0 && height > 0 && (p.x < 0 || p.y < 0 || p.x > width || p.y > height))
        throw ValidationError(who + ": vertex (" + std::to_string(p.x) + ", " +
                              std::to_string(p.y) + ") outside the " + std::to_string(width) +
                              "x" + std::to_string(height) + " frame");
    }
  }
}

void to_json(json& j, const AnnotationDocument& doc) {
  json regions = json::array();
  for (const auto& r : doc.regions) {
    json poly = json::array();
    for (const auto& p : r.polygon) poly.push_back({p.x, p.y});
    regions.push_back({{"instance_id", r.instance_id},
                       {"subtype", std::string(name(r.subtype))},
                       {"polygon", std::move(poly)}});
  }
  j = {{"slide_id", doc.slide_id}, {"regions", std::move(regions)}};
}

void from_json(const json& j, AnnotationDocument& doc) {
  doc.slide_id = j.at("slide_id").get<std::string>();
  doc.regions.clear();
  for (const auto& jr : j.at("regions")) {
    Region r;
    r.instance_id = jr.at("instance_id").get<int>();
    const auto& js = jr.at("subtype");
    std::optional<Subtype> s =
        js.is_number_integer() ? subtype_from_code(js.get<int>()) : subtype_from_name(js.get<std::string>());
    if (!s) throw ValidationError("instance " + std::to_string(r.instance_id) + ": unknown subtype " + js.dump());
    r.subtype = *s;
    for (const auto& jp : jr.at("polygon")) r.polygon.push_back({jp.at(0).get<double>(), jp.at(1).get<double>()});
    doc.regions.push_back(std::move(r));
  }
}

AnnotationDocument load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open annotation file " + path.string());
  AnnotationDocument doc = json::parse(in).get<AnnotationDocument>();
  validate(doc);
  return doc;
}

void save_annotations(const AnnotationDocument& doc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write annotation file " + path.string());
  out << json(doc).dump(1) << '\n';
}

namespace {

// Fills pixels whose centers fall inside the polygon, one scanline at a time.
template <typename Paint>
void scan_polygon(const std::vector<Point>& poly, int width, int height, Paint&& paint) {
  double ymin = poly[0].y, ymax = poly[0].y;
  for (const auto& p : poly) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const int row_begin = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
  const int row_end = std::min(height, static_cast<int>(std::ceil(ymax - 0.5)) + 1);
  std::vector<double> crossings;
  for (int y = row_begin; y < row_end; ++y) {
    const double cy = y + 0.5;
    crossings.clear();
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
      const Point& a = poly[i];
      const Point& b = poly[j];
      // Half-open rule on y avoids double counting shared vertices.
      if ((a.y > cy) != (b.y > cy)) crossings.push_back(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(crossings.begin(), crossings.end());
    for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
      // Pixel x is inside when c0 <= x + 0.5 < c1.
      const int x0 = std::max(0, static_cast<int>(std::ceil(crossings[k] - 0.5)));
      const int x1 = std::min(width - 1, static_cast<int>(std::ceil(crossings[k + 1] - 0.5)) - 1);
      for (int x = x0; x <= x1; ++x) paint(y, x);
    }
  }
}

}  // namespace

Rasterized rasterize_annotations(const AnnotationDocument& doc, int width, int height) {
  if (width <= 0 || height <= 0) throw ValidationError("raster dimensions must be positive");
  validate(doc, width, height);
  Rasterized out{SubtypeMask(height, width, 0), InstanceMap(height, width, 0)};
  for (const auto& r : doc.regions) {
    const auto c = code(r.subtype);
    const auto id = static_cast<std::uint16_t>(r.instance_id);
    scan_polygon(r.polygon, width, height, [&](int y, int x) {
      out.mask(y, x) = c;
      out.instances(y, x) = id;
    });
  }
  return out;
}

}  // namespace histosynth
