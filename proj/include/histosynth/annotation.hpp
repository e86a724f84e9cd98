#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "histosynth/grid.hpp"
#include "histosynth/subtype.hpp"

namespace histosynth {

/// Polygon vertex in pixel-corner coordinates: pixel (x, y) spans
/// [x, x+1) × [y, y+1), so a frame-filling polygon runs from 0 to width.
struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct Region {
  int instance_id = 0;
  Subtype subtype = Subtype::her2_0;
  std::vector<Point> polygon;
};

struct AnnotationDocument {
  std::string slide_id;
  std::vector<Region> regions;
};

/// Throws ValidationError for degenerate polygons, background-coded regions,
/// non-positive or duplicate instance ids. Vertices must lie in [0,width]×[0,height]
/// when dimensions are given.
void validate(const AnnotationDocument& doc, int width = -1, int height = -1);

void to_json(nlohmann::json& j, const AnnotationDocument& doc);
void from_json(const nlohmann::json& j, AnnotationDocument& doc);

AnnotationDocument load_annotations(const std::filesystem::path& path);
void save_annotations(const AnnotationDocument& doc, const std::filesystem::path& path);

struct Rasterized {
  SubtypeMask mask;
  InstanceMap instances;
};

/// Paints each region in document order; a pixel belongs to a polygon when its
/// center lies inside under the even-odd rule. Later regions overwrite earlier ones.
Rasterized rasterize_annotations(const AnnotationDocument& doc, int width, int height);

}  // namespace histosynth
