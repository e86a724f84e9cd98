#pragma once

// Brute-force reference computations used to freeze expected values in tests.
// They deliberately share no code with the library paths they check.

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "histosynth/annotation.hpp"
#include "histosynth/grid.hpp"

namespace oracle {

// Classic crossing-number test at a point.
inline bool point_in_polygon(const std::vector<histosynth::Point>& poly, double px, double py) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y > py) != (b.y > py) && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

struct Raster {
  std::vector<int> codes, ids;
};

inline Raster rasterize(const histosynth::AnnotationDocument& doc, int w, int h) {
  Raster r{std::vector<int>(static_cast<std::size_t>(w) * h, 0), std::vector<int>(static_cast<std::size_t>(w) * h, 0)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (const auto& reg : doc.regions)
        if (point_in_polygon(reg.polygon, x + 0.5, y + 0.5)) {
          r.codes[static_cast<std::size_t>(y) * w + x] = static_cast<int>(reg.subtype);
          r.ids[static_cast<std::size_t>(y) * w + x] = reg.instance_id;
        }
  return r;
}

// Pixel-counting metrics, one pixel at a time.
inline double dice(const std::vector<int>& p, const std::vector<int>& t) {
  long inter = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 1) ++np;
    if (t[i] == 1) ++nt;
    if (p[i] == 1 && t[i] == 1) ++inter;
  }
  if (np == 0 && nt == 0) return 1.0;
  return 2.0 * inter / static_cast<double>(np + nt);
}

inline std::map<int, double> recalls(const std::vector<int>& pred, const std::vector<int>& mask) {
  std::map<int, double> out;
  for (int k = 1; k <= 5; ++k) {
    long n = 0, hit = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i] == k) {
        ++n;
        if (pred[i] == 1) ++hit;
      }
    if (n > 0) out[k] = static_cast<double>(hit) / static_cast<double>(n);
  }
  return out;
}

inline double population_variance(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

// Upper tail of the chi-square distribution for an even number of degrees of
// freedom: exp(-x/2) · Σ_{i<k/2} (x/2)^i / i!.
inline double chi_square_sf_even_dof(double x, int dof) {
  double term = 1.0, sum = 1.0;
  for (int i = 1; i < dof / 2; ++i) {
    term *= (x / 2.0) / i;
    sum += term;
  }
  return std::exp(-x / 2.0) * sum;
}

}  // namespace oracle
