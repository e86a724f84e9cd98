#include "histosynth/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "histosynth/error.hpp"
#include "histosynth/rng.hpp"

namespace histosynth {

namespace {

struct Colour {
  double r, g, b;
};

constexpr Colour kBackground{238, 234, 238};
constexpr Colour kStroma{224, 200, 220};
constexpr Colour kStreak{150, 140, 150};
constexpr Colour kNucleus{70, 60, 130};
constexpr Colour kCisBorder{120, 80, 150};
// Indexed by subtype code; entry 0 unused.
constexpr std::array<Colour, kNumClasses> kTissue{{
    {0, 0, 0},
    {130, 125, 185},  // her2_0: hematoxylin only
    {160, 130, 150},  // her2_1
    {170, 115, 100},  // her2_2
    {140, 75, 25},    // her2_3
    {215, 125, 195},  // cis interior
}};
constexpr double kNucleusRadius = 1.5;
constexpr double kAreaPerNucleus = 60.0;
// Fraction of tumor pixels covered by nuclei for the default density.
constexpr double kNominalNucleusFraction = 0.13;
constexpr double kTissueDarkness = 0.25;

std::uint8_t clamp_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

Rgb to_rgb(Colour c) { return {clamp_byte(c.r), clamp_byte(c.g), clamp_byte(c.b)}; }

Colour blend(Colour a, Colour b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

double brown_of(Colour c) { return (c.r - c.b) / 255.0; }
double pink_of(Colour c) { return ((c.r + c.b) / 2.0 - c.g) / 255.0; }
double darkness_of(Colour c) { return 1.0 - (c.r + c.g + c.b) / 765.0; }

void paint_background(RgbImage& image, Rng& rng, const PhantomOptions& opt) {
  const int h = image.height(), w = image.width();
  struct Blob {
    double x, y, sigma, amp;
  };
  std::vector<Blob> blobs;
  const int n_blobs = std::max(1, h * w / 4096);
  for (int i = 0; i < n_blobs; ++i)
    blobs.push_back({rng.uniform(0, w), rng.uniform(0, h), rng.uniform(6, 20), rng.uniform(0.2, 0.6)});
  std::vector<double> field(static_cast<std::size_t>(h) * w, 0.0);
  for (const auto& b : blobs) {
    const int r = static_cast<int>(3 * b.sigma);
    for (int y = std::max(0, static_cast<int>(b.y) - r); y < std::min(h, static_cast<int>(b.y) + r); ++y)
      for (int x = std::max(0, static_cast<int>(b.x) - r); x < std::min(w, static_cast<int>(b.x) + r); ++x) {
        const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
        field[static_cast<std::size_t>(y) * w + x] += b.amp * std::exp(-d2 / (2 * b.sigma * b.sigma));
      }
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      Colour c = blend(kBackground, kStroma, std::min(0.7, field[static_cast<std::size_t>(y) * w + x]));
      const double n = 2.0 * rng.normal();
      image(y, x) = to_rgb({c.r + n, c.g + n, c.b + n});
    }

  const double expected = opt.streak_rate * h * w / 65536.0;
  const int n_streaks = static_cast<int>(expected) + (rng.uniform() < expected - std::floor(expected) ? 1 : 0);
  for (int s = 0; s < n_streaks; ++s) {
    const double x0 = rng.uniform(0, w), y0 = rng.uniform(0, h);
    const double angle = rng.uniform(0, std::numbers::pi);
    const double length = rng.uniform(0.1, 0.4) * std::max(h, w);
    for (double t = 0; t < length; t += 0.5) {
      const int x = static_cast<int>(x0 + t * std::cos(angle));
      const int y = static_cast<int>(y0 + t * std::sin(angle));
      if (x < 0 || y < 0 || x >= w || y >= h) break;
      image(y, x) = to_rgb(kStreak);
    }
  }
}

std::vector<Point> ellipse_polygon(double cx, double cy, double a, double b, double theta, int size) {
  constexpr int kVertices = 24;
  std::vector<Point> poly;
  for (int k = 0; k < kVertices; ++k) {
    const double phi = 2 * std::numbers::pi * k / kVertices;
    const double ex = a * std::cos(phi), ey = b * std::sin(phi);
    const double x = cx + ex * std::cos(theta) - ey * std::sin(theta);
    const double y = cy + ex * std::sin(theta) + ey * std::cos(theta);
    poly.push_back({std::clamp(x, 0.0, static_cast<double>(size)), std::clamp(y, 0.0, static_cast<double>(size))});
  }
  return poly;
}

}  // namespace

void render_tumor(RgbImage& image, const SubtypeMask& mask, const InstanceMap& instances,
                  std::uint64_t seed) {
  if (!image.same_shape(mask) || !image.same_shape(instances))
    throw ValidationError("render_tumor: image, mask and instance map differ in shape");
  Rng rng(seed);
  const int h = image.height(), w = image.width();
  auto at_border = [&](int y, int x) {
    const auto id = instances(y, x);
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
        if (instances(yy, xx) != id) return true;
      }
    return false;
  };
  std::int64_t tumor_pixels = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto c = mask(y, x);
      if (c == 0) continue;
      ++tumor_pixels;
      Colour base = kTissue[c];
      if (c == code(Subtype::cis) && at_border(y, x)) base = kCisBorder;
      const double n = 3.0 * rng.normal();
      image(y, x) = to_rgb({base.r + n, base.g + n * 0.8, base.b + n});
    }
  // Nuclei land only on tumor pixels, at a fixed density per tumor area.
  const auto n_nuclei = static_cast<std::int64_t>(static_cast<double>(h) * w / kAreaPerNucleus);
  const int reach = static_cast<int>(std::ceil(kNucleusRadius));
  for (std::int64_t k = 0; k < n_nuclei && tumor_pixels > 0; ++k) {
    const double cx = rng.uniform(0, w), cy = rng.uniform(0, h);
    for (int y = static_cast<int>(cy) - reach; y <= static_cast<int>(cy) + reach; ++y)
      for (int x = static_cast<int>(cx) - reach; x <= static_cast<int>(cx) + reach; ++x) {
        if (y < 0 || x < 0 || y >= h || x >= w || mask(y, x) == 0) continue;
        const double d2 = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
        if (d2 <= kNucleusRadius * kNucleusRadius) image(y, x) = to_rgb(kNucleus);
      }
  }
}

PhantomSlide generate_phantom_slide(std::uint64_t seed, int size, int n_instances,
                                    const PhantomOptions& opt, const std::string& slide_id) {
  if (size < 64) throw ValidationError("phantom slide size must be >= 64");
  if (n_instances < 0) throw ValidationError("n_instances must be >= 0");
  if (n_instances > 0xFFFF) throw ValidationError("n_instances exceeds the 16-bit instance id range");
  const int rmin = opt.min_radius > 0 ? opt.min_radius : std::max(3, size / 40);
  const int rmax = std::max(rmin, opt.max_radius > 0 ? opt.max_radius : size / 14);
  double weight_sum = 0;
  for (double wgt : opt.subtype_weights) {
    if (wgt < 0) throw ValidationError("subtype weights must be non-negative");
    weight_sum += wgt;
  }
  if (weight_sum <= 0) throw ValidationError("subtype weights must not all be zero");

  Rng rng(seed);
  PhantomSlide out;
  out.image = RgbImage(size, size);
  paint_background(out.image, rng, opt);

  out.doc.slide_id = slide_id;
  struct Disc {
    double x, y, r;
  };
  std::vector<Disc> placed;
  for (int i = 0; i < n_instances; ++i) {
    double cx = 0, cy = 0, a = 0, b = 0;
    for (int attempt = 0; attempt < 64; ++attempt) {
      a = rng.uniform(rmin, rmax);
      b = rng.uniform(0.6, 1.0) * a;
      cx = rng.uniform(a, size - a);
      cy = rng.uniform(a, size - a);
      const bool clear = std::none_of(placed.begin(), placed.end(), [&](const Disc& d) {
        return std::hypot(d.x - cx, d.y - cy) < d.r + a + 4;
      });
      if (!opt.avoid_overlap || clear) break;
    }
    placed.push_back({cx, cy, a});
    double pick = rng.uniform() * weight_sum;
    std::size_t k = 0;
    while (k + 1 < opt.subtype_weights.size() && pick >= opt.subtype_weights[k]) pick -= opt.subtype_weights[k++];
    out.doc.regions.push_back(
        {i + 1, kTumorSubtypes[k], ellipse_polygon(cx, cy, a, b, rng.uniform(0, std::numbers::pi), size)});
  }
  auto raster = rasterize_annotations(out.doc, size, size);
  out.mask = std::move(raster.mask);
  out.instances = std::move(raster.instances);
  render_tumor(out.image, out.mask, out.instances, rng.next_u64());
  return out;
}

StainFeatures stain_features(const RgbImage& image, const Grid<std::uint8_t>& region) {
  if (!image.same_shape(region)) throw ValidationError("stain_features: region shape mismatch");
  StainFeatures f;
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (!region[i]) continue;
    const Colour c{static_cast<double>(image[i].r), static_cast<double>(image[i].g), static_cast<double>(image[i].b)};
    f.brown += brown_of(c);
    f.pink += pink_of(c);
    f.darkness += darkness_of(c);
    ++f.pixels;
  }
  if (f.pixels > 0) {
    f.brown /= static_cast<double>(f.pixels);
    f.pink /= static_cast<double>(f.pixels);
    f.darkness /= static_cast<double>(f.pixels);
  }
  return f;
}

StainFeatures nominal_signature(Subtype s) {
  const Colour c = s == Subtype::background ? kBackground : blend(kTissue[code(s)], kNucleus, kNominalNucleusFraction);
  return {brown_of(c), pink_of(c), darkness_of(c), 0};
}

Subtype classify_stain(const StainFeatures& f) {
  double max_her2_pink = 0;
  for (auto s : kHer2Subtypes) max_her2_pink = std::max(max_her2_pink, nominal_signature(s).pink);
  if (f.pink > 0.5 * (max_her2_pink + nominal_signature(Subtype::cis).pink)) return Subtype::cis;
  for (std::size_t i = 0; i + 1 < kHer2Subtypes.size(); ++i) {
    const double cut = 0.5 * (nominal_signature(kHer2Subtypes[i]).brown + nominal_signature(kHer2Subtypes[i + 1]).brown);
    if (f.brown < cut) return kHer2Subtypes[i];
  }
  return Subtype::her2_3;
}

std::map<std::uint16_t, Subtype> classify_instances(const RgbImage& image, const InstanceMap& instances,
                                                    int min_pixels) {
  if (!image.same_shape(instances)) throw ValidationError("classify_instances: shape mismatch");
  struct Acc {
    Colour sum{0, 0, 0};
    std::int64_t n = 0;
  };
  std::map<std::uint16_t, Acc> acc;
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (instances[i] == 0) continue;
    auto& a = acc[instances[i]];
    a.sum.r += image[i].r;
    a.sum.g += image[i].g;
    a.sum.b += image[i].b;
    ++a.n;
  }
  std::map<std::uint16_t, Subtype> out;
  for (const auto& [id, a] : acc) {
    if (a.n < min_pixels) continue;
    const double n = static_cast<double>(a.n);
    const Colour mean{a.sum.r / n, a.sum.g / n, a.sum.b / n};
    out[id] = classify_stain({brown_of(mean), pink_of(mean), darkness_of(mean), a.n});
  }
  return out;
}

int count_tumor_signature_regions(const RgbImage& image, int min_area) {
  const int h = image.height(), w = image.width();
  Grid<double> dark(h, w);
  for (std::size_t i = 0; i < image.size(); ++i)
    dark[i] = darkness_of({static_cast<double>(image[i].r), static_cast<double>(image[i].g),
                           static_cast<double>(image[i].b)});
  Grid<std::uint8_t> tissue(h, w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      int n = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
          s += dark(yy, xx);
          ++n;
        }
      tissue(y, x) = s / n > kTissueDarkness ? 1 : 0;
    }
  Grid<std::uint8_t> seen(h, w, 0);
  int regions = 0;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!tissue(y, x) || seen(y, x)) continue;
      int area = 0;
      stack.assign(1, {y, x});
      seen(y, x) = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        ++area;
        constexpr int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || nx < 0 || ny >= h || nx >= w || seen(ny, nx) || !tissue(ny, nx)) continue;
          seen(ny, nx) = 1;
          stack.push_back({ny, nx});
        }
      }
      if (area >= min_area) ++regions;
    }
  return regions;
}

Dataset phantom_patches(std::uint64_t seed, int count, int size, int n_instances,
                        const PhantomOptions& options) {
  if (count < 0) throw ValidationError("phantom_patches: count must be non-negative");
  PhantomOptions opt = options;
  if (opt.min_radius == 0) opt.min_radius = 6;
  if (opt.max_radius == 0) opt.max_radius = std::max(opt.min_radius, std::min(18, size / 4));
  Dataset out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::string id = "phantom" + std::to_string(i);
    const std::uint64_t s = derive_seed(seed, id);
    auto slide = generate_phantom_slide(s, size, n_instances, opt, id);
    DatasetItem item;
    item.id = id;
    item.patch = {std::move(slide.image), std::move(slide.mask), std::move(slide.instances), id, {0, 0}};
    item.provenance = {"real", id, s, mask_hash(item.patch.mask)};
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace histosynth
