#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "histosynth/annotation.hpp"
#include "histosynth/grid.hpp"
#include "histosynth/patch.hpp"
#include "histosynth/subtype.hpp"

namespace histosynth {

// Procedural stand-in for stained tissue. Each tumor subtype is rendered with a
// fixed colour signature: the brown index (R-B)/255 rises strictly from her2_0
// to her2_3, and cis has a pink interior ((R+B)/2-G well above any HER2 level)
// framed by a dark border ring. Background is a near-white field with pale
// stroma blotches and thin dark streak artifacts.

struct PhantomOptions {
  /// Ellipse semi-axis range in pixels; 0 selects size/40 and size/14.
  int min_radius = 0;
  int max_radius = 0;
  /// Relative draw weights for her2_0, her2_1, her2_2, her2_3, cis.
  std::array<double, 5> subtype_weights{1, 1, 1, 1, 1};
  /// Expected number of streak artifacts per 256×256 area.
  double streak_rate = 1.0;
  /// Reject ellipse placements that overlap earlier ones (up to 64 tries each).
  bool avoid_overlap = true;
};

struct PhantomSlide {
  RgbImage image;
  SubtypeMask mask;
  InstanceMap instances;
  AnnotationDocument doc;
};

PhantomSlide generate_phantom_slide(std::uint64_t seed, int size, int n_instances,
                                    const PhantomOptions& options = {},
                                    const std::string& slide_id = "phantom");

/// `count` independent size×size phantom tiles held in memory, each generated
/// as its own slide with seed derived from `seed` and its index. Unset radii
/// default to 6..18 px, the instance scale of patches cut from 256-px slides.
Dataset phantom_patches(std::uint64_t seed, int count, int size, int n_instances,
                        const PhantomOptions& options = {});

/// Paints the pixels of `instances` with the signature of their code in `mask`,
/// leaving other pixels as they are. Used by the generator and by tests that
/// need a rendering for an edited mask.
void render_tumor(RgbImage& image, const SubtypeMask& mask, const InstanceMap& instances,
                  std::uint64_t seed);

struct StainFeatures {
  double brown = 0.0;     ///< mean (R-B)/255
  double pink = 0.0;      ///< mean ((R+B)/2-G)/255
  double darkness = 0.0;  ///< mean 1 - (R+G+B)/765
  std::int64_t pixels = 0;
};

StainFeatures stain_features(const RgbImage& image, const Grid<std::uint8_t>& region);

/// Threshold classifier: pink above a cutoff gives cis, otherwise the brown
/// index is binned into the four HER2 levels.
Subtype classify_stain(const StainFeatures& f);

/// Nominal per-class mean features of the rendering (nuclei included).
StainFeatures nominal_signature(Subtype s);

/// Classifies every instance id with at least `min_pixels` pixels.
std::map<std::uint16_t, Subtype> classify_instances(const RgbImage& image,
                                                    const InstanceMap& instances,
                                                    int min_pixels = 1);

/// Connected regions (4-neighbourhood) of tumor-like staining: pixels whose
/// 5×5 mean darkness exceeds the tissue cutoff, kept when at least `min_area`.
int count_tumor_signature_regions(const RgbImage& image, int min_area = 16);

}  // namespace histosynth
