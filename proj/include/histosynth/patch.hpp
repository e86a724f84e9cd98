#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histosynth/grid.hpp"
#include "histosynth/subtype.hpp"

namespace histosynth {

struct PixelOffset {
  int x = 0;
  int y = 0;
  friend bool operator==(const PixelOffset&, const PixelOffset&) = default;
};

/// The unit flowing through every stage: RGB tile plus subtype and instance labels.
struct LabeledPatch {
  RgbImage image;
  SubtypeMask mask;
  InstanceMap instances;
  std::string slide_id;
  PixelOffset origin;

  int height() const noexcept { return image.height(); }
  int width() const noexcept { return image.width(); }
};

/// Checks shared shape, instance/tumor support equality and one subtype per instance.
void validate(const LabeledPatch& patch);

/// Where a dataset item came from. Real items have method "real".
struct Provenance {
  std::string method = "real";
  std::string source_patch;
  std::uint64_t seed = 0;
  std::string mask_hash;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct DatasetItem {
  std::string id;
  LabeledPatch patch;
  Provenance provenance;
};

using Dataset = std::vector<DatasetItem>;

/// Hex FNV-1a digest of the subtype mask bytes and its shape.
std::string mask_hash(const SubtypeMask& mask);

/// Grid-aligned crops at offsets 0, stride, 2·stride, ... that lie fully inside
/// the slide; row-major order. Instance ids keep their slide-level values.
std::vector<LabeledPatch> extract_patches(const RgbImage& slide_image, const SubtypeMask& mask,
                                          const InstanceMap& instances, int patch, int stride,
                                          const std::string& slide_id = {});

/// 1 where the mask carries any tumor code, 0 elsewhere.
Grid<std::uint8_t> tumor_target(const SubtypeMask& mask);

/// Number of pixels per class code.
std::array<std::int64_t, kNumClasses> class_histogram(const SubtypeMask& mask);

}  // namespace histosynth
