#include "histosynth/patch.hpp"

#include <string_view>
#include <unordered_map>

#include "histosynth/error.hpp"
#include "histosynth/rng.hpp"

namespace histosynth {

void validate(const LabeledPatch& patch) {
  if (!patch.image.same_shape(patch.mask) || !patch.image.same_shape(patch.instances))
    throw ValidationError("patch image, mask and instance map differ in shape");
  std::unordered_map<std::uint16_t, std::uint8_t> subtype_of;
  for (std::size_t i = 0; i < patch.mask.size(); ++i) {
    const auto c = patch.mask[i];
    const auto id = patch.instances[i];
    if (!is_valid_code(c)) throw ValidationError("mask code " + std::to_string(c) + " out of range");
    if ((id > 0) != (c > 0))
      throw ValidationError("pixel " + std::to_string(i) + ": tumor mask and instance map disagree");
    if (id == 0) continue;
    auto [it, inserted] = subtype_of.emplace(id, c);
    if (!inserted && it->second != c)
      throw ValidationError("instance " + std::to_string(id) + " carries more than one subtype");
  }
}

std::string mask_hash(const SubtypeMask& mask) {
  std::uint64_t h = fnv1a(std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(mask.data()), mask.size()), h);
  return hex64(h);
}

std::vector<LabeledPatch> extract_patches(const RgbImage& slide_image, const SubtypeMask& mask,
                                          const InstanceMap& instances, int patch, int stride,
                                          const std::string& slide_id) {
  if (!slide_image.same_shape(mask) || !slide_image.same_shape(instances))
    throw ValidationError("slide image, mask and instance map differ in shape");
  if (patch <= 0 || stride < 1) throw ValidationError("patch must be positive and stride >= 1");
  if (patch > slide_image.width() || patch > slide_image.height())
    throw ValidationError("patch size " + std::to_string(patch) + " exceeds slide dimensions " +
                          std::to_string(slide_image.width()) + "x" +
                          std::to_string(slide_image.height()));
  std::vector<LabeledPatch> out;
  for (int y = 0; y + patch <= slide_image.height(); y += stride)
    for (int x = 0; x + patch <= slide_image.width(); x += stride)
      out.push_back({slide_image.crop(y, x, patch, patch), mask.crop(y, x, patch, patch),
                     instances.crop(y, x, patch, patch), slide_id, {x, y}});
  return out;
}

Grid<std::uint8_t> tumor_target(const SubtypeMask& mask) {
  Grid<std::uint8_t> out(mask.height(), mask.width());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] > 0 ? 1 : 0;
  return out;
}

std::array<std::int64_t, kNumClasses> class_histogram(const SubtypeMask& mask) {
  std::array<std::int64_t, kNumClasses> h{};
  for (auto c : mask.values())
    if (is_valid_code(c)) ++h[c];
  return h;
}

}  // namespace histosynth
