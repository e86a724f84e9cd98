#pragma once

#include <filesystem>

#include "histosynth/grid.hpp"

namespace histosynth {

/// 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_rgb_png(const std::filesystem::path& path);

/// 8-bit single-channel PNG (subtype codes 0..5).
void write_png(const std::filesystem::path& path, const SubtypeMask& mask);
SubtypeMask read_mask_png(const std::filesystem::path& path);

/// 16-bit single-channel PNG (instance ids).
void write_png(const std::filesystem::path& path, const InstanceMap& instances);
InstanceMap read_instance_png(const std::filesystem::path& path);

}  // namespace histosynth
