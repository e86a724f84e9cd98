#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "histosynth/patch.hpp"
#include "histosynth/split.hpp"

namespace histosynth {

// A dataset root is a directory holding manifest.json plus the PNG files it
// references; every path in the manifest is relative to the root.

inline constexpr int kManifestVersion = 1;

struct PatchRecord {
  std::string id;
  std::string image;
  std::string mask;
  std::string instances;
  PixelOffset origin;
  Provenance provenance;
};

struct SlideRecord {
  std::string slide_id;
  int aggregate_score_bin = 0;
  std::vector<PatchRecord> patches;
};

struct DatasetManifest {
  int format_version = kManifestVersion;
  int patch_size = 0;
  std::vector<SlideRecord> slides;
  SplitMap split;
};

/// Split must be a partition of the slide ids; patch ids must be unique.
void validate(const DatasetManifest& manifest);

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);
void to_json(nlohmann::json& j, const Provenance& p);
void from_json(const nlohmann::json& j, Provenance& p);

DatasetManifest load_manifest(const std::filesystem::path& root);
void save_manifest(const std::filesystem::path& root, const DatasetManifest& manifest);

/// Writes the three PNGs of an item under patches/<slide>/ and returns its record.
PatchRecord store_item(const std::filesystem::path& root, const DatasetItem& item);
DatasetItem load_item(const std::filesystem::path& root, const SlideRecord& slide, const PatchRecord& rec);

/// All items of the slides assigned to `set`, in manifest order.
Dataset load_split(const std::filesystem::path& root, const DatasetManifest& manifest, SplitSet set);
/// All items regardless of split.
Dataset load_all(const std::filesystem::path& root, const DatasetManifest& manifest);

/// Writes `items` as a single-slide-group dataset root (one SlideRecord per
/// source slide id), every slide assigned to `set`.
DatasetManifest write_dataset(const std::filesystem::path& root, const Dataset& items, int patch_size,
                              SplitSet set = SplitSet::train);

struct PhantomDatasetOptions {
  int slides = 40;
  SplitCounts counts{24, 8, 8};
  int slide_size = 256;
  int patch_size = 64;
  int stride = 64;
  int instances_per_slide = 14;
  /// Corpus-wide subtype prevalence (her2_0, her2_1, her2_2, her2_3, cis).
  std::array<double, 5> subtype_weights{0.10, 0.32, 0.26, 0.18, 0.14};
  std::uint64_t seed = 0;
};

/// Generates phantom slides, their annotation files, grid patches and a
/// stratified slide-level split, and writes everything under `root`.
DatasetManifest build_phantom_dataset(const std::filesystem::path& root, const PhantomDatasetOptions& options);

}  // namespace histosynth
