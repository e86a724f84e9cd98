#include "histosynth/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "histosynth/annotation.hpp"
#include "histosynth/error.hpp"
#include "histosynth/image_io.hpp"
#include "histosynth/phantom.hpp"
#include "histosynth/rng.hpp"

namespace histosynth {

namespace fs = std::filesystem;
using nlohmann::json;

void validate(const DatasetManifest& m) {
  if (m.format_version != kManifestVersion)
    throw ValidationError("unsupported manifest version " + std::to_string(m.format_version));
  std::set<std::string> slide_ids, patch_ids;
  for (const auto& s : m.slides) {
    if (!slide_ids.insert(s.slide_id).second) throw ValidationError("duplicate slide " + s.slide_id);
    if (!m.split.contains(s.slide_id)) throw ValidationError("slide " + s.slide_id + " missing from split");
    for (const auto& p : s.patches)
      if (!patch_ids.insert(p.id).second) throw ValidationError("duplicate patch id " + p.id);
  }
  for (const auto& [id, set] : m.split)
    if (!slide_ids.contains(id)) throw ValidationError("split names unknown slide " + id);
}

void to_json(json& j, const Provenance& p) {
  j = {{"method", p.method}, {"source_patch", p.source_patch}, {"seed", p.seed}, {"mask_hash", p.mask_hash}};
}

void from_json(const json& j, Provenance& p) {
  p.method = j.value("method", "real");
  p.source_patch = j.value("source_patch", "");
  p.seed = j.value("seed", std::uint64_t{0});
  p.mask_hash = j.value("mask_hash", "");
}

void to_json(json& j, const DatasetManifest& m) {
  json slides = json::array();
  for (const auto& s : m.slides) {
    json patches = json::array();
    for (const auto& p : s.patches)
      patches.push_back({{"id", p.id},
                         {"image", p.image},
                         {"mask", p.mask},
                         {"instances", p.instances},
                         {"origin", {p.origin.x, p.origin.y}},
                         {"provenance", p.provenance}});
    slides.push_back({{"slide_id", s.slide_id}, {"aggregate_score_bin", s.aggregate_score_bin}, {"patches", patches}});
  }
  json split = json::object();
  for (const auto& [id, set] : m.split) split[id] = std::string(to_string(set));
  j = {{"format_version", m.format_version}, {"patch_size", m.patch_size}, {"slides", slides}, {"split", split}};
}

void from_json(const json& j, DatasetManifest& m) {
  m.format_version = j.at("format_version").get<int>();
  m.patch_size = j.at("patch_size").get<int>();
  m.slides.clear();
  for (const auto& js : j.at("slides")) {
    SlideRecord s;
    s.slide_id = js.at("slide_id").get<std::string>();
    s.aggregate_score_bin = js.value("aggregate_score_bin", 0);
    for (const auto& jp : js.at("patches")) {
      PatchRecord p;
      p.id = jp.at("id").get<std::string>();
      p.image = jp.at("image").get<std::string>();
      p.mask = jp.at("mask").get<std::string>();
      p.instances = jp.at("instances").get<std::string>();
      p.origin = {jp.at("origin").at(0).get<int>(), jp.at("origin").at(1).get<int>()};
      if (jp.contains("provenance")) p.provenance = jp.at("provenance").get<Provenance>();
      s.patches.push_back(std::move(p));
    }
    m.slides.push_back(std::move(s));
  }
  m.split.clear();
  for (const auto& [id, set] : j.at("split").items()) m.split[id] = split_set_from_string(set.get<std::string>());
}

DatasetManifest load_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw ResourceError("no manifest.json under dataset root " + root.string());
  DatasetManifest m = json::parse(in).get<DatasetManifest>();
  validate(m);
  return m;
}

void save_manifest(const fs::path& root, const DatasetManifest& manifest) {
  validate(manifest);
  fs::create_directories(root);
  const fs::path tmp = root / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ResourceError("cannot write manifest under " + root.string());
    out << json(manifest).dump(1) << '\n';
  }
  fs::rename(tmp, root / "manifest.json");
}

PatchRecord store_item(const fs::path& root, const DatasetItem& item) {
  const std::string dir = "patches/" + item.patch.slide_id + "/";
  PatchRecord rec{item.id,
                  dir + item.id + "_image.png",
                  dir + item.id + "_mask.png",
                  dir + item.id + "_instances.png",
                  item.patch.origin,
                  item.provenance};
  write_png(root / rec.image, item.patch.image);
  write_png(root / rec.mask, item.patch.mask);
  write_png(root / rec.instances, item.patch.instances);
  return rec;
}

DatasetItem load_item(const fs::path& root, const SlideRecord& slide, const PatchRecord& rec) {
  DatasetItem item;
  item.id = rec.id;
  item.provenance = rec.provenance;
  item.patch = {read_rgb_png(root / rec.image), read_mask_png(root / rec.mask),
                read_instance_png(root / rec.instances), slide.slide_id, rec.origin};
  validate(item.patch);
  return item;
}

Dataset load_split(const fs::path& root, const DatasetManifest& manifest, SplitSet set) {
  Dataset out;
  for (const auto& s : manifest.slides) {
    if (manifest.split.at(s.slide_id) != set) continue;
    for (const auto& p : s.patches) out.push_back(load_item(root, s, p));
  }
  return out;
}

Dataset load_all(const fs::path& root, const DatasetManifest& manifest) {
  Dataset out;
  for (const auto& s : manifest.slides)
    for (const auto& p : s.patches) out.push_back(load_item(root, s, p));
  return out;
}

DatasetManifest write_dataset(const fs::path& root, const Dataset& items, int patch_size, SplitSet set) {
  DatasetManifest m;
  m.patch_size = patch_size;
  std::map<std::string, std::size_t> slide_index;
  for (const auto& item : items) {
    auto [it, inserted] = slide_index.emplace(item.patch.slide_id, m.slides.size());
    if (inserted) {
      m.slides.push_back({item.patch.slide_id, 0, {}});
      m.split[item.patch.slide_id] = set;
    }
    m.slides[it->second].patches.push_back(store_item(root, item));
  }
  save_manifest(root, m);
  return m;
}

DatasetManifest build_phantom_dataset(const fs::path& root, const PhantomDatasetOptions& opt) {
  if (opt.counts.total() != opt.slides)
    throw ValidationError("split counts must sum to the number of phantom slides");
  DatasetManifest m;
  m.patch_size = opt.patch_size;
  std::vector<std::string> ids;
  std::vector<int> bins;
  for (int s = 0; s < opt.slides; ++s) {
    char name_buf[32];
    std::snprintf(name_buf, sizeof name_buf, "slide%03d", s);
    const std::string slide_id = name_buf;
    const int bin = s % 4;
    PhantomOptions popt;
    popt.subtype_weights = opt.subtype_weights;
    // Slides of a score bin are enriched in the matching HER2 level.
    popt.subtype_weights[bin] *= 2.0;
    const auto slide = generate_phantom_slide(derive_seed(opt.seed, slide_id), opt.slide_size,
                                              opt.instances_per_slide, popt, slide_id);
    write_png(root / "slides" / (slide_id + "_image.png"), slide.image);
    write_png(root / "slides" / (slide_id + "_mask.png"), slide.mask);
    write_png(root / "slides" / (slide_id + "_instances.png"), slide.instances);
    save_annotations(slide.doc, root / "slides" / (slide_id + "_annotations.json"));

    SlideRecord rec{slide_id, bin, {}};
    const auto patches = extract_patches(slide.image, slide.mask, slide.instances, opt.patch_size, opt.stride, slide_id);
    for (const auto& p : patches) {
      DatasetItem item{slide_id + "_x" + std::to_string(p.origin.x) + "_y" + std::to_string(p.origin.y), p,
                       {"real", "", 0, mask_hash(p.mask)}};
      rec.patches.push_back(store_item(root, item));
    }
    m.slides.push_back(std::move(rec));
    ids.push_back(slide_id);
    bins.push_back(bin);
  }
  m.split = make_split(ids, opt.counts, bins, opt.seed);
  save_manifest(root, m);
  return m;
}

}  // namespace histosynth
