#include "histosynth/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "histosynth/dataset.hpp"
#include "histosynth/error.hpp"
#include "histosynth/log.hpp"

namespace histosynth::harness {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- spec

std::filesystem::path ExperimentSpec::resolved_dataset_root() const {
  if (const char* env = std::getenv(kDataRootEnv); env != nullptr && *env != '\0') return env;
  return dataset_root;
}

void ExperimentSpec::validate() const {
  if (repetitions < 1) throw ValidationError("ExperimentSpec: repetitions must be at least 1");
  if (baselines.empty() && methods.empty()) throw ValidationError("ExperimentSpec: no baselines and no methods");
  if (!methods.empty() && ratios.empty()) throw ValidationError("ExperimentSpec: methods given without ratios");
  for (double r : ratios)
    if (!(r > 0)) throw ValidationError("ExperimentSpec: ratios must be positive");
  if (resolved_dataset_root().empty()) throw ValidationError("ExperimentSpec: dataset_root is empty");
  if (output_dir.empty()) throw ValidationError("ExperimentSpec: output_dir is empty");
  if (workers < 1 || generation_batch < 1) throw ValidationError("ExperimentSpec: workers and generation_batch must be positive");
  segmentation.validate();
  const auto usable = [](const std::string& path, bool train) { return train || (!path.empty() && fs::exists(path)); };
  for (auto m : methods) {
    if (m == GenMethod::gan && !usable(gan.checkpoint, gan.train))
      throw ValidationError("ExperimentSpec: gan checkpoint '" + gan.checkpoint + "' missing and training disabled");
    if (m != GenMethod::gan) {
      if (!usable(diffusion.autoencoder, diffusion.train))
        throw ValidationError("ExperimentSpec: autoencoder checkpoint '" + diffusion.autoencoder +
                              "' missing and training disabled");
      if (!usable(diffusion.checkpoint, diffusion.train))
        throw ValidationError("ExperimentSpec: diffusion checkpoint '" + diffusion.checkpoint +
                              "' missing and training disabled");
    }
  }
}

void to_json(json& j, const ExperimentSpec& s) {
  json baselines = json::array(), methods = json::array();
  for (auto b : s.baselines) baselines.push_back(std::string(to_string(b)));
  for (auto m : s.methods) methods.push_back(std::string(to_string(m)));
  j = {{"dataset_root", s.dataset_root},
       {"output_dir", s.output_dir},
       {"baselines", baselines},
       {"methods", methods},
       {"ratios", s.ratios},
       {"repetitions", s.repetitions},
       {"base_seed", s.base_seed},
       {"mixture_sampling", std::string(to_string(s.mixture_sampling))},
       {"segmentation", s.segmentation},
       {"gan", {{"checkpoint", s.gan.checkpoint}, {"train", s.gan.train}, {"config", s.gan.config}}},
       {"diffusion",
        {{"autoencoder", s.diffusion.autoencoder},
         {"checkpoint", s.diffusion.checkpoint},
         {"train", s.diffusion.train},
         {"autoencoder_config", s.diffusion.autoencoder_config},
         {"config", s.diffusion.config}}},
       {"generation_batch", s.generation_batch},
       {"workers", s.workers},
       {"variance", s.variance == VarianceKind::population ? "population" : "sample"},
       {"confusion_conditions", s.confusion_conditions}};
}

void from_json(const json& j, ExperimentSpec& s) {
  const ExperimentSpec d;
  s.dataset_root = j.value("dataset_root", d.dataset_root);
  s.output_dir = j.value("output_dir", d.output_dir);
  if (j.contains("baselines")) {
    s.baselines.clear();
    for (const auto& b : j.at("baselines")) s.baselines.push_back(sampling_kind_from_string(b.get<std::string>()));
  }
  if (j.contains("methods")) {
    s.methods.clear();
    for (const auto& m : j.at("methods")) s.methods.push_back(gen_method_from_string(m.get<std::string>()));
  }
  s.ratios = j.value("ratios", d.ratios);
  s.repetitions = j.value("repetitions", d.repetitions);
  s.base_seed = j.value("base_seed", d.base_seed);
  s.mixture_sampling = sampling_kind_from_string(j.value("mixture_sampling", std::string(to_string(d.mixture_sampling))));
  s.segmentation = j.contains("segmentation") ? j.at("segmentation").get<seg::SegConfig>() : d.segmentation;
  if (j.contains("gan")) {
    const auto& g = j.at("gan");
    s.gan.checkpoint = g.value("checkpoint", "");
    s.gan.train = g.value("train", false);
    s.gan.config = g.contains("config") ? g.at("config").get<gan::GanConfig>() : gan::GanConfig{};
  }
  if (j.contains("diffusion")) {
    const auto& g = j.at("diffusion");
    s.diffusion.autoencoder = g.value("autoencoder", "");
    s.diffusion.checkpoint = g.value("checkpoint", "");
    s.diffusion.train = g.value("train", false);
    s.diffusion.autoencoder_config = g.contains("autoencoder_config")
                                         ? g.at("autoencoder_config").get<diffusion::AutoencoderConfig>()
                                         : diffusion::AutoencoderConfig{};
    s.diffusion.config = g.contains("config") ? g.at("config").get<diffusion::LdmConfig>() : diffusion::LdmConfig{};
  }
  s.generation_batch = j.value("generation_batch", d.generation_batch);
  s.workers = j.value("workers", d.workers);
  const auto variance = j.value("variance", std::string("population"));
  if (variance != "population" && variance != "sample") throw ValidationError("ExperimentSpec: unknown variance '" + variance + "'");
  s.variance = variance == "population" ? VarianceKind::population : VarianceKind::sample;
  s.confusion_conditions = j.value("confusion_conditions", d.confusion_conditions);
}

ExperimentSpec load_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open spec " + path.string());
  ExperimentSpec spec = json::parse(in).get<ExperimentSpec>();
  // Relative paths in a spec file are relative to the file.
  const auto base = path.parent_path();
  const auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(spec.dataset_root);
  resolve(spec.output_dir);
  resolve(spec.gan.checkpoint);
  resolve(spec.diffusion.autoencoder);
  resolve(spec.diffusion.checkpoint);
  return spec;
}

std::string format_ratio(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", ratio);
  std::string s = buf;
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

std::vector<RunDescriptor> plan_runs(const ExperimentSpec& spec) {
  if (spec.repetitions < 1) throw ValidationError("plan_runs: repetitions must be at least 1");
  if (spec.baselines.empty() && spec.methods.empty()) throw ValidationError("plan_runs: no baselines and no methods");
  std::vector<RunDescriptor> conditions;
  for (auto b : spec.baselines) conditions.push_back({std::string(to_string(b)), 0, b, std::nullopt, 0.0, 0});
  for (auto m : spec.methods)
    for (double r : spec.ratios) {
      if (!(r > 0)) throw ValidationError("plan_runs: ratios must be positive");
      conditions.push_back({std::string(to_string(m)) + "@" + format_ratio(r), 0, std::nullopt, m, r, 0});
    }
  std::vector<RunDescriptor> runs;
  for (const auto& c : conditions)
    for (int rep = 1; rep <= spec.repetitions; ++rep) {
      auto d = c;
      d.repetition = rep;
      d.seed = derive_seed(spec.base_seed, d.run_id());
      runs.push_back(d);
    }
  return runs;
}

// ---------------------------------------------------------------- records

std::string to_string(RunState s) {
  switch (s) {
    case RunState::pending: return "pending";
    case RunState::running: return "running";
    case RunState::done: return "done";
    case RunState::failed: return "failed";
  }
  return "pending";
}

RunState run_state_from_string(const std::string& s) {
  for (auto st : {RunState::pending, RunState::running, RunState::done, RunState::failed})
    if (to_string(st) == s) return st;
  throw ValidationError("unknown run state '" + s + "'");
}

void to_json(json& j, const RunRecord& r) {
  j = {{"run_id", r.run_id},
       {"condition", r.condition},
       {"repetition", r.repetition},
       {"seed", r.seed},
       {"config_hash", r.config_hash},
       {"state", to_string(r.state)},
       {"train_size", r.train_size},
       {"wall_clock_seconds", r.wall_clock_seconds},
       {"artifacts", r.artifacts}};
  j["report"] = r.report ? json(*r.report) : json(nullptr);
  if (!r.error.empty()) j["error"] = r.error;
}

void from_json(const json& j, RunRecord& r) {
  r.run_id = j.at("run_id").get<std::string>();
  r.condition = j.at("condition").get<std::string>();
  r.repetition = j.at("repetition").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_hash = j.value("config_hash", "");
  r.state = run_state_from_string(j.at("state").get<std::string>());
  r.train_size = j.value("train_size", std::int64_t{0});
  r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  r.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  r.report = std::nullopt;
  if (j.contains("report") && !j.at("report").is_null()) r.report = j.at("report").get<EvalReport>();
  r.error = j.value("error", "");
}

Ledger::Ledger(fs::path path) : path_(std::move(path)) {}

void Ledger::append(const RunRecord& record) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  out << json(record).dump() << '\n';
  out.flush();
  if (!out) throw ResourceError("cannot append to ledger " + path_.string());
}

std::vector<RunRecord> Ledger::latest() const {
  std::vector<RunRecord> order;
  std::map<std::string, std::size_t> index;
  std::ifstream in(path_);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    RunRecord r;
    try {
      r = json::parse(line).get<RunRecord>();
    } catch (const std::exception& e) {
      // A torn final line from an interrupted write is skipped.
      log::warn("ledger " + path_.string() + ":" + std::to_string(lineno) + " unreadable: " + e.what());
      continue;
    }
    if (auto it = index.find(r.run_id); it != index.end()) {
      order[it->second] = std::move(r);
    } else {
      index[r.run_id] = order.size();
      order.push_back(std::move(r));
    }
  }
  return order;
}

std::optional<RunRecord> Ledger::find(const std::string& run_id) const {
  for (auto& r : latest())
    if (r.run_id == run_id) return r;
  return std::nullopt;
}

// ---------------------------------------------------------------- experiment

namespace {

std::string file_digest(const std::string& path) {
  if (path.empty() || !fs::exists(path)) return "";
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = fnv1a("");
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h = fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  return hex64(h);
}

std::string directory_name(const std::string& run_id) {
  std::string s;
  for (char c : run_id) {
    if (c == '#') s += "_rep";
    else if (c == '@') s += '_';
    else s += c;
  }
  return s;
}

}  // namespace

Dataset synthesize(GenMethod method, const Dataset& sources, std::size_t count, std::uint64_t seed,
                   Generators& generators, int batch, bool randomize) {
  if (count > 0 && sources.empty()) throw ValidationError("synthesize: no source patches");
  if (batch < 1) throw ValidationError("synthesize: batch must be positive");
  if (method == GenMethod::gan && !generators.gan) throw ValidationError("synthesize: gan model required");
  if (method != GenMethod::gan && !generators.diffusion) throw ValidationError("synthesize: diffusion model required");
  Dataset items;
  std::vector<std::size_t> pending;
  std::vector<SubtypeMask> masks;
  std::vector<std::uint64_t> seeds;
  const auto flush = [&] {
    if (pending.empty()) return;
    std::vector<RgbImage> images;
    if (method == GenMethod::diffusion) {
      images = generators.diffusion->sample_batch(masks, seeds);
    } else {
      for (std::size_t k = 0; k < pending.size(); ++k) {
        const auto& src = sources[pending[k] % sources.size()].patch;
        images.push_back(method == GenMethod::gan
                             ? generators.gan->generate(masks[k], seeds[k])
                             : generators.diffusion->inpaint(src.image, masks[k], tumor_target(src.mask), seeds[k]));
      }
    }
    for (std::size_t k = 0; k < pending.size(); ++k) {
      const auto& src = sources[pending[k] % sources.size()];
      char id[32];
      std::snprintf(id, sizeof id, "%06zu", pending[k]);
      DatasetItem item;
      item.id = std::string(to_string(method)) + "_" + id + "_" + src.id;
      item.patch = {std::move(images[k]), masks[k], src.patch.instances, src.patch.slide_id, src.patch.origin};
      item.provenance = {std::string(to_string(method)), src.id, seeds[k], mask_hash(masks[k])};
      items.push_back(std::move(item));
    }
    pending.clear();
    masks.clear();
    seeds.clear();
  };
  for (std::size_t k = 0; k < count; ++k) {
    const auto& src = sources[k % sources.size()];
    const auto item_seed = derive_seed(seed, "item" + std::to_string(k));
    pending.push_back(k);
    masks.push_back(randomize ? randomize_instance_subtypes(src.patch, kTumorSubtypes, item_seed) : src.patch.mask);
    seeds.push_back(item_seed);
    if (static_cast<int>(pending.size()) == batch) flush();
  }
  flush();
  return items;
}

Experiment::Experiment(ExperimentSpec spec)
    : spec_(std::move(spec)), out_(spec_.output_dir), ledger_(fs::path(spec_.output_dir) / "ledger.jsonl") {
  spec_.validate();
  fs::create_directories(out_);
  std::ofstream(out_ / "spec.json") << json(spec_).dump(2) << '\n';
}

void Experiment::load_data() {
  if (data_loaded_) return;
  const auto root = spec_.resolved_dataset_root();
  const auto manifest = load_manifest(root);
  train_ = load_split(root, manifest, SplitSet::train);
  val_ = load_split(root, manifest, SplitSet::val);
  test_ = load_split(root, manifest, SplitSet::test);
  if (train_.empty()) throw ValidationError("experiment: dataset has no training patches");
  if (test_.empty()) throw ValidationError("experiment: dataset has no test patches");
  dataset_hash_ = hex64(fnv1a(json(manifest).dump()));
  data_loaded_ = true;
}

std::string Experiment::config_hash(const RunDescriptor& run) const {
  json j = {{"dataset", dataset_hash_},
            {"run_id", run.run_id()},
            {"seed", run.seed},
            {"segmentation", spec_.segmentation},
            {"variance", spec_.variance == VarianceKind::population ? "population" : "sample"}};
  if (run.baseline) j["sampling"] = std::string(to_string(*run.baseline));
  if (run.method) {
    j["sampling"] = std::string(to_string(spec_.mixture_sampling));
    j["ratio"] = run.ratio;
    if (*run.method == GenMethod::gan) {
      j["generator"] = {{"checkpoint", file_digest(spec_.gan.checkpoint)}, {"train", spec_.gan.train}, {"config", spec_.gan.config}};
    } else {
      j["generator"] = {{"autoencoder", file_digest(spec_.diffusion.autoencoder)},
                        {"checkpoint", file_digest(spec_.diffusion.checkpoint)},
                        {"train", spec_.diffusion.train},
                        {"autoencoder_config", spec_.diffusion.autoencoder_config},
                        {"config", spec_.diffusion.config}};
    }
  }
  return hex64(fnv1a(j.dump()));
}

std::shared_ptr<gan::GanModel> Experiment::gan_model() {
  if (gan_) return gan_;
  const auto& src = spec_.gan;
  if (!src.checkpoint.empty() && fs::exists(src.checkpoint)) {
    gan_ = std::make_shared<gan::GanModel>(gan::GanModel::load(src.checkpoint));
  } else {
    const auto path = out_ / "generators" / "gan.pt";
    if (fs::exists(path)) {
      gan_ = std::make_shared<gan::GanModel>(gan::GanModel::load(path));
    } else {
      if (!src.train) throw ResourceError("gan checkpoint missing and training disabled");
      log::info("training GAN for " + std::to_string(src.config.steps) + " steps");
      gan_ = std::make_shared<gan::GanModel>(gan::train_gan(train_, src.config, derive_seed(spec_.base_seed, "generator/gan")));
      gan_->save(path);
    }
  }
  return gan_;
}

std::shared_ptr<diffusion::LatentDiffusion> Experiment::diffusion_model() {
  if (ldm_) return ldm_;
  const auto& src = spec_.diffusion;
  std::shared_ptr<diffusion::Autoencoder> ae;
  const auto ae_path = out_ / "generators" / "autoencoder.pt";
  if (!src.autoencoder.empty() && fs::exists(src.autoencoder)) {
    ae = std::make_shared<diffusion::Autoencoder>(diffusion::Autoencoder::load(src.autoencoder));
  } else if (fs::exists(ae_path)) {
    ae = std::make_shared<diffusion::Autoencoder>(diffusion::Autoencoder::load(ae_path));
  } else {
    if (!src.train) throw ResourceError("autoencoder checkpoint missing and training disabled");
    log::info("training autoencoder for " + std::to_string(src.autoencoder_config.steps) + " steps");
    ae = std::make_shared<diffusion::Autoencoder>(
        diffusion::Autoencoder::create(src.autoencoder_config, derive_seed(spec_.base_seed, "generator/autoencoder")));
    ae->train(train_, src.autoencoder_config.steps);
    ae->calibrate_scale(train_);
    ae->save(ae_path);
  }
  const auto ldm_path = out_ / "generators" / "ldm.pt";
  if (!src.checkpoint.empty() && fs::exists(src.checkpoint)) {
    ldm_ = std::make_shared<diffusion::LatentDiffusion>(diffusion::LatentDiffusion::load(src.checkpoint, ae));
  } else if (fs::exists(ldm_path)) {
    ldm_ = std::make_shared<diffusion::LatentDiffusion>(diffusion::LatentDiffusion::load(ldm_path, ae));
  } else {
    if (!src.train) throw ResourceError("diffusion checkpoint missing and training disabled");
    log::info("training latent diffusion model for " + std::to_string(src.config.steps) + " steps");
    ldm_ = std::make_shared<diffusion::LatentDiffusion>(
        diffusion::LatentDiffusion::create(src.config, ae, derive_seed(spec_.base_seed, "generator/ldm")));
    ldm_->train(train_, src.config.steps);
    ldm_->save(ldm_path);
  }
  return ldm_;
}

const Dataset& Experiment::pool(GenMethod method) {
  std::lock_guard lock(mutex_);
  load_data();
  if (auto it = pools_.find(method); it != pools_.end()) return it->second;

  const auto n = static_cast<double>(train_.size());
  std::size_t size = 0;
  for (double r : spec_.ratios) size = std::max(size, static_cast<std::size_t>(std::floor(r * n + 1e-9)));
  const std::uint64_t pool_seed = derive_seed(spec_.base_seed, "pool/" + std::string(to_string(method)));
  RunDescriptor probe{"pool", 0, std::nullopt, method, 0.0, pool_seed};
  const std::string identity = config_hash(probe) + ":" + std::to_string(size);
  const auto dir = out_ / "pools" / std::string(to_string(method));

  if (fs::exists(dir / "identity.txt") && fs::exists(dir / "manifest.json")) {
    std::ifstream in(dir / "identity.txt");
    std::string stored;
    std::getline(in, stored);
    if (stored == identity) {
      auto items = load_all(dir, load_manifest(dir));
      std::sort(items.begin(), items.end(), [](const DatasetItem& a, const DatasetItem& b) { return a.id < b.id; });
      return pools_[method] = std::move(items);
    }
  }

  log::info("generating " + std::to_string(size) + " synthetic patches with " + std::string(to_string(method)));
  Generators gens;
  if (method == GenMethod::gan) gens.gan = gan_model();
  else gens.diffusion = diffusion_model();
  auto items = synthesize(method, train_, size, pool_seed, gens, spec_.generation_batch);
  if (fs::exists(dir)) fs::remove_all(dir);
  write_dataset(dir, items, train_.front().patch.width());
  std::ofstream(dir / "identity.txt") << identity << '\n';
  return pools_[method] = std::move(items);
}

RunRecord Experiment::execute_run(const RunDescriptor& run, bool force) {
  {
    std::lock_guard lock(mutex_);
    load_data();
  }
  const auto hash = config_hash(run);
  RunRecord rec;
  rec.run_id = run.run_id();
  rec.condition = run.condition;
  rec.repetition = run.repetition;
  rec.seed = run.seed;
  rec.config_hash = hash;
  {
    std::lock_guard lock(ledger_mutex_);
    if (auto existing = ledger_.find(rec.run_id);
        existing && existing->state == RunState::done && existing->config_hash == hash && !force)
      return *existing;
    rec.state = RunState::running;
    ledger_.append(rec);
  }
  const auto t0 = std::chrono::steady_clock::now();
  try {
    auto cfg = spec_.segmentation;
    Dataset training;
    if (run.baseline) {
      training = train_;
      cfg.sampling.kind = *run.baseline;
    } else {
      const auto& synthetic = pool(*run.method);
      training = mix_real_synthetic(train_, synthetic, MixSpec{run.ratio, *run.method, derive_seed(run.seed, "mix")});
      cfg.sampling.kind = spec_.mixture_sampling;
    }
    auto model = seg::train_segmenter(training, val_, cfg, run.seed);
    EvalOptions eval;
    eval.variance = spec_.variance;
    rec.report = model.evaluate(test_, eval);
    rec.train_size = static_cast<std::int64_t>(training.size());
    const auto dir = out_ / "runs" / directory_name(rec.run_id);
    fs::create_directories(dir);
    model.save(dir / "segmenter.pt");
    json history = json::array();
    for (const auto& e : model.history())
      history.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_dice", e.val_dice}});
    std::ofstream(dir / "history.json") << json{{"best_epoch", model.best_epoch()}, {"epochs", history}}.dump(2) << '\n';
    rec.artifacts = {{"segmenter", (dir / "segmenter.pt").string()}, {"history", (dir / "history.json").string()}};
    rec.state = RunState::done;
  } catch (const std::exception& e) {
    rec.state = RunState::failed;
    rec.error = e.what();
  }
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::lock_guard lock(ledger_mutex_);
    ledger_.append(rec);
  }
  if (rec.state == RunState::failed) throw std::runtime_error("run " + rec.run_id + " failed: " + rec.error);
  return rec;
}

std::vector<RunRecord> Experiment::run_all(const ExecuteOptions& options) {
  const auto runs = plan_runs(spec_);
  // Generators and pools are shared by every run; build them up front so
  // parallel workers only train segmenters.
  for (auto m : spec_.methods) {
    try {
      pool(m);
    } catch (const std::exception& e) {
      log::error("pool for " + std::string(to_string(m)) + " unavailable: " + e.what());
    }
  }
  std::vector<RunRecord> out(runs.size());
  const auto work = [&](std::size_t i) {
    try {
      out[i] = execute_run(runs[i], options.force);
    } catch (const std::exception& e) {
      log::error(e.what());
      if (auto r = ledger_.find(runs[i].run_id())) out[i] = *r;
    }
  };
  const int workers = options.workers > 0 ? options.workers : spec_.workers;
  if (workers <= 1) {
    for (std::size_t i = 0; i < runs.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w)
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < runs.size(); i = next++) work(i);
      });
    for (auto& t : threads) t.join();
  }
  return out;
}

std::vector<std::pair<RunDescriptor, RunState>> Experiment::status() const {
  std::map<std::string, RunState> states;
  for (const auto& r : ledger_.latest()) states[r.run_id] = r.state;
  std::vector<std::pair<RunDescriptor, RunState>> out;
  for (const auto& d : plan_runs(spec_)) {
    const auto it = states.find(d.run_id());
    out.emplace_back(d, it == states.end() ? RunState::pending : it->second);
  }
  return out;
}

}  // namespace histosynth::harness
