#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histosynth/diffusion.hpp"
#include "histosynth/evaluation.hpp"
#include "histosynth/gan.hpp"
#include "histosynth/sampling.hpp"
#include "histosynth/segmentation.hpp"

namespace histosynth::harness {

/// Environment variable that replaces ExperimentSpec::dataset_root when set.
inline constexpr const char* kDataRootEnv = "HISTOSYNTH_DATA_ROOT";

struct GanSource {
  std::string checkpoint;  ///< used when it exists
  bool train = false;      ///< otherwise train from scratch with `config`
  gan::GanConfig config;
};

struct DiffusionSource {
  std::string autoencoder;
  std::string checkpoint;
  bool train = false;
  diffusion::AutoencoderConfig autoencoder_config;
  diffusion::LdmConfig config;
};

struct ExperimentSpec {
  std::string dataset_root;
  std::string output_dir;
  std::vector<SamplingKind> baselines{SamplingKind::tumor_sampled, SamplingKind::subtype_sampled};
  std::vector<GenMethod> methods{GenMethod::gan, GenMethod::diffusion, GenMethod::inpaint};
  std::vector<double> ratios{0.5, 1.0, 2.0, 4.0};
  int repetitions = 5;
  std::uint64_t base_seed = 0;
  /// Sampler used to train on real + synthetic mixtures.
  SamplingKind mixture_sampling = SamplingKind::subtype_sampled;
  seg::SegConfig segmentation;
  GanSource gan;
  DiffusionSource diffusion;
  /// Draws per generator call when filling pools.
  int generation_batch = 16;
  int workers = 1;
  VarianceKind variance = VarianceKind::population;
  /// Two conditions whose averaged confusion rows are drawn side by side.
  std::vector<std::string> confusion_conditions;

  /// Throws ValidationError on broken invariants or unresolvable generators.
  void validate() const;
  /// Dataset root after the environment override.
  std::filesystem::path resolved_dataset_root() const;
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);
ExperimentSpec load_spec(const std::filesystem::path& path);

/// "1.0", "0.5", "2.0": ratios always carry a decimal point.
std::string format_ratio(double ratio);

/// Loaded generator models; only the one a method needs must be set.
struct Generators {
  std::shared_ptr<gan::GanModel> gan;
  std::shared_ptr<diffusion::LatentDiffusion> diffusion;
};

/// `count` synthetic items built from `sources` (cycled in order). Item k uses
/// seed derive_seed(seed, "item<k>"); with `randomize` its mask is the source
/// mask with instance subtypes redrawn uniformly, else the source mask itself.
/// gan and diffusion generate from the mask alone; inpaint re-synthesises the
/// source image's tumor region. Provenance records method, source, seed and
/// mask hash.
Dataset synthesize(GenMethod method, const Dataset& sources, std::size_t count, std::uint64_t seed,
                   Generators& generators, int batch = 16, bool randomize = true);

struct RunDescriptor {
  std::string condition;  ///< "subtype_sampled" or "diffusion@1.0"
  int repetition = 0;     ///< 1-based
  std::optional<SamplingKind> baseline;
  std::optional<GenMethod> method;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  std::string run_id() const { return condition + "#" + std::to_string(repetition); }
};

/// Baselines first, then methods × ratios, each repeated; seed =
/// base_seed XOR fnv1a(run_id).
std::vector<RunDescriptor> plan_runs(const ExperimentSpec& spec);

enum class RunState { pending, running, done, failed };
std::string to_string(RunState s);
RunState run_state_from_string(const std::string& s);

struct RunRecord {
  std::string run_id;
  std::string condition;
  int repetition = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  RunState state = RunState::pending;
  std::optional<EvalReport> report;
  std::int64_t train_size = 0;
  double wall_clock_seconds = 0;
  std::map<std::string, std::string> artifacts;
  std::string error;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

/// Append-only JSON-lines file; the last line of a run id is its state.
class Ledger {
public:
  explicit Ledger(std::filesystem::path path);
  void append(const RunRecord& record);
  /// Latest record per run id, in order of first appearance.
  std::vector<RunRecord> latest() const;
  std::optional<RunRecord> find(const std::string& run_id) const;
  const std::filesystem::path& path() const noexcept { return path_; }

private:
  std::filesystem::path path_;
};

struct ExecuteOptions {
  bool force = false;
  /// Overrides ExperimentSpec::workers when positive.
  int workers = 0;
};

/// Runs one condition end to end and records it. A finished run with the same
/// config hash is returned from the ledger untouched unless `force` is set.
class Experiment {
public:
  explicit Experiment(ExperimentSpec spec);

  RunRecord execute_run(const RunDescriptor& run, bool force = false);
  /// Executes every planned run; failures are recorded and do not stop the matrix.
  std::vector<RunRecord> run_all(const ExecuteOptions& options = {});
  /// Planned runs paired with their ledger state (pending when unseen).
  std::vector<std::pair<RunDescriptor, RunState>> status() const;

  const ExperimentSpec& spec() const noexcept { return spec_; }
  Ledger& ledger() noexcept { return ledger_; }
  std::string config_hash(const RunDescriptor& run) const;
  /// Synthetic pool of `method`, generated on first use and cached on disk.
  const Dataset& pool(GenMethod method);

private:
  void load_data();
  std::shared_ptr<diffusion::LatentDiffusion> diffusion_model();
  std::shared_ptr<gan::GanModel> gan_model();

  ExperimentSpec spec_;
  std::filesystem::path out_;
  Ledger ledger_;
  bool data_loaded_ = false;
  std::string dataset_hash_;
  Dataset train_, val_, test_;
  std::map<GenMethod, Dataset> pools_;
  std::shared_ptr<diffusion::LatentDiffusion> ldm_;
  std::shared_ptr<gan::GanModel> gan_;
  std::mutex mutex_;
  std::mutex ledger_mutex_;
};

struct ReportOptions {
  /// Condition the relative fields are computed against; defaults to
  /// subtype_sampled when present, else the first baseline.
  std::string reference;
  std::vector<std::string> confusion_conditions;
};

struct ReportBundle {
  std::filesystem::path summary_txt, summary_json, boxplots_svg, confusion_svg;
  nlohmann::json summary;
};

/// Writes summary.txt, summary.json, boxplots.svg and confusion.svg under
/// `out_dir` from completed records alone. Throws when none is completed.
ReportBundle emit_report(const std::vector<RunRecord>& records, const std::filesystem::path& out_dir,
                         const ReportOptions& options = {});

}  // namespace histosynth::harness
