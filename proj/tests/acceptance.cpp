// Acceptance suite: one PASS/FAIL line per criterion with its measured value,
// tolerance and runtime budget. Exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "histosynth/dataset.hpp"
#include "histosynth/diffusion.hpp"
#include "histosynth/evaluation.hpp"
#include "histosynth/gan.hpp"
#include "histosynth/harness.hpp"
#include "histosynth/nn_common.hpp"
#include "histosynth/phantom.hpp"
#include "histosynth/rng.hpp"
#include "histosynth/sampling.hpp"
#include "histosynth/segmentation.hpp"
#include "oracles.hpp"

using namespace histosynth;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string file_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ------------------------------------------------------------------ desk setup

// Tolerances and budgets.
constexpr double kMetricTol = 1e-12;
constexpr double kMetricBudget = 10;
constexpr double kChiSquareP = 0.001;
constexpr double kBalanceBudget = 10;
constexpr double kVarianceRelTol = 0.05;
constexpr double kDiffusionBudget = 30;
constexpr double kInpaintBudget = 120;
constexpr double kGradRelTol = 1e-4;
constexpr double kPerfectLoss = 1e-6;
constexpr double kLossBudget = 30;
constexpr double kFidelity = 0.70;
constexpr double kGeneratorBudget = 30 * 60;
constexpr double kOverfitDice = 0.95;
constexpr int kOverfitSteps = 2000;
constexpr double kMatrixBudget = 60 * 60;

diffusion::AutoencoderConfig desk_autoencoder() {
  diffusion::AutoencoderConfig c;
  c.base_channels = 16;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.steps = 1200;
  c.batch_sampling = "subtype_sampled";
  return c;
}

diffusion::LdmConfig desk_ldm() {
  diffusion::LdmConfig c;
  c.model_channels = 32;
  c.batch_size = 16;
  c.learning_rate = 5e-4;
  c.steps = 3500;
  c.sample_steps = 50;
  c.batch_sampling = "subtype_sampled";
  return c;
}

gan::GanConfig desk_gan() {
  gan::GanConfig c;
  c.base_channels = 16;
  c.batch_size = 8;
  c.learning_rate = 2e-4;
  c.steps = 200;
  return c;
}

seg::SegConfig desk_segmentation() {
  seg::SegConfig c;
  c.base_channels = 16;
  c.blocks_per_stage = {1, 1, 1, 1};
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.epochs = 4;
  c.steps_per_epoch = 50;
  return c;
}

PhantomDatasetOptions desk_corpus() {
  PhantomDatasetOptions o;
  o.instances_per_slide = 32;
  o.seed = 7;
  return o;
}

struct Context {
  fs::path work;
  bool corpus_ready = false;
  Dataset train, val, test;
  fs::path autoencoder_path, ldm_path;
};

void ensure_corpus(Context& ctx) {
  if (ctx.corpus_ready) return;
  const auto root = ctx.work / "data";
  fs::remove_all(root);
  const auto manifest = build_phantom_dataset(root, desk_corpus());
  ctx.train = load_split(root, manifest, SplitSet::train);
  ctx.val = load_split(root, manifest, SplitSet::val);
  ctx.test = load_split(root, manifest, SplitSet::test);
  ctx.corpus_ready = true;
}

// ------------------------------------------------------------------ criteria

Outcome metric_oracle(Context&) {
  Rng rng(101);
  double worst = 0;
  int variance_checked = 0, variance_rejected = 0;
  bool contract = true;
  for (int n = 0; n < 1000; ++n) {
    // Mix dense and sparse masks so empty and absent classes both occur.
    const double tumor_rate = rng.uniform(0.0, 1.0);
    const double pred_rate = rng.uniform(0.0, 1.0);
    BinaryMask pred(16, 16);
    SubtypeMask mask(16, 16);
    std::vector<int> p(256), m(256), t(256);
    for (int i = 0; i < 256; ++i) {
      p[i] = rng.uniform() < pred_rate ? 1 : 0;
      m[i] = rng.uniform() < tumor_rate ? rng.between(1, 5) : 0;
      t[i] = m[i] > 0 ? 1 : 0;
      pred.values()[i] = static_cast<std::uint8_t>(p[i]);
      mask.values()[i] = static_cast<std::uint8_t>(m[i]);
    }
    worst = std::max(worst, std::abs(dice_score(pred, tumor_target(mask)) - oracle::dice(p, t)));
    const auto got = per_subtype_recall(pred, mask);
    const auto want = oracle::recalls(p, m);
    if (got.size() != want.size()) contract = false;
    for (const auto& [k, v] : want) {
      const auto it = got.find(static_cast<Subtype>(k));
      if (it == got.end()) contract = false;
      else worst = std::max(worst, std::abs(it->second - v));
    }
    std::vector<double> her2;
    for (int k = 1; k <= 4; ++k)
      if (want.count(k)) her2.push_back(want.at(k));
    if (her2.size() == 4) {
      worst = std::max(worst, std::abs(subtype_variance(got) - oracle::population_variance(her2)));
      ++variance_checked;
    } else {
      try {
        subtype_variance(got);
        contract = false;
      } catch (const ValidationError&) {
        ++variance_rejected;
      }
    }
  }
  return {contract && worst <= kMetricTol,
          fmt("max |diff| %.3g (tol %.0e) over 1000 pairs; variance compared %d, rejected-missing %d", worst,
              kMetricTol, variance_checked, variance_rejected)};
}

Outcome balance(Context&) {
  // 100 patches of 100 instances each: 10,000 instances.
  std::map<int, long> counts;
  bool geometry_kept = true;
  for (int k = 0; k < 100; ++k) {
    LabeledPatch p;
    p.image = RgbImage(40, 40);
    p.mask = SubtypeMask(40, 40);
    p.instances = InstanceMap(40, 40);
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        if (x % 4 == 3 || y % 4 == 3) continue;  // background grid lines
        p.instances(y, x) = static_cast<std::uint16_t>(1 + (y / 4) * 10 + x / 4);
        p.mask(y, x) = code(Subtype::her2_1);
      }
    const auto m = randomize_instance_subtypes(p, kTumorSubtypes, derive_seed(55, "patch" + std::to_string(k)));
    std::map<int, int> per_instance;
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        const int id = p.instances(y, x);
        if (id == 0) {
          if (m(y, x) != 0) geometry_kept = false;
          continue;
        }
        if (m(y, x) == 0) geometry_kept = false;
        const auto [it, fresh] = per_instance.emplace(id, m(y, x));
        if (!fresh && it->second != m(y, x)) geometry_kept = false;
      }
    for (const auto& [id, c] : per_instance) ++counts[c];
  }
  long total = 0;
  double chi2 = 0;
  for (auto s : kTumorSubtypes) total += counts[code(s)];
  const double expected = static_cast<double>(total) / 5.0;
  for (auto s : kTumorSubtypes) {
    const double d = static_cast<double>(counts[code(s)]) - expected;
    chi2 += d * d / expected;
  }
  const double p = oracle::chi_square_sf_even_dof(chi2, 4);
  return {total == 10000 && geometry_kept && p > kChiSquareP,
          fmt("%ld instances, chi2 %.3f, p %.4f (min %.3f); background and geometry %s", total, chi2, p, kChiSquareP,
              geometry_kept ? "unchanged" : "CHANGED")};
}

Outcome diffusion_identities(Context&) {
  using diffusion::NoiseSchedule;
  std::vector<std::pair<std::string, NoiseSchedule>> schedules;
  for (int T : {50, 200, 1000}) {
    schedules.emplace_back(fmt("linear/T=%d", T), NoiseSchedule::linear(T));
    schedules.emplace_back(fmt("linear-raw/T=%d", T), NoiseSchedule::linear(T, 1e-4, 0.02, false));
    schedules.emplace_back(fmt("cosine/T=%d", T), NoiseSchedule::cosine(T));
  }
  bool monotone = true, identity = true;
  double worst_rel = 0;
  auto gen = nn::make_generator(77);
  const auto x0 = torch::rand({100000}, gen, torch::kFloat64) * 2 - 1;
  for (const auto& [name, s] : schedules) {
    const auto& ab = s.alpha_bars();
    if (ab[0] != 1.0) monotone = false;
    for (std::size_t t = 1; t < ab.size(); ++t)
      if (!(ab[t] < ab[t - 1]) || ab[t] <= 0) monotone = false;
    const auto noise = torch::randn({100000}, gen, torch::kFloat64);
    if (!torch::equal(diffusion::q_forward(s, x0, 0, noise), x0)) identity = false;
    for (int t : {1, s.steps() / 4, s.steps() / 2, s.steps()}) {
      const auto eps = torch::randn({100000}, gen, torch::kFloat64);
      const auto xt = diffusion::q_forward(s, x0, t, eps);
      // Conditional on x0 the residual has variance 1 - ᾱ_t.
      const auto resid = xt - std::sqrt(s.alpha_bar(t)) * x0;
      const double var = resid.var().item<double>();
      worst_rel = std::max(worst_rel, std::abs(var / (1 - s.alpha_bar(t)) - 1));
    }
  }
  return {monotone && identity && worst_rel <= kVarianceRelTol,
          fmt("%zu schedules: t=0 identity %s, alpha_bar strictly decreasing %s, variance rel err %.4f (tol %.2f) "
              "over 1e5 samples",
              schedules.size(), identity ? "exact" : "BROKEN", monotone ? "yes" : "NO", worst_rel, kVarianceRelTol)};
}

Outcome inpaint_background(Context&) {
  const auto cases = phantom_patches(303, 50, 64, 3);
  auto ae = std::make_shared<diffusion::Autoencoder>(diffusion::Autoencoder::create(desk_autoencoder(), 31));
  auto untrained = diffusion::LatentDiffusion::create(desk_ldm(), ae, 32);
  ae->calibrate_scale(cases);
  auto brief = diffusion::LatentDiffusion::create(desk_ldm(), ae, 33);
  brief.train(cases, 20);
  int worst = 0, changed_inside = 0, region_pixels = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& p = cases[i].patch;
    const auto region = tumor_target(p.mask);
    auto& model = i % 2 == 0 ? untrained : brief;
    const auto out = model.inpaint(p.image, randomize_instance_subtypes(p, kTumorSubtypes, i), region, 900 + i);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const auto& a = out(y, x);
        const auto& b = p.image(y, x);
        const int d = std::max({std::abs(a.r - b.r), std::abs(a.g - b.g), std::abs(a.b - b.b)});
        if (region(y, x)) {
          ++region_pixels;
          if (d > 0) ++changed_inside;
        } else {
          worst = std::max(worst, d);
        }
      }
  }
  return {worst == 0,
          fmt("50 cases (25 untrained, 25 briefly trained): max abs diff outside region %d (tol 0); %d of %d region "
              "pixels re-synthesised",
              worst, changed_inside, region_pixels)};
}

Outcome loss_gradient(Context&) {
  auto gen = nn::make_generator(505);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = (torch::rand({1, 1, 8, 8}, gen, torch::kFloat64) * 0.9 + 0.05).requires_grad_(true);
    const auto y = (torch::rand({1, 1, 8, 8}, gen, torch::kFloat64) > 0.5).to(torch::kFloat64);
    seg::dice_ce_loss(p, y).backward();
    const auto grad = p.grad();
    torch::NoGradGuard ng;
    const double h = 1e-6;
    for (int i = 0; i < 64; ++i) {
      auto plus = p.detach().clone(), minus = p.detach().clone();
      plus.view(-1)[i] += h;
      minus.view(-1)[i] -= h;
      const double fd =
          (seg::dice_ce_loss(plus, y).item<double>() - seg::dice_ce_loss(minus, y).item<double>()) / (2 * h);
      const double g = grad.view(-1)[i].item<double>();
      worst = std::max(worst, std::abs(g - fd) / std::max(std::abs(fd), 1e-8));
    }
  }
  const auto y = (torch::rand({2, 1, 8, 8}, gen, torch::kFloat64) > 0.5).to(torch::kFloat64);
  const double perfect = seg::dice_ce_loss(y, y).item<double>();
  return {worst <= kGradRelTol && perfect < kPerfectLoss,
          fmt("max relative gradient error %.3g (tol %.0e) on 5 random 8x8 inputs; perfect-prediction loss %.3g "
              "(max %.0e)",
              worst, kGradRelTol, perfect, kPerfectLoss)};
}

double generated_brown(gan::GanModel& model, Subtype s) {
  const SubtypeMask mask(64, 64, code(s));
  const Grid<std::uint8_t> all(64, 64, 1);
  double total = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) total += stain_features(model.generate(mask, seed), all).brown;
  return total / 8;
}

Outcome conditioning_fidelity(Context& ctx) {
  ensure_corpus(ctx);
  const auto dir = ctx.work / "generators";
  fs::create_directories(dir);

  auto ae = std::make_shared<diffusion::Autoencoder>(diffusion::Autoencoder::create(desk_autoencoder(), 61));
  ae->train(ctx.train, desk_autoencoder().steps);
  ae->calibrate_scale(ctx.train);
  ctx.autoencoder_path = dir / "autoencoder.pt";
  ae->save(ctx.autoencoder_path);
  auto ldm = diffusion::LatentDiffusion::create(desk_ldm(), ae, 62);
  ldm.train(ctx.train, desk_ldm().steps);
  ctx.ldm_path = dir / "ldm.pt";
  ldm.save(ctx.ldm_path);

  // Every held-out instance, recoloured to one subtype at a time.
  std::vector<const LabeledPatch*> sources;
  for (const auto& item : ctx.test)
    if (!classify_instances(item.patch.image, item.patch.instances, 20).empty()) sources.push_back(&item.patch);
  int hits = 0, total = 0;
  std::map<Subtype, std::pair<int, int>> per_class;
  for (auto s : kTumorSubtypes) {
    for (std::size_t start = 0; start < sources.size(); start += 16) {
      std::vector<SubtypeMask> masks;
      std::vector<std::uint64_t> seeds;
      const auto end = std::min(sources.size(), start + 16);
      for (std::size_t i = start; i < end; ++i) {
        SubtypeMask m = sources[i]->mask;
        for (auto& v : m.values())
          if (v) v = code(s);
        masks.push_back(std::move(m));
        seeds.push_back(derive_seed(63, fmt("%d/%zu", code(s), i)));
      }
      const auto images = ldm.sample_batch(masks, seeds);
      for (std::size_t k = 0; k < images.size(); ++k)
        for (const auto& [id, got] : classify_instances(images[k], sources[start + k]->instances, 20)) {
          ++total;
          ++per_class[s].second;
          if (got == s) ++hits, ++per_class[s].first;
        }
    }
  }
  const double fidelity = total ? static_cast<double>(hits) / total : 0.0;
  std::string breakdown;
  for (const auto& [s, hn] : per_class)
    breakdown += fmt(" %s %.2f", std::string(name(s)).c_str(), static_cast<double>(hn.first) / hn.second);

  auto gan_model = gan::GanModel::create(desk_gan(), 64);
  gan_model.train(ctx.train, desk_gan().steps);
  gan_model.save(dir / "gan.pt");
  const double b3 = generated_brown(gan_model, Subtype::her2_3), b0 = generated_brown(gan_model, Subtype::her2_0);

  return {fidelity >= kFidelity && b3 > b0,
          fmt("LDM 64px f=4 T=%d: %d/%d instances classified as conditioned (%.3f, min %.2f;%s); GAN brown her2_3 "
              "%.3f vs her2_0 %.3f",
              desk_ldm().timesteps, hits, total, fidelity, kFidelity, breakdown.c_str(), b3, b0)};
}

Outcome segmentation_capacity(Context&) {
  const auto patches = phantom_patches(707, 4, 64, 4);
  auto cfg = desk_segmentation();
  cfg.batch_size = 4;
  cfg.steps_per_epoch = 250;
  cfg.epochs = kOverfitSteps / cfg.steps_per_epoch;
  cfg.sampling.kind = SamplingKind::tumor_sampled;
  const auto model = seg::train_segmenter(patches, patches, cfg, 708);
  double best = 0;
  int reached = -1;
  for (const auto& e : model.history()) {
    best = std::max(best, e.val_dice);
    if (reached < 0 && e.val_dice >= kOverfitDice) reached = (e.epoch + 1) * cfg.steps_per_epoch;
  }
  return {reached > 0, reached > 0 ? fmt("training Dice %.4f reached %.2f after %d steps (limit %d)", best,
                                         kOverfitDice, reached, kOverfitSteps)
                                   : fmt("best training Dice %.4f within %d steps (need %.2f)", best, kOverfitSteps,
                                         kOverfitDice)};
}

harness::ExperimentSpec reduced_spec(Context& ctx, const fs::path& out) {
  harness::ExperimentSpec s;
  s.dataset_root = (ctx.work / "data").string();
  s.output_dir = out.string();
  s.baselines = {SamplingKind::subtype_sampled};
  s.methods = {GenMethod::diffusion};
  s.ratios = {0.5, 1.0};
  s.repetitions = 2;
  s.base_seed = 2024;
  s.workers = 1;
  s.segmentation = desk_segmentation();
  s.diffusion.autoencoder = ctx.autoencoder_path.string();
  s.diffusion.checkpoint = ctx.ldm_path.string();
  s.diffusion.train = true;
  s.diffusion.autoencoder_config = desk_autoencoder();
  s.diffusion.config = desk_ldm();
  return s;
}

std::vector<harness::RunRecord> first_matrix;

Outcome matrix_smoke(Context& ctx) {
  ensure_corpus(ctx);
  const auto out = ctx.work / "matrix";
  fs::remove_all(out);
  harness::Experiment exp(reduced_spec(ctx, out));
  const auto records = exp.run_all();
  const auto latest = exp.ledger().latest();
  int done = 0;
  for (const auto& r : latest) done += r.state == harness::RunState::done;
  const auto bundle = harness::emit_report(latest, out / "report");
  bool fields = true;
  for (const auto& c : bundle.summary.at("conditions")) {
    if (c.at("condition") == bundle.summary.at("reference")) continue;
    for (const char* key : {"delta_dice", "variance_change_pct"})
      if (!c.contains(key) || !c.at(key).is_number()) fields = false;
  }
  bool files = true;
  for (const auto& p : {bundle.summary_txt, bundle.summary_json, bundle.boxplots_svg, bundle.confusion_svg})
    files = files && fs::exists(p);

  const auto ledger_before = file_text(exp.ledger().path());
  harness::Experiment again(reduced_spec(ctx, out));
  const auto rerun = again.run_all();
  bool idempotent = file_text(again.ledger().path()) == ledger_before && rerun.size() == records.size();
  for (std::size_t i = 0; idempotent && i < rerun.size(); ++i)
    idempotent = nlohmann::json(rerun[i]) == nlohmann::json(records[i]);

  first_matrix = records;
  return {latest.size() == 6 && done == 6 && fields && files && idempotent,
          fmt("%zu ledger records, %d done; report bundle %s; delta-Dice/variance-change fields %s; re-run %s", latest.size(),
              done, files ? "written" : "MISSING", fields ? "populated" : "MISSING",
              idempotent ? "idempotent (ledger unchanged)" : "NOT idempotent")};
}

nlohmann::json metrics_only(const harness::RunRecord& r) {
  return {{"run_id", r.run_id}, {"seed", r.seed}, {"report", r.report ? nlohmann::json(*r.report) : nlohmann::json(nullptr)},
          {"train_size", r.train_size}};
}

Outcome determinism(Context& ctx) {
  if (first_matrix.empty()) matrix_smoke(ctx);
  const auto out = ctx.work / "matrix_repeat";
  fs::remove_all(out);
  harness::Experiment exp(reduced_spec(ctx, out));
  const auto records = exp.run_all();
  int equal = 0;
  for (std::size_t i = 0; i < std::min(records.size(), first_matrix.size()); ++i)
    equal += metrics_only(records[i]) == metrics_only(first_matrix[i]);
  return {records.size() == first_matrix.size() && equal == static_cast<int>(records.size()),
          fmt("%d of %zu runs reproduce every metric exactly in a fresh output directory", equal, records.size())};
}

struct Criterion {
  int id;
  const char* name;
  double budget;
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work;
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory; a temporary one by default");
  app.add_option("--only", only, "criterion ids to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  nn::use_single_thread();
  Context ctx;
  ctx.work = work.empty() ? fs::temp_directory_path() / "histosynth_acceptance" : fs::path(work);
  fs::create_directories(ctx.work);

  const std::vector<Criterion> criteria{
      {1, "metric-oracle", kMetricBudget, metric_oracle},
      {2, "subtype-balance", kBalanceBudget, balance},
      {3, "diffusion-identities", kDiffusionBudget, diffusion_identities},
      {4, "inpaint-background", kInpaintBudget, inpaint_background},
      {5, "loss-gradient", kLossBudget, loss_gradient},
      {6, "conditioning-fidelity", kGeneratorBudget, conditioning_fidelity},
      {7, "segmentation-capacity", 0, segmentation_capacity},
      {8, "matrix-smoke", kMatrixBudget, matrix_smoke},
      {9, "determinism", kMatrixBudget, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double dt = seconds_since(t0);
    const bool in_time = c.budget <= 0 || dt <= c.budget;
    const bool pass = o.pass && in_time;
    failures += !pass;
    const std::string timing = c.budget > 0 ? fmt("%.1f s (limit %.0f s)", dt, c.budget) : fmt("%.1f s", dt);
    std::printf("%s %d %s: %s; %s\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failures;
}
