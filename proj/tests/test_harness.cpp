#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <regex>
#include <set>

#include "histosynth/dataset.hpp"
#include "histosynth/error.hpp"
#include "histosynth/harness.hpp"
#include "histosynth/rng.hpp"

using namespace histosynth;
using namespace histosynth::harness;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "histosynth_test_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunRecord done_record(const std::string& condition, int rep, double dice, std::map<Subtype, double> recalls) {
  RunRecord r;
  r.condition = condition;
  r.repetition = rep;
  r.run_id = condition + "#" + std::to_string(rep);
  r.state = RunState::done;
  EvalReport e;
  e.dice = dice;
  e.recalls = recalls;
  for (const auto& [s, v] : recalls) e.confusion_rows[s] = {v, 1 - v};
  e.subtype_variance = subtype_variance(recalls);
  r.report = e;
  return r;
}

std::map<Subtype, double> recalls(double a, double b, double c, double d) {
  return {{Subtype::her2_0, a}, {Subtype::her2_1, b}, {Subtype::her2_2, c}, {Subtype::her2_3, d}};
}

ExperimentSpec tiny_spec(const fs::path& dir) {
  PhantomDatasetOptions opts;
  opts.slides = 6;
  opts.counts = {2, 2, 2};
  opts.slide_size = 128;
  opts.patch_size = 64;
  opts.stride = 64;
  opts.instances_per_slide = 8;
  opts.seed = 4;
  build_phantom_dataset(dir / "data", opts);

  ExperimentSpec s;
  s.dataset_root = (dir / "data").string();
  s.output_dir = (dir / "out").string();
  s.baselines = {SamplingKind::tumor_sampled};
  s.methods = {GenMethod::gan};
  s.ratios = {0.5};
  s.repetitions = 2;
  s.base_seed = 9;
  s.segmentation.base_channels = 8;
  s.segmentation.blocks_per_stage = {1, 1, 1, 1};
  s.segmentation.batch_size = 4;
  s.segmentation.learning_rate = 1e-3;
  s.segmentation.epochs = 1;
  s.segmentation.steps_per_epoch = 2;
  s.gan.train = true;
  s.gan.config.base_channels = 8;
  s.gan.config.style_dim = 16;
  s.gan.config.spade_hidden = 8;
  s.gan.config.batch_size = 2;
  s.gan.config.steps = 2;
  return s;
}

}  // namespace

TEST(Plan, DefaultMatrixHasSeventyRuns) {
  ExperimentSpec s;
  const auto runs = plan_runs(s);
  ASSERT_EQ(runs.size(), 70u);
  EXPECT_EQ(runs[0].run_id(), "tumor_sampled#1");
  EXPECT_EQ(runs[5].run_id(), "subtype_sampled#1");
  EXPECT_EQ(runs[10].run_id(), "gan@0.5#1");
  EXPECT_EQ(runs.back().run_id(), "inpaint@4.0#5");
  std::set<std::string> ids;
  std::set<std::uint64_t> seeds;
  for (const auto& r : runs) {
    ids.insert(r.run_id());
    seeds.insert(r.seed);
    EXPECT_EQ(r.seed, derive_seed(s.base_seed, r.run_id()));
  }
  EXPECT_EQ(ids.size(), 70u);
  EXPECT_EQ(seeds.size(), 70u);
}

TEST(Plan, SingleRunAndDeterminism) {
  ExperimentSpec s;
  s.baselines = {SamplingKind::subtype_sampled};
  s.methods = {};
  s.repetitions = 1;
  const auto a = plan_runs(s);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_TRUE(a[0].baseline.has_value());
  const auto b = plan_runs(s);
  EXPECT_EQ(a[0].seed, b[0].seed);
  s.base_seed = 1;
  EXPECT_NE(plan_runs(s)[0].seed, a[0].seed);
}

TEST(Plan, RatioLabels) {
  EXPECT_EQ(format_ratio(0.5), "0.5");
  EXPECT_EQ(format_ratio(1.0), "1.0");
  EXPECT_EQ(format_ratio(4), "4.0");
}

TEST(Spec, ValidationAndRoundTrip) {
  ExperimentSpec s;
  s.dataset_root = "d";
  s.output_dir = "o";
  s.repetitions = 0;
  EXPECT_THROW(s.validate(), ValidationError);
  s.repetitions = 3;
  s.ratios = {2.0};
  s.segmentation.epochs = 7;
  const ExperimentSpec back = nlohmann::json(s).get<ExperimentSpec>();
  EXPECT_EQ(back.repetitions, 3);
  EXPECT_EQ(back.ratios, std::vector<double>{2.0});
  EXPECT_EQ(back.segmentation.epochs, 7);
  EXPECT_EQ(back.methods, s.methods);
}

TEST(Ledger, LastEntryWinsAndTornLinesAreSkipped) {
  const auto dir = fresh_dir("ledger");
  Ledger l(dir / "ledger.jsonl");
  RunRecord r;
  r.run_id = "a#1";
  r.state = RunState::running;
  l.append(r);
  r.run_id = "b#1";
  l.append(r);
  r.run_id = "a#1";
  r.state = RunState::done;
  l.append(r);
  std::ofstream(dir / "ledger.jsonl", std::ios::app) << "{\"run_id\": \"b#1\", \"sta";
  const auto latest = l.latest();
  ASSERT_EQ(latest.size(), 2u);
  EXPECT_EQ(latest[0].run_id, "a#1");
  EXPECT_EQ(latest[0].state, RunState::done);
  EXPECT_EQ(latest[1].state, RunState::running);
  EXPECT_FALSE(l.find("c#1").has_value());
}

TEST(Report, RelativeFieldsAndWhiskers) {
  const auto dir = fresh_dir("report");
  std::vector<RunRecord> recs{
      done_record("subtype_sampled", 1, 0.70, recalls(0.8, 0.9, 1.0, 0.9)),
      done_record("subtype_sampled", 2, 0.74, recalls(0.8, 0.9, 1.0, 0.9)),
      done_record("diffusion@1.0", 1, 0.80, recalls(0.9, 0.9, 1.0, 1.0)),
      done_record("diffusion@1.0", 2, 0.76, recalls(0.9, 0.9, 1.0, 1.0)),
  };
  RunRecord failed;
  failed.run_id = "diffusion@1.0#3";
  failed.condition = "diffusion@1.0";
  failed.state = RunState::failed;
  recs.push_back(failed);
  const auto bundle = emit_report(recs, dir);
  for (const auto& p : {bundle.summary_txt, bundle.summary_json, bundle.boxplots_svg, bundle.confusion_svg})
    EXPECT_TRUE(fs::exists(p)) << p;
  const auto& conds = bundle.summary.at("conditions");
  ASSERT_EQ(conds.size(), 2u);
  const auto& diff = conds[1];
  EXPECT_EQ(diff.at("condition"), "diffusion@1.0");
  EXPECT_EQ(diff.at("dice_values").size(), 2u);
  EXPECT_NEAR(diff.at("delta_dice").get<double>(), 0.78 - 0.72, 1e-12);
  // Reference variance 0.005, method variance 0.0025.
  EXPECT_NEAR(diff.at("variance_change_pct").get<double>(), -50.0, 1e-9);
  EXPECT_NEAR(diff.at("variance_reduction_pct").get<double>(), 50.0, 1e-9);
  EXPECT_NEAR(conds[0].at("delta_dice").get<double>(), 0.0, 1e-15);

  const auto svg = file_text(bundle.boxplots_svg);
  const std::regex box("data-condition='diffusion@1.0' data-min='([^']+)' data-max='([^']+)'");
  std::smatch m;
  ASSERT_TRUE(std::regex_search(svg, m, box));
  EXPECT_NEAR(std::stod(m[1]), 0.76, 1e-6);
  EXPECT_NEAR(std::stod(m[2]), 0.80, 1e-6);
}

TEST(Report, SingleRecordHasZeroSpread) {
  const auto dir = fresh_dir("report_single");
  const auto bundle = emit_report({done_record("subtype_sampled", 1, 0.5, recalls(1, 0, 1, 0))}, dir);
  const auto& c = bundle.summary.at("conditions")[0];
  EXPECT_EQ(c.at("dice").at("std").get<double>(), 0.0);
  EXPECT_EQ(c.at("subtype_variance").at("mean").get<double>(), 0.25);
}

TEST(Report, NoCompletedRunsIsAnError) {
  RunRecord r;
  r.run_id = "x#1";
  r.state = RunState::running;
  EXPECT_THROW(emit_report({r}, fresh_dir("report_empty")), ValidationError);
}

TEST(Experiment, RerunIsIdempotentAndForceReproduces) {
  const auto dir = fresh_dir("experiment");
  Experiment first(tiny_spec(dir));
  const auto a = first.run_all();
  ASSERT_EQ(a.size(), 4u);
  for (const auto& r : a) ASSERT_EQ(r.state, RunState::done) << r.run_id << ": " << r.error;
  const auto ledger_before = file_text(dir / "out" / "ledger.jsonl");

  Experiment second(tiny_spec(dir));
  const auto b = second.run_all();
  EXPECT_EQ(file_text(dir / "out" / "ledger.jsonl"), ledger_before);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i].report->dice, a[i].report->dice);
  for (const auto& [run, state] : second.status()) EXPECT_EQ(state, RunState::done);

  const auto c = second.run_all({.force = true});
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(c[i].report->dice, a[i].report->dice) << a[i].run_id;
    EXPECT_EQ(c[i].report->recalls, a[i].report->recalls) << a[i].run_id;
  }
}
