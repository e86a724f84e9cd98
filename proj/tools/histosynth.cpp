#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "histosynth/annotation.hpp"
#include "histosynth/dataset.hpp"
#include "histosynth/diffusion.hpp"
#include "histosynth/error.hpp"
#include "histosynth/gan.hpp"
#include "histosynth/harness.hpp"
#include "histosynth/image_io.hpp"
#include "histosynth/log.hpp"
#include "histosynth/nn_common.hpp"
#include "histosynth/phantom.hpp"
#include "histosynth/rng.hpp"
#include "histosynth/segmentation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace histosynth;

namespace {

template <typename Config>
Config read_config(const std::string& path) {
  if (path.empty()) return Config{};
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open config " + path);
  return json::parse(in).get<Config>();
}

Dataset read_items(const fs::path& root, const std::string& split) {
  const auto manifest = load_manifest(root);
  if (split == "all") return load_all(root, manifest);
  return load_split(root, manifest, split_set_from_string(split));
}

void print_losses(std::int64_t step, const std::string& text) {
  std::printf("step %lld %s\n", static_cast<long long>(step), text.c_str());
}

bool report_every(std::int64_t step, std::size_t index, std::size_t total) {
  return index + 1 == total || step % 50 == 0;
}

struct PhantomArgs {
  std::string out;
  PhantomDatasetOptions options;
};

struct RasterizeArgs {
  std::string annotations, mask_out, instances_out;
  int width = 0, height = 0;
};

struct TrainArgs {
  std::string config, data, out, resume, autoencoder;
  std::string split = "train";
  std::uint64_t seed = 0;
  std::optional<int> steps;
};

struct GenerateArgs {
  std::string method, checkpoint, autoencoder, masks, out;
  std::string split = "train";
  std::optional<std::size_t> count;
  std::uint64_t seed = 0;
  int batch = 16;
  bool keep_subtypes = false;
  std::optional<int> sample_steps;
  bool ancestral = false;
};

struct SegArgs {
  std::string config, data, synthetic, out, encoder_out;
  std::string method = "diffusion";
  double ratio = 0.0;
  std::uint64_t seed = 0;
};

struct PredictArgs {
  std::string checkpoint, image, out, probabilities;
};

struct EvaluateArgs {
  std::string checkpoint, data, out;
  std::string split = "test";
  bool per_patch = false;
};

struct ExperimentArgs {
  std::string spec;
  bool force = false;
  int workers = 0;
  bool skip_report = false;
};

struct ReportArgs {
  std::string runs, out, reference;
  std::vector<std::string> confusion;
};

int run_phantom(const PhantomArgs& a) {
  const auto manifest = build_phantom_dataset(a.out, a.options);
  std::size_t patches = 0;
  for (const auto& s : manifest.slides) patches += s.patches.size();
  std::printf("wrote %zu slides, %zu patches to %s\n", manifest.slides.size(), patches, a.out.c_str());
  return 0;
}

int run_rasterize(const RasterizeArgs& a) {
  const auto doc = load_annotations(a.annotations);
  validate(doc, a.width, a.height);
  const auto r = rasterize_annotations(doc, a.width, a.height);
  write_png(a.mask_out, r.mask);
  if (!a.instances_out.empty()) write_png(a.instances_out, r.instances);
  return 0;
}

int run_train_gan(const TrainArgs& a) {
  auto cfg = read_config<gan::GanConfig>(a.config);
  if (a.steps) cfg.steps = *a.steps;
  const auto data = read_items(a.data, a.split);
  auto model = a.resume.empty() ? gan::GanModel::create(cfg, a.seed) : gan::GanModel::load(a.resume);
  const auto losses = model.train(data, cfg.steps);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const auto& l = losses[i];
    if (!report_every(l.step, i, losses.size())) continue;
    char buf[160];
    std::snprintf(buf, sizeof buf, "d=%.4f g=%.4f adv=%.4f fm=%.4f kl=%.4f", l.discriminator, l.generator,
                  l.adversarial, l.feature_matching, l.kl);
    print_losses(l.step, buf);
  }
  model.save(a.out);
  return 0;
}

int run_train_ae(const TrainArgs& a) {
  auto cfg = read_config<diffusion::AutoencoderConfig>(a.config);
  if (a.steps) cfg.steps = *a.steps;
  const auto data = read_items(a.data, a.split);
  auto model = a.resume.empty() ? diffusion::Autoencoder::create(cfg, a.seed) : diffusion::Autoencoder::load(a.resume);
  const auto losses = model.train(data, cfg.steps);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const auto& l = losses[i];
    if (!report_every(l.step, i, losses.size())) continue;
    char buf[128];
    std::snprintf(buf, sizeof buf, "rec=%.5f codebook=%.5f commit=%.5f", l.reconstruction, l.codebook, l.commitment);
    print_losses(l.step, buf);
  }
  model.calibrate_scale(data);
  model.save(a.out);
  std::printf("latent scale %.6f\n", model.scale());
  return 0;
}

int run_train_ldm(const TrainArgs& a) {
  auto cfg = read_config<diffusion::LdmConfig>(a.config);
  if (a.steps) cfg.steps = *a.steps;
  const auto data = read_items(a.data, a.split);
  auto ae = std::make_shared<diffusion::Autoencoder>(diffusion::Autoencoder::load(a.autoencoder));
  auto model = a.resume.empty() ? diffusion::LatentDiffusion::create(cfg, ae, a.seed)
                                : diffusion::LatentDiffusion::load(a.resume, ae);
  const auto losses = model.train(data, cfg.steps);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (!report_every(losses[i].step, i, losses.size())) continue;
    char buf[64];
    std::snprintf(buf, sizeof buf, "mse=%.5f", losses[i].mse);
    print_losses(losses[i].step, buf);
  }
  model.save(a.out);
  return 0;
}

int run_generate(const GenerateArgs& a, bool inpaint) {
  const auto method = gen_method_from_string(inpaint ? "inpaint" : a.method);
  if (inpaint && a.method != "diffusion") throw ValidationError("inpaint supports --method diffusion only");
  const auto sources = read_items(a.masks, a.split);
  harness::Generators gens;
  if (method == GenMethod::gan) {
    gens.gan = std::make_shared<gan::GanModel>(gan::GanModel::load(a.checkpoint));
  } else {
    if (a.autoencoder.empty()) throw ValidationError("--autoencoder is required for diffusion");
    auto ae = std::make_shared<diffusion::Autoencoder>(diffusion::Autoencoder::load(a.autoencoder));
    gens.diffusion = std::make_shared<diffusion::LatentDiffusion>(diffusion::LatentDiffusion::load(a.checkpoint, ae));
    if (a.ancestral) gens.diffusion->set_sampler(diffusion::SamplerKind::ancestral, 0);
    else if (a.sample_steps) gens.diffusion->set_sampler(diffusion::SamplerKind::strided, *a.sample_steps);
  }
  const auto count = a.count.value_or(sources.size());
  const auto items = harness::synthesize(method, sources, count, a.seed, gens, a.batch, !a.keep_subtypes);
  const int size = items.empty() ? 0 : items.front().patch.width();
  write_dataset(a.out, items, size);
  std::printf("wrote %zu %s patches to %s\n", items.size(), std::string(to_string(method)).c_str(), a.out.c_str());
  return 0;
}

int run_train_seg(const SegArgs& a) {
  auto cfg = read_config<seg::SegConfig>(a.config);
  const auto manifest = load_manifest(a.data);
  auto train = load_split(a.data, manifest, SplitSet::train);
  const auto val = load_split(a.data, manifest, SplitSet::val);
  if (!a.synthetic.empty() && a.ratio > 0) {
    const auto pool = load_all(a.synthetic, load_manifest(a.synthetic));
    train = mix_real_synthetic(train, pool, MixSpec{a.ratio, gen_method_from_string(a.method), derive_seed(a.seed, "mix")});
  }
  auto model = seg::train_segmenter(train, val, cfg, a.seed);
  for (const auto& e : model.history())
    std::printf("epoch %d train_loss=%.5f val_loss=%.5f val_dice=%.5f\n", e.epoch, e.train_loss, e.val_loss, e.val_dice);
  std::printf("best epoch %d\n", model.best_epoch());
  model.save(a.out);
  if (!a.encoder_out.empty()) seg::save_encoder_weights(model, a.encoder_out);
  return 0;
}

int run_predict(const PredictArgs& a) {
  auto model = seg::Segmenter::load(a.checkpoint);
  const auto pred = model.predict(read_rgb_png(a.image));
  BinaryMask visible(pred.binary.height(), pred.binary.width());
  for (int y = 0; y < visible.height(); ++y)
    for (int x = 0; x < visible.width(); ++x) visible(y, x) = pred.binary(y, x) ? 255 : 0;
  write_png(a.out, visible);
  if (!a.probabilities.empty()) {
    BinaryMask prob(visible.height(), visible.width());
    for (int y = 0; y < prob.height(); ++y)
      for (int x = 0; x < prob.width(); ++x)
        prob(y, x) = static_cast<std::uint8_t>(std::lround(255.0 * pred.probabilities(y, x)));
    write_png(a.probabilities, prob);
  }
  return 0;
}

int run_evaluate(const EvaluateArgs& a) {
  auto model = seg::Segmenter::load(a.checkpoint);
  EvalOptions opts;
  opts.per_patch = a.per_patch;
  const auto report = model.evaluate(read_items(a.data, a.split), opts);
  const auto text = json(report).dump(2);
  if (a.out.empty()) std::puts(text.c_str());
  else std::ofstream(a.out) << text << '\n';
  return 0;
}

int run_experiment(const ExperimentArgs& a) {
  harness::Experiment exp(harness::load_spec(a.spec));
  const auto records = exp.run_all({a.force, a.workers});
  int failed = 0;
  for (const auto& r : records) {
    if (r.state != harness::RunState::done) ++failed;
    std::printf("%-24s %-8s dice=%s\n", r.run_id.c_str(), harness::to_string(r.state).c_str(),
                r.report ? std::to_string(r.report->dice).c_str() : "-");
  }
  if (!a.skip_report) {
    harness::ReportOptions opts;
    opts.confusion_conditions = exp.spec().confusion_conditions;
    const auto bundle = harness::emit_report(exp.ledger().latest(), fs::path(exp.spec().output_dir) / "report", opts);
    std::printf("report: %s\n", bundle.summary_txt.string().c_str());
  }
  return failed == 0 ? 0 : 1;
}

int run_status(const ExperimentArgs& a) {
  harness::Experiment exp(harness::load_spec(a.spec));
  std::map<harness::RunState, int> counts;
  for (const auto& [run, state] : exp.status()) {
    ++counts[state];
    std::printf("%-24s %s\n", run.run_id().c_str(), harness::to_string(state).c_str());
  }
  std::printf("pending %d, running %d, done %d, failed %d\n", counts[harness::RunState::pending],
              counts[harness::RunState::running], counts[harness::RunState::done], counts[harness::RunState::failed]);
  return 0;
}

int run_report(const ReportArgs& a) {
  const fs::path runs(a.runs);
  const auto ledger_path = fs::is_directory(runs) ? runs / "ledger.jsonl" : runs;
  if (!fs::exists(ledger_path)) throw ResourceError("no ledger at " + ledger_path.string());
  harness::Ledger ledger(ledger_path);
  harness::ReportOptions opts{a.reference, a.confusion};
  const fs::path out = a.out.empty() ? ledger_path.parent_path() / "report" : fs::path(a.out);
  const auto bundle = harness::emit_report(ledger.latest(), out, opts);
  std::ifstream in(bundle.summary_txt);
  std::cout << in.rdbuf();
  return 0;
}

void add_train_options(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config, "JSON config; missing fields take defaults");
  cmd->add_option("--data", a.data, "dataset root")->required();
  cmd->add_option("--split", a.split, "train, val, test or all");
  cmd->add_option("--out", a.out, "checkpoint to write")->required();
  cmd->add_option("--seed", a.seed);
  cmd->add_option("--steps", a.steps, "overrides config steps");
  cmd->add_option("--resume", a.resume, "continue from this checkpoint");
}

void add_generate_options(CLI::App* cmd, GenerateArgs& a, const std::string& source_help) {
  cmd->add_option("--method", a.method)->required();
  cmd->add_option("--checkpoint", a.checkpoint)->required();
  cmd->add_option("--autoencoder", a.autoencoder, "autoencoder checkpoint for diffusion");
  cmd->add_option("--masks,--data", a.masks, source_help)->required();
  cmd->add_option("--split", a.split, "train, val, test or all");
  cmd->add_option("--out", a.out, "dataset root to write")->required();
  cmd->add_option("--count", a.count, "items to generate; defaults to one per source");
  cmd->add_option("--seed", a.seed);
  cmd->add_option("--batch", a.batch);
  cmd->add_flag("--keep-subtypes", a.keep_subtypes, "use source masks without redrawing subtypes");
  cmd->add_option("--sample-steps", a.sample_steps, "strided diffusion sampling steps");
  cmd->add_flag("--ancestral", a.ancestral, "sample every diffusion step");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subtype-balanced synthetic data for tumor segmentation"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "torch threads; 1 keeps results bit-reproducible");

  PhantomArgs phantom;
  auto* c_phantom = app.add_subcommand("phantom", "build a procedural dataset root");
  c_phantom->add_option("--out", phantom.out)->required();
  c_phantom->add_option("--slides", phantom.options.slides);
  c_phantom->add_option("--train", phantom.options.counts.train);
  c_phantom->add_option("--val", phantom.options.counts.val);
  c_phantom->add_option("--test", phantom.options.counts.test);
  c_phantom->add_option("--slide-size", phantom.options.slide_size);
  c_phantom->add_option("--patch", phantom.options.patch_size);
  c_phantom->add_option("--stride", phantom.options.stride);
  c_phantom->add_option("--instances", phantom.options.instances_per_slide);
  c_phantom->add_option("--seed", phantom.options.seed);

  RasterizeArgs raster;
  auto* c_raster = app.add_subcommand("rasterize", "rasterize an annotation file");
  c_raster->add_option("--annotations", raster.annotations)->required();
  c_raster->add_option("--width", raster.width)->required();
  c_raster->add_option("--height", raster.height)->required();
  c_raster->add_option("--mask", raster.mask_out)->required();
  c_raster->add_option("--instances", raster.instances_out);

  TrainArgs gan_args, ae_args, ldm_args;
  auto* c_gan = app.add_subcommand("train-gan", "train the mask-conditioned GAN");
  add_train_options(c_gan, gan_args);
  auto* c_ae = app.add_subcommand("train-ldm-ae", "train the latent autoencoder");
  add_train_options(c_ae, ae_args);
  auto* c_ldm = app.add_subcommand("train-ldm", "train the latent diffusion model");
  add_train_options(c_ldm, ldm_args);
  c_ldm->add_option("--autoencoder", ldm_args.autoencoder)->required();

  GenerateArgs gen_args, inpaint_args;
  auto* c_gen = app.add_subcommand("generate", "synthesize patches from masks");
  add_generate_options(c_gen, gen_args, "dataset root whose masks condition generation");
  auto* c_inpaint = app.add_subcommand("inpaint", "re-synthesize tumor regions of real patches");
  add_generate_options(c_inpaint, inpaint_args, "dataset root of patches to inpaint");

  SegArgs seg_args;
  auto* c_seg = app.add_subcommand("train-seg", "train the tumor segmenter");
  c_seg->add_option("--config", seg_args.config);
  c_seg->add_option("--data", seg_args.data)->required();
  c_seg->add_option("--synthetic", seg_args.synthetic, "synthetic pool dataset root");
  c_seg->add_option("--ratio", seg_args.ratio, "synthetic items per real item");
  c_seg->add_option("--method", seg_args.method, "method label of the pool");
  c_seg->add_option("--out", seg_args.out)->required();
  c_seg->add_option("--encoder-out", seg_args.encoder_out, "also write encoder weights");
  c_seg->add_option("--seed", seg_args.seed);

  PredictArgs predict;
  auto* c_predict = app.add_subcommand("predict", "segment one RGB PNG");
  c_predict->add_option("--checkpoint", predict.checkpoint)->required();
  c_predict->add_option("--image", predict.image)->required();
  c_predict->add_option("--out", predict.out, "binary mask PNG, 0/255")->required();
  c_predict->add_option("--probabilities", predict.probabilities, "probability map PNG, 0..255");

  EvaluateArgs eval;
  auto* c_eval = app.add_subcommand("evaluate", "score a segmenter on a split");
  c_eval->add_option("--checkpoint", eval.checkpoint)->required();
  c_eval->add_option("--data", eval.data)->required();
  c_eval->add_option("--split", eval.split);
  c_eval->add_flag("--per-patch", eval.per_patch);
  c_eval->add_option("--out", eval.out, "JSON report; stdout when omitted");

  ExperimentArgs exp_args;
  auto* c_exp = app.add_subcommand("experiment", "run or inspect an experiment matrix");
  c_exp->require_subcommand(1);
  auto* c_run = c_exp->add_subcommand("run");
  c_run->add_option("--spec", exp_args.spec)->required();
  c_run->add_flag("--force", exp_args.force, "re-run finished runs");
  c_run->add_option("--workers", exp_args.workers);
  c_run->add_flag("--no-report", exp_args.skip_report);
  auto* c_status = c_exp->add_subcommand("status");
  c_status->add_option("--spec", exp_args.spec)->required();

  ReportArgs report;
  auto* c_report = app.add_subcommand("report", "summarize finished runs");
  c_report->add_option("--runs", report.runs, "experiment output directory or ledger file")->required();
  c_report->add_option("--out", report.out);
  c_report->add_option("--reference", report.reference);
  c_report->add_option("--confusion", report.confusion)->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  if (threads == 1) nn::use_single_thread();
  else torch::set_num_threads(threads);

  try {
    if (*c_phantom) return run_phantom(phantom);
    if (*c_raster) return run_rasterize(raster);
    if (*c_gan) return run_train_gan(gan_args);
    if (*c_ae) return run_train_ae(ae_args);
    if (*c_ldm) return run_train_ldm(ldm_args);
    if (*c_gen) return run_generate(gen_args, false);
    if (*c_inpaint) return run_generate(inpaint_args, true);
    if (*c_seg) return run_train_seg(seg_args);
    if (*c_predict) return run_predict(predict);
    if (*c_eval) return run_evaluate(eval);
    if (*c_run) return run_experiment(exp_args);
    if (*c_status) return run_status(exp_args);
    if (*c_report) return run_report(report);
  } catch (const std::exception& e) {
    log::error(e.what());
    return 2;
  }
  return 0;
}
