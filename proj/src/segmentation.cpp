#include "histosynth/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "histosynth/error.hpp"
#include "histosynth/log.hpp"

namespace histosynth::seg {

namespace F = torch::nn::functional;
using nlohmann::json;

void SegConfig::validate() const {
  if (image_size < 1 || image_size % (1 << encoder_depth) != 0)
    throw ValidationError("SegConfig: image_size must be divisible by 2^encoder_depth");
  if (encoder_depth < 1 || encoder_depth > 4) throw ValidationError("SegConfig: encoder_depth must lie in [1, 4]");
  if (static_cast<int>(blocks_per_stage.size()) < encoder_depth)
    throw ValidationError("SegConfig: blocks_per_stage needs one entry per encoder stage");
  for (int b : blocks_per_stage)
    if (b < 1) throw ValidationError("SegConfig: blocks_per_stage entries must be positive");
  if (base_channels < 2 || batch_size < 1 || epochs < 0 || steps_per_epoch < 0)
    throw ValidationError("SegConfig: sizes must be positive");
  if (!(learning_rate >= 0)) throw ValidationError("SegConfig: learning_rate must be non-negative");
  if (lambda_dice < 0 || lambda_ce < 0 || std::abs(lambda_dice + lambda_ce - 1.0) > 1e-9)
    throw ValidationError("SegConfig: lambda_dice + lambda_ce must equal 1");
  if (!(threshold > 0 && threshold < 1)) throw ValidationError("SegConfig: threshold must lie in (0, 1)");
  if (use_pretrained_encoder && pretrained_encoder_path.empty())
    throw ValidationError("SegConfig: use_pretrained_encoder needs pretrained_encoder_path");
}

void to_json(json& j, const SegConfig& c) {
  j = {{"image_size", c.image_size},
       {"encoder_depth", c.encoder_depth},
       {"blocks_per_stage", c.blocks_per_stage},
       {"base_channels", c.base_channels},
       {"use_pretrained_encoder", c.use_pretrained_encoder},
       {"pretrained_encoder_path", c.pretrained_encoder_path},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"steps_per_epoch", c.steps_per_epoch},
       {"lambda_dice", c.lambda_dice},
       {"lambda_ce", c.lambda_ce},
       {"threshold", c.threshold},
       {"sampling",
        {{"kind", to_string(c.sampling.kind)},
         {"seed", c.sampling.seed},
         {"background_fraction", c.sampling.background_fraction}}},
       {"snapshot_dir", c.snapshot_dir}};
}

void from_json(const json& j, SegConfig& c) {
  const SegConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.encoder_depth = j.value("encoder_depth", d.encoder_depth);
  c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.use_pretrained_encoder = j.value("use_pretrained_encoder", d.use_pretrained_encoder);
  c.pretrained_encoder_path = j.value("pretrained_encoder_path", d.pretrained_encoder_path);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
  c.lambda_dice = j.value("lambda_dice", d.lambda_dice);
  c.lambda_ce = j.value("lambda_ce", d.lambda_ce);
  c.threshold = j.value("threshold", d.threshold);
  if (j.contains("sampling")) {
    const auto& s = j.at("sampling");
    c.sampling.kind = sampling_kind_from_string(s.value("kind", to_string(d.sampling.kind)));
    c.sampling.seed = s.value("seed", d.sampling.seed);
    c.sampling.background_fraction = s.value("background_fraction", d.sampling.background_fraction);
  }
  c.snapshot_dir = j.value("snapshot_dir", d.snapshot_dir);
  c.validate();
}

torch::Tensor dice_ce_loss(const torch::Tensor& p, const torch::Tensor& y, double lambda_dice, double lambda_ce) {
  if (!p.sizes().equals(y.sizes())) throw ValidationError("dice_ce_loss: probability and target shapes differ");
  {
    torch::NoGradGuard g;
    if (!torch::logical_or(y == 0, y == 1).all().item<bool>())
      throw ValidationError("dice_ce_loss: target is not binary");
    if (!torch::logical_and(p >= 0, p <= 1).all().item<bool>())
      throw ValidationError("dice_ce_loss: probabilities outside [0, 1]");
  }
  const auto yt = y.to(p.scalar_type());
  const auto soft_dice = (2.0 * (p * yt).sum() + 1.0) / (p.sum() + yt.sum() + 1.0);
  const auto pc = p.clamp(1e-7, 1.0 - 1e-7);
  const auto bce = -(yt * torch::log(pc) + (1.0 - yt) * torch::log(1.0 - pc)).mean();
  return lambda_dice * (1.0 - soft_dice) + lambda_ce * bce;
}

namespace {

torch::nn::GroupNorm group_norm(int channels) {
  int g = 8;
  while (channels % g != 0) g /= 2;
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(g, channels));
}

torch::nn::Conv2d conv3(int in, int out, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

}  // namespace

BasicBlockImpl::BasicBlockImpl(int in, int out, int stride) {
  conv1_ = register_module("conv1", conv3(in, out, stride));
  norm1_ = register_module("norm1", group_norm(out));
  conv2_ = register_module("conv2", conv3(out, out));
  norm2_ = register_module("norm2", group_norm(out));
  if (stride != 1 || in != out) {
    down_ = register_module("down", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
    down_norm_ = register_module("down_norm", group_norm(out));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(norm1_(conv1_(x)));
  h = norm2_(conv2_(h));
  return torch::relu(h + (down_ ? down_norm_(down_(x)) : x));
}

ResidualEncoderImpl::ResidualEncoderImpl(const SegConfig& cfg) {
  const int b = cfg.base_channels;
  stem_ = register_module("stem", torch::nn::Sequential(conv3(3, b), group_norm(b), torch::nn::ReLU()));
  channels_.push_back(b);
  int cur = b;
  for (int s = 0; s < cfg.encoder_depth; ++s) {
    const int out = b * (1 << s);
    torch::nn::Sequential stage;
    for (int k = 0; k < cfg.blocks_per_stage[static_cast<std::size_t>(s)]; ++k) {
      stage->push_back(BasicBlock(cur, out, k == 0 ? 2 : 1));
      cur = out;
    }
    stages_->push_back(stage);
    channels_.push_back(out);
  }
  register_module("stages", stages_);
}

std::vector<torch::Tensor> ResidualEncoderImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> features{stem_->forward(x)};
  for (const auto& stage : *stages_) features.push_back(stage->as<torch::nn::Sequential>()->forward(features.back()));
  return features;
}

UNetImpl::UNetImpl(const SegConfig& cfg) {
  encoder_ = register_module("encoder", ResidualEncoder(cfg));
  const auto ch = encoder_->channels();
  int cur = ch.back();
  for (int i = static_cast<int>(ch.size()) - 2; i >= 0; --i) {
    const int skip = ch[static_cast<std::size_t>(i)];
    decoder_->push_back(torch::nn::Sequential(conv3(cur + skip, skip), group_norm(skip), torch::nn::ReLU(),
                                              conv3(skip, skip), group_norm(skip), torch::nn::ReLU()));
    cur = skip;
  }
  register_module("decoder", decoder_);
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(cur, 1, 1)));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& images) {
  auto features = encoder_->forward(images);
  auto h = features.back();
  for (std::size_t i = 0; i < decoder_->size(); ++i) {
    const auto& skip = features[features.size() - 2 - i];
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    h = decoder_[i]->as<torch::nn::Sequential>()->forward(torch::cat({h, skip}, 1));
  }
  return head_(h);
}

Segmenter Segmenter::create(const SegConfig& config, std::uint64_t seed) {
  config.validate();
  Segmenter s;
  s.config_ = config;
  s.net_ = nn::seeded_init(seed, [&] { return UNet(config); });
  if (config.use_pretrained_encoder) {
    auto archive = nn::open_archive(config.pretrained_encoder_path);
    nn::read_header(archive, "encoder");
    nn::read_module(archive, "encoder", *s.net_->encoder());
  }
  return s;
}

void Segmenter::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  nn::write_header(archive, {"segmenter", nn::kCheckpointVersion, json(config_), step_, ""});
  json hist = json::array();
  for (const auto& e : history_)
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_dice", e.val_dice}});
  const std::string text = json{{"best_epoch", best_epoch_}, {"history", hist}}.dump();
  archive.write("training", torch::tensor(std::vector<std::int64_t>(text.begin(), text.end())), true);
  nn::write_module(archive, "unet", *net_);
  nn::save_archive(archive, path);
}

Segmenter Segmenter::load(const std::filesystem::path& path) {
  auto archive = nn::open_archive(path);
  const auto header = nn::read_header(archive, "segmenter");
  auto config = header.config.get<SegConfig>();
  config.use_pretrained_encoder = false;  // weights come from the checkpoint
  Segmenter s = create(config, 0);
  s.config_ = header.config.get<SegConfig>();
  s.step_ = header.step;
  torch::Tensor t;
  archive.read("training", t, true);
  std::string text;
  for (std::int64_t i = 0; i < t.numel(); ++i) text.push_back(static_cast<char>(t[i].item<std::int64_t>()));
  const auto training = json::parse(text);
  s.best_epoch_ = training.at("best_epoch").get<int>();
  for (const auto& e : training.at("history"))
    s.history_.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("val_loss").get<double>(),
                          e.at("val_dice").get<double>()});
  nn::read_module(archive, "unet", *s.net_);
  return s;
}

std::vector<BinaryPrediction> Segmenter::predict_batch(const std::vector<RgbImage>& images) {
  std::vector<torch::Tensor> xs;
  for (const auto& img : images) {
    if (img.height() != config_.image_size || img.width() != config_.image_size)
      throw ValidationError("predict: image is " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                            " but the model was trained at " + std::to_string(config_.image_size) + "x" +
                            std::to_string(config_.image_size));
    xs.push_back(nn::image_to_tensor(img));
  }
  std::vector<BinaryPrediction> out;
  if (xs.empty()) return out;
  torch::NoGradGuard g;
  net_->eval();
  const auto probs = torch::sigmoid(net_->forward(torch::stack(xs))).squeeze(1).contiguous();
  const int h = config_.image_size, w = config_.image_size;
  for (std::int64_t i = 0; i < probs.size(0); ++i) {
    BinaryPrediction p{Grid<float>(h, w, 0.0f), BinaryMask(h, w, 0)};
    const float* src = probs[i].data_ptr<float>();
    for (std::size_t k = 0; k < p.probabilities.size(); ++k) {
      p.probabilities[k] = src[k];
      p.binary[k] = src[k] > config_.threshold ? 1 : 0;
    }
    out.push_back(std::move(p));
  }
  return out;
}

BinaryPrediction Segmenter::predict(const RgbImage& image) { return predict_batch({image}).front(); }

EvalReport Segmenter::evaluate(const Dataset& data, const EvalOptions& options) {
  EvalAccumulator acc(options);
  for (std::size_t i = 0; i < data.size(); i += 32) {
    std::vector<RgbImage> images;
    for (std::size_t k = i; k < std::min(data.size(), i + 32); ++k) images.push_back(data[k].patch.image);
    const auto preds = predict_batch(images);
    for (std::size_t k = 0; k < preds.size(); ++k) acc.add(preds[k].binary, data[i + k].patch.mask);
  }
  return acc.report();
}

namespace {

std::pair<torch::Tensor, torch::Tensor> stack_items(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<torch::Tensor> xs, ys;
  for (auto i : idx) {
    xs.push_back(nn::image_to_tensor(data[i].patch.image));
    ys.push_back(nn::tumor_tensor(data[i].patch.mask).unsqueeze(0));
  }
  return {torch::stack(xs), torch::stack(ys)};
}

// Mean loss and pooled Dice over `data` with the current weights.
std::pair<double, double> score(UNet& net, const Dataset& data, const SegConfig& cfg) {
  torch::NoGradGuard g;
  net->eval();
  double loss = 0;
  std::int64_t inter = 0, sum = 0;
  std::size_t batches = 0;
  for (std::size_t i = 0; i < data.size(); i += 32) {
    std::vector<std::size_t> idx;
    for (std::size_t k = i; k < std::min(data.size(), i + 32); ++k) idx.push_back(k);
    auto [x, y] = stack_items(data, idx);
    const auto p = torch::sigmoid(net->forward(x));
    loss += dice_ce_loss(p, y, cfg.lambda_dice, cfg.lambda_ce).item<double>();
    const auto b = (p > cfg.threshold).to(torch::kInt64);
    const auto yi = y.to(torch::kInt64);
    inter += (b * yi).sum().item<std::int64_t>();
    sum += b.sum().item<std::int64_t>() + yi.sum().item<std::int64_t>();
    ++batches;
  }
  net->train();
  const double dice = sum == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sum);
  return {loss / static_cast<double>(batches), dice};
}

}  // namespace

Segmenter train_segmenter(const Dataset& train, const Dataset& val, const SegConfig& config, std::uint64_t seed) {
  if (train.empty()) throw ValidationError("train_segmenter: empty dataset");
  for (const auto* set : {&train, &val})
    for (const auto& item : *set)
      if (item.patch.height() != config.image_size || item.patch.width() != config.image_size)
        throw ValidationError("train_segmenter: patch " + item.id + " does not match image_size");
  Segmenter s = Segmenter::create(config, seed);
  if (val.empty()) log::warn("train_segmenter: no validation data; keeping the last epoch");

  auto strategy = config.sampling;
  strategy.seed = derive_seed(seed, "seg/sampler");
  TrainingSampler sampler(class_histograms(train), strategy);
  torch::optim::Adam opt(s.net_->parameters(), torch::optim::AdamOptions(config.learning_rate));
  const int steps = config.steps_per_epoch > 0
                        ? config.steps_per_epoch
                        : static_cast<int>((train.size() + config.batch_size - 1) / config.batch_size);

  double best_dice = -1;
  std::ostringstream best_weights;
  s.net_->train();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0;
    for (int k = 0; k < steps; ++k) {
      std::vector<std::size_t> idx;
      for (int b = 0; b < config.batch_size; ++b) idx.push_back(sampler.next());
      auto [x, y] = stack_items(train, idx);
      opt.zero_grad();
      const auto loss = dice_ce_loss(torch::sigmoid(s.net_->forward(x)), y, config.lambda_dice, config.lambda_ce);
      const double v = loss.item<double>();
      nn::check_finite("train_segmenter", s.step_, {{"dice_ce", v}}, x, y, config.snapshot_dir);
      loss.backward();
      opt.step();
      total += v;
      ++s.step_;
    }
    EpochRecord rec{epoch, total / steps, 0.0, 0.0};
    if (!val.empty()) std::tie(rec.val_loss, rec.val_dice) = score(s.net_, val, config);
    s.history_.push_back(rec);
    if (val.empty() || rec.val_dice > best_dice) {
      best_dice = rec.val_dice;
      s.best_epoch_ = epoch;
      torch::serialize::OutputArchive a;
      s.net_->save(a);
      best_weights.str({});
      a.save_to(best_weights);
    }
  }
  if (s.best_epoch_ >= 0) {
    std::istringstream in(best_weights.str());
    torch::serialize::InputArchive a;
    a.load_from(in);
    s.net_->load(a);
  }
  return s;
}

void save_encoder_weights(Segmenter& model, const std::filesystem::path& path) {
  torch::serialize::OutputArchive archive;
  nn::write_header(archive, {"encoder", nn::kCheckpointVersion, json(model.config()), model.step(), ""});
  nn::write_module(archive, "encoder", *model.network()->encoder());
  nn::save_archive(archive, path);
}

}  // namespace histosynth::seg
