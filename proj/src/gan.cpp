#include "histosynth/gan.hpp"

#include <cmath>

#include "histosynth/error.hpp"

namespace histosynth::gan {

namespace F = torch::nn::functional;
using nlohmann::json;

void GanConfig::validate() const {
  if (image_size < 16 || image_size % 16 != 0 || (image_size & (image_size - 1)) != 0)
    throw ValidationError("GanConfig: image_size must be a power-of-two multiple of 16");
  if (base_channels < 2 || style_dim < 1 || spade_hidden < 1 || num_discriminators < 1 || batch_size < 1)
    throw ValidationError("GanConfig: sizes must be positive");
  if (spade_kernel < 1 || spade_kernel % 2 == 0) throw ValidationError("GanConfig: spade_kernel must be odd");
  if (!(learning_rate >= 0)) throw ValidationError("GanConfig: learning_rate must be non-negative");
  if (weights.adversarial < 0 || weights.feature_matching < 0 || weights.kl < 0)
    throw ValidationError("GanConfig: loss weights must be non-negative");
  if (steps < 0) throw ValidationError("GanConfig: steps must be non-negative");
}

void to_json(json& j, const GanConfig& c) {
  j = {{"image_size", c.image_size},
       {"base_channels", c.base_channels},
       {"style_dim", c.style_dim},
       {"spade_hidden", c.spade_hidden},
       {"spade_kernel", c.spade_kernel},
       {"num_discriminators", c.num_discriminators},
       {"learning_rate", c.learning_rate},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"loss_weights",
        {{"adversarial", c.weights.adversarial},
         {"feature_matching", c.weights.feature_matching},
         {"kl", c.weights.kl}}},
       {"snapshot_dir", c.snapshot_dir}};
}

void from_json(const json& j, GanConfig& c) {
  const GanConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.style_dim = j.value("style_dim", d.style_dim);
  c.spade_hidden = j.value("spade_hidden", d.spade_hidden);
  c.spade_kernel = j.value("spade_kernel", d.spade_kernel);
  c.num_discriminators = j.value("num_discriminators", d.num_discriminators);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.adversarial = w.value("adversarial", d.weights.adversarial);
    c.weights.feature_matching = w.value("feature_matching", d.weights.feature_matching);
    c.weights.kl = w.value("kl", d.weights.kl);
  }
  c.snapshot_dir = j.value("snapshot_dir", d.snapshot_dir);
  c.validate();
}

torch::Tensor normalize_activations(const torch::Tensor& x, double eps) {
  const auto mean = x.mean({2, 3}, /*keepdim=*/true);
  // A constant channel gives exactly 0, not the rounding residue of x - mean.
  const auto constant = x.amax({2, 3}, true) == x.amin({2, 3}, true);
  const auto centered = torch::where(constant, torch::zeros_like(x), x - mean);
  const auto var = centered.pow(2).mean({2, 3}, /*keepdim=*/true);
  return centered / torch::sqrt(var + eps);
}

SpadeNormImpl::SpadeNormImpl(int channels, int label_channels, int hidden, int kernel) {
  const int pad = kernel / 2;
  shared = register_module("shared", torch::nn::Conv2d(torch::nn::Conv2dOptions(label_channels, hidden, kernel).padding(pad)));
  gamma = register_module("gamma", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, channels, kernel).padding(pad)));
  beta = register_module("beta", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, channels, kernel).padding(pad)));
  // Start close to the identity modulation.
  torch::NoGradGuard guard;
  gamma->weight.mul_(0.1);
  gamma->bias.fill_(1.0);
  beta->weight.mul_(0.1);
  beta->bias.zero_();
}

std::pair<torch::Tensor, torch::Tensor> SpadeNormImpl::modulation(const torch::Tensor& mask) {
  const auto h = torch::relu(shared(mask));
  return {gamma(h), beta(h)};
}

torch::Tensor SpadeNormImpl::forward(const torch::Tensor& x, const torch::Tensor& mask) {
  torch::Tensor m = mask;
  if (m.size(2) != x.size(2) || m.size(3) != x.size(3))
    m = F::interpolate(mask, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{x.size(2), x.size(3)})
                                 .mode(torch::kNearest));
  auto [g, b] = modulation(m);
  return normalize_activations(x) * g + b;
}

torch::Tensor spade_modulation(const torch::Tensor& activations, const torch::Tensor& mask, SpadeNorm& norm) {
  const bool batched = activations.dim() == 4;
  if (!(activations.dim() == 3 || batched) || mask.dim() != activations.dim())
    throw ValidationError("spade_modulation: expected [C,h,w] activations and [K,h,w] mask");
  const auto x = batched ? activations : activations.unsqueeze(0);
  const auto m = batched ? mask : mask.unsqueeze(0);
  if (x.size(0) != m.size(0) || x.size(2) != m.size(2) || x.size(3) != m.size(3))
    throw ValidationError("spade_modulation: activation and mask shapes differ");
  if (m.size(1) != norm->shared->options.in_channels())
    throw ValidationError("spade_modulation: mask channel count does not match the modulation head");
  if (x.size(1) != norm->gamma->options.out_channels())
    throw ValidationError("spade_modulation: activation channel count does not match the modulation head");
  const auto y = norm->forward(x, m);
  return batched ? y : y.squeeze(0);
}

SpadeResBlockImpl::SpadeResBlockImpl(int fin, int fout, const GanConfig& cfg) : learned_shortcut_(fin != fout) {
  const int fmid = std::min(fin, fout);
  const auto conv3 = [](int i, int o) { return torch::nn::Conv2d(torch::nn::Conv2dOptions(i, o, 3).padding(1)); };
  norm0_ = register_module("norm0", SpadeNorm(fin, kNumClasses, cfg.spade_hidden, cfg.spade_kernel));
  conv0_ = register_module("conv0", conv3(fin, fmid));
  norm1_ = register_module("norm1", SpadeNorm(fmid, kNumClasses, cfg.spade_hidden, cfg.spade_kernel));
  conv1_ = register_module("conv1", conv3(fmid, fout));
  if (learned_shortcut_) {
    norm_s_ = register_module("norm_s", SpadeNorm(fin, kNumClasses, cfg.spade_hidden, cfg.spade_kernel));
    conv_s_ = register_module("conv_s", torch::nn::Conv2d(torch::nn::Conv2dOptions(fin, fout, 1).bias(false)));
  }
}

torch::Tensor SpadeResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& mask) {
  const auto skip = learned_shortcut_ ? conv_s_(norm_s_(x, mask)) : x;
  auto dx = conv0_(F::leaky_relu(norm0_(x, mask), F::LeakyReLUFuncOptions().negative_slope(0.2)));
  dx = conv1_(F::leaky_relu(norm1_(dx, mask), F::LeakyReLUFuncOptions().negative_slope(0.2)));
  return skip + dx;
}

namespace {

int generator_channels(const GanConfig& c, int level) {
  return std::max(c.base_channels / 2, (c.base_channels * 4) >> std::max(0, level - 1));
}

int upsampling_stages(const GanConfig& c) { return static_cast<int>(std::log2(c.image_size / 4)); }

}  // namespace

SpadeGeneratorImpl::SpadeGeneratorImpl(const GanConfig& cfg)
    : start_size_(4), start_channels_(generator_channels(cfg, 0)) {
  fc_ = register_module("fc", torch::nn::Linear(cfg.style_dim, start_channels_ * start_size_ * start_size_));
  const int stages = upsampling_stages(cfg);
  for (int level = 0; level <= stages; ++level) {
    const int fin = generator_channels(cfg, std::max(0, level - 1));
    blocks_->push_back(SpadeResBlock(level == 0 ? start_channels_ : fin, generator_channels(cfg, level), cfg));
  }
  register_module("blocks", blocks_);
  to_rgb_ = register_module(
      "to_rgb", torch::nn::Conv2d(torch::nn::Conv2dOptions(generator_channels(cfg, stages), 3, 3).padding(1)));
}

torch::Tensor SpadeGeneratorImpl::forward(const torch::Tensor& style, const torch::Tensor& mask) {
  auto x = fc_(style).view({style.size(0), start_channels_, start_size_, start_size_});
  for (std::size_t i = 0; i < blocks_->size(); ++i) {
    if (i > 0) x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2, 2}).mode(torch::kNearest));
    x = blocks_[i]->as<SpadeResBlock>()->forward(x, mask);
  }
  return torch::tanh(to_rgb_(F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2))));
}

StyleEncoderImpl::StyleEncoderImpl(const GanConfig& cfg) {
  const int b = cfg.base_channels;
  torch::nn::Sequential seq;
  int in = 3;
  for (int out : {b, 2 * b, 4 * b, 4 * b}) {
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)));
    seq->push_back(torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(out).affine(true)));
    seq->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    in = out;
  }
  seq->push_back(torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions({4, 4})));
  features_ = register_module("features", seq);
  mu_ = register_module("mu", torch::nn::Linear(4 * b * 16, cfg.style_dim));
  logvar_ = register_module("logvar", torch::nn::Linear(4 * b * 16, cfg.style_dim));
}

std::pair<torch::Tensor, torch::Tensor> StyleEncoderImpl::forward(const torch::Tensor& image) {
  const auto h = features_->forward(image).flatten(1);
  return {mu_(h), logvar_(h)};
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const GanConfig& cfg) {
  const int b = cfg.base_channels;
  const auto conv = [](int i, int o, int stride) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(i, o, 4).stride(stride).padding(2));
  };
  const auto lrelu = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  layers_->push_back(torch::nn::Sequential(conv(3 + kNumClasses, b, 2), lrelu()));
  layers_->push_back(torch::nn::Sequential(conv(b, 2 * b, 2), torch::nn::InstanceNorm2d(2 * b), lrelu()));
  layers_->push_back(torch::nn::Sequential(conv(2 * b, 4 * b, 1), torch::nn::InstanceNorm2d(4 * b), lrelu()));
  layers_->push_back(torch::nn::Sequential(conv(4 * b, 1, 1)));
  register_module("layers", layers_);
}

std::vector<torch::Tensor> PatchDiscriminatorImpl::forward(const torch::Tensor& input) {
  std::vector<torch::Tensor> features;
  auto x = input;
  for (const auto& layer : *layers_) {
    x = layer->as<torch::nn::Sequential>()->forward(x);
    features.push_back(x);
  }
  return features;
}

MultiscaleDiscriminatorImpl::MultiscaleDiscriminatorImpl(const GanConfig& cfg) {
  for (int i = 0; i < cfg.num_discriminators; ++i) discriminators_->push_back(PatchDiscriminator(cfg));
  register_module("discriminators", discriminators_);
}

std::vector<std::vector<torch::Tensor>> MultiscaleDiscriminatorImpl::forward(torch::Tensor input) {
  std::vector<std::vector<torch::Tensor>> out;
  for (std::size_t i = 0; i < discriminators_->size(); ++i) {
    if (i > 0)
      input = F::avg_pool2d(input, F::AvgPool2dFuncOptions(3).stride(2).padding(1).count_include_pad(false));
    out.push_back(discriminators_[i]->as<PatchDiscriminator>()->forward(input));
  }
  return out;
}

GanModel GanModel::create(const GanConfig& config, std::uint64_t seed) {
  config.validate();
  GanModel m;
  m.config_ = config;
  m.data_rng_ = Rng(derive_seed(seed, "gan/data"));
  m.noise_ = nn::make_generator(derive_seed(seed, "gan/noise"));
  nn::seeded_init(seed, [&] {
    m.generator_ = SpadeGenerator(config);
    m.encoder_ = StyleEncoder(config);
    m.discriminator_ = MultiscaleDiscriminator(config);
    return 0;
  });
  m.make_optimizers();
  return m;
}

void GanModel::make_optimizers() {
  auto params = generator_->parameters();
  for (auto& p : encoder_->parameters()) params.push_back(p);
  const auto opts = torch::optim::AdamOptions(config_.learning_rate).betas({config_.beta1, config_.beta2});
  opt_g_ = std::make_unique<torch::optim::Adam>(params, opts);
  opt_d_ = std::make_unique<torch::optim::Adam>(discriminator_->parameters(), opts);
}

void GanModel::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  nn::write_header(archive, {"gan", nn::kCheckpointVersion, json(config_), step_, data_rng_.state()});
  nn::write_module(archive, "generator", *generator_);
  nn::write_module(archive, "encoder", *encoder_);
  nn::write_module(archive, "discriminator", *discriminator_);
  nn::write_optimizer(archive, "opt_g", *opt_g_);
  nn::write_optimizer(archive, "opt_d", *opt_d_);
  archive.write("noise_state", noise_.get_state(), /*is_buffer=*/true);
  nn::save_archive(archive, path);
}

GanModel GanModel::load(const std::filesystem::path& path) {
  auto archive = nn::open_archive(path);
  const auto header = nn::read_header(archive, "gan");
  GanModel m = create(header.config.get<GanConfig>(), 0);
  m.step_ = header.step;
  m.data_rng_.set_state(header.data_rng_state);
  nn::read_module(archive, "generator", *m.generator_);
  nn::read_module(archive, "encoder", *m.encoder_);
  nn::read_module(archive, "discriminator", *m.discriminator_);
  nn::read_optimizer(archive, "opt_g", *m.opt_g_);
  nn::read_optimizer(archive, "opt_d", *m.opt_d_);
  torch::Tensor state;
  archive.read("noise_state", state, /*is_buffer=*/true);
  m.noise_.set_state(state);
  return m;
}

namespace {

std::pair<torch::Tensor, torch::Tensor> draw_batch(const Dataset& data, Rng& rng, int batch_size) {
  std::vector<torch::Tensor> images, masks;
  for (int i = 0; i < batch_size; ++i) {
    const auto& p = data[rng.below(data.size())].patch;
    images.push_back(nn::image_to_tensor(p.image));
    masks.push_back(nn::one_hot(p.mask));
  }
  return {torch::stack(images), torch::stack(masks)};
}

}  // namespace

std::vector<StepLosses> GanModel::train(const Dataset& data, int steps) {
  if (steps < 0) throw ValidationError("train: steps must be non-negative");
  if (steps == 0) return {};
  if (data.empty()) throw ValidationError("train_gan: empty dataset");
  for (const auto& item : data)
    if (item.patch.height() != config_.image_size || item.patch.width() != config_.image_size)
      throw ValidationError("train_gan: patch " + item.id + " does not match image_size " +
                            std::to_string(config_.image_size));
  generator_->train();
  encoder_->train();
  discriminator_->train();
  std::vector<StepLosses> history;
  const double n_d = static_cast<double>(config_.num_discriminators);
  for (int s = 0; s < steps; ++s) {
    auto [real, mask] = draw_batch(data, data_rng_, config_.batch_size);
    StepLosses rec;
    rec.step = step_;

    // Generator and style encoder.
    opt_g_->zero_grad();
    auto [mu, logvar] = encoder_->forward(real);
    const auto eps = torch::randn(mu.sizes(), noise_, mu.options());
    const auto style = mu + eps * torch::exp(0.5 * logvar);
    const auto fake = generator_->forward(style, mask);
    const auto pred_fake = discriminator_->forward(torch::cat({fake, mask}, 1));
    const auto pred_real = discriminator_->forward(torch::cat({real, mask}, 1));
    auto adv = torch::zeros({}, real.options());
    auto fm = torch::zeros({}, real.options());
    for (std::size_t d = 0; d < pred_fake.size(); ++d) {
      adv = adv - pred_fake[d].back().mean();
      for (std::size_t l = 0; l + 1 < pred_fake[d].size(); ++l)
        fm = fm + F::l1_loss(pred_fake[d][l], pred_real[d][l].detach());
    }
    adv = adv / n_d;
    fm = fm / n_d;
    const auto kl = -0.5 * torch::sum(1 + logvar - mu.pow(2) - logvar.exp()) / static_cast<double>(real.size(0));
    const auto g_total = config_.weights.adversarial * adv + config_.weights.feature_matching * fm +
                         config_.weights.kl * kl;
    rec.adversarial = adv.item<double>();
    rec.feature_matching = fm.item<double>();
    rec.kl = kl.item<double>();
    rec.generator = g_total.item<double>();
    nn::check_finite("train_gan", step_,
                     {{"adversarial", rec.adversarial}, {"feature_matching", rec.feature_matching}, {"kl", rec.kl}},
                     real, mask, config_.snapshot_dir);
    g_total.backward();
    opt_g_->step();

    // Discriminator, hinge loss.
    opt_d_->zero_grad();
    const auto d_fake = discriminator_->forward(torch::cat({fake.detach(), mask}, 1));
    const auto d_real = discriminator_->forward(torch::cat({real, mask}, 1));
    auto d_loss = torch::zeros({}, real.options());
    for (std::size_t d = 0; d < d_fake.size(); ++d)
      d_loss = d_loss + torch::relu(1.0 - d_real[d].back()).mean() + torch::relu(1.0 + d_fake[d].back()).mean();
    d_loss = d_loss / n_d;
    rec.discriminator = d_loss.item<double>();
    nn::check_finite("train_gan", step_, {{"discriminator", rec.discriminator}}, real, mask, config_.snapshot_dir);
    d_loss.backward();
    opt_d_->step();

    ++step_;
    history.push_back(rec);
  }
  return history;
}

StyleVector GanModel::random_style(std::uint64_t seed) const {
  auto gen = nn::make_generator(seed);
  const auto z = torch::randn({config_.style_dim}, gen, torch::kFloat32);
  return {std::vector<float>(z.data_ptr<float>(), z.data_ptr<float>() + z.numel())};
}

RgbImage GanModel::generate(const SubtypeMask& mask, const StyleVector& style) {
  if (mask.height() != config_.image_size || mask.width() != config_.image_size)
    throw ValidationError("gan_generate: mask is " + std::to_string(mask.width()) + "x" +
                          std::to_string(mask.height()) + " but the checkpoint generates " +
                          std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size));
  if (static_cast<int>(style.values.size()) != config_.style_dim)
    throw ValidationError("gan_generate: style vector length differs from style_dim");
  for (float v : style.values)
    if (!std::isfinite(v)) throw ValidationError("gan_generate: non-finite style entry");
  torch::NoGradGuard guard;
  generator_->eval();
  const auto z = torch::tensor(style.values, torch::kFloat32).unsqueeze(0);
  const auto out = generator_->forward(z, nn::one_hot(mask).unsqueeze(0));
  return nn::tensor_to_image(out);
}

RgbImage GanModel::generate(const SubtypeMask& mask, std::uint64_t seed) { return generate(mask, random_style(seed)); }

bool GanModel::identical_to(const GanModel& o) const {
  if (step_ != o.step_ || data_rng_.state() != o.data_rng_.state()) return false;
  if (json(config_) != json(o.config_)) return false;
  if (!torch::equal(noise_.get_state(), o.noise_.get_state())) return false;
  if (!nn::same_weights(*generator_, *o.generator_) || !nn::same_weights(*encoder_, *o.encoder_) ||
      !nn::same_weights(*discriminator_, *o.discriminator_))
    return false;
  return nn::same_optimizer_state(*opt_g_, *o.opt_g_) && nn::same_optimizer_state(*opt_d_, *o.opt_d_);
}

GanModel train_gan(const Dataset& data, const GanConfig& config, std::uint64_t seed) {
  GanModel m = GanModel::create(config, seed);
  m.train(data, config.steps);
  return m;
}

}  // namespace histosynth::gan
