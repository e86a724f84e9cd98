#include "histosynth/diffusion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numbers>

#include "histosynth/error.hpp"
#include "histosynth/log.hpp"
#include "histosynth/sampling.hpp"

namespace histosynth::diffusion {

namespace {

void check_batch_sampling(const std::string& s) {
  if (s != "uniform") sampling_kind_from_string(s);
}

// Cumulative item weights for batch draws; empty means uniform.
std::vector<double> draw_weights(const Dataset& data, const std::string& kind) {
  if (kind == "uniform") return {};
  const TrainingSampler sampler(class_histograms(data), {sampling_kind_from_string(kind), 0});
  std::vector<double> cumulative;
  double acc = 0;
  for (double p : sampler.probabilities()) cumulative.push_back(acc += p);
  return cumulative;
}

std::uint64_t draw_index(Rng& rng, const std::vector<double>& cumulative, std::size_t n) {
  if (cumulative.empty()) return rng.below(n);
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), rng.uniform() * cumulative.back());
  return std::min<std::uint64_t>(static_cast<std::uint64_t>(it - cumulative.begin()), n - 1);
}

}  // namespace

namespace F = torch::nn::functional;
using nlohmann::json;

// ---------------------------------------------------------------- schedule

std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ValidationError("unknown schedule '" + s + "'");
}

NoiseSchedule NoiseSchedule::from_betas(const std::vector<double>& betas) {
  if (betas.empty()) throw ValidationError("NoiseSchedule: T must be at least 1");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0 && betas[i] < 1.0))
      throw ValidationError("NoiseSchedule: beta_" + std::to_string(i + 1) + " outside (0, 1)");
    if (i > 0 && betas[i] < betas[i - 1]) throw ValidationError("NoiseSchedule: betas must be non-decreasing");
  }
  NoiseSchedule s;
  s.betas_.assign(1, 0.0);
  s.betas_.insert(s.betas_.end(), betas.begin(), betas.end());
  s.alpha_bars_.assign(1, 1.0);
  for (double b : betas) s.alpha_bars_.push_back(s.alpha_bars_.back() * (1.0 - b));
  return s;
}

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end, bool rescale) {
  if (T < 1) throw ValidationError("NoiseSchedule: T must be at least 1");
  const double k = rescale ? 1000.0 / T : 1.0;
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double u = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    betas[static_cast<std::size_t>(i)] = k * (beta_start + u * (beta_end - beta_start));
  }
  return from_betas(betas);
}

NoiseSchedule NoiseSchedule::cosine(int T, double offset) {
  if (T < 1) throw ValidationError("NoiseSchedule: T must be at least 1");
  const auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> betas;
  for (int t = 1; t <= T; ++t) {
    double b = std::min(1.0 - f(t) / f(t - 1), 0.999);
    if (!betas.empty()) b = std::max(b, betas.back());
    betas.push_back(b);
  }
  return from_betas(betas);
}

double NoiseSchedule::beta(int t) const {
  if (t < 0 || t > steps()) throw ValidationError("timestep " + std::to_string(t) + " outside [0, T]");
  return betas_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) throw ValidationError("timestep " + std::to_string(t) + " outside [0, T]");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

torch::Tensor q_forward(const NoiseSchedule& schedule, const torch::Tensor& x0, int t, const torch::Tensor& noise) {
  if (!x0.sizes().equals(noise.sizes())) throw ValidationError("q_forward: latent and noise shapes differ");
  const double ab = schedule.alpha_bar(t);
  if (t == 0) return x0.clone();
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

torch::Tensor q_forward(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                        const torch::Tensor& noise) {
  if (!x0.sizes().equals(noise.sizes())) throw ValidationError("q_forward: latent and noise shapes differ");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw ValidationError("q_forward: need one timestep per item");
  const auto tt = t.to(torch::kLong);
  if (tt.min().item<std::int64_t>() < 0 || tt.max().item<std::int64_t>() > schedule.steps())
    throw ValidationError("q_forward: timestep outside [0, T]");
  const auto table = torch::tensor(schedule.alpha_bars(), torch::kFloat64);
  std::vector<std::int64_t> shape(static_cast<std::size_t>(x0.dim()), 1);
  shape[0] = x0.size(0);
  const auto ab = table.index_select(0, tt).to(x0.scalar_type()).view(shape);
  return torch::sqrt(ab) * x0 + torch::sqrt(1.0 - ab) * noise;
}

// ---------------------------------------------------------------- geometry

SubtypeMask downsample_mask(const SubtypeMask& mask, int f) {
  if (f < 1 || mask.height() % f != 0 || mask.width() % f != 0)
    throw ValidationError("downsample_mask: mask side not divisible by " + std::to_string(f));
  SubtypeMask out(mask.height() / f, mask.width() / f, 0);
  for (int by = 0; by < out.height(); ++by)
    for (int bx = 0; bx < out.width(); ++bx) {
      std::array<int, kNumClasses> votes{};
      for (int y = by * f; y < (by + 1) * f; ++y)
        for (int x = bx * f; x < (bx + 1) * f; ++x) ++votes[mask(y, x)];
      // max_element returns the first maximum: the lowest code wins ties.
      out(by, bx) = static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
  return out;
}

SubtypeMask upsample_mask(const SubtypeMask& mask, int f) {
  SubtypeMask out(mask.height() * f, mask.width() * f, 0);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) out(y, x) = mask(y / f, x / f);
  return out;
}

Grid<std::uint8_t> footprint_outside(const Grid<std::uint8_t>& region, int f) {
  if (f < 1 || region.height() % f != 0 || region.width() % f != 0)
    throw ValidationError("footprint_outside: region side not divisible by " + std::to_string(f));
  Grid<std::uint8_t> out(region.height() / f, region.width() / f, 1);
  for (int y = 0; y < region.height(); ++y)
    for (int x = 0; x < region.width(); ++x)
      if (region(y, x)) out(y / f, x / f) = 0;
  return out;
}

// ---------------------------------------------------------------- building blocks

namespace {

int groups_for(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0) return g;
  return 1;
}

torch::nn::Conv2d conv3(int in, int out, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::nn::Conv2d conv1(int in, int out) { return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)); }

torch::nn::GroupNorm group_norm(int channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups_for(channels), channels));
}

void zero_parameters(torch::nn::Module& m) {
  torch::NoGradGuard g;
  for (auto& p : m.parameters()) p.zero_();
}

/// Residual block without time conditioning (autoencoder).
class ResBlockImpl : public torch::nn::Module {
public:
  ResBlockImpl(int in, int out) {
    block = register_module("block", torch::nn::Sequential(group_norm(in), torch::nn::SiLU(), conv3(in, out),
                                                           group_norm(out), torch::nn::SiLU(), conv3(out, out)));
    if (in != out) skip = register_module("skip", conv1(in, out));
  }
  torch::Tensor forward(const torch::Tensor& x) { return (skip ? skip(x) : x) + block->forward(x); }

  torch::nn::Sequential block{nullptr};
  torch::nn::Conv2d skip{nullptr};
};
TORCH_MODULE(ResBlock);

class UpsampleImpl : public torch::nn::Module {
public:
  explicit UpsampleImpl(int channels) { conv = register_module("conv", conv3(channels, channels)); }
  torch::Tensor forward(const torch::Tensor& x) {
    return conv(F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2, 2}).mode(torch::kNearest)));
  }
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Upsample);

/// Residual block with an additive time-embedding projection (denoiser).
class TimeResBlockImpl : public torch::nn::Module {
public:
  TimeResBlockImpl(int in, int out, int temb) {
    norm1 = register_module("norm1", group_norm(in));
    conv_a = register_module("conv_a", conv3(in, out));
    time = register_module("time", torch::nn::Linear(temb, out));
    norm2 = register_module("norm2", group_norm(out));
    conv_b = register_module("conv_b", conv3(out, out));
    zero_parameters(*conv_b);
    if (in != out) skip = register_module("skip", conv1(in, out));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv_a(torch::silu(norm1(x)));
    h = h + time(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    h = conv_b(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
  }

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv_a{nullptr}, conv_b{nullptr}, skip{nullptr};
  torch::nn::Linear time{nullptr};
};
TORCH_MODULE(TimeResBlock);

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  const auto freqs =
      torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
  const auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

}  // namespace

// ---------------------------------------------------------------- autoencoder

void AutoencoderConfig::validate() const {
  if (compression_factor < 1 || (compression_factor & (compression_factor - 1)) != 0)
    throw ValidationError("AutoencoderConfig: compression_factor must be a power of two");
  if (image_size < 1 || image_size % compression_factor != 0)
    throw ValidationError("AutoencoderConfig: image_size " + std::to_string(image_size) +
                          " not divisible by compression_factor " + std::to_string(compression_factor));
  if (codebook_size < 2) throw ValidationError("AutoencoderConfig: codebook_size must be at least 2");
  if (latent_channels < 1 || base_channels < 1 || batch_size < 1 || steps < 0 || restart_interval < 0)
    throw ValidationError("AutoencoderConfig: sizes must be positive");
  check_batch_sampling(batch_sampling);
  if (!(learning_rate >= 0) || !(commitment >= 0)) throw ValidationError("AutoencoderConfig: negative rate or weight");
}

void to_json(json& j, const AutoencoderConfig& c) {
  j = {{"image_size", c.image_size},           {"compression_factor", c.compression_factor},
       {"latent_channels", c.latent_channels}, {"codebook_size", c.codebook_size},
       {"base_channels", c.base_channels},     {"commitment", c.commitment},
       {"learning_rate", c.learning_rate},     {"batch_size", c.batch_size},
       {"steps", c.steps},                     {"restart_interval", c.restart_interval},
       {"batch_sampling", c.batch_sampling},   {"snapshot_dir", c.snapshot_dir}};
}

void from_json(const json& j, AutoencoderConfig& c) {
  const AutoencoderConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.compression_factor = j.value("compression_factor", d.compression_factor);
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.commitment = j.value("commitment", d.commitment);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.restart_interval = j.value("restart_interval", d.restart_interval);
  c.batch_sampling = j.value("batch_sampling", d.batch_sampling);
  c.snapshot_dir = j.value("snapshot_dir", d.snapshot_dir);
  c.validate();
}

VqAutoencoderImpl::VqAutoencoderImpl(const AutoencoderConfig& cfg) {
  const int stages = static_cast<int>(std::log2(cfg.compression_factor));
  const auto width = [&](int level) { return cfg.base_channels * std::min(1 << level, 4); };

  torch::nn::Sequential enc;
  enc->push_back(conv3(3, width(0)));
  for (int i = 0; i < stages; ++i) {
    enc->push_back(ResBlock(width(i), width(i)));
    enc->push_back(conv3(width(i), width(i + 1), 2));
  }
  enc->push_back(ResBlock(width(stages), width(stages)));
  enc->push_back(group_norm(width(stages)));
  enc->push_back(torch::nn::SiLU());
  enc->push_back(conv1(width(stages), cfg.latent_channels));
  encoder_ = register_module("encoder", enc);

  torch::nn::Sequential dec;
  dec->push_back(conv3(cfg.latent_channels, width(stages)));
  dec->push_back(ResBlock(width(stages), width(stages)));
  for (int i = stages; i > 0; --i) {
    dec->push_back(Upsample(width(i)));
    dec->push_back(ResBlock(width(i), width(i - 1)));
  }
  dec->push_back(group_norm(width(0)));
  dec->push_back(torch::nn::SiLU());
  dec->push_back(conv3(width(0), 3));
  decoder_ = register_module("decoder", dec);

  codebook = register_parameter("codebook", torch::randn({cfg.codebook_size, cfg.latent_channels}));
}

torch::Tensor VqAutoencoderImpl::encode(const torch::Tensor& images) { return encoder_->forward(images); }

VqAutoencoderImpl::Quantized VqAutoencoderImpl::quantize(const torch::Tensor& z) {
  const auto n = z.size(0), c = z.size(1), h = z.size(2), w = z.size(3);
  const auto flat = z.permute({0, 2, 3, 1}).reshape({-1, c});
  const auto dist = flat.pow(2).sum(1, true) - 2 * flat.matmul(codebook.t()) + codebook.pow(2).sum(1).unsqueeze(0);
  const auto codes = dist.argmin(1);
  const auto q = codebook.index_select(0, codes).view({n, h, w, c}).permute({0, 3, 1, 2});
  Quantized out;
  out.codebook_loss = F::mse_loss(q, z.detach());
  out.commitment_loss = F::mse_loss(z, q.detach());
  out.values = z + (q - z).detach();
  out.codes = codes.view({n, h, w});
  return out;
}

torch::Tensor VqAutoencoderImpl::decode_quantized(const torch::Tensor& latents) { return decoder_->forward(latents); }

torch::Tensor VqAutoencoderImpl::decode(const torch::Tensor& latents) {
  return decode_quantized(quantize(latents).values);
}

Autoencoder Autoencoder::create(const AutoencoderConfig& config, std::uint64_t seed) {
  config.validate();
  Autoencoder ae;
  ae.config_ = config;
  ae.data_rng_ = Rng(derive_seed(seed, "ae/data"));
  ae.noise_ = nn::make_generator(derive_seed(seed, "ae/noise"));
  ae.net_ = nn::seeded_init(seed, [&] { return VqAutoencoder(config); });
  ae.usage_ = torch::zeros({config.codebook_size}, torch::kInt64);
  ae.opt_ = std::make_unique<torch::optim::Adam>(ae.net_->parameters(), torch::optim::AdamOptions(config.learning_rate));
  return ae;
}

void Autoencoder::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  nn::write_header(archive, {"autoencoder", nn::kCheckpointVersion, json(config_), step_, data_rng_.state()});
  archive.write("scale", torch::tensor(scale_, torch::kFloat64), true);
  archive.write("codebook_ready", torch::tensor(static_cast<std::int64_t>(codebook_ready_)), true);
  archive.write("usage", usage_, true);
  archive.write("noise_state", noise_.get_state(), true);
  nn::write_module(archive, "net", *net_);
  nn::write_optimizer(archive, "opt", *opt_);
  nn::save_archive(archive, path);
}

Autoencoder Autoencoder::load(const std::filesystem::path& path) {
  auto archive = nn::open_archive(path);
  const auto header = nn::read_header(archive, "autoencoder");
  Autoencoder ae = create(header.config.get<AutoencoderConfig>(), 0);
  ae.step_ = header.step;
  ae.data_rng_.set_state(header.data_rng_state);
  // Each read gets a fresh tensor; reading into a defined one resizes it in place.
  torch::Tensor scale, ready, usage, noise;
  archive.read("scale", scale, true);
  ae.scale_ = scale.item<double>();
  archive.read("codebook_ready", ready, true);
  ae.codebook_ready_ = ready.item<std::int64_t>() != 0;
  archive.read("usage", usage, true);
  ae.usage_ = usage.clone();
  archive.read("noise_state", noise, true);
  ae.noise_.set_state(noise);
  nn::read_module(archive, "net", *ae.net_);
  nn::read_optimizer(archive, "opt", *ae.opt_);
  return ae;
}

void Autoencoder::check_image(int h, int w) const {
  if (h % config_.compression_factor != 0 || w % config_.compression_factor != 0)
    throw ValidationError("autoencoder: image side " + std::to_string(w) + "x" + std::to_string(h) +
                          " not divisible by compression factor " + std::to_string(config_.compression_factor));
}

void Autoencoder::initialise_codebook(const torch::Tensor& latents) {
  const auto flat = latents.detach().permute({0, 2, 3, 1}).reshape({-1, config_.latent_channels});
  const auto pick = torch::randint(0, flat.size(0), {config_.codebook_size}, noise_, torch::kLong);
  torch::NoGradGuard g;
  net_->codebook.copy_(flat.index_select(0, pick));
  codebook_ready_ = true;
}

void Autoencoder::restart_dead_codes(const torch::Tensor& latents) {
  const auto dead = (usage_ == 0).nonzero().squeeze(1);
  usage_.zero_();
  if (dead.numel() == 0) return;
  const auto flat = latents.detach().permute({0, 2, 3, 1}).reshape({-1, config_.latent_channels});
  const auto pick = torch::randint(0, flat.size(0), {dead.size(0)}, noise_, torch::kLong);
  torch::NoGradGuard g;
  net_->codebook.index_copy_(0, dead, flat.index_select(0, pick));
}

std::vector<AeStepLosses> Autoencoder::train(const Dataset& data, int steps) {
  if (steps < 0) throw ValidationError("train: steps must be non-negative");
  if (steps == 0) return {};
  if (data.empty()) throw ValidationError("train_ldm_ae: empty dataset");
  for (const auto& item : data) check_image(item.patch.height(), item.patch.width());
  const auto weights = draw_weights(data, config_.batch_sampling);
  net_->train();
  std::vector<AeStepLosses> history;
  for (int s = 0; s < steps; ++s) {
    std::vector<torch::Tensor> batch;
    for (int i = 0; i < config_.batch_size; ++i)
      batch.push_back(nn::image_to_tensor(data[draw_index(data_rng_, weights, data.size())].patch.image));
    const auto x = torch::stack(batch);
    opt_->zero_grad();
    const auto z = net_->encode(x);
    if (!codebook_ready_) initialise_codebook(z);
    auto q = net_->quantize(z);
    const auto recon = net_->decode_quantized(q.values);
    const auto rec = F::mse_loss(recon, x);
    const auto total = rec + q.codebook_loss + config_.commitment * q.commitment_loss;
    AeStepLosses r{step_, rec.item<double>(), q.codebook_loss.item<double>(), q.commitment_loss.item<double>(),
                   total.item<double>()};
    nn::check_finite("train_ldm_ae", step_,
                     {{"reconstruction", r.reconstruction}, {"codebook", r.codebook}, {"commitment", r.commitment}},
                     x, torch::Tensor(), config_.snapshot_dir);
    total.backward();
    opt_->step();
    usage_.index_add_(0, q.codes.flatten(), torch::ones({q.codes.numel()}, torch::kInt64));
    ++step_;
    if (config_.restart_interval > 0 && step_ % config_.restart_interval == 0) restart_dead_codes(z);
    history.push_back(r);
  }
  return history;
}

void Autoencoder::calibrate_scale(const Dataset& data) {
  if (data.empty()) throw ValidationError("calibrate_scale: empty dataset");
  torch::NoGradGuard g;
  net_->eval();
  std::vector<torch::Tensor> zs;
  for (std::size_t i = 0; i < data.size(); i += 32) {
    std::vector<torch::Tensor> batch;
    for (std::size_t k = i; k < std::min(data.size(), i + 32); ++k)
      batch.push_back(nn::image_to_tensor(data[k].patch.image));
    zs.push_back(net_->encode(torch::stack(batch)));
  }
  const double sd = torch::cat(zs).to(torch::kFloat64).std().item<double>();
  scale_ = sd > 0 ? 1.0 / sd : 1.0;
}

torch::Tensor Autoencoder::encode_batch(const torch::Tensor& images) {
  check_image(static_cast<int>(images.size(2)), static_cast<int>(images.size(3)));
  torch::NoGradGuard g;
  net_->eval();
  return net_->encode(images) * scale_;
}

torch::Tensor Autoencoder::encode(const RgbImage& image) {
  check_image(image.height(), image.width());
  return encode_batch(nn::image_to_tensor(image).unsqueeze(0)).squeeze(0);
}

torch::Tensor Autoencoder::decode_batch(const torch::Tensor& latents) {
  if (latents.dim() != 4 || latents.size(1) != config_.latent_channels)
    throw ValidationError("decode: expected latents with " + std::to_string(config_.latent_channels) + " channels");
  torch::NoGradGuard g;
  net_->eval();
  return net_->decode(latents / scale_);
}

RgbImage Autoencoder::decode(const torch::Tensor& latent) {
  return nn::tensor_to_image(decode_batch(latent.dim() == 3 ? latent.unsqueeze(0) : latent));
}

RgbImage Autoencoder::reconstruct(const RgbImage& image) { return decode(encode(image)); }

bool Autoencoder::identical_to(const Autoencoder& o) const {
  return step_ == o.step_ && scale_ == o.scale_ && codebook_ready_ == o.codebook_ready_ &&
         data_rng_.state() == o.data_rng_.state() && json(config_) == json(o.config_) &&
         torch::equal(usage_, o.usage_) && torch::equal(noise_.get_state(), o.noise_.get_state()) &&
         nn::same_weights(*net_, *o.net_) && nn::same_optimizer_state(*opt_, *o.opt_);
}

double psnr(const RgbImage& a, const RgbImage& b) {
  if (!a.same_shape(b)) throw ValidationError("psnr: shapes differ");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dr = a[i].r - b[i].r, dg = a[i].g - b[i].g, db = a[i].b - b[i].b;
    se += dr * dr + dg * dg + db * db;
  }
  const double mse = se / (3.0 * static_cast<double>(a.size()));
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

// ---------------------------------------------------------------- denoiser

std::string to_string(SamplerKind k) { return k == SamplerKind::ancestral ? "ancestral" : "strided"; }

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "ancestral") return SamplerKind::ancestral;
  if (s == "strided") return SamplerKind::strided;
  throw ValidationError("unknown sampler '" + s + "'");
}

void LdmConfig::validate() const {
  if (timesteps < 1) throw ValidationError("LdmConfig: timesteps must be at least 1");
  if (sample_steps < 1 || sample_steps > timesteps)
    throw ValidationError("LdmConfig: sample_steps must lie in [1, timesteps]");
  if (model_channels < 8 || model_channels % 2 != 0) throw ValidationError("LdmConfig: model_channels too small");
  if (channel_mult.empty() || res_blocks < 1 || batch_size < 1 || steps < 0)
    throw ValidationError("LdmConfig: invalid sizes");
  check_batch_sampling(batch_sampling);
  for (int m : channel_mult)
    if (m < 1) throw ValidationError("LdmConfig: channel_mult entries must be positive");
  if (!(learning_rate >= 0)) throw ValidationError("LdmConfig: learning_rate must be non-negative");
  make_schedule();
}

NoiseSchedule LdmConfig::make_schedule() const {
  return schedule == ScheduleKind::linear ? NoiseSchedule::linear(timesteps, beta_start, beta_end, rescale_schedule)
                                          : NoiseSchedule::cosine(timesteps);
}

void to_json(json& j, const LdmConfig& c) {
  j = {{"timesteps", c.timesteps},
       {"schedule", to_string(c.schedule)},
       {"beta_start", c.beta_start},
       {"beta_end", c.beta_end},
       {"rescale_schedule", c.rescale_schedule},
       {"model_channels", c.model_channels},
       {"channel_mult", c.channel_mult},
       {"res_blocks", c.res_blocks},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"sampler", to_string(c.sampler)},
       {"sample_steps", c.sample_steps},
       {"augment", c.augment},
       {"batch_sampling", c.batch_sampling},
       {"snapshot_dir", c.snapshot_dir}};
}

void from_json(const json& j, LdmConfig& c) {
  const LdmConfig d;
  c.timesteps = j.value("timesteps", d.timesteps);
  c.schedule = schedule_kind_from_string(j.value("schedule", to_string(d.schedule)));
  c.beta_start = j.value("beta_start", d.beta_start);
  c.beta_end = j.value("beta_end", d.beta_end);
  c.rescale_schedule = j.value("rescale_schedule", d.rescale_schedule);
  c.model_channels = j.value("model_channels", d.model_channels);
  c.channel_mult = j.value("channel_mult", d.channel_mult);
  c.res_blocks = j.value("res_blocks", d.res_blocks);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.sampler = sampler_kind_from_string(j.value("sampler", to_string(d.sampler)));
  c.sample_steps = j.value("sample_steps", c.sampler == SamplerKind::ancestral ? c.timesteps : d.sample_steps);
  c.augment = j.value("augment", d.augment);
  c.batch_sampling = j.value("batch_sampling", d.batch_sampling);
  c.snapshot_dir = j.value("snapshot_dir", d.snapshot_dir);
  c.validate();
}

DenoiserImpl::DenoiserImpl(const LdmConfig& cfg, int latent_channels) : model_channels_(cfg.model_channels) {
  const int ch = cfg.model_channels;
  const int temb = 4 * ch;
  time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(ch, temb), torch::nn::SiLU(),
                                                                torch::nn::Linear(temb, temb)));
  in_ = register_module("input", conv3(latent_channels + kNumClasses, ch));

  std::vector<int> skips{ch};
  int cur = ch;
  const int levels = static_cast<int>(cfg.channel_mult.size());
  for (int level = 0; level < levels; ++level) {
    const int out = ch * cfg.channel_mult[static_cast<std::size_t>(level)];
    for (int r = 0; r < cfg.res_blocks; ++r) {
      down_->push_back(TimeResBlock(cur, out, temb));
      down_kinds_.push_back(0);
      cur = out;
      skips.push_back(cur);
    }
    if (level + 1 < levels) {
      down_->push_back(conv3(cur, cur, 2));
      down_kinds_.push_back(1);
      skips.push_back(cur);
    }
  }
  mid_->push_back(TimeResBlock(cur, cur, temb));
  mid_->push_back(TimeResBlock(cur, cur, temb));
  for (int level = levels - 1; level >= 0; --level) {
    const int out = ch * cfg.channel_mult[static_cast<std::size_t>(level)];
    for (int r = 0; r <= cfg.res_blocks; ++r) {
      up_->push_back(TimeResBlock(cur + skips.back(), out, temb));
      up_kinds_.push_back(0);
      skips.pop_back();
      cur = out;
    }
    if (level > 0) {
      up_->push_back(Upsample(cur));
      up_kinds_.push_back(1);
    }
  }
  register_module("down", down_);
  register_module("mid", mid_);
  register_module("up", up_);
  out_ = register_module("out", torch::nn::Sequential(group_norm(cur), torch::nn::SiLU(), conv3(cur, latent_channels)));
  // A zero output layer makes the untrained prediction ε̂ = 0.
  zero_parameters(*out_[2]);
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& mask) {
  const auto emb = time_mlp_->forward(timestep_embedding(t, model_channels_));
  auto h = in_(torch::cat({x, mask}, 1));
  std::vector<torch::Tensor> skips{h};
  for (std::size_t i = 0; i < down_->size(); ++i) {
    h = down_kinds_[i] == 0 ? down_[i]->as<TimeResBlock>()->forward(h, emb) : down_[i]->as<torch::nn::Conv2d>()->forward(h);
    skips.push_back(h);
  }
  for (const auto& m : *mid_) h = m->as<TimeResBlock>()->forward(h, emb);
  for (std::size_t i = 0; i < up_->size(); ++i) {
    if (up_kinds_[i] == 0) {
      h = up_[i]->as<TimeResBlock>()->forward(torch::cat({h, skips.back()}, 1), emb);
      skips.pop_back();
    } else {
      h = up_[i]->as<Upsample>()->forward(h);
    }
  }
  return out_->forward(h);
}

LatentDiffusion LatentDiffusion::create(const LdmConfig& config, std::shared_ptr<Autoencoder> ae,
                                        std::uint64_t seed) {
  config.validate();
  if (!ae) throw ValidationError("LatentDiffusion: autoencoder required");
  const int levels = static_cast<int>(config.channel_mult.size());
  if (ae->config().latent_size() % (1 << (levels - 1)) != 0)
    throw ValidationError("LatentDiffusion: latent size not divisible by the denoiser's downsampling");
  LatentDiffusion m;
  m.config_ = config;
  m.schedule_ = config.make_schedule();
  m.ae_ = std::move(ae);
  m.data_rng_ = Rng(derive_seed(seed, "ldm/data"));
  m.noise_ = nn::make_generator(derive_seed(seed, "ldm/noise"));
  m.net_ = nn::seeded_init(seed, [&] { return Denoiser(config, m.ae_->config().latent_channels); });
  m.opt_ = std::make_unique<torch::optim::Adam>(m.net_->parameters(), torch::optim::AdamOptions(config.learning_rate));
  return m;
}

void LatentDiffusion::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  nn::write_header(archive, {"ldm", nn::kCheckpointVersion, json(config_), step_, data_rng_.state()});
  const auto& ac = ae_->config();
  archive.write("ae_geometry",
                torch::tensor({static_cast<std::int64_t>(ac.compression_factor),
                               static_cast<std::int64_t>(ac.latent_channels), static_cast<std::int64_t>(ac.image_size)}),
                true);
  archive.write("ae_scale", torch::tensor(ae_->scale(), torch::kFloat64), true);
  archive.write("betas", torch::tensor(schedule_.betas(), torch::kFloat64), true);
  archive.write("noise_state", noise_.get_state(), true);
  nn::write_module(archive, "denoiser", *net_);
  nn::write_optimizer(archive, "opt", *opt_);
  nn::save_archive(archive, path);
}

LatentDiffusion LatentDiffusion::load(const std::filesystem::path& path, std::shared_ptr<Autoencoder> ae) {
  auto archive = nn::open_archive(path);
  const auto header = nn::read_header(archive, "ldm");
  if (!ae) throw ValidationError("LatentDiffusion: autoencoder required");
  torch::Tensor geo, scale, betas, state;
  archive.read("ae_geometry", geo, true);
  archive.read("ae_scale", scale, true);
  const auto& ac = ae->config();
  const std::int64_t f = geo[0].item<std::int64_t>(), c = geo[1].item<std::int64_t>(), size = geo[2].item<std::int64_t>();
  if (f != ac.compression_factor || c != ac.latent_channels || size != ac.image_size)
    throw ValidationError("checkpoint/autoencoder mismatch: diffusion model expects f=" + std::to_string(f) +
                          ", " + std::to_string(c) + " latent channels, image size " + std::to_string(size) +
                          "; autoencoder has f=" + std::to_string(ac.compression_factor) + ", " +
                          std::to_string(ac.latent_channels) + " channels, image size " + std::to_string(ac.image_size));
  if (scale.item<double>() != ae->scale())
    throw ValidationError("checkpoint/autoencoder mismatch: latent scale differs");
  LatentDiffusion m = create(header.config.get<LdmConfig>(), std::move(ae), 0);
  archive.read("betas", betas, true);
  if (!torch::equal(betas, torch::tensor(m.schedule_.betas(), torch::kFloat64)))
    throw ValidationError("ldm checkpoint: stored schedule differs from its config");
  m.step_ = header.step;
  m.data_rng_.set_state(header.data_rng_state);
  archive.read("noise_state", state, true);
  m.noise_.set_state(state);
  nn::read_module(archive, "denoiser", *m.net_);
  nn::read_optimizer(archive, "opt", *m.opt_);
  return m;
}

namespace {

// The eight symmetries of the square applied to [C,H,W].
torch::Tensor dihedral(const torch::Tensor& x, int k) {
  auto y = k & 4 ? x.transpose(1, 2) : x;
  if (k & 1) y = y.flip({1});
  if (k & 2) y = y.flip({2});
  return y.contiguous();
}

std::string dataset_key(const Dataset& data, bool augment) {
  std::uint64_t h = fnv1a(augment ? "aug" : "plain");
  for (const auto& item : data) h = fnv1a(item.id + "#" + mask_hash(item.patch.mask), h);
  return hex64(h) + ":" + std::to_string(data.size());
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> LatentDiffusion::encode_dataset(const Dataset& data, bool augment) {
  const int f = ae_->config().compression_factor;
  std::vector<torch::Tensor> images, masks;
  for (const auto& item : data) {
    if (item.patch.height() != ae_->config().image_size || item.patch.width() != ae_->config().image_size)
      throw ValidationError("train_ldm: patch " + item.id + " does not match the autoencoder image size");
    const auto img = nn::image_to_tensor(item.patch.image);
    const auto msk = nn::one_hot(item.patch.mask);
    for (int k = 0; k < (augment ? 8 : 1); ++k) {
      images.push_back(dihedral(img, k));
      // Downsample the transformed full-resolution mask so ties resolve on the
      // same block contents the encoder sees.
      const auto mk = dihedral(msk, k).argmax(0).to(torch::kUInt8).contiguous();
      SubtypeMask m(static_cast<int>(mk.size(0)), static_cast<int>(mk.size(1)), 0);
      std::memcpy(m.data(), mk.data_ptr<std::uint8_t>(), m.size());
      masks.push_back(nn::one_hot(downsample_mask(m, f)));
    }
  }
  std::vector<torch::Tensor> latents;
  for (std::size_t i = 0; i < images.size(); i += 64) {
    const auto end = std::min(images.size(), i + 64);
    latents.push_back(ae_->encode_batch(torch::stack(std::vector<torch::Tensor>(images.begin() + i, images.begin() + end))));
  }
  return {torch::cat(latents), torch::stack(masks)};
}

std::vector<LdmStepLosses> LatentDiffusion::train(const Dataset& data, int steps) {
  if (steps < 0) throw ValidationError("train: steps must be non-negative");
  if (steps == 0) return {};
  if (data.empty()) throw ValidationError("train_ldm: empty dataset");
  const auto key = dataset_key(data, config_.augment);
  if (key != cache_key_) {
    std::tie(cache_latents_, cache_masks_) = encode_dataset(data, config_.augment);
    cache_key_ = key;
  }
  const auto weights = draw_weights(data, config_.batch_sampling);
  const auto n = static_cast<std::uint64_t>(cache_latents_.size(0));
  const std::uint64_t views = config_.augment ? 8 : 1;
  net_->train();
  std::vector<LdmStepLosses> history;
  for (int s = 0; s < steps; ++s) {
    std::vector<std::int64_t> idx, ts;
    for (int i = 0; i < config_.batch_size; ++i) {
      const auto row = weights.empty() ? data_rng_.below(n)
                                       : draw_index(data_rng_, weights, data.size()) * views + data_rng_.below(views);
      idx.push_back(static_cast<std::int64_t>(row));
      ts.push_back(data_rng_.between(1, config_.timesteps));
    }
    const auto index = torch::tensor(idx);
    const auto t = torch::tensor(ts);
    const auto x0 = cache_latents_.index_select(0, index);
    const auto mask = cache_masks_.index_select(0, index);
    const auto eps = torch::randn(x0.sizes(), noise_, x0.options());
    const auto xt = q_forward(schedule_, x0, t, eps);
    opt_->zero_grad();
    const auto loss = F::mse_loss(net_->forward(xt, t, mask), eps);
    LdmStepLosses r{step_, loss.item<double>()};
    nn::check_finite("train_ldm", step_, {{"mse", r.mse}}, x0, mask, config_.snapshot_dir);
    loss.backward();
    opt_->step();
    ++step_;
    history.push_back(r);
  }
  return history;
}

double LatentDiffusion::evaluate_mse(const torch::Tensor& latents, const torch::Tensor& masks, int batches,
                                     std::uint64_t seed) {
  torch::NoGradGuard g;
  net_->eval();
  auto gen = nn::make_generator(seed);
  Rng rng(seed);
  double total = 0;
  for (int b = 0; b < batches; ++b) {
    std::vector<std::int64_t> idx, ts;
    for (int i = 0; i < config_.batch_size; ++i) {
      idx.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(latents.size(0)))));
      ts.push_back(rng.between(1, config_.timesteps));
    }
    const auto index = torch::tensor(idx);
    const auto t = torch::tensor(ts);
    const auto x0 = latents.index_select(0, index);
    const auto eps = torch::randn(x0.sizes(), gen, x0.options());
    const auto pred = net_->forward(q_forward(schedule_, x0, t, eps), t, masks.index_select(0, index));
    total += F::mse_loss(pred, eps).item<double>();
  }
  return total / batches;
}

std::vector<int> LatentDiffusion::sampling_steps() const {
  const int T = config_.timesteps;
  const int S = config_.sampler == SamplerKind::ancestral ? T : config_.sample_steps;
  std::vector<int> ts;
  for (int i = 0; i < S; ++i) ts.push_back(static_cast<int>((static_cast<std::int64_t>(i + 1) * T) / S));
  return ts;
}

void LatentDiffusion::check_mask(const SubtypeMask& mask) const {
  const int size = ae_->config().image_size;
  if (mask.height() != size || mask.width() != size)
    throw ValidationError("diffusion: mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                          " but the model works at " + std::to_string(size) + "x" + std::to_string(size));
  for (auto v : mask.values())
    if (!is_valid_code(v)) throw ValidationError("diffusion: mask holds an invalid subtype code");
}

torch::Tensor LatentDiffusion::reverse_step(const torch::Tensor& x, int t, int t_prev, const torch::Tensor& mask,
                                            std::vector<torch::Generator>& gens) {
  const double ab = schedule_.alpha_bar(t), ab_prev = schedule_.alpha_bar(t_prev);
  const double beta = 1.0 - ab / ab_prev;  // effective β over the stride
  const auto tt = torch::full({x.size(0)}, t, torch::kLong);
  const auto eps = net_->forward(x, tt, mask);
  const auto x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
  const auto mean = (std::sqrt(ab_prev) * beta / (1.0 - ab)) * x0 +
                    (std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * x;
  if (t_prev == 0) return mean;
  const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
  std::vector<torch::Tensor> z;
  for (std::size_t i = 0; i < gens.size(); ++i) z.push_back(torch::randn(x[0].sizes(), gens[i], x.options()));
  return mean + std::sqrt(var) * torch::stack(z);
}

std::vector<RgbImage> LatentDiffusion::sample_batch(const std::vector<SubtypeMask>& masks,
                                                    const std::vector<std::uint64_t>& seeds) {
  if (masks.size() != seeds.size()) throw ValidationError("sample_batch: one seed per mask required");
  if (masks.empty()) return {};
  const int f = ae_->config().compression_factor;
  const int c = ae_->config().latent_channels;
  const int h = ae_->config().latent_size();
  std::vector<torch::Tensor> conds, init;
  std::vector<torch::Generator> gens;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    check_mask(masks[i]);
    conds.push_back(nn::one_hot(downsample_mask(masks[i], f)));
    gens.push_back(nn::make_generator(seeds[i]));
    init.push_back(torch::randn({c, h, h}, gens.back(), torch::kFloat32));
  }
  torch::NoGradGuard g;
  net_->eval();
  const auto cond = torch::stack(conds);
  auto x = torch::stack(init);
  const auto ts = sampling_steps();
  for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i)
    x = reverse_step(x, ts[static_cast<std::size_t>(i)], i > 0 ? ts[static_cast<std::size_t>(i - 1)] : 0, cond, gens);
  const auto images = ae_->decode_batch(x);
  std::vector<RgbImage> out;
  for (std::int64_t i = 0; i < images.size(0); ++i) out.push_back(nn::tensor_to_image(images[i]));
  return out;
}

void LatentDiffusion::set_sampler(SamplerKind kind, int sample_steps) {
  auto c = config_;
  c.sampler = kind;
  c.sample_steps = kind == SamplerKind::ancestral ? c.timesteps : sample_steps;
  c.validate();
  config_ = c;
}

RgbImage LatentDiffusion::sample(const SubtypeMask& mask, std::uint64_t seed) {
  return sample_batch({mask}, {seed}).front();
}

RgbImage LatentDiffusion::inpaint(const RgbImage& image, const SubtypeMask& mask,
                                  const Grid<std::uint8_t>& tumor_region, std::uint64_t seed) {
  check_mask(mask);
  if (!image.same_shape(mask) || !image.same_shape(tumor_region))
    throw ValidationError("inpaint: image, mask and tumor region shapes differ");
  const bool any = std::any_of(tumor_region.values().begin(), tumor_region.values().end(), [](auto v) { return v != 0; });
  if (!any) {
    log::warn("inpaint: empty tumor region; returning the input unchanged");
    return image;
  }
  const int f = ae_->config().compression_factor;
  const auto known_grid = footprint_outside(tumor_region, f);
  auto known = torch::from_blob(const_cast<std::uint8_t*>(known_grid.data()), {known_grid.height(), known_grid.width()},
                                torch::kUInt8)
                   .to(torch::kBool)
                   .unsqueeze(0)
                   .unsqueeze(0);
  std::vector<torch::Generator> gens{nn::make_generator(seed)};
  torch::NoGradGuard g;
  net_->eval();
  const auto z0 = ae_->encode(image).unsqueeze(0);
  const auto cond = nn::one_hot(downsample_mask(mask, f)).unsqueeze(0);
  const auto ts = sampling_steps();
  const auto replace = [&](const torch::Tensor& x, int t) {
    const auto noise = torch::randn(z0.sizes(), gens[0], z0.options());
    return torch::where(known, q_forward(schedule_, z0, t, noise), x);
  };
  auto x = replace(torch::randn(z0.sizes(), gens[0], z0.options()), ts.back());
  for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
    const int t_prev = i > 0 ? ts[static_cast<std::size_t>(i - 1)] : 0;
    x = replace(reverse_step(x, ts[static_cast<std::size_t>(i)], t_prev, cond, gens), t_prev);
  }
  RgbImage out = nn::tensor_to_image(ae_->decode_batch(x));
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!tumor_region[i]) out[i] = image[i];
  return out;
}

bool LatentDiffusion::identical_to(const LatentDiffusion& o) const {
  return step_ == o.step_ && data_rng_.state() == o.data_rng_.state() && json(config_) == json(o.config_) &&
         torch::equal(noise_.get_state(), o.noise_.get_state()) && nn::same_weights(*net_, *o.net_) &&
         nn::same_optimizer_state(*opt_, *o.opt_);
}

}  // namespace histosynth::diffusion
