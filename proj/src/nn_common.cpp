#include "histosynth/nn_common.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "histosynth/error.hpp"
#include "histosynth/log.hpp"

namespace histosynth::nn {

torch::Tensor image_to_tensor(const RgbImage& image) {
  const int h = image.height(), w = image.width();
  auto bytes = torch::from_blob(const_cast<Rgb*>(image.data()), {h, w, 3}, torch::kUInt8);
  return bytes.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

RgbImage tensor_to_image(const torch::Tensor& t) {
  torch::Tensor x = t.dim() == 4 ? t.squeeze(0) : t;
  if (x.dim() != 3 || x.size(0) != 3) throw ValidationError("tensor_to_image expects [3,H,W]");
  x = x.detach().to(torch::kFloat32).add(1.0).mul(127.5).round().clamp(0, 255).to(torch::kUInt8);
  x = x.permute({1, 2, 0}).contiguous();
  RgbImage out(static_cast<int>(x.size(0)), static_cast<int>(x.size(1)));
  std::memcpy(out.data(), x.data_ptr<std::uint8_t>(), out.size() * 3);
  return out;
}

torch::Tensor one_hot(const SubtypeMask& mask) {
  auto codes = torch::from_blob(const_cast<std::uint8_t*>(mask.data()), {mask.height(), mask.width()}, torch::kUInt8)
                   .to(torch::kLong);
  if (codes.numel() > 0 && codes.max().item<std::int64_t>() >= kNumClasses)
    throw ValidationError("mask holds codes outside 0..5");
  return torch::one_hot(codes, kNumClasses).permute({2, 0, 1}).to(torch::kFloat32).contiguous();
}

torch::Tensor tumor_tensor(const SubtypeMask& mask) {
  auto codes = torch::from_blob(const_cast<std::uint8_t*>(mask.data()), {mask.height(), mask.width()}, torch::kUInt8);
  return codes.gt(0).to(torch::kFloat32);
}

void use_single_thread() {
  torch::set_num_threads(1);
  static std::once_flag once;
  std::call_once(once, [] {
    try {
      torch::set_num_interop_threads(1);
    } catch (const std::exception&) {
      // Already fixed once parallel work has started.
    }
  });
}

torch::Generator make_generator(std::uint64_t seed) { return at::detail::createCPUGenerator(seed); }

void check_finite(std::string_view trainer, std::int64_t step, const std::map<std::string, double>& losses,
                  const torch::Tensor& images, const torch::Tensor& masks, const std::filesystem::path& snapshot_dir) {
  std::string bad;
  for (const auto& [k, v] : losses)
    if (!std::isfinite(v)) bad += (bad.empty() ? "" : ", ") + k + "=" + std::to_string(v);
  if (bad.empty()) return;
  std::string msg = std::string(trainer) + ": non-finite loss at step " + std::to_string(step) + " (" + bad + ")";
  if (!snapshot_dir.empty()) {
    std::filesystem::create_directories(snapshot_dir);
    const auto file = snapshot_dir / (std::string(trainer) + "_step" + std::to_string(step) + "_batch.pt");
    torch::save(std::vector<torch::Tensor>{images, masks}, file.string());
    msg += "; batch written to " + file.string();
  }
  log::error(msg);
  throw NonFiniteLoss(msg, step, losses, images.detach().clone(), masks.detach().clone());
}

void write_header(torch::serialize::OutputArchive& archive, const CheckpointHeader& h) {
  archive.write("kind", c10::IValue(h.kind));
  archive.write("format_version", c10::IValue(h.format_version));
  archive.write("config", c10::IValue(h.config.dump()));
  archive.write("step", c10::IValue(h.step));
  archive.write("data_rng_state", c10::IValue(h.data_rng_state));
}

CheckpointHeader read_header(torch::serialize::InputArchive& archive, std::string_view expected_kind) {
  CheckpointHeader h;
  c10::IValue v;
  archive.read("kind", v);
  h.kind = v.toStringRef();
  if (h.kind != expected_kind)
    throw ValidationError("checkpoint holds a '" + h.kind + "' model, expected '" + std::string(expected_kind) + "'");
  archive.read("format_version", v);
  h.format_version = v.toInt();
  if (h.format_version != kCheckpointVersion)
    throw ValidationError("unsupported checkpoint format version " + std::to_string(h.format_version));
  archive.read("config", v);
  h.config = nlohmann::json::parse(v.toStringRef());
  archive.read("step", v);
  h.step = v.toInt();
  archive.read("data_rng_state", v);
  h.data_rng_state = v.toStringRef();
  return h;
}

void write_module(torch::serialize::OutputArchive& archive, const std::string& key, const torch::nn::Module& module) {
  torch::serialize::OutputArchive sub;
  module.save(sub);
  archive.write(key, sub);
}

void read_module(torch::serialize::InputArchive& archive, const std::string& key, torch::nn::Module& module) {
  torch::serialize::InputArchive sub;
  archive.read(key, sub);
  module.load(sub);
}

namespace {

std::vector<torch::Tensor> optimizer_params(const torch::optim::Optimizer& opt) {
  std::vector<torch::Tensor> params;
  for (const auto& group : opt.param_groups())
    for (const auto& p : group.params()) params.push_back(p);
  return params;
}

const torch::optim::AdamParamState* adam_state(const torch::optim::Adam& opt, const torch::Tensor& p) {
  const auto it = opt.state().find(p.unsafeGetTensorImpl());
  return it == opt.state().end() ? nullptr : static_cast<const torch::optim::AdamParamState*>(it->second.get());
}

}  // namespace

// libtorch keys optimizer state by tensor address, which makes its own archive
// bytes differ between otherwise identical runs; state is stored by position.
void write_optimizer(torch::serialize::OutputArchive& archive, const std::string& key, const torch::optim::Adam& opt) {
  torch::serialize::OutputArchive sub;
  const auto params = optimizer_params(opt);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* st = adam_state(opt, params[i]);
    if (st == nullptr) continue;
    const auto k = std::to_string(i);
    sub.write(k + ".step", torch::tensor(st->step(), torch::kInt64), true);
    sub.write(k + ".exp_avg", st->exp_avg(), true);
    sub.write(k + ".exp_avg_sq", st->exp_avg_sq(), true);
    if (st->max_exp_avg_sq().defined()) sub.write(k + ".max_exp_avg_sq", st->max_exp_avg_sq(), true);
  }
  archive.write(key, sub);
}

void read_optimizer(torch::serialize::InputArchive& archive, const std::string& key, torch::optim::Adam& opt) {
  torch::serialize::InputArchive sub;
  archive.read(key, sub);
  const auto params = optimizer_params(opt);
  opt.state().clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto k = std::to_string(i);
    torch::Tensor step;
    if (!sub.try_read(k + ".step", step, true)) continue;
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(step.item<std::int64_t>());
    torch::Tensor a, b, m;
    sub.read(k + ".exp_avg", a, true);
    sub.read(k + ".exp_avg_sq", b, true);
    // Archive tensors share non-resizable storage; Adam updates them in place.
    st->exp_avg(a.clone());
    st->exp_avg_sq(b.clone());
    if (sub.try_read(k + ".max_exp_avg_sq", m, true)) st->max_exp_avg_sq(m.clone());
    opt.state()[params[i].unsafeGetTensorImpl()] = std::move(st);
  }
}

bool same_optimizer_state(const torch::optim::Adam& a, const torch::optim::Adam& b) {
  const auto pa = optimizer_params(a), pb = optimizer_params(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto *x = adam_state(a, pa[i]), *y = adam_state(b, pb[i]);
    if ((x == nullptr) != (y == nullptr)) return false;
    if (x == nullptr) continue;
    if (x->step() != y->step() || !torch::equal(x->exp_avg(), y->exp_avg()) ||
        !torch::equal(x->exp_avg_sq(), y->exp_avg_sq()))
      return false;
  }
  return true;
}

void save_archive(torch::serialize::OutputArchive& archive, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  // Serialise through a stream so the bytes do not depend on the file name.
  std::ostringstream buffer;
  archive.save_to(buffer);
  {
    std::ofstream out(tmp, std::ios::binary);
    out << buffer.str();
    if (!out) throw ResourceError("cannot write checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

torch::serialize::InputArchive open_archive(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ResourceError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  return archive;
}

bool same_weights(const torch::nn::Module& a, const torch::nn::Module& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  const auto ba = a.named_buffers(), bb = b.named_buffers();
  if (pa.size() != pb.size() || ba.size() != bb.size()) return false;
  for (const auto& item : pa) {
    const auto* other = pb.find(item.key());
    if (!other || !torch::equal(item.value(), *other)) return false;
  }
  for (const auto& item : ba) {
    const auto* other = bb.find(item.key());
    if (!other || !torch::equal(item.value(), *other)) return false;
  }
  return true;
}

}  // namespace histosynth::nn
