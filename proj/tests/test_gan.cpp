#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "histosynth/error.hpp"
#include "histosynth/gan.hpp"
#include "histosynth/phantom.hpp"

using namespace histosynth;
using namespace histosynth::gan;

namespace {

GanConfig small_config() {
  GanConfig c;
  c.image_size = 64;
  c.base_channels = 8;
  c.style_dim = 16;
  c.spade_hidden = 8;
  c.batch_size = 2;
  c.learning_rate = 2e-4;
  return c;
}

torch::Tensor random_one_hot(int h, int w, std::uint64_t seed) {
  auto gen = nn::make_generator(seed);
  const auto codes = torch::randint(0, kNumClasses, {h, w}, gen, torch::kLong);
  return torch::one_hot(codes, kNumClasses).permute({2, 0, 1}).to(torch::kFloat32);
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "histosynth_test_gan";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(SpadeModulation, IdentityModulationReturnsNormalizedActivations) {
  torch::manual_seed(1);
  SpadeNorm norm(4, kNumClasses, 8, 3);
  {
    torch::NoGradGuard g;
    norm->gamma->weight.zero_();
    norm->gamma->bias.fill_(1.0);
    norm->beta->weight.zero_();
    norm->beta->bias.zero_();
  }
  const auto x = torch::randn({4, 8, 8});
  const auto out = spade_modulation(x, random_one_hot(8, 8, 2), norm);
  EXPECT_TRUE(torch::allclose(out, normalize_activations(x.unsqueeze(0)).squeeze(0)));
  EXPECT_NEAR(out.mean().item<double>(), 0.0, 1e-5);
}

TEST(SpadeModulation, ConstantChannelsOutputBetaExactly) {
  torch::manual_seed(3);
  SpadeNorm norm(3, kNumClasses, 8, 3);
  const auto mask = random_one_hot(8, 8, 4);
  auto x = torch::ones({3, 8, 8});
  x[0] *= 0.3;
  x[1] *= -7.1;
  x[2] *= 1e4;
  const auto out = spade_modulation(x, mask, norm);
  torch::NoGradGuard g;
  const auto beta = norm->modulation(mask.unsqueeze(0)).second.squeeze(0);
  EXPECT_TRUE(torch::equal(out, beta));
}

TEST(SpadeModulation, MaskChangeStaysWithinReceptiveField) {
  torch::manual_seed(5);
  SpadeNorm norm(4, kNumClasses, 8, 3);
  const auto x = torch::randn({4, 16, 16});
  auto a = torch::zeros({kNumClasses, 16, 16});
  a[0].fill_(1.0);
  auto b = a.clone();
  b[0][7][9] = 0.0;
  b[code(Subtype::her2_3)][7][9] = 1.0;
  torch::NoGradGuard g;
  const auto diff = (spade_modulation(x, a, norm) - spade_modulation(x, b, norm)).abs().amax(0);
  // Shared 3×3 conv then 3×3 γ/β convs: radius 2.
  int changed = 0;
  for (int y = 0; y < 16; ++y)
    for (int xx = 0; xx < 16; ++xx) {
      const bool inside = std::abs(y - 7) <= 2 && std::abs(xx - 9) <= 2;
      const double d = diff[y][xx].item<double>();
      if (!inside) EXPECT_EQ(d, 0.0) << y << "," << xx;
      changed += d > 0;
    }
  EXPECT_GT(changed, 0);
}

TEST(SpadeModulation, OneByOneHeadsAreEquivariantUnderPermutation) {
  torch::manual_seed(6);
  SpadeNorm norm(5, kNumClasses, 8, 1);
  const auto x = torch::randn({5, 6, 6});
  const auto mask = random_one_hot(6, 6, 7);
  auto gen = nn::make_generator(8);
  const auto perm = torch::randperm(36, gen, torch::kLong);
  const auto permute = [&](const torch::Tensor& t) {
    return t.reshape({t.size(0), 36}).index_select(1, perm).reshape({t.size(0), 6, 6});
  };
  torch::NoGradGuard g;
  const auto lhs = permute(spade_modulation(x, mask, norm));
  const auto rhs = spade_modulation(permute(x), permute(mask), norm);
  EXPECT_TRUE(torch::allclose(lhs, rhs, 1e-5, 1e-6));
}

TEST(SpadeModulation, ShapeMismatchThrows) {
  SpadeNorm norm(4, kNumClasses, 8, 3);
  EXPECT_THROW(spade_modulation(torch::zeros({4, 8, 8}), torch::zeros({kNumClasses, 4, 4}), norm), ValidationError);
  EXPECT_THROW(spade_modulation(torch::zeros({3, 8, 8}), torch::zeros({kNumClasses, 8, 8}), norm), ValidationError);
  EXPECT_THROW(spade_modulation(torch::zeros({4, 8, 8}), torch::zeros({2, 8, 8}), norm), ValidationError);
}

TEST(GanConfig, RejectsInvalidValues) {
  auto c = small_config();
  c.image_size = 48;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.weights.kl = -1;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(nlohmann::json(c).get<GanConfig>().style_dim, c.style_dim);
}

TEST(GanModel, ZeroStepsIsReproducibleFromSeed) {
  auto a = GanModel::create(small_config(), 11);
  auto b = GanModel::create(small_config(), 11);
  auto c = GanModel::create(small_config(), 12);
  EXPECT_TRUE(a.identical_to(b));
  EXPECT_FALSE(a.identical_to(c));
}

TEST(GanModel, ResumeWithZeroStepsIsBitIdentical) {
  const auto data = phantom_patches(1, 4, 64, 3);
  auto m = GanModel::create(small_config(), 21);
  m.train(data, 2);
  const auto p1 = temp_path("resume1.pt");
  const auto p2 = temp_path("resume2.pt");
  m.save(p1);
  auto loaded = GanModel::load(p1);
  EXPECT_TRUE(loaded.identical_to(m));
  loaded.train(data, 0);
  loaded.save(p2);
  EXPECT_TRUE(file_bytes(p1) == file_bytes(p2));
}

TEST(GanModel, TrainingIsDeterministicAndResumable) {
  const auto data = phantom_patches(2, 4, 64, 3);
  auto a = GanModel::create(small_config(), 31);
  auto b = GanModel::create(small_config(), 31);
  const auto ha = a.train(data, 3);
  b.train(data, 2);
  const auto path = temp_path("split.pt");
  b.save(path);
  auto c = GanModel::load(path);
  const auto hc = c.train(data, 1);
  EXPECT_TRUE(a.identical_to(c));
  ASSERT_EQ(hc.size(), 1u);
  EXPECT_EQ(hc[0].step, 2);
  EXPECT_EQ(hc[0].generator, ha[2].generator);
  EXPECT_EQ(c.step(), 3);
}

TEST(GanModel, GenerateIsDeterministicAndStyleSensitive) {
  auto m = GanModel::create(small_config(), 41);
  const auto data = phantom_patches(3, 1, 64, 4);
  const auto& mask = data[0].patch.mask;
  const auto s1 = m.random_style(1);
  const auto s2 = m.random_style(2);
  const auto a = m.generate(mask, s1);
  EXPECT_EQ(a, m.generate(mask, s1));
  EXPECT_EQ(a.height(), 64);
  const auto b = m.generate(mask, s2);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i].r - b[i].r) + std::abs(a[i].g - b[i].g) + std::abs(a[i].b - b[i].b);
  EXPECT_GT(diff, 0.0);
}

TEST(GanModel, GenerateRejectsWrongSizes) {
  auto m = GanModel::create(small_config(), 42);
  EXPECT_THROW(m.generate(SubtypeMask(32, 32, 0), std::uint64_t{1}), ValidationError);
  StyleVector bad{std::vector<float>(3, 0.0f)};
  EXPECT_THROW(m.generate(SubtypeMask(64, 64, 0), bad), ValidationError);
}

TEST(GanModel, CheckpointKindIsChecked) {
  auto m = GanModel::create(small_config(), 43);
  const auto p = temp_path("kind.pt");
  m.save(p);
  EXPECT_NO_THROW(GanModel::load(p));
  EXPECT_THROW(GanModel::load(temp_path("missing.pt")), std::exception);
}
