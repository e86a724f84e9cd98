#include <gtest/gtest.h>

#include <map>

#include "histosynth/error.hpp"
#include "histosynth/phantom.hpp"
#include "histosynth/sampling.hpp"
#include "oracles.hpp"

using namespace histosynth;

namespace {

// A strip of `n` one-pixel instances with ids 1..n, all her2_1.
LabeledPatch strip_of_instances(int n) {
  LabeledPatch p{RgbImage(1, n + 3), SubtypeMask(1, n + 3, 0), InstanceMap(1, n + 3, 0), "s", {}};
  for (int i = 0; i < n; ++i) {
    p.mask(0, i + 1) = code(Subtype::her2_1);
    p.instances(0, i + 1) = static_cast<std::uint16_t>(i + 1);
  }
  return p;
}

ClassHistogram single_subtype_histogram(Subtype s, std::int64_t pixels) {
  ClassHistogram h{};
  h[code(s)] = pixels;
  h[0] = 4096 - pixels;
  return h;
}

}  // namespace

TEST(Randomize, NoInstancesLeavesMaskUnchanged) {
  const auto s = generate_phantom_slide(1, 64, 0);
  LabeledPatch p{s.image, s.mask, s.instances, "s", {}};
  EXPECT_EQ(randomize_instance_subtypes(p, kTumorSubtypes, 3), p.mask);
}

TEST(Randomize, SingleClassForcesOutcome) {
  const auto s = generate_phantom_slide(2, 128, 10);
  LabeledPatch p{s.image, s.mask, s.instances, "s", {}};
  const std::array<Subtype, 1> only{Subtype::cis};
  const auto m = randomize_instance_subtypes(p, only, 5);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(m[i], p.mask[i] ? code(Subtype::cis) : 0);
}

TEST(Randomize, GeometryPreservedAndOneSubtypePerInstance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = generate_phantom_slide(seed, 128, 12);
    LabeledPatch p{s.image, s.mask, s.instances, "s", {}};
    LabeledPatch q = p;
    q.mask = randomize_instance_subtypes(p, kTumorSubtypes, seed + 100);
    validate(q);
    for (std::size_t i = 0; i < p.mask.size(); ++i) ASSERT_EQ(q.mask[i] > 0, p.mask[i] > 0);
    EXPECT_EQ(q.mask, randomize_instance_subtypes(p, kTumorSubtypes, seed + 100));
  }
}

TEST(Randomize, TenThousandInstancesAreUniform) {
  const auto p = strip_of_instances(10000);
  const auto m = randomize_instance_subtypes(p, kTumorSubtypes, 2024);
  std::map<int, int> counts;
  for (int i = 0; i < 10000; ++i) ++counts[m(0, i + 1)];
  double chi2 = 0;
  for (auto s : kTumorSubtypes) {
    const double d = counts[code(s)] - 2000.0;
    chi2 += d * d / 2000.0;
    // Binomial sd is sqrt(10000 · 0.2 · 0.8) = 40.
    EXPECT_LT(std::abs(d), 3 * 40.0);
  }
  EXPECT_GT(oracle::chi_square_sf_even_dof(chi2, 4), 0.001);
  EXPECT_EQ(m(0, 0), 0);
  EXPECT_EQ(m(0, 10001), 0);
}

TEST(Randomize, RejectsBadClassLists) {
  const auto p = strip_of_instances(3);
  EXPECT_THROW(randomize_instance_subtypes(p, std::span<const Subtype>{}, 0), ValidationError);
  const std::array<Subtype, 1> bg{Subtype::background};
  EXPECT_THROW(randomize_instance_subtypes(p, bg, 0), ValidationError);
}

TEST(Sampler, EqualPixelCountsGiveEqualWeights) {
  std::vector<ClassHistogram> h;
  for (auto s : kTumorSubtypes) h.push_back(single_subtype_histogram(s, 500));
  TrainingSampler sampler(h, {SamplingKind::subtype_sampled, 1, 0.2});
  for (double p : sampler.probabilities()) EXPECT_NEAR(p, 0.2, 1e-12);
}

TEST(Sampler, MinoritySubtypeDrawnNineTimesMoreOften) {
  // 9 her2_3 patches and 1 her2_0 patch of equal tumor area: 90% / 10% pixels.
  std::vector<ClassHistogram> h;
  for (int i = 0; i < 9; ++i) h.push_back(single_subtype_histogram(Subtype::her2_3, 1000));
  h.push_back(single_subtype_histogram(Subtype::her2_0, 1000));
  TrainingSampler sampler(h, {SamplingKind::subtype_sampled, 77, 0.2});
  EXPECT_NEAR(sampler.probabilities()[9] / sampler.probabilities()[0], 9.0, 1e-9);
  EXPECT_EQ(sampler.excluded_subtypes().size(), 3u);

  std::map<Subtype, double> drawn;
  for (int i = 0; i < 10000; ++i) {
    const auto k = sampler.next();
    drawn[sampler.dominant(k)] += 1000;
  }
  EXPECT_NEAR(drawn[Subtype::her2_0] / drawn[Subtype::her2_3], 1.0, 0.1);
}

TEST(Sampler, TumorSampledIsUniformOverTumorPatches) {
  std::vector<ClassHistogram> h;
  for (int i = 0; i < 9; ++i) h.push_back(single_subtype_histogram(Subtype::her2_3, 1000));
  h.push_back(single_subtype_histogram(Subtype::her2_0, 100));
  h.push_back(single_subtype_histogram(Subtype::background, 0));
  TrainingSampler sampler(h, {SamplingKind::tumor_sampled, 3, 0.2});
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(sampler.probabilities()[i], 0.08, 1e-12);
  EXPECT_NEAR(sampler.probabilities()[10], 0.2, 1e-12);
}

TEST(Sampler, BackgroundShareHonoured) {
  std::vector<ClassHistogram> h{single_subtype_histogram(Subtype::her2_1, 100),
                                single_subtype_histogram(Subtype::background, 0),
                                single_subtype_histogram(Subtype::background, 0)};
  TrainingSampler sampler(h, {SamplingKind::subtype_sampled, 9, 0.2});
  int bg = 0;
  for (int i = 0; i < 20000; ++i) bg += sampler.next() != 0;
  EXPECT_NEAR(bg / 20000.0, 0.2, 0.015);
}

TEST(Sampler, SameSeedSameStream) {
  std::vector<ClassHistogram> h;
  for (int i = 0; i < 6; ++i) h.push_back(single_subtype_histogram(kTumorSubtypes[i % 5], 100 + 10 * i));
  TrainingSampler a(h, {SamplingKind::subtype_sampled, 5, 0.2});
  TrainingSampler b(h, {SamplingKind::subtype_sampled, 5, 0.2});
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

namespace {

Dataset numbered(int n, const std::string& method) {
  Dataset d;
  for (int i = 0; i < n; ++i) {
    DatasetItem item;
    item.id = method + std::to_string(i);
    item.provenance.method = method;
    d.push_back(item);
  }
  return d;
}

}  // namespace

TEST(Mix, EqualAmountDoublesDataset) {
  const auto out = mix_real_synthetic(numbered(100, "real"), numbered(150, "diffusion"), {1.0, GenMethod::diffusion, 4});
  ASSERT_EQ(out.size(), 200u);
  int synthetic = 0;
  std::set<std::string> ids;
  for (const auto& item : out) {
    synthetic += item.provenance.method == "diffusion";
    ids.insert(item.id);
  }
  EXPECT_EQ(synthetic, 100);
  EXPECT_EQ(ids.size(), 200u);  // without replacement
}

TEST(Mix, RatioZeroIsIdentity) {
  const auto real = numbered(10, "real");
  const auto out = mix_real_synthetic(real, {}, {0.0, GenMethod::gan, 1});
  ASSERT_EQ(out.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(out[i].id, real[i].id);
}

TEST(Mix, FourHundredPercent) {
  EXPECT_EQ(mix_real_synthetic(numbered(100, "real"), numbered(400, "gan"), {4.0, GenMethod::gan, 1}).size(), 500u);
}

TEST(Mix, SizeFormulaAcrossRatios) {
  for (double r : {0.0, 0.5, 1.0, 2.0, 4.0, 0.3, 1.7})
    for (int n : {1, 7, 33})
      EXPECT_EQ(mix_real_synthetic(numbered(n, "real"), numbered(5 * n, "gan"), {r, GenMethod::gan, 2}).size(),
                static_cast<std::size_t>(n) + static_cast<std::size_t>(std::floor(r * n + 1e-9)));
}

TEST(Mix, ShortPoolNamesShortfall) {
  try {
    mix_real_synthetic(numbered(10, "real"), numbered(15, "gan"), {2.0, GenMethod::gan, 1});
    FAIL();
  } catch (const ResourceError& e) {
    EXPECT_NE(std::string(e.what()).find("short by 5"), std::string::npos);
  }
}
