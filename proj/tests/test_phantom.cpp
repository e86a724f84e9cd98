#include <gtest/gtest.h>

#include "histosynth/error.hpp"
#include "histosynth/patch.hpp"
#include "histosynth/phantom.hpp"

using namespace histosynth;

TEST(Phantom, NoInstancesMeansPureBackground) {
  const auto s = generate_phantom_slide(1, 128, 0);
  for (auto v : s.mask.values()) EXPECT_EQ(v, 0);
  for (auto v : s.instances.values()) EXPECT_EQ(v, 0);
  EXPECT_TRUE(s.doc.regions.empty());
  EXPECT_EQ(count_tumor_signature_regions(s.image), 0);
}

TEST(Phantom, SameSeedBitIdentical) {
  const auto a = generate_phantom_slide(42, 96, 9);
  const auto b = generate_phantom_slide(42, 96, 9);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.instances, b.instances);
  const auto c = generate_phantom_slide(43, 96, 9);
  EXPECT_NE(a.image, c.image);
}

TEST(Phantom, LabelsSatisfyPatchInvariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = generate_phantom_slide(seed, 128, 10);
    validate(LabeledPatch{s.image, s.mask, s.instances, "s", {}});
    EXPECT_EQ(rasterize_annotations(s.doc, 128, 128).mask, s.mask);
  }
}

TEST(Phantom, BrownIndexMonotoneInHer2Level) {
  for (std::size_t i = 0; i + 1 < kHer2Subtypes.size(); ++i)
    EXPECT_LT(nominal_signature(kHer2Subtypes[i]).brown, nominal_signature(kHer2Subtypes[i + 1]).brown);
  // Measured on rendered tissue as well.
  PhantomOptions opt;
  for (std::size_t k = 0; k < kHer2Subtypes.size(); ++k) {
    opt.subtype_weights = {0, 0, 0, 0, 0};
    opt.subtype_weights[k] = 1;
    const auto s = generate_phantom_slide(10 + k, 256, 20, opt);
    const auto f = stain_features(s.image, tumor_target(s.mask));
    EXPECT_NEAR(f.brown, nominal_signature(kHer2Subtypes[k]).brown, 0.03);
  }
}

TEST(Phantom, ThresholdClassifierDecodesTwoHundredInstances) {
  const auto s = generate_phantom_slide(2024, 512, 200);
  std::map<std::uint16_t, Subtype> truth;
  for (const auto& r : s.doc.regions) truth[static_cast<std::uint16_t>(r.instance_id)] = r.subtype;
  const auto decoded = classify_instances(s.image, s.instances);
  int correct = 0;
  for (const auto& [id, sub] : decoded) correct += truth.at(id) == sub;
  ASSERT_GE(decoded.size(), 190u);
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(decoded.size()), 0.99);
}

TEST(Phantom, SignatureRegionsCountInstances) {
  PhantomOptions opt;
  opt.min_radius = 6;
  opt.max_radius = 9;
  const auto s = generate_phantom_slide(8, 128, 5, opt);
  EXPECT_EQ(count_tumor_signature_regions(s.image), static_cast<int>(s.doc.regions.size()));
}

TEST(Phantom, PreconditionsEnforced) {
  EXPECT_THROW(generate_phantom_slide(0, 32, 1), ValidationError);
  EXPECT_THROW(generate_phantom_slide(0, 64, -1), ValidationError);
}
