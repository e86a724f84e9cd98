#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "histosynth/annotation.hpp"
#include "histosynth/error.hpp"
#include "histosynth/rng.hpp"
#include "oracles.hpp"

using namespace histosynth;

namespace {

Region square(int id, Subtype s, double x0, double y0, double x1, double y1) {
  return {id, s, {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}};
}

void expect_matches_oracle(const AnnotationDocument& doc, int w, int h) {
  const auto got = rasterize_annotations(doc, w, h);
  const auto want = oracle::rasterize(doc, w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y) * w + x;
      ASSERT_EQ(got.mask(y, x), want.codes[i]) << "pixel " << x << "," << y;
      ASSERT_EQ(got.instances(y, x), want.ids[i]) << "pixel " << x << "," << y;
    }
}

}  // namespace

TEST(Rasterize, EmptyDocumentGivesZeroArrays) {
  const auto r = rasterize_annotations({"s", {}}, 8, 8);
  for (auto v : r.mask.values()) EXPECT_EQ(v, 0);
  for (auto v : r.instances.values()) EXPECT_EQ(v, 0);
}

TEST(Rasterize, AxisAlignedSquareCoversSixteenPixels) {
  AnnotationDocument doc{"s", {square(7, Subtype::her2_3, 2, 2, 6, 6)}};
  const auto r = rasterize_annotations(doc, 8, 8);
  int count = 0;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool inside = x >= 2 && x <= 5 && y >= 2 && y <= 5;
      EXPECT_EQ(r.mask(y, x), inside ? 4 : 0);
      EXPECT_EQ(r.instances(y, x), inside ? 7 : 0);
      count += inside;
    }
  EXPECT_EQ(count, 16);
  expect_matches_oracle(doc, 8, 8);
}

TEST(Rasterize, LaterRegionWinsOverlap) {
  AnnotationDocument doc{"s", {square(1, Subtype::her2_2, 1, 1, 5, 5), square(2, Subtype::her2_0, 3, 3, 7, 7)}};
  const auto r = rasterize_annotations(doc, 8, 8);
  EXPECT_EQ(r.mask(3, 3), code(Subtype::her2_0));
  EXPECT_EQ(r.instances(4, 4), 2);
  EXPECT_EQ(r.mask(1, 1), code(Subtype::her2_2));
  expect_matches_oracle(doc, 8, 8);
}

TEST(Rasterize, FullFramePolygonFillsEverything) {
  for (auto s : kTumorSubtypes) {
    const auto r = rasterize_annotations({"s", {square(3, s, 0, 0, 13, 9)}}, 13, 9);
    for (auto v : r.mask.values()) ASSERT_EQ(v, code(s));
  }
}

TEST(Rasterize, RandomPolygonsMatchBruteForce) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    AnnotationDocument doc{"s", {}};
    const int w = rng.between(5, 30), h = rng.between(5, 30);
    const int n = rng.between(1, 4);
    for (int k = 0; k < n; ++k) {
      Region r{k + 1, kTumorSubtypes[rng.below(5)], {}};
      const int verts = rng.between(3, 9);
      for (int v = 0; v < verts; ++v) {
        // Mix of integer and fractional vertices to hit pixel-center ties.
        const bool snap = rng.below(2) == 0;
        double x = rng.uniform(0, w), y = rng.uniform(0, h);
        if (snap) {
          x = std::round(x * 2) / 2;
          y = std::round(y * 2) / 2;
        }
        r.polygon.push_back({x, y});
      }
      doc.regions.push_back(r);
    }
    expect_matches_oracle(doc, w, h);
  }
}

TEST(Rasterize, DegeneratePolygonNamesInstance) {
  AnnotationDocument doc{"s", {{42, Subtype::her2_1, {{0, 0}, {3, 3}}}}};
  try {
    rasterize_annotations(doc, 8, 8);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
  }
}

TEST(Rasterize, OutOfBoundsVertexRejected) {
  AnnotationDocument doc{"s", {square(1, Subtype::her2_1, 2, 2, 9, 5)}};
  EXPECT_THROW(rasterize_annotations(doc, 8, 8), ValidationError);
  EXPECT_THROW(rasterize_annotations({"s", {}}, 0, 8), ValidationError);
}

TEST(Annotation, BackgroundRegionAndDuplicateIdsRejected) {
  EXPECT_THROW(validate(AnnotationDocument{"s", {square(1, Subtype::background, 0, 0, 2, 2)}}), ValidationError);
  EXPECT_THROW(validate(AnnotationDocument{"s", {square(1, Subtype::cis, 0, 0, 2, 2), square(1, Subtype::cis, 0, 0, 2, 2)}}),
               ValidationError);
}

TEST(Annotation, JsonSchemaRoundTrip) {
  const auto j = nlohmann::json::parse(R"({"slide_id":"A1","regions":[
      {"instance_id":3,"subtype":"her2_2","polygon":[[0,0],[4,0],[4,4]]},
      {"instance_id":5,"subtype":5,"polygon":[[1,1],[2,1],[2,2],[1,2]]}]})");
  const auto doc = j.get<AnnotationDocument>();
  ASSERT_EQ(doc.regions.size(), 2u);
  EXPECT_EQ(doc.regions[0].subtype, Subtype::her2_2);
  EXPECT_EQ(doc.regions[1].subtype, Subtype::cis);
  const nlohmann::json back = doc;
  EXPECT_EQ(back["regions"][1]["subtype"], "cis");
  EXPECT_EQ(back.get<AnnotationDocument>().regions[0].polygon, doc.regions[0].polygon);
}

TEST(Subtype, CodeNameBijection) {
  for (int c = 0; c < kNumClasses; ++c) {
    const auto s = *subtype_from_code(c);
    EXPECT_EQ(subtype_from_name(name(s)), s);
  }
  EXPECT_FALSE(subtype_from_code(6));
  EXPECT_FALSE(subtype_from_name("her2_4"));
}
