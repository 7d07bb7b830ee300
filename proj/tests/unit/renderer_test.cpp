#include <gtest/gtest.h>

#include <random>

#include "../support.hpp"
#include "idf/renderer.hpp"

using namespace idf;
using TD = ad::Tensor<double>;

namespace {

Frame small_frame() { return support::wall_frame(16, 12, 2.0); }

MapOptions small_options() {
  MapOptions o;
  o.pos_freqs = 3;
  o.dir_freqs = 2;
  o.bounds = {Vec3(-3, -3, -3), Vec3(3, 3, 3)};
  return o;
}

Composite<double> composite_of(const std::vector<double>& sdf, const std::vector<double>& depth, double tr) {
  const auto m = Eigen::Index(sdf.size());
  Mat<double> s(1, m), d(1, m), c(m, 3);
  for (Eigen::Index j = 0; j < m; ++j) {
    s(0, j) = sdf[std::size_t(j)];
    d(0, j) = depth[std::size_t(j)];
    c.row(j) << 0.1 * double(j % 10), 0.5, 1.0 - 0.1 * double(j % 10);
  }
  return composite(TD::constant(s), TD::constant(c), d, tr);
}

}  // namespace

TEST(GenerateRays, PrincipalPixelLooksForward) {
  Frame f = small_frame();
  f.intrinsics.cx = 7;
  f.intrinsics.cy = 5;
  const Pixel px{5, 7};
  const auto rays = generate_rays(f, PoseSE3::identity(), std::span<const Pixel>(&px, 1));
  EXPECT_LT((rays[0].direction - Vec3::UnitZ()).norm(), 1e-15);
  EXPECT_DOUBLE_EQ(rays[0].measured_depth, 2.0);
}

TEST(GenerateRays, TranslationMovesOrigins) {
  const Frame f = small_frame();
  PoseSE3 p;
  p.t = Vec3(1, -2, 3);
  const std::vector<Pixel> px{{0, 0}, {11, 15}, {6, 3}};
  for (const auto& r : generate_rays(f, p, px)) EXPECT_EQ(r.origin, p.t);
}

TEST(GenerateRays, CornerDirectionsMatchDirectFormula) {
  const Frame f = small_frame();
  std::mt19937_64 rng(1);
  const PoseSE3 pose = support::random_pose(rng, 2.0, 1.0);
  const std::vector<Pixel> px{{0, 0}, {0, 15}, {11, 0}, {11, 15}};
  const auto rays = generate_rays(f, pose, px);
  const Mat3 Kinv = f.intrinsics.matrix().inverse();
  for (std::size_t i = 0; i < px.size(); ++i) {
    const Vec3 cam = Kinv * Vec3(px[i].col, px[i].row, 1);
    const Vec3 ref = (pose.R * cam).normalized();
    EXPECT_LT((rays[i].direction - ref).norm(), 1e-12);
    EXPECT_NEAR(rays[i].direction.norm(), 1.0, 1e-12);
    // measured depth becomes distance along the ray
    EXPECT_NEAR(rays[i].measured_depth, 2.0 * cam.norm(), 1e-6);
  }
}

TEST(GenerateRays, OutOfBoundsPixelIsRejected) {
  const Frame f = small_frame();
  const Pixel px{12, 0};
  EXPECT_THROW(generate_rays(f, PoseSE3::identity(), std::span<const Pixel>(&px, 1)), ContractViolation);
}

TEST(SampleAlongRay, InvalidDepthIsAllStratified) {
  Ray r;
  r.measured_depth = 0;
  std::mt19937_64 rng(2);
  const auto s = sample_along_ray(r, 30, 0.1, 0.05, 5.0, rng);
  ASSERT_EQ(s.size(), 30u);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(s.labels[i], Region::kBehind);
    EXPECT_GE(s.depths[i], 0.05);
    EXPECT_LE(s.depths[i], 5.0);
    // one sample per stratum
    const double bin = (5.0 - 0.05) / 30;
    EXPECT_GE(s.depths[i], 0.05 + double(i) * bin);
    EXPECT_LE(s.depths[i], 0.05 + double(i + 1) * bin);
  }
}

TEST(SampleAlongRay, LabelsAndTargets) {
  Ray r;
  r.measured_depth = 2.0;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = sample_along_ray(r, 144, 0.1, 0.05, 6.0, rng);
    ASSERT_EQ(s.size(), 144u);
    int surf = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double d = s.depths[i];
      if (i > 0) {
        EXPECT_GT(d, s.depths[i - 1]);
      }
      if (d < 1.9) {
        EXPECT_EQ(s.labels[i], Region::kFreeSpace);
        EXPECT_DOUBLE_EQ(s.sdf_targets[i], 0.1);
      } else if (d <= 2.1) {
        EXPECT_EQ(s.labels[i], Region::kTruncation);
        EXPECT_NEAR(s.sdf_targets[i], std::clamp(2.0 - d, -0.1, 0.1), 1e-15);
        ++surf;
      } else {
        EXPECT_EQ(s.labels[i], Region::kBehind);
      }
    }
    EXPECT_GE(surf, 48);  // the surface-band samples, plus any strata landing there
  }
}

TEST(SampleAlongRay, TargetAtExampleDepths) {
  // the clamped difference evaluated directly at the two example depths
  EXPECT_NEAR(std::clamp(2.0 - 1.95, -0.1, 0.1), 0.05, 1e-12);
  EXPECT_NEAR(std::clamp(2.0 - 2.05, -0.1, 0.1), -0.05, 1e-12);
  Ray r;
  r.measured_depth = 2.0;
  std::mt19937_64 rng(4);
  bool saw_pos = false, saw_neg = false;
  for (int t = 0; t < 200 && !(saw_pos && saw_neg); ++t) {
    const auto s = sample_along_ray(r, 12, 0.1, 0.05, 4.0, rng);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.labels[i] != Region::kTruncation) continue;
      EXPECT_NEAR(s.sdf_targets[i], 2.0 - s.depths[i], 1e-12);
      saw_pos |= s.sdf_targets[i] > 0;
      saw_neg |= s.sdf_targets[i] < 0;
    }
  }
  EXPECT_TRUE(saw_pos && saw_neg);
}

TEST(SampleAlongRay, Contracts) {
  Ray r;
  std::mt19937_64 rng(5);
  EXPECT_THROW(sample_along_ray(r, 10, 0.1, 2.0, 1.0, rng), ContractViolation);
  EXPECT_THROW(sample_along_ray(r, 1, 0.1, 0.1, 1.0, rng), ContractViolation);
}

TEST(Composite, SingleSampleTakesItsValues) {
  const auto c = composite_of({0.37}, {1.25}, 0.1);
  EXPECT_DOUBLE_EQ(c.weights.value()(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(c.depth.value()(0, 0), 1.25);
  EXPECT_DOUBLE_EQ(c.rgb.value()(0, 1), 0.5);
}

TEST(Composite, ConstantSdfGivesMeanDepth) {
  const auto c = composite_of({0.03, 0.03, 0.03, 0.03}, {1, 2, 3, 6}, 0.1);
  EXPECT_NEAR(c.depth.value()(0, 0), 3.0, 1e-12);
}

TEST(Composite, WeightPeaksAtZeroCrossing) {
  const auto c = composite_of({0.1, 0.0, -0.1}, {1, 2, 3}, 0.1);
  const auto& w = c.weights.value();
  EXPECT_GT(w(0, 1), w(0, 0));
  EXPECT_GT(w(0, 1), w(0, 2));
}

TEST(Composite, DegenerateRayFallsBackToUniform) {
  const auto c = composite_of({50.0, 60.0, 70.0}, {1, 2, 3}, 0.1);
  EXPECT_TRUE(c.degenerate[0]);
  EXPECT_NEAR(c.depth.value()(0, 0), 2.0, 1e-12);
}

TEST(Composite, AnalyticSphereDepth) {
  // unit sphere at the origin, ray from (0,0,-3) along +z: surface at t = 2.
  // Samples stop at the centre: the weight has no occlusion term, so a far-side
  // crossing would count as much as the visible one.
  const double tr = 0.1;
  std::vector<double> sdf, depth;
  for (int i = 0; i < 400; ++i) {
    const double t = 0.05 + i * (3.0 - 0.05) / 399;
    depth.push_back(t);
    sdf.push_back(std::abs(-3.0 + t) - 1.0);
  }
  const auto c = composite_of(sdf, depth, tr);
  EXPECT_NEAR(c.depth.value()(0, 0), 2.0, tr / 4);
}

TEST(Render, WeightsNormalizedAndOutputsBounded) {
  ImplicitMap<double> map(small_options(), 1);
  const Frame f = small_frame();
  std::mt19937_64 rng(6);
  std::vector<Pixel> px;
  for (int i = 0; i < 20; ++i) px.push_back({int(rng() % 12), int(rng() % 16)});
  const auto rays = generate_rays(f, PoseSE3::identity(), px);
  std::vector<RaySampleSet> sets;
  for (const auto& r : rays) sets.push_back(sample_along_ray(r, 24, 0.1, 0.05, 5.0, rng));
  const auto b = render_rays<double>(map, rays, sets, 0.1);
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const auto I = Eigen::Index(i);
    if (!b.comp.degenerate[i]) {
      EXPECT_NEAR(b.comp.weights.value().row(I).sum(), 1.0, 1e-6);
    }
    EXPECT_GE(b.comp.weights.value().row(I).minCoeff(), 0.0);
    EXPECT_GE(b.comp.depth.value()(I, 0), sets[i].depths.front() - 1e-12);
    EXPECT_LE(b.comp.depth.value()(I, 0), sets[i].depths.back() + 1e-12);
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(b.comp.rgb.value()(I, k), 0.0);
      EXPECT_LE(b.comp.rgb.value()(I, k), 1.0);
    }
  }
  // single-ray wrapper agrees
  const auto one = render<double>(map, sets[3], rays[3], 0.1);
  EXPECT_NEAR(one.depth, b.comp.depth.value()(3, 0), 1e-12);
  EXPECT_EQ(one.sdf.size(), 24u);
}

TEST(Render, DepthGradientMatchesFiniteDifferences) {
  ImplicitMap<double> map(small_options(), 2);
  const Frame f = small_frame();
  std::mt19937_64 rng(7);
  const std::vector<Pixel> px{{3, 4}, {8, 12}, {6, 6}};
  const auto rays = generate_rays(f, PoseSE3::identity(), px);
  std::vector<RaySampleSet> sets;
  for (const auto& r : rays) sets.push_back(sample_along_ray(r, 16, 0.5, 0.05, 4.0, rng));
  auto fn = [&] { return ad::sum(render_rays<double>(map, rays, sets, 0.5).comp.depth); };
  EXPECT_LT(support::gradient_check(map.parameters(), fn, 100, rng, 1e-6, 1e-7), 1e-3);
}

TEST(Render, PoseIncrementGradientMatchesFiniteDifferences) {
  ImplicitMap<double> map(small_options(), 3);
  const Frame f = small_frame();
  std::mt19937_64 rng(8);
  PoseSE3 pose;
  pose.t = Vec3(0.2, -0.1, 0.3);
  const std::vector<Pixel> px{{3, 4}, {8, 12}, {6, 6}, {0, 15}};
  const auto rays = generate_rays(f, pose, px);
  std::vector<RaySampleSet> sets;
  for (const auto& r : rays) sets.push_back(sample_along_ray(r, 16, 0.5, 0.05, 4.0, rng));
  auto delta = TD::parameter(support::random_matrix(1, 6, rng, -0.05, 0.05));
  PoseIncrement<double> inc{delta, pose.t};
  auto fn = [&] {
    auto b = render_rays<double>(map, rays, sets, 0.5, &inc);
    return ad::add(ad::sum(b.comp.depth), ad::sum(b.comp.rgb));
  };
  EXPECT_LT(support::gradient_check({delta}, fn, 30, rng, 1e-6, 1e-7), 1e-4);
}

TEST(Render, IncrementMatchesRenderingAtMovedPose) {
  ImplicitMap<double> map(small_options(), 4);
  const Frame f = small_frame();
  std::mt19937_64 rng(9);
  PoseSE3 pose;
  pose.t = Vec3(0.2, -0.1, 0.3);
  Vec6 d;
  d << 0.05, -0.02, 0.03, 0.1, 0.0, -0.05;
  const std::vector<Pixel> px{{3, 4}, {8, 12}};
  const auto rays = generate_rays(f, pose, px);
  std::vector<RaySampleSet> sets;
  for (const auto& r : rays) sets.push_back(sample_along_ray(r, 16, 0.2, 0.05, 4.0, rng));
  Mat<double> dm(1, 6);
  for (int k = 0; k < 6; ++k) dm(0, k) = d(k);
  PoseIncrement<double> inc{TD::constant(dm), pose.t};
  const auto a = render_rays<double>(map, rays, sets, 0.2, &inc);
  const auto moved_rays = generate_rays(f, apply_increment(pose, d, pose.t), px);
  const auto b = render_rays<double>(map, moved_rays, sets, 0.2);
  EXPECT_LT((a.comp.depth.value() - b.comp.depth.value()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((a.comp.rgb.value() - b.comp.rgb.value()).cwiseAbs().maxCoeff(), 1e-10);
}
