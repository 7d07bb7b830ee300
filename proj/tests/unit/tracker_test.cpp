#include <gtest/gtest.h>

#include <numbers>
#include <random>
#include <set>

#include "../support.hpp"
#include "idf/eval/synthetic.hpp"
#include "idf/tracker.hpp"

using namespace idf;

namespace {

std::vector<Vec3> random_points(std::mt19937_64& rng, int n) {
  std::vector<Vec3> p;
  for (int i = 0; i < n; ++i) p.push_back(support::random_matrix(1, 3, rng, -2, 2).row(0).transpose());
  return p;
}

std::vector<Vec3> transform(const PoseSE3& T, const std::vector<Vec3>& p) {
  std::vector<Vec3> out;
  for (const auto& x : p) out.push_back(T * x);
  return out;
}

double rotation_gap(const PoseSE3& a, const PoseSE3& b) { return (a.R - b.R).norm(); }

// Flat gray frame at constant depth, with value noise only inside one 4x4 cell.
Frame one_textured_cell(int W, int H, int cell, std::uint64_t seed) {
  Frame f = support::wall_frame(W, H, 2.0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const bool in = grid_cell_4x4({r, c}, W, H) == cell;
      for (int k = 0; k < 3; ++k) f.rgb.at(r, c, k) = in ? u(rng) : 0.5f;
    }
  return f;
}

struct Room {
  eval::SyntheticScene scene;
  eval::SyntheticSequence seq;
};

const Room& room() {
  static const Room r = [] {
    Room x;
    x.seq = eval::make_room_sequence(3, 40, 80, 60, &x.scene);
    return x;
  }();
  return r;
}

}  // namespace

TEST(FeatureExtractor, ShapeNormalizationAndDeterminism) {
  FeatureExtractor ex(16, 32, 1);
  const Frame f = room().seq.frames[0];
  const auto a = ex.extract(f.rgb), b = ex.extract(f.rgb);
  EXPECT_EQ(a.width, 80);
  EXPECT_EQ(a.height, 60);
  EXPECT_EQ(a.features.rows(), 80 * 60);
  EXPECT_EQ(a.dim(), 32);
  EXPECT_EQ(a.features, b.features);
  for (Eigen::Index i = 0; i < a.features.rows(); i += 97) EXPECT_NEAR(a.features.row(i).norm(), 1.0, 1e-5);
}

TEST(FeatureExtractor, ConstantImageGivesIdenticalInteriorFeatures) {
  FeatureExtractor ex(16, 32, 2);
  Image img(20, 15, 3, 0.3f);
  const auto f = ex.extract(img);
  // receptive field of three 3x3 convolutions: 3 pixels from the border
  const auto ref = f.features.row(f.index(7, 10));
  for (int r = 3; r < 12; ++r)
    for (int c = 3; c < 17; ++c) EXPECT_LT((f.features.row(f.index(r, c)) - ref).norm(), 1e-6);
}

TEST(FeatureExtractor, SameSeedSameWeightsAndCopiesAreIndependent) {
  FeatureExtractor a(8, 16, 5), b(8, 16, 5);
  EXPECT_EQ(a.trunk_checksum(), b.trunk_checksum());
  EXPECT_EQ(a.outconv_checksum(), b.outconv_checksum());
  FeatureExtractor c = a;
  c.outconv_weight.mutable_value()(0, 0) += 1;
  EXPECT_NE(a.outconv_checksum(), c.outconv_checksum());
}

TEST(Correspondences, IdenticalFramesMatchThemselvesUnderTheCellCap) {
  FeatureExtractor ex(32, 32, 3);
  const Frame& f = room().seq.frames[0];
  const auto fm = ex.extract(f.rgb);
  const auto set = find_correspondences(fm, fm, f, f, 200);
  EXPECT_LE(set.size(), 200u);
  std::array<int, 16> per{};
  for (const auto& e : set.entries) {
    EXPECT_EQ(e.current.row, e.reference.row);
    EXPECT_EQ(e.current.col, e.reference.col);
    EXPECT_EQ(e.w, 1.0);
    EXPECT_EQ(e.cell, grid_cell_4x4(e.current, 80, 60));
    ++per[e.cell];
  }
  for (int n : per) EXPECT_LE(n, 12);
}

TEST(Correspondences, TextureInOneCellStillSpreadsAcrossCells) {
  FeatureExtractor ex(32, 32, 4);
  for (int cell : {0, 5, 15}) {
    const Frame f = one_textured_cell(64, 48, cell, 10 + cell);
    const auto fm = ex.extract(f.rgb);
    const auto set = find_correspondences(fm, fm, f, f, 200);
    std::array<int, 16> per{};
    for (const auto& e : set.entries) ++per[e.cell];
    int cells = 0;
    for (int n : per) {
      EXPECT_LE(n, 12);
      cells += n > 0;
    }
    EXPECT_GE(cells, 4);
  }
}

TEST(Correspondences, TotalCapAndContracts) {
  FeatureExtractor ex(16, 16, 5);
  const Frame& f = room().seq.frames[0];
  const auto fm = ex.extract(f.rgb);
  EXPECT_LE(find_correspondences(fm, fm, f, f, 40).size(), 40u);
  EXPECT_THROW(find_correspondences(fm, fm, f, f, 15), ContractViolation);
  Frame empty = f;
  empty.depth.data.assign(empty.depth.data.size(), 0.f);
  EXPECT_THROW(find_correspondences(fm, fm, empty, f, 200), TrackerLost);
}

TEST(Correspondences, PointsAreBackProjectedThroughDepth) {
  FeatureExtractor ex(16, 16, 6);
  const Frame& f = room().seq.frames[0];
  const auto fm = ex.extract(f.rgb);
  const auto set = find_correspondences(fm, fm, f, f, 64);
  for (const auto& e : set.entries) {
    const double d = f.depth.at(e.current.row, e.current.col);
    EXPECT_NEAR(e.p_c.z(), d, 1e-12);
    EXPECT_NEAR(f.intrinsics.fx * e.p_c.x() / e.p_c.z() + f.intrinsics.cx, e.current.col, 1e-9);
  }
}

TEST(Procrustes, IdentityWhenPointsCoincide) {
  std::mt19937_64 rng(1);
  const auto p = random_points(rng, 10);
  const std::vector<double> w(10, 1.0);
  const PoseSE3 T = weighted_procrustes(p, p, w);
  EXPECT_LT(rotation_gap(T, PoseSE3::identity()), 1e-12);
  EXPECT_LT(T.t.norm(), 1e-12);
}

TEST(Procrustes, QuarterTurnAboutZ) {
  std::mt19937_64 rng(2);
  PoseSE3 truth;
  truth.R = so3_exp(Vec3(0, 0, std::numbers::pi / 2));
  truth.t = Vec3(0.1, 0, 0);
  const auto pc = random_points(rng, 8);
  const PoseSE3 T = weighted_procrustes(pc, transform(truth, pc), std::vector<double>(8, 1.0));
  EXPECT_LT(rotation_gap(T, truth), 1e-9);
  EXPECT_LT((T.t - truth.t).norm(), 1e-9);
}

TEST(Procrustes, RandomRigidMotionsAreRecoveredExactly) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> count(4, 50);
  std::uniform_real_distribution<double> weight(0.01, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    const PoseSE3 truth = support::random_pose(rng, std::numbers::pi, 3.0);
    const int n = count(rng);
    const auto pc = random_points(rng, n);
    std::vector<double> w(std::size_t(n), 1.0);
    if (trial % 2)
      for (auto& x : w) x = weight(rng);
    const PoseSE3 T = weighted_procrustes(pc, transform(truth, pc), w);
    ASSERT_LT(rotation_gap(T, truth), 1e-9) << trial;
    ASSERT_LT((T.t - truth.t).norm(), 1e-9) << trial;
    ASSERT_LT((T.R.transpose() * T.R - Mat3::Identity()).norm(), 1e-9);
    ASSERT_NEAR(T.R.determinant(), 1.0, 1e-9);
  }
}

TEST(Procrustes, ZeroWeightOutlierIsIgnored) {
  std::mt19937_64 rng(4);
  const PoseSE3 truth = support::random_pose(rng, 1.0, 1.0);
  auto pc = random_points(rng, 10);
  auto pr = transform(truth, pc);
  std::vector<double> w(10, 1.0);
  const PoseSE3 clean = weighted_procrustes(pc, pr, w);
  pc.push_back(Vec3(100, -50, 3));
  pr.push_back(Vec3(-7, 40, 900));
  w.push_back(0.0);
  const PoseSE3 with = weighted_procrustes(pc, pr, w);
  EXPECT_EQ(with.R, clean.R);
  EXPECT_EQ(with.t, clean.t);
}

TEST(Procrustes, WeightScaleInvarianceOnNoisyData) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0, 0.02);
  const PoseSE3 truth = support::random_pose(rng, 1.0, 1.0);
  const auto pc = random_points(rng, 30);
  auto pr = transform(truth, pc);
  for (auto& p : pr) p += Vec3(noise(rng), noise(rng), noise(rng));
  std::vector<double> w;
  for (int i = 0; i < 30; ++i) w.push_back(0.1 + (rng() % 100) / 50.0);
  auto w2 = w;
  for (auto& x : w2) x *= 37.5;
  const PoseSE3 a = weighted_procrustes(pc, pr, w), b = weighted_procrustes(pc, pr, w2);
  EXPECT_LT(rotation_gap(a, b), 1e-12);
  EXPECT_LT((a.t - b.t).norm(), 1e-12);
}

TEST(Procrustes, DegenerateInputsAreLost) {
  std::vector<Vec3> line{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)};
  EXPECT_THROW(weighted_procrustes(line, line, std::vector<double>(4, 1.0)), TrackerLost);
  std::vector<Vec3> two{Vec3(0, 0, 0), Vec3(1, 0, 0)};
  EXPECT_THROW(weighted_procrustes(two, two, std::vector<double>(2, 1.0)), TrackerLost);
  std::vector<Vec3> tri{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  EXPECT_THROW(weighted_procrustes(tri, tri, std::vector<double>(3, 0.0)), TrackerLost);
  EXPECT_THROW(weighted_procrustes(tri, tri, std::vector<double>{1, -1, 1}), ContractViolation);
}

TEST(Procrustes, WeightedMedianResidual) {
  CorrespondenceSet set;
  const double r[] = {0.01, 0.02, 0.5, 0.03};
  const double w[] = {1, 1, 1, 5};
  for (int i = 0; i < 4; ++i) {
    Correspondence e;
    e.p_c = Vec3(0, 0, 1);
    e.p_r = Vec3(r[i], 0, 1);
    e.w = w[i];
    set.entries.push_back(e);
  }
  EXPECT_NEAR(weighted_median_residual(set, PoseSE3::identity()), 0.03, 1e-15);
}

// The implicit-function gradient of the solved increment with respect to the
// weights, against re-solving with perturbed weights.
TEST(Procrustes, IncrementGradientMatchesResolving) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0, 0.05);
  const PoseSE3 truth = support::random_pose(rng, 0.5, 0.5);
  const int n = 12;
  const auto pc = random_points(rng, n);
  auto pr = transform(truth, pc);
  for (auto& p : pr) p += Vec3(noise(rng), noise(rng), noise(rng));
  Mat<double> w0(n, 1);
  for (int i = 0; i < n; ++i) w0(i, 0) = 0.5 + (rng() % 100) / 100.0;
  auto weights_of = [&](const Mat<double>& m) { return std::vector<double>(m.data(), m.data() + n); };
  const PoseSE3 T = weighted_procrustes(pc, pr, weights_of(w0));
  const Vec3 c0 = T.t;
  std::vector<Vec3> y, a;
  for (int i = 0; i < n; ++i) {
    y.push_back(T * pc[std::size_t(i)] - c0);
    a.push_back(pr[std::size_t(i)] - c0);
  }
  Mat<double> c(1, 6);
  c << 0.3, -1.1, 0.7, 2.0, -0.4, 0.9;
  auto w = ad::Tensor<double>::parameter(w0);
  auto delta = ad::procrustes_increment<double>(w, y, a);
  ad::backward(ad::sum(ad::mul(delta, ad::Tensor<double>::constant(c))));
  const double h = 1e-6;
  for (int i = 0; i < n; ++i) {
    auto solve = [&](double dw) {
      Mat<double> wp = w0;
      wp(i, 0) += dw;
      const PoseSE3 S = weighted_procrustes(y, a, weights_of(wp));
      Vec6 d;
      d << so3_log(S.R), S.t;
      return d;
    };
    const Vec6 fd = (solve(h) - solve(-h)) / (2 * h);
    double expect = 0;
    for (int k = 0; k < 6; ++k) expect += c(0, k) * fd(k);
    EXPECT_NEAR(w.grad()(i, 0), expect, 1e-6 * std::max(1.0, std::abs(expect)));
  }
}

TEST(Track, SameFrameReturnsReferencePose) {
  FeatureExtractor ex(32, 32, 7);
  SystemConfig cfg;
  const Keyframe ref{0, room().seq.frames[5], room().seq.ground_truth[5], {}};
  const auto r = track(ex, ref.frame, ref, PoseSE3::identity(), cfg);
  ASSERT_FALSE(r.lost) << r.reason;
  EXPECT_LT(pose_error(r.pose, ref.pose).translation, 1e-9);
  EXPECT_LT(pose_error(r.pose, ref.pose).rotation_deg, 1e-6);
  EXPECT_LT(r.residual, 1e-9);
}

TEST(Track, RecoversTwoCentimeterTranslation) {
  FeatureExtractor ex(32, 32, 8);
  SystemConfig cfg;
  const Keyframe ref{0, room().seq.frames[0], room().seq.ground_truth[0], {}};
  PoseSE3 moved = ref.pose;
  moved.t += Vec3(0.02, 0, 0);
  const Frame cur = eval::render_view(room().scene, moved, ref.frame.intrinsics);
  const auto r = track(ex, cur, ref, ref.pose, cfg);
  ASSERT_FALSE(r.lost) << r.reason;
  EXPECT_LT(pose_error(r.pose, moved).translation, 0.005);
}

TEST(Track, NoDepthIsLostWithFallbackPose) {
  FeatureExtractor ex(16, 16, 9);
  SystemConfig cfg;
  const Keyframe ref{0, room().seq.frames[0], room().seq.ground_truth[0], {}};
  Frame cur = ref.frame;
  cur.depth.data.assign(cur.depth.data.size(), 0.f);
  PoseSE3 fallback;
  fallback.t = Vec3(1, 2, 3);
  const auto r = track(ex, cur, ref, fallback, cfg);
  EXPECT_TRUE(r.lost);
  EXPECT_EQ(r.pose.matrix(), fallback.matrix());
}

TEST(Track, LargeResidualIsLost) {
  FeatureExtractor ex(16, 16, 10);
  SystemConfig cfg;
  cfg.lost_residual = 1e-12;
  const Keyframe ref{0, room().seq.frames[0], room().seq.ground_truth[0], {}};
  const Frame& cur = room().seq.frames[3];
  const auto r = track(ex, cur, ref, ref.pose, cfg);
  EXPECT_TRUE(r.lost);
  EXPECT_EQ(r.pose.matrix(), ref.pose.matrix());
}

class Finetune : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg.samples_per_ray = 8;
    cfg.finetune_batch_rays = 64;
    cfg.map.pos_freqs = 4;
    cfg.map.dir_freqs = 2;
    cfg.map.bounds = room().scene.bounds();
  }
  KeyframeStore store_with(int n) const {
    KeyframeStore s(1.01, 0.5, 4);  // nothing is culled
    for (int i = 0; i < n; ++i)
      s.insert({i, room().seq.frames[std::size_t(2 * i)], room().seq.ground_truth[std::size_t(2 * i)], {}});
    return s;
  }
  SystemConfig cfg;
};

TEST_F(Finetune, WaitsForEnoughKeyframes) {
  ImplicitMap<float> map(cfg.map, 1);
  FeatureExtractor ex(16, 16, 11);
  auto adam = make_conv_optimizer(cfg);
  std::mt19937_64 rng(12);
  const auto before = ex.outconv_checksum();
  EXPECT_FALSE(finetune_extractor(ex, adam, map, store_with(9), cfg, rng, 2).ran);
  EXPECT_EQ(before, ex.outconv_checksum());
  const auto rep = finetune_extractor(ex, adam, map, store_with(10), cfg, rng, 2);
  EXPECT_TRUE(rep.ran);
  EXPECT_EQ(rep.iterations + rep.skipped, 2);
}

TEST_F(Finetune, TouchesOnlyOutconv) {
  ImplicitMap<float> map(cfg.map, 2);
  FeatureExtractor ex(16, 16, 13);
  auto adam = make_conv_optimizer(cfg);
  std::mt19937_64 rng(14);
  const auto trunk = ex.trunk_checksum(), out = ex.outconv_checksum(), m = map.checksum();
  const auto rep = finetune_extractor(ex, adam, map, store_with(10), cfg, rng, 3);
  ASSERT_GT(rep.iterations, 0);
  EXPECT_EQ(trunk, ex.trunk_checksum());
  EXPECT_EQ(m, map.checksum());
  EXPECT_NE(out, ex.outconv_checksum());
  EXPECT_DOUBLE_EQ(cfg.lr_conv, 1e-4);
}

TEST_F(Finetune, RigidityLossVanishesForExactCorrespondences) {
  ImplicitMap<float> map(cfg.map, 3);
  FeatureExtractor ex(32, 32, 15);
  auto adam = make_conv_optimizer(cfg);
  std::mt19937_64 rng(16);
  const Keyframe a{0, room().seq.frames[4], room().seq.ground_truth[4], {}};
  const Keyframe b{1, a.frame, a.pose, {}};
  const auto s = finetune_step(ex, adam, map, a, b, cfg, rng);
  ASSERT_FALSE(s.skipped);
  EXPECT_LT(s.l_r, 1e-5);
  EXPECT_GE(s.l_p, 0);
  EXPECT_GE(s.l_d, 0);
}
