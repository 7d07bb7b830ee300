#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "../support.hpp"
#include "idf/keyframe_store.hpp"

using namespace idf;

namespace {

Keyframe wall_keyframe(int id, double shift_x, int W = 32, int H = 24, double dist = 2.0) {
  Keyframe kf{id, support::wall_frame(W, H, dist), PoseSE3::identity(), {}};
  kf.pose.t = Vec3(shift_x, 0, 0);
  return kf;
}

// Direct homogeneous projection: u_i = K T_old^-1 T_new K^-1 u d.
double brute_force_covisibility(const Keyframe& n, const Keyframe& o) {
  const Mat3 K = n.frame.intrinsics.matrix();
  const Mat3 Kinv = K.inverse();
  const Mat4 T = o.pose.matrix().inverse() * n.pose.matrix();
  int valid = 0, hit = 0;
  for (int r = 0; r < n.frame.height(); ++r)
    for (int c = 0; c < n.frame.width(); ++c) {
      const double d = n.frame.depth.at(r, c);
      if (d <= 0) continue;
      ++valid;
      Eigen::Vector4d X;
      X << Kinv * Vec3(c, r, 1) * d, 1;
      const Vec3 x = (T * X).head<3>();
      if (x.z() <= 0) continue;
      const Vec3 u = o.frame.intrinsics.matrix() * x;
      const long col = std::lround(u.x() / u.z()), row = std::lround(u.y() / u.z());
      if (col >= 0 && row >= 0 && col < o.frame.width() && row < o.frame.height()) ++hit;
    }
  return valid ? double(hit) / valid : 0.0;
}

}  // namespace

TEST(Covisibility, IdenticalKeyframesScoreOne) {
  const Keyframe a = wall_keyframe(0, 0);
  EXPECT_EQ(covisibility_score(a, a), 1.0);
  EXPECT_EQ(covisibility_score(a, a, 4), 1.0);
}

TEST(Covisibility, DistantCameraScoresZero) {
  const Keyframe a = wall_keyframe(0, 0), b = wall_keyframe(1, 40.0);
  EXPECT_EQ(covisibility_score(a, b), 0.0);
}

TEST(Covisibility, NoValidDepthIsFlagged) {
  Keyframe a = wall_keyframe(0, 0);
  a.frame.depth.data.assign(a.frame.depth.data.size(), 0.f);
  const auto s = covisibility(a, wall_keyframe(1, 0));
  EXPECT_TRUE(s.no_valid_depth);
  EXPECT_EQ(s.score, 0.0);
}

TEST(Covisibility, TinyImagesMatchBruteForce) {
  Keyframe a = wall_keyframe(0, 0, 4, 4, 1.0), b = wall_keyframe(1, 0.1, 4, 4, 1.0);
  EXPECT_EQ(covisibility_score(a, b), brute_force_covisibility(a, b));
  EXPECT_EQ(covisibility_score(b, a), brute_force_covisibility(b, a));
}

TEST(Covisibility, RandomPosesMatchBruteForceAndStayInUnitRange) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> depth(0.5, 3.0);
  std::bernoulli_distribution hole(0.15);
  for (int trial = 0; trial < 50; ++trial) {
    const int W = 4 + int(rng() % 13), H = 4 + int(rng() % 13);
    Keyframe a{0, support::wall_frame(W, H, 1.0), PoseSE3::identity(), {}};
    for (auto& d : a.frame.depth.data) d = hole(rng) ? 0.f : float(depth(rng));
    Keyframe b{1, support::wall_frame(W, H, 1.0), support::random_pose(rng, 0.5, 0.8), {}};
    a.pose = support::random_pose(rng, 0.3, 0.3);
    const double s = covisibility_score(a, b);
    ASSERT_EQ(s, brute_force_covisibility(a, b)) << "trial " << trial;
    ASSERT_GE(s, 0.0);
    ASSERT_LE(s, 1.0);
  }
}

TEST(KeyframeStore, FirstKeyframeHasNoEdges) {
  KeyframeStore store;
  const auto r = store.insert(wall_keyframe(0, 0));
  EXPECT_FALSE(r.culled);
  EXPECT_TRUE(r.edges.empty());
  EXPECT_EQ(store.size(), 1u);
}

TEST(KeyframeStore, DuplicateIsCulled) {
  KeyframeStore store(0.5, 0.3);
  store.insert(wall_keyframe(0, 0));
  const auto r = store.insert(wall_keyframe(1, 0));
  EXPECT_TRUE(r.culled);
  EXPECT_EQ(r.max_score, 1.0);
  EXPECT_EQ(store.size(), 1u);
  EXPECT_FALSE(store.contains(1));
  EXPECT_TRUE(store.neighbors(0).empty());
}

TEST(KeyframeStore, EdgesExactlyForScoresBetweenThresholds) {
  // lateral shifts sweep the overlap through both thresholds
  for (int i = 0; i <= 40; ++i) {
    KeyframeStore store(0.5, 0.3, 1);
    store.insert(wall_keyframe(0, 0));
    Keyframe kf = wall_keyframe(1, 0.05 * i);
    const double s = covisibility_score(kf, *store.find(0), 1);
    const auto r = store.insert(kf);
    ASSERT_EQ(r.culled, s > 0.5) << s;
    if (!r.culled) {
      ASSERT_EQ(store.has_edge(1, 0), s > 0.3) << s;
      ASSERT_EQ(store.has_edge(0, 1), s > 0.3);
      if (s > 0.3) {
        EXPECT_EQ(store.neighbors(0).at(1), store.neighbors(1).at(0));
      }
    }
  }
}

TEST(KeyframeStore, ScoreNearPointFourGivesOneEdge) {
  KeyframeStore store(0.5, 0.3, 1);
  store.insert(wall_keyframe(0, 0));
  // a 32 px wide image with fx = 28 at 2 m spans 2.29 m; 60% shifted out
  Keyframe kf = wall_keyframe(1, 0.6 * 32 * 2.0 / 28.0);
  const double s = covisibility_score(kf, *store.find(0), 1);
  ASSERT_GT(s, 0.3);
  ASSERT_LE(s, 0.5);
  const auto r = store.insert(kf);
  EXPECT_FALSE(r.culled);
  EXPECT_EQ(r.edges.size(), 1u);
}

TEST(KeyframeStore, RejectsDuplicateIdsAndBadThresholds) {
  KeyframeStore store;
  store.insert(wall_keyframe(0, 0));
  EXPECT_THROW(store.insert(wall_keyframe(0, 10)), ContractViolation);
  EXPECT_THROW(KeyframeStore(0.3, 0.5), ContractViolation);
}

TEST(Replay, SingleKeyframe) {
  KeyframeStore store;
  store.insert(wall_keyframe(0, 0));
  std::mt19937_64 rng(2);
  const auto r = store.select_replay(0, 10, rng);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0]->id, 0);
}

TEST(Replay, AllConnectedGivesNewKeyframeAlone) {
  // small steps with permissive thresholds: every pair overlaps
  KeyframeStore store(0.99, 0.01, 1);
  for (int i = 0; i < 20; ++i) ASSERT_FALSE(store.insert(wall_keyframe(i, 0.1 * i)).culled);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) ASSERT_EQ(store.neighbors(i).size(), 19u);
  const auto r = store.select_replay(19, 10, rng);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0]->id, 19);
}

TEST(Replay, DrawsWithoutReplacementFromUnconnected) {
  KeyframeStore store(0.5, 0.3, 1);
  for (int i = 0; i < 16; ++i) store.insert(wall_keyframe(i, 10.0 * i));
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = store.select_replay(15, 10, rng);
    ASSERT_EQ(r.size(), 11u);
    EXPECT_EQ(r[0]->id, 15);
    std::set<int> ids;
    for (auto* k : r) ids.insert(k->id);
    EXPECT_EQ(ids.size(), 11u);
  }
}

TEST(Replay, NeverReturnsNeighbors) {
  KeyframeStore store(0.5, 0.3, 1);
  std::mt19937_64 rng(5);
  // a chain: each keyframe overlaps only its predecessor
  for (int i = 0; i < 12; ++i) store.insert(wall_keyframe(i, 1.2 * i));
  for (int id = 0; id < 12; ++id) {
    const auto r = store.select_replay(id, 10, rng);
    EXPECT_LE(r.size(), 11u);
    for (std::size_t k = 1; k < r.size(); ++k) EXPECT_FALSE(store.has_edge(id, r[k]->id));
  }
}

TEST(Replay, CulledKeyframeGoesFirstWithUnconnectedStoredOnes) {
  KeyframeStore store(0.5, 0.3, 1);
  store.insert(wall_keyframe(0, 0));
  store.insert(wall_keyframe(1, 20));
  Keyframe dup = wall_keyframe(2, 0);
  const auto ins = store.insert(dup);
  ASSERT_TRUE(ins.culled);
  std::mt19937_64 rng(6);
  const auto r = store.select_replay_culled(dup, ins.scores, 10, rng);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0], &dup);
  EXPECT_EQ(r[1]->id, 1);
}

TEST(KeyframeStore, DumpsOneRecordPerKeyframe) {
  KeyframeStore store(0.5, 0.3, 1);
  store.insert(wall_keyframe(0, 0));
  store.insert(wall_keyframe(1, 1.4));
  std::ostringstream os;
  store.dump_jsonl(os);
  std::istringstream is(os.str());
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["id"].get<int>(), n);
    EXPECT_EQ(j["pose"].size(), 16u);
    ++n;
  }
  EXPECT_EQ(n, 2);
}
