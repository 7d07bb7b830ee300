#pragma once

// Shared fixtures for the unit tests and the acceptance binary.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "idf/autodiff.hpp"
#include "idf/eval/synthetic.hpp"
#include "idf/frame.hpp"
#include "idf/mapper.hpp"

namespace idf::support {

// Central-difference check of d loss / d params at `coords` random
// coordinates. Returns the largest relative error |a - n| / max(|a|, |n|, floor).
inline double gradient_check(std::vector<ad::Tensor<double>> params,
                             const std::function<ad::Tensor<double>()>& loss_fn, int coords, std::mt19937_64& rng,
                             double h = 1e-6, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  auto loss = loss_fn();
  ad::backward(loss);
  std::vector<Mat<double>> analytic;
  for (auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Mat<double>::Zero(p.rows(), p.cols()));

  std::uniform_int_distribution<std::size_t> pick_param(0, params.size() - 1);
  double worst = 0;
  for (int k = 0; k < coords; ++k) {
    const std::size_t pi = pick_param(rng);
    auto& p = params[pi];
    std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
    const Eigen::Index i = pick(rng);
    double& v = p.mutable_value().data()[i];
    const double saved = v;
    v = saved + h;
    const double up = loss_fn().item();
    v = saved - h;
    const double down = loss_fn().item();
    v = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic[pi].data()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

inline Mat<double> random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline PoseSE3 random_pose(std::mt19937_64& rng, double max_angle, double max_shift) {
  std::normal_distribution<double> n(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  Vec3 axis(n(rng), n(rng), n(rng));
  axis.normalize();
  Vec3 dir(n(rng), n(rng), n(rng));
  dir.normalize();
  PoseSE3 p;
  p.R = so3_exp(axis * max_angle * u(rng));
  p.t = dir * max_shift * u(rng);
  return p;
}

// Camera at the origin looking down +z at a fronto-parallel wall `distance`
// away, with a textured color.
inline Frame wall_frame(int width, int height, double distance, double timestamp = 0) {
  Frame f;
  f.intrinsics = eval::default_intrinsics(width, height);
  f.timestamp = timestamp;
  f.rgb = Image(width, height, 3);
  f.depth = Image(width, height, 1, float(distance));
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      f.rgb.at(r, c, 0) = float(0.5 + 0.4 * std::sin(0.7 * c));
      f.rgb.at(r, c, 1) = float(0.5 + 0.4 * std::cos(0.5 * r));
      f.rgb.at(r, c, 2) = 0.5f;
    }
  return f;
}

// Desk-scale settings shared by the slower tests: fewer rays and samples than
// the published budget, same losses, thresholds and schedules.
inline SystemConfig fast_config(const SceneBounds& bounds) {
  SystemConfig cfg;
  cfg.batch_rays = 256;
  cfg.samples_per_ray = 32;
  cfg.pose_batch_rays = 128;
  cfg.n_map_iters = 30;
  cfg.n_init_iters = 200;
  cfg.map.bounds = bounds;
  return cfg;
}

// A map trained on several ground-truth-posed views of one synthetic room.
struct RoomFixture {
  eval::SyntheticScene scene;
  eval::SyntheticSequence seq;
  SystemConfig cfg;
  std::vector<Keyframe> keyframes;  // the training views
  ImplicitMap<float> map{MapOptions{}, 0};
};

inline RoomFixture converged_room(std::uint64_t seed, int n_frames, int width, int height,
                                  const std::vector<int>& views, int iterations) {
  RoomFixture f;
  f.seq = eval::make_room_sequence(seed, n_frames, width, height, &f.scene);
  f.cfg = fast_config(f.scene.bounds());
  f.cfg.seed = seed;
  f.map = ImplicitMap<float>(f.cfg.map, seed);
  for (int v : views) f.keyframes.push_back({v, f.seq.frames[std::size_t(v)], f.seq.ground_truth[std::size_t(v)], {}});
  std::vector<Keyframe*> replay;
  for (auto& k : f.keyframes) replay.push_back(&k);
  std::mt19937_64 rng(seed);
  ad::AdamState<float> adam(ad::AdamOptions{f.cfg.lr_map});
  optimize_map<float>(f.map, replay, f.cfg, rng, iterations, &adam);
  f.map.set_trainable(false);
  return f;
}

}  // namespace idf::support
