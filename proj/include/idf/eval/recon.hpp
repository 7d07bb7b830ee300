#pragma once

// Reconstruction evaluation restricted to what the cameras observed.
//
// Ground-truth points are the back-projected depths of every frame at its
// ground-truth pose, thinned to one point per voxel so that the sample density
// follows surface area rather than viewing distance. Predicted points are
// area-uniform samples on mesh faces touching the observed region, kept if they
// fall inside at least one camera frustum no deeper than that camera observed
// along the same pixel (plus a margin).

#include <random>
#include <unordered_map>
#include <vector>

#include "idf/eval/mesh.hpp"
#include "idf/eval/metrics.hpp"
#include "idf/frame.hpp"

namespace idf::eval {

inline std::vector<Vec3> observed_surface_points(const std::vector<Frame>& frames, const std::vector<PoseSE3>& poses,
                                                 double voxel, int max_points, std::mt19937_64& rng) {
  require(frames.size() == poses.size(), "observed_surface_points: frames and poses differ in count");
  require(voxel > 0, "observed_surface_points: voxel must be positive");
  std::unordered_map<long long, Vec3> cells;
  auto key = [&](const Vec3& p) {
    const long long x = static_cast<long long>(std::floor(p.x() / voxel)) + (1 << 20);
    const long long y = static_cast<long long>(std::floor(p.y() / voxel)) + (1 << 20);
    const long long z = static_cast<long long>(std::floor(p.z() / voxel)) + (1 << 20);
    return (x << 42) | (y << 21) | z;
  };
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const Frame& fr = frames[f];
    for (int r = 0; r < fr.height(); ++r)
      for (int c = 0; c < fr.width(); ++c) {
        const double d = fr.depth.at(r, c);
        if (!(d > 0)) continue;
        const Vec3 p = poses[f] * (fr.intrinsics.unproject(r, c) * d);
        cells.emplace(key(p), p);
      }
  }
  std::vector<Vec3> pts;
  pts.reserve(cells.size());
  for (const auto& [k, p] : cells) pts.push_back(p);
  std::sort(pts.begin(), pts.end(), [](const Vec3& a, const Vec3& b) {
    return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3);
  });
  if (max_points > 0 && static_cast<int>(pts.size()) > max_points) {
    std::shuffle(pts.begin(), pts.end(), rng);
    pts.resize(std::size_t(max_points));
  }
  return pts;
}

// True if some camera sees x in its image with 0 < z and the ray distance no
// more than `margin` beyond that camera's measured depth at the pixel.
inline bool observed(const Vec3& x, const std::vector<Frame>& frames, const std::vector<PoseSE3>& poses,
                     double margin) {
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const Vec3 p = poses[f].inverse() * x;
    if (!(p.z() > 0)) continue;
    const Intrinsics& K = frames[f].intrinsics;
    const long c = std::lround(K.fx * p.x() / p.z() + K.cx), r = std::lround(K.fy * p.y() / p.z() + K.cy);
    if (!K.in_bounds(int(r), int(c))) continue;
    const double d = frames[f].depth.at(int(r), int(c));
    if (d > 0 && p.z() <= d + margin) return true;
  }
  return false;
}

struct ReconEvaluation {
  ReconMetrics metrics;
  int gt_points = 0;
  int pred_points = 0;       // after restriction to the observed region
  int pred_points_total = 0; // before restriction
};

inline ReconEvaluation evaluate_reconstruction(const Mesh& mesh, const std::vector<Frame>& frames,
                                               const std::vector<PoseSE3>& poses, double tau, int n_samples,
                                               std::mt19937_64& rng, double voxel = 0.01, double margin = 0.05) {
  ReconEvaluation ev;
  const auto gt = observed_surface_points(frames, poses, voxel, n_samples, rng);
  if (mesh.empty()) throw MetricError("evaluate_reconstruction: empty mesh");
  // Sample only faces touching the observed region, so that the sample
  // density there does not depend on how much unobserved surface the mesh has.
  std::vector<char> seen(mesh.vertices.size());
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) seen[v] = observed(mesh.vertices[v], frames, poses, margin);
  Mesh visible;
  visible.vertices = mesh.vertices;
  for (const auto& f : mesh.faces)
    if (seen[std::size_t(f[0])] || seen[std::size_t(f[1])] || seen[std::size_t(f[2])]) visible.faces.push_back(f);
  if (visible.empty()) throw MetricError("evaluate_reconstruction: mesh has no surface in the observed region");
  const auto samples = sample_surface(visible, n_samples, rng);
  std::vector<Vec3> pred;
  for (const auto& p : samples)
    if (observed(p, frames, poses, margin)) pred.push_back(p);
  ev.gt_points = static_cast<int>(gt.size());
  ev.pred_points_total = static_cast<int>(samples.size());
  ev.pred_points = static_cast<int>(pred.size());
  ev.metrics = reconstruction_metrics(pred, gt, tau);
  return ev;
}

}  // namespace idf::eval
