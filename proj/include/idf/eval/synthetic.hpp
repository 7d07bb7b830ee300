#pragma once

// Analytic room scenes with exact signed distances, rendered by sphere tracing.
//
// The world frame is the first camera's frame: x right, y down, z forward.
// The room is an axis-aligned box; spheres and axis-aligned boxes inside it are
// kept disjoint and clear of the walls, so the min-composition of their exact
// distance functions is itself exact everywhere.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "idf/frame.hpp"
#include "idf/scene_mlp.hpp"

namespace idf::eval {

inline double box_sdf(const Vec3& p, const Vec3& center, const Vec3& half) {
  const Vec3 q = (p - center).cwiseAbs() - half;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

struct Primitive {
  enum class Kind { kSphere, kBox };
  Kind kind = Kind::kSphere;
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Constant(0.3);  // spheres use half.x() as radius
  Vec3 albedo = Vec3::Constant(0.7);

  double radius() const { return half.x(); }

  double sdf(const Vec3& p) const {
    if (kind == Kind::kSphere) return (p - center).norm() - radius();
    return box_sdf(p, center, half);
  }

  // Radius of a sphere enclosing the primitive.
  double extent() const { return kind == Kind::kSphere ? radius() : half.norm(); }
};

inline std::uint32_t hash3(int x, int y, int z, std::uint32_t seed) {
  std::uint32_t h = seed * 0x9E3779B1u;
  h ^= static_cast<std::uint32_t>(x) * 0x85EBCA77u;
  h = (h << 13) | (h >> 19);
  h ^= static_cast<std::uint32_t>(y) * 0xC2B2AE3Du;
  h = (h << 13) | (h >> 19);
  h ^= static_cast<std::uint32_t>(z) * 0x27D4EB2Fu;
  h ^= h >> 15;
  h *= 0x2C1B3C6Du;
  h ^= h >> 12;
  h *= 0x297A2D39u;
  h ^= h >> 15;
  return h;
}

// Trilinear value noise in [0, 1] with lattice spacing 1 / frequency.
inline double value_noise(const Vec3& p, double frequency, std::uint32_t seed) {
  const Vec3 q = p * frequency;
  const int x0 = static_cast<int>(std::floor(q.x()));
  const int y0 = static_cast<int>(std::floor(q.y()));
  const int z0 = static_cast<int>(std::floor(q.z()));
  const double fx = q.x() - x0, fy = q.y() - y0, fz = q.z() - z0;
  auto smooth = [](double t) { return t * t * (3 - 2 * t); };
  const double sx = smooth(fx), sy = smooth(fy), sz = smooth(fz);
  auto v = [&](int dx, int dy, int dz) {
    return (hash3(x0 + dx, y0 + dy, z0 + dz, seed) & 0xFFFFFF) / double(0xFFFFFF);
  };
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double x00 = lerp(v(0, 0, 0), v(1, 0, 0), sx), x10 = lerp(v(0, 1, 0), v(1, 1, 0), sx);
  const double x01 = lerp(v(0, 0, 1), v(1, 0, 1), sx), x11 = lerp(v(0, 1, 1), v(1, 1, 1), sx);
  return lerp(lerp(x00, x10, sy), lerp(x01, x11, sy), sz);
}

struct SceneHit {
  bool hit = false;
  double t = 0;  // distance along the unit ray
  int steps = 0;
};

class SyntheticScene {
 public:
  Vec3 room_min{-3.0, -1.5, -1.2};  // 4 x 3 x 4 m, floor at y = +1.5
  Vec3 room_max{1.0, 1.5, 2.8};
  std::vector<Primitive> primitives;
  Vec3 light_dir = Vec3(0.3, -1.0, -0.4).normalized();  // toward the light
  std::uint32_t texture_seed = 7;
  Vec3 wall_albedo{0.85, 0.8, 0.7};

  // Room with a handful of disjoint spheres and boxes; positions jittered
  // from `rng` but always clear of each other, the walls and `keep_clear`.
  static SyntheticScene room(std::mt19937_64& rng, const std::vector<Vec3>& keep_clear = {},
                             double clearance = 0.35) {
    SyntheticScene s;
    s.texture_seed = static_cast<std::uint32_t>(rng());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::vector<Primitive> layout = {
        {Primitive::Kind::kSphere, {-1.9, 0.9, 1.6}, Vec3::Constant(0.45), {0.9, 0.35, 0.3}},
        {Primitive::Kind::kBox, {-0.1, 1.05, 1.7}, {0.4, 0.45, 0.35}, {0.3, 0.5, 0.9}},
        {Primitive::Kind::kSphere, {-0.8, -0.4, 2.2}, Vec3::Constant(0.3), {0.35, 0.85, 0.4}},
        {Primitive::Kind::kBox, {-2.3, -0.2, 2.35}, {0.3, 0.6, 0.25}, {0.9, 0.8, 0.3}},
        {Primitive::Kind::kSphere, {0.45, -0.6, 1.0}, Vec3::Constant(0.3), {0.7, 0.4, 0.85}},
        {Primitive::Kind::kBox, {-2.5, 1.2, 0.2}, {0.3, 0.3, 0.3}, {0.4, 0.8, 0.8}},
    };
    for (const auto& base : layout) {
      for (int attempt = 0; attempt < 50; ++attempt) {
        Primitive p = base;
        p.center += Vec3(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5) * 0.2;
        if (s.fits(p, keep_clear, clearance)) {
          s.primitives.push_back(p);
          break;
        }
      }
    }
    return s;
  }

  bool fits(const Primitive& p, const std::vector<Vec3>& keep_clear, double clearance) const {
    constexpr double kGap = 0.05;
    // clear of the walls
    for (int k = 0; k < 3; ++k) {
      const double h = p.kind == Primitive::Kind::kSphere ? p.radius() : p.half(k);
      if (p.center(k) - h < room_min(k) + kGap || p.center(k) + h > room_max(k) - kGap) return false;
    }
    for (const auto& q : primitives)
      if ((p.center - q.center).norm() < p.extent() + q.extent() + kGap) return false;
    for (const auto& c : keep_clear)
      if (p.sdf(c) < clearance) return false;
    return true;
  }

  // Positive in free space, negative inside walls and solids.
  double sdf(const Vec3& p) const {
    const Vec3 center = 0.5 * (room_min + room_max), half = 0.5 * (room_max - room_min);
    double d = -box_sdf(p, center, half);
    for (const auto& q : primitives) d = std::min(d, q.sdf(p));
    return d;
  }

  // Index of the closest primitive, -1 for the room shell.
  int closest(const Vec3& p) const {
    const Vec3 center = 0.5 * (room_min + room_max), half = 0.5 * (room_max - room_min);
    double best = -box_sdf(p, center, half);
    int idx = -1;
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const double d = primitives[i].sdf(p);
      if (d < best) {
        best = d;
        idx = static_cast<int>(i);
      }
    }
    return idx;
  }

  Vec3 normal(const Vec3& p) const {
    constexpr double h = 1e-5;
    Vec3 n;
    for (int k = 0; k < 3; ++k) {
      Vec3 e = Vec3::Zero();
      e(k) = h;
      n(k) = sdf(p + e) - sdf(p - e);
    }
    return n.normalized();
  }

  Vec3 albedo(const Vec3& p) const {
    const int idx = closest(p);
    const Vec3 base = idx < 0 ? wall_albedo : primitives[static_cast<std::size_t>(idx)].albedo;
    const auto seed = texture_seed + static_cast<std::uint32_t>(idx + 1);
    const double n = 0.5 * value_noise(p, 3.0, seed) + 0.35 * value_noise(p, 7.0, seed + 101) +
                     0.15 * value_noise(p, 15.0, seed + 202);
    return base * (0.25 + 0.75 * n);
  }

  // Lambertian shading from a fixed directional light plus ambient.
  Vec3 shade(const Vec3& p) const {
    const double lambert = std::max(0.0, normal(p).dot(light_dir));
    return (albedo(p) * (0.35 + 0.65 * lambert)).cwiseMin(1.0).cwiseMax(0.0);
  }

  // Sphere tracing: stops when |sdf| < 1e-5 m, gives up after 256 steps or
  // once past `t_max`.
  SceneHit trace(const Vec3& origin, const Vec3& dir, double t_max = 20.0) const {
    SceneHit h;
    double t = 0;
    for (int i = 0; i < 256; ++i) {
      const double d = sdf(origin + t * dir);
      h.steps = i + 1;
      if (std::abs(d) < 1e-5) {
        h.hit = true;
        h.t = t;
        return h;
      }
      t += d;
      if (t > t_max) break;
    }
    return h;
  }

  SceneBounds bounds(double margin = 0.1) const {
    return {room_min - Vec3::Constant(margin), room_max + Vec3::Constant(margin)};
  }
};

// Renders a frame by sphere tracing through every pixel center. Pixels whose
// trace does not converge get depth 0 (invalid) and black color.
inline Frame render_view(const SyntheticScene& scene, const PoseSE3& pose, const Intrinsics& K,
                         double timestamp = 0) {
  K.validate();
  Frame f;
  f.intrinsics = K;
  f.timestamp = timestamp;
  f.rgb = Image(K.width, K.height, 3);
  f.depth = Image(K.width, K.height, 1);
  for (int r = 0; r < K.height; ++r) {
    for (int c = 0; c < K.width; ++c) {
      const Vec3 cam = K.unproject(r, c);
      const double scale = cam.norm();
      const Vec3 dir = pose.R * (cam / scale);
      const SceneHit h = scene.trace(pose.t, dir);
      if (!h.hit) continue;
      const Vec3 x = pose.t + h.t * dir;
      const Vec3 rgb = scene.shade(x);
      for (int k = 0; k < 3; ++k) f.rgb.at(r, c, k) = static_cast<float>(rgb(k));
      f.depth.at(r, c) = static_cast<float>(h.t / scale);
    }
  }
  return f;
}

// Camera looking along `forward` with image rows pointing along world +y as
// far as possible.
inline PoseSE3 look_along(const Vec3& position, const Vec3& forward) {
  const Vec3 z = forward.normalized();
  const Vec3 x = Vec3::UnitY().cross(z).normalized();
  const Vec3 y = z.cross(x);
  PoseSE3 p;
  p.R.col(0) = x;
  p.R.col(1) = y;
  p.R.col(2) = z;
  p.t = position;
  return p;
}

struct TrajectoryOptions {
  double span = 2.0;          // travel along -x, meters
  double depth_swing = 0.5;   // forward/back travel, meters
  double height_swing = 0.15; // meters
  double focus_depth = 2.2;   // the camera keeps looking at a point this far ahead
  double focus_shift = 1.0;   // how far the focus point drifts along -x
};

// Smooth sweep starting at the identity: the camera slides along -x by `span`
// and bobs, looking at a slowly drifting focus point. Pose 0 is exactly the
// identity.
inline std::vector<PoseSE3> smooth_trajectory(int n_frames, const TrajectoryOptions& opt = {}) {
  require(n_frames >= 1, "smooth_trajectory: need at least one frame");
  std::vector<PoseSE3> poses;
  const double pi = std::numbers::pi;
  for (int i = 0; i < n_frames; ++i) {
    const double s = n_frames > 1 ? double(i) / (n_frames - 1) : 0.0;
    const Vec3 pos(0.5 * opt.span * (std::cos(pi * s) - 1.0), opt.height_swing * std::sin(2 * pi * s),
                   opt.depth_swing * std::sin(pi * s));
    const Vec3 focus(-opt.focus_shift * s, 0.3 * std::sin(pi * s), opt.focus_depth);
    PoseSE3 p = look_along(pos, focus - pos);
    if (i == 0) p = PoseSE3::identity();
    poses.push_back(p);
  }
  return poses;
}

struct SyntheticSequence {
  std::vector<Frame> frames;
  std::vector<PoseSE3> ground_truth;  // world-from-camera
};

inline Intrinsics default_intrinsics(int width, int height) {
  Intrinsics K;
  K.width = width;
  K.height = height;
  K.fx = K.fy = 0.875 * width;  // ~60 degree horizontal field of view
  K.cx = 0.5 * (width - 1);
  K.cy = 0.5 * (height - 1);
  return K;
}

inline SyntheticSequence generate_synthetic(const SyntheticScene& scene, const std::vector<PoseSE3>& poses,
                                            const Intrinsics& K, double fps = 30.0) {
  SyntheticSequence seq;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Vec3& c = poses[i].t;
    const bool inside = (c.array() > scene.room_min.array()).all() && (c.array() < scene.room_max.array()).all();
    if (!inside || scene.sdf(c) <= 0.05)
      throw GenerationError("trajectory leaves the free space of the scene at frame " + std::to_string(i));
    if (!poses[i].has_valid_rotation(1e-9)) throw GenerationError("trajectory pose is not a rotation");
    seq.frames.push_back(render_view(scene, poses[i], K, double(i) / fps));
    seq.ground_truth.push_back(poses[i]);
  }
  return seq;
}

inline SyntheticSequence generate_synthetic(const SyntheticScene& scene, int n_frames, const Intrinsics& K,
                                            const TrajectoryOptions& opt = {}, double fps = 30.0) {
  return generate_synthetic(scene, smooth_trajectory(n_frames, opt), K, fps);
}

// A scene plus sequence whose primitives keep clear of the camera path.
inline SyntheticSequence make_room_sequence(std::uint64_t seed, int n_frames, int width, int height,
                                            SyntheticScene* scene_out = nullptr,
                                            const TrajectoryOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  const auto poses = smooth_trajectory(n_frames, opt);
  std::vector<Vec3> centers;
  for (const auto& p : poses) centers.push_back(p.t);
  SyntheticScene scene = SyntheticScene::room(rng, centers);
  auto seq = generate_synthetic(scene, poses, default_intrinsics(width, height));
  if (scene_out) *scene_out = scene;
  return seq;
}

}  // namespace idf::eval
