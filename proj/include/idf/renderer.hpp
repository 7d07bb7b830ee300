#pragma once

// Ray generation, per-ray sampling and SDF-weighted compositing.
//
// Compositing weights follow a bell centred on the SDF zero crossing:
//   w_i = sigmoid(s_i / tr) * sigmoid(-s_i / tr),  w^_i = w_i / sum_j w_j
//   rgb = sum_i w^_i c_i,  depth = sum_i w^_i t_i

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "idf/autodiff.hpp"
#include "idf/frame.hpp"
#include "idf/rigid_ops.hpp"
#include "idf/scene_mlp.hpp"

namespace idf {

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct Ray {
  Vec3 origin = Vec3::Zero();         // camera center, world frame
  Vec3 direction = Vec3::UnitZ();     // unit, world frame
  Vec3 camera_direction = Vec3::UnitZ();  // unit, camera frame
  Pixel pixel;
  Vec3 measured_rgb = Vec3::Zero();
  // Distance to the observed surface along `direction` (not the z-depth);
  // 0 when the pixel has no depth.
  double measured_depth = 0;
};

enum class Region : std::uint8_t { kFreeSpace, kTruncation, kBehind };

struct RaySampleSet {
  std::vector<double> depths;       // ascending distances along the ray
  std::vector<double> sdf_targets;  // clamp(D - t, -tr, tr); 0 where unsupervised
  std::vector<Region> labels;

  std::size_t size() const { return depths.size(); }
};

inline std::vector<Ray> generate_rays(const Frame& frame, const PoseSE3& pose,
                                      std::span<const Pixel> pixels) {
  frame.intrinsics.validate();
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& px : pixels) {
    require(frame.intrinsics.in_bounds(px.row, px.col), "generate_rays: pixel out of bounds");
    const Vec3 dir_unnorm = frame.intrinsics.unproject(px.row, px.col);
    const double scale = dir_unnorm.norm();
    Ray r;
    r.camera_direction = dir_unnorm / scale;
    r.origin = pose.t;
    r.direction = pose.R * r.camera_direction;
    r.pixel = px;
    if (!frame.rgb.empty())
      r.measured_rgb = Vec3(frame.rgb.at(px.row, px.col, 0), frame.rgb.at(px.row, px.col, 1),
                            frame.rgb.at(px.row, px.col, 2));
    const double z = frame.depth.empty() ? 0.0 : frame.depth.at(px.row, px.col);
    r.measured_depth = z > 0 ? z * scale : 0.0;
    rays.push_back(r);
  }
  return rays;
}

// Stratified samples over [near, far] plus, for rays with depth, S_p/3
// uniform samples in the truncation band around the measured surface.
inline RaySampleSet sample_along_ray(const Ray& ray, int samples, double tr, double near, double far,
                                     std::mt19937_64& rng) {
  require(near < far, "sample_along_ray: near must be below far");
  require(samples >= 2, "sample_along_ray: need at least two samples");
  const double D = ray.measured_depth;
  const bool valid = D > 0;
  const int n_surf = valid ? samples / 3 : 0;
  const int n_strat = samples - n_surf;
  require(n_strat > 0 || valid, "sample_along_ray: no stratified budget for an invalid depth");

  std::uniform_real_distribution<double> u(0.0, 1.0);
  RaySampleSet set;
  set.depths.reserve(static_cast<std::size_t>(samples));
  const double bin = (far - near) / n_strat;
  for (int i = 0; i < n_strat; ++i) set.depths.push_back(near + (i + u(rng)) * bin);
  for (int i = 0; i < n_surf; ++i) set.depths.push_back(D - tr + 2 * tr * u(rng));
  std::sort(set.depths.begin(), set.depths.end());
  // Distinct samples keep the set strictly ascending.
  for (std::size_t i = 1; i < set.depths.size(); ++i)
    if (set.depths[i] <= set.depths[i - 1])
      set.depths[i] = std::nextafter(set.depths[i - 1], std::numeric_limits<double>::infinity());

  set.labels.resize(set.depths.size());
  set.sdf_targets.resize(set.depths.size(), 0.0);
  for (std::size_t i = 0; i < set.depths.size(); ++i) {
    const double t = set.depths[i];
    if (!valid) {
      set.labels[i] = Region::kBehind;
    } else if (t < D - tr) {
      set.labels[i] = Region::kFreeSpace;
      set.sdf_targets[i] = tr;
    } else if (std::abs(D - t) <= tr) {
      set.labels[i] = Region::kTruncation;
      set.sdf_targets[i] = std::clamp(D - t, -tr, tr);
    } else {
      set.labels[i] = Region::kBehind;
    }
  }
  return set;
}

template <class S>
struct Composite {
  ad::Tensor<S> rgb;      // N x 3
  ad::Tensor<S> depth;    // N x 1
  ad::Tensor<S> weights;  // N x S, normalized
  std::vector<bool> degenerate;
};

// sdf: N x S predicted distances, colors: (N*S) x 3 sample colors (ray-major),
// depths: N x S sample distances. Rays whose raw weights sum below 1e-12 fall
// back to uniform weights and are flagged.
template <class S>
Composite<S> composite(const ad::Tensor<S>& sdf, const ad::Tensor<S>& colors, const Mat<S>& depths,
                       double tr) {
  require(sdf.rows() >= 1 && sdf.cols() >= 1, "composite: no samples");
  require(depths.rows() == sdf.rows() && depths.cols() == sdf.cols(), "composite: depth shape");
  require(colors.rows() == sdf.size() && colors.cols() == 3, "composite: color shape");
  const Eigen::Index n = sdf.rows(), m = sdf.cols();

  auto a = ad::scale(sdf, S(1.0 / tr));
  auto w = ad::mul(ad::sigmoid(a), ad::sigmoid(ad::neg(a)));

  Composite<S> out;
  out.degenerate.assign(static_cast<std::size_t>(n), false);
  Mat<S> keep = Mat<S>::Ones(n, m);
  Mat<S> fill = Mat<S>::Zero(n, m);
  bool any = false;
  for (Eigen::Index r = 0; r < n; ++r) {
    if (double(w.value().row(r).sum()) < 1e-12) {
      out.degenerate[static_cast<std::size_t>(r)] = true;
      keep.row(r).setZero();
      fill.row(r).setOnes();
      any = true;
    }
  }
  if (any)
    w = ad::add(ad::mul(w, ad::Tensor<S>::constant(std::move(keep))), ad::Tensor<S>::constant(std::move(fill)));

  out.weights = ad::mul_col(w, ad::reciprocal(ad::row_sum(w)));
  out.depth = ad::row_sum(ad::mul(out.weights, ad::Tensor<S>::constant(depths)));
  auto flat = ad::reshape(out.weights, n * m, 1);
  out.rgb = ad::segment_sum_rows(ad::mul_col(colors, flat), m);
  return out;
}

// Optional differentiable pose increment applied to every ray before querying
// the map (see apply_increment for the parameterization).
template <class S>
struct PoseIncrement {
  ad::Tensor<S> delta;  // 1 x 6
  Vec3 pivot = Vec3::Zero();
};

template <class S>
struct RenderBatch {
  Composite<S> comp;
  ad::Tensor<S> sdf;  // N x S predicted T-SDF
  Mat<S> depths;      // N x S sample distances
  int samples = 0;
};

// Renders rays sharing one sample count through the map in a single batch.
template <class S>
RenderBatch<S> render_rays(const ImplicitMap<S>& map, std::span<const Ray> rays,
                           std::span<const RaySampleSet> samples, double tr,
                           const PoseIncrement<S>* increment = nullptr) {
  require(!rays.empty() && rays.size() == samples.size(), "render_rays: rays/samples mismatch");
  const auto n = static_cast<Eigen::Index>(rays.size());
  const auto m = static_cast<Eigen::Index>(samples.front().size());
  require(m >= 1, "render_rays: empty sample set");
  const Vec3 pivot = increment ? increment->pivot : Vec3::Zero();

  Mat<S> pts(n * m, 3), dirs(n, 3), depths(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& ray = rays[static_cast<std::size_t>(i)];
    const auto& set = samples[static_cast<std::size_t>(i)];
    require(static_cast<Eigen::Index>(set.size()) == m, "render_rays: sample counts differ");
    for (Eigen::Index j = 0; j < m; ++j) {
      const double t = set.depths[static_cast<std::size_t>(j)];
      const Vec3 x = ray.origin + t * ray.direction - pivot;
      pts.row(i * m + j) << S(x.x()), S(x.y()), S(x.z());
      depths(i, j) = S(t);
    }
    dirs.row(i) << S(ray.direction.x()), S(ray.direction.y()), S(ray.direction.z());
  }

  auto p = ad::Tensor<S>::constant(std::move(pts));
  auto d = ad::Tensor<S>::constant(std::move(dirs));
  if (increment) {
    p = ad::rigid_apply(p, increment->delta, true);
    d = ad::rigid_apply(d, increment->delta, false);
  }
  if (pivot != Vec3::Zero()) {
    Mat<S> shift(1, 3);
    shift << S(pivot.x()), S(pivot.y()), S(pivot.z());
    p = ad::add_row(p, ad::Tensor<S>::constant(std::move(shift)));
  }
  auto q = map.forward(p, ad::repeat_rows(d, m));

  RenderBatch<S> out;
  out.samples = static_cast<int>(m);
  out.sdf = ad::reshape(q.sdf, n, m);
  out.depths = depths;
  out.comp = composite(out.sdf, q.rgb, depths, tr);
  return out;
}

struct RenderedRay {
  Vec3 rgb = Vec3::Zero();
  double depth = 0;
  std::vector<double> sdf;
  bool degenerate = false;
};

// Single-ray convenience wrapper around render_rays.
template <class S>
RenderedRay render(const ImplicitMap<S>& map, const RaySampleSet& samples, const Ray& ray, double tr) {
  require(samples.size() > 0, "render: empty sample set");
  auto b = render_rays<S>(map, std::span<const Ray>(&ray, 1), std::span<const RaySampleSet>(&samples, 1), tr);
  RenderedRay out;
  const auto& rgb = b.comp.rgb.value();
  out.rgb = Vec3(rgb(0, 0), rgb(0, 1), rgb(0, 2));
  out.depth = double(b.comp.depth.value()(0, 0));
  for (Eigen::Index j = 0; j < b.sdf.cols(); ++j) out.sdf.push_back(double(b.sdf.value()(0, j)));
  out.degenerate = b.comp.degenerate[0];
  return out;
}

// Full-frame rendering for visualization. Deterministic sampling from `seed`.
template <class S>
void render_frame(const ImplicitMap<S>& map, const Frame& frame, const PoseSE3& pose, int samples,
                  double tr, double near, double far, std::uint64_t seed, Image& rgb_out,
                  Image& depth_out, int chunk = 512) {
  const int H = frame.height(), W = frame.width();
  rgb_out = Image(W, H, 3);
  depth_out = Image(W, H, 1);
  std::mt19937_64 rng(seed);
  std::vector<Pixel> all;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) all.push_back({r, c});
  Frame probe = frame;
  probe.depth = Image(W, H, 1, 0.f);  // full-range stratified sampling
  for (std::size_t start = 0; start < all.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(all.size(), start + static_cast<std::size_t>(chunk));
    std::span<const Pixel> px(all.data() + start, end - start);
    auto rays = generate_rays(probe, pose, px);
    std::vector<RaySampleSet> sets;
    for (const auto& r : rays) sets.push_back(sample_along_ray(r, samples, tr, near, far, rng));
    auto b = render_rays<S>(map, rays, sets, tr);
    for (std::size_t i = 0; i < rays.size(); ++i) {
      const auto& p = rays[i].pixel;
      for (int k = 0; k < 3; ++k) rgb_out.at(p.row, p.col, k) = float(b.comp.rgb.value()(Eigen::Index(i), k));
      // back to z-depth
      depth_out.at(p.row, p.col) =
          float(double(b.comp.depth.value()(Eigen::Index(i), 0)) * rays[i].camera_direction.z());
    }
  }
}

}  // namespace idf
