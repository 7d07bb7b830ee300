#pragma once

// Rendering losses and the two mapping-side optimizations: map weights over a
// replay set, and the pose of a new keyframe against the frozen map.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "idf/active_sampling.hpp"
#include "idf/adam.hpp"
#include "idf/config.hpp"
#include "idf/keyframe.hpp"
#include "idf/renderer.hpp"

namespace idf {

// (1/|B|) sum_p ||I_p - I^_p||_2
template <class S>
ad::Tensor<S> photometric_loss(const ad::Tensor<S>& rendered, const Mat<S>& measured) {
  require(rendered.rows() >= 1, "photometric_loss: empty batch");
  require(measured.rows() == rendered.rows() && measured.cols() == rendered.cols(),
          "photometric_loss: batch shapes differ");
  return ad::mean(ad::row_norm(ad::sub(rendered, ad::Tensor<S>::constant(measured))));
}

template <class S>
struct GeometricLoss {
  ad::Tensor<S> total;  // w_fs L_fs + w_tr L_tr
  double free_space = 0;
  double truncation = 0;
  std::vector<double> per_ray;  // w_fs and w_tr weighted, per ray
};

// Free-space samples are pulled to +tr, truncation samples to their clamped
// target. Each subset is averaged per ray, then over rays; a ray with an empty
// subset contributes zero to that term.
template <class S>
GeometricLoss<S> geometric_loss(std::span<const RaySampleSet> samples, const ad::Tensor<S>& predicted,
                                double tr, const LossWeights& weights) {
  const auto n = static_cast<Eigen::Index>(samples.size());
  require(n >= 1 && predicted.rows() == n, "geometric_loss: predictions not aligned with rays");
  const Eigen::Index m = predicted.cols();
  Mat<S> wfs = Mat<S>::Zero(n, m), wtr = Mat<S>::Zero(n, m), target = Mat<S>::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& set = samples[static_cast<std::size_t>(i)];
    require(static_cast<Eigen::Index>(set.size()) == m, "geometric_loss: sample counts differ");
    int nfs = 0, ntr = 0;
    for (auto l : set.labels) {
      nfs += l == Region::kFreeSpace;
      ntr += l == Region::kTruncation;
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto l = set.labels[static_cast<std::size_t>(j)];
      target(i, j) = S(set.sdf_targets[static_cast<std::size_t>(j)]);
      if (l == Region::kFreeSpace) {
        wfs(i, j) = S(1.0 / (double(n) * nfs));
        target(i, j) = S(tr);
      } else if (l == Region::kTruncation) {
        wtr(i, j) = S(1.0 / (double(n) * ntr));
      }
    }
  }
  auto resid = ad::abs(ad::sub(predicted, ad::Tensor<S>::constant(target)));
  auto fs = ad::sum(ad::mul(resid, ad::Tensor<S>::constant(wfs)));
  auto trl = ad::sum(ad::mul(resid, ad::Tensor<S>::constant(wtr)));

  GeometricLoss<S> out;
  out.free_space = double(fs.item());
  out.truncation = double(trl.item());
  out.total = ad::add(ad::scale(fs, S(weights.w_fs)), ad::scale(trl, S(weights.w_tr)));
  out.per_ray.resize(static_cast<std::size_t>(n));
  const Mat<S>& r = resid.value();
  for (Eigen::Index i = 0; i < n; ++i)
    out.per_ray[static_cast<std::size_t>(i)] =
        double(n) * (weights.w_fs * double(r.row(i).dot(wfs.row(i))) +
                     weights.w_tr * double(r.row(i).dot(wtr.row(i))));
  return out;
}

struct LossRecord {
  long iteration = 0;
  double l_p = 0, l_fs = 0, l_tr = 0, total = 0;
};
using LossLogger = std::function<void(const LossRecord&)>;

template <class S>
struct BatchLoss {
  ad::Tensor<S> total;  // L_g + w_p L_p
  LossRecord record;
  std::vector<double> per_ray;
};

template <class S>
BatchLoss<S> mapping_loss(const RenderBatch<S>& batch, std::span<const Ray> rays,
                          std::span<const RaySampleSet> samples, double tr, const LossWeights& w) {
  Mat<S> measured(static_cast<Eigen::Index>(rays.size()), 3);
  for (std::size_t i = 0; i < rays.size(); ++i)
    for (int k = 0; k < 3; ++k) measured(Eigen::Index(i), k) = S(rays[i].measured_rgb(k));
  auto lp = photometric_loss(batch.comp.rgb, measured);
  auto lg = geometric_loss(samples, batch.sdf, tr, w);
  BatchLoss<S> out;
  out.total = ad::add(lg.total, ad::scale(lp, S(w.w_p)));
  out.record.l_p = double(lp.item());
  out.record.l_fs = lg.free_space;
  out.record.l_tr = lg.truncation;
  out.record.total = double(out.total.item());
  out.per_ray = lg.per_ray;
  const auto& rgb = batch.comp.rgb.value();
  for (std::size_t i = 0; i < rays.size(); ++i)
    out.per_ray[i] += w.w_p * double((rgb.row(Eigen::Index(i)) - measured.row(Eigen::Index(i))).norm());
  return out;
}

// Rays of one keyframe, ready to render.
struct RaySet {
  std::vector<Pixel> pixels;
  std::vector<Ray> rays;
  std::vector<RaySampleSet> samples;
};

inline RaySet make_ray_set(const Frame& frame, const PoseSE3& pose, std::vector<Pixel> pixels,
                           const SystemConfig& cfg, std::mt19937_64& rng) {
  RaySet s;
  s.pixels = std::move(pixels);
  s.rays = generate_rays(frame, pose, s.pixels);
  s.samples.reserve(s.rays.size());
  for (const auto& r : s.rays)
    s.samples.push_back(sample_along_ray(r, cfg.samples_per_ray, cfg.truncation, cfg.near, cfg.far_plane(), rng));
  return s;
}

// Restores parameter trainability on scope exit.
template <class S>
class FreezeGuard {
 public:
  explicit FreezeGuard(const ImplicitMap<S>& map) : params_(map.parameters()) {
    for (auto& p : params_) {
      was_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(was_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<ad::Tensor<S>> params_;
  std::vector<bool> was_;
};

template <class S>
bool gradients_finite(const std::vector<ad::Tensor<S>>& params) {
  for (const auto& p : params)
    if (p.has_grad() && !p.grad().allFinite()) return false;
  return true;
}

struct MapOptReport {
  double initial_loss = 0;
  double final_loss = 0;
  int iterations = 0;
  int aborted = 0;
  int rays_per_iteration = 0;
  std::vector<std::string> diagnostics;
};

// Splits B rays evenly over the replay set (earlier keyframes take the
// remainder), samples each keyframe's share with active sampling, and takes
// one Adam step on the map per iteration. Poses are read, never written; each
// keyframe's cell grid is refreshed from the latest per-pixel losses.
template <class S>
MapOptReport optimize_map(ImplicitMap<S>& map, std::span<Keyframe* const> replay,
                          const SystemConfig& cfg, std::mt19937_64& rng, int iterations,
                          ad::AdamState<S>* persistent = nullptr, const LossLogger& log = {},
                          long log_offset = 0) {
  require(!replay.empty(), "optimize_map: empty replay set");
  ad::AdamState<S> local(ad::AdamOptions{cfg.lr_map});
  ad::AdamState<S>& state = persistent ? *persistent : local;
  map.set_trainable(true);
  auto params = map.parameters();
  std::vector<Mat<S>*> values;
  for (auto& p : params) values.push_back(&p.mutable_value());

  MapOptReport rep;
  const int n_kf = static_cast<int>(replay.size());
  for (int it = 0; it < iterations; ++it) {
    std::vector<RaySet> sets;
    std::vector<Ray> rays;
    std::vector<RaySampleSet> samples;
    for (int k = 0; k < n_kf; ++k) {
      const Keyframe& kf = *replay[static_cast<std::size_t>(k)];
      const int share = cfg.batch_rays / n_kf + (k < cfg.batch_rays % n_kf ? 1 : 0);
      if (share == 0) {
        sets.emplace_back();
        continue;
      }
      auto px = active_sample_pixels(kf.cell_losses, share, false, kf.frame.width(), kf.frame.height(), rng,
                                     cfg.active_eps);
      sets.push_back(make_ray_set(kf.frame, kf.pose, std::move(px), cfg, rng));
      rays.insert(rays.end(), sets.back().rays.begin(), sets.back().rays.end());
      samples.insert(samples.end(), sets.back().samples.begin(), sets.back().samples.end());
    }
    rep.rays_per_iteration = static_cast<int>(rays.size());

    auto batch = render_rays<S>(map, rays, samples, cfg.truncation);
    auto loss = mapping_loss<S>(batch, rays, samples, cfg.truncation, cfg.map_loss);
    loss.record.iteration = log_offset + it;
    if (log) log(loss.record);
    if (!std::isfinite(loss.record.total)) {
      ++rep.aborted;
      rep.diagnostics.push_back("map iteration " + std::to_string(it) + ": non-finite loss, step skipped");
      continue;
    }
    if (it == 0) rep.initial_loss = loss.record.total;
    rep.final_loss = loss.record.total;

    ad::zero_grad(params);
    ad::backward(loss.total);
    if (!gradients_finite(params)) {
      ++rep.aborted;
      rep.diagnostics.push_back("map iteration " + std::to_string(it) + ": non-finite gradient, step skipped");
      ad::zero_grad(params);
      continue;
    }
    std::vector<Mat<S>> zeros;
    zeros.reserve(params.size());
    std::vector<const Mat<S>*> grads;
    for (auto& p : params) {
      if (p.has_grad()) {
        grads.push_back(&p.grad());
      } else {
        zeros.push_back(Mat<S>::Zero(p.rows(), p.cols()));
        grads.push_back(&zeros.back());
      }
    }
    ad::adam_step<S>(std::span<Mat<S>* const>(values), std::span<const Mat<S>* const>(grads), state);
    ad::zero_grad(params);
    ++rep.iterations;

    std::size_t offset = 0;
    for (int k = 0; k < n_kf; ++k) {
      Keyframe& kf = *replay[static_cast<std::size_t>(k)];
      const auto& s = sets[static_cast<std::size_t>(k)];
      if (s.pixels.empty()) continue;
      kf.cell_losses.refresh(s.pixels, std::span<const double>(loss.per_ray.data() + offset, s.pixels.size()),
                             kf.frame.width(), kf.frame.height());
      offset += s.pixels.size();
    }
  }
  return rep;
}

template <class S>
MapOptReport optimize_map(ImplicitMap<S>& map, std::span<Keyframe* const> replay,
                          const SystemConfig& cfg, std::mt19937_64& rng) {
  return optimize_map(map, replay, cfg, rng, cfg.n_map_iters);
}

struct PoseOptResult {
  PoseSE3 pose;
  bool failed = false;
  double initial_loss = 0;
  double best_loss = 0;
  int best_iteration = 0;  // 0 = initial pose
  std::vector<double> losses;          // on the fixed evaluation batch, per iterate
  std::vector<double> learning_rates;  // effective lr used at each step
};

// Refines kf.pose (the tracker's estimate) against the frozen map.
//
// The increment acts on the left in a world-aligned frame centred at the
// initial camera position, so rotation and translation are decoupled. Each
// step draws a fresh batch with inverted active sampling. Every iterate is also
// scored on one evaluation batch drawn at the start, so that the returned
// best-loss pose is not an artefact of batch-to-batch sampling noise.
template <class S>
PoseOptResult optimize_pose(const ImplicitMap<S>& map, Keyframe& kf, const SystemConfig& cfg,
                            std::mt19937_64& rng, const LossLogger& log = {}, long log_offset = 0) {
  FreezeGuard<S> freeze(map);
  const PoseSE3 base = kf.pose;
  const int W = kf.frame.width(), H = kf.frame.height();
  const int rays_per_step = cfg.pose_rays();

  ad::AdamOptions opt;
  opt.lr = cfg.lr_pose;
  opt.decay_factor = cfg.pose_lr_decay;
  opt.decay_every = cfg.pose_lr_decay_every;
  ad::AdamState<S> state(opt);
  auto delta = ad::Tensor<S>::parameter(Mat<S>::Zero(1, 6));
  PoseIncrement<S> inc{delta, base.t};

  std::vector<Pixel> eval_px;
  {
    std::uniform_int_distribution<int> ur(0, H - 1), uc(0, W - 1);
    const int n_eval = std::max(64, rays_per_step / 4);
    for (int i = 0; i < n_eval; ++i) eval_px.push_back({ur(rng), uc(rng)});
  }
  const RaySet eval = make_ray_set(kf.frame, base, eval_px, cfg, rng);

  auto evaluate = [&]() {
    auto b = render_rays<S>(map, eval.rays, eval.samples, cfg.truncation, &inc);
    return mapping_loss<S>(b, eval.rays, eval.samples, cfg.truncation, cfg.map_loss).record.total;
  };

  PoseOptResult res;
  res.pose = base;
  Vec6 best_delta = Vec6::Zero();
  res.initial_loss = res.best_loss = evaluate();
  res.losses.push_back(res.initial_loss);
  if (!std::isfinite(res.initial_loss)) {
    res.failed = true;
    return res;
  }

  for (int it = 0; it < cfg.n_pose_iters; ++it) {
    auto px = active_sample_pixels(kf.cell_losses, rays_per_step, true, W, H, rng, cfg.active_eps);
    const RaySet s = make_ray_set(kf.frame, base, std::move(px), cfg, rng);
    auto batch = render_rays<S>(map, s.rays, s.samples, cfg.truncation, &inc);
    auto loss = mapping_loss<S>(batch, s.rays, s.samples, cfg.truncation, cfg.map_loss);
    loss.record.iteration = log_offset + it;
    if (log) log(loss.record);
    if (!std::isfinite(loss.record.total)) {
      res.pose = base;
      res.failed = true;
      return res;
    }
    delta.zero_grad();
    ad::backward(loss.total);
    if (!delta.has_grad() || !delta.grad().allFinite()) {
      res.pose = base;
      res.failed = true;
      return res;
    }
    res.learning_rates.push_back(state.effective_lr());
    Mat<S>* v = &delta.mutable_value();
    const Mat<S>* g = &delta.grad();
    ad::adam_step<S>(std::span<Mat<S>* const>(&v, 1), std::span<const Mat<S>* const>(&g, 1), state);
    kf.cell_losses.refresh(s.pixels, loss.per_ray, W, H);

    const double l = evaluate();
    res.losses.push_back(l);
    if (std::isfinite(l) && l < res.best_loss) {
      res.best_loss = l;
      res.best_iteration = it + 1;
      for (int k = 0; k < 6; ++k) best_delta(k) = double(delta.value()(0, k));
    }
  }
  res.pose = apply_increment(base, best_delta, base.t);
  res.pose.orthonormalize();
  return res;
}

}  // namespace idf
