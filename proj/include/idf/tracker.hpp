#pragma once

// Frame-to-keyframe tracking: per-pixel features from a small stride-1 CNN,
// ratio-confidence nearest neighbours in feature space, grid-capped
// selection, weighted Procrustes, and online finetuning of the last layer.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "idf/adam.hpp"
#include "idf/config.hpp"
#include "idf/keyframe_store.hpp"
#include "idf/mapper.hpp"

namespace idf {

// ---------------------------------------------------------------------------
// Feature extractor

// 3x3, stride 1, zero padding. in: (H*W) x Cin, weight: (9*Cin) x Cout with
// rows ordered (dy, dx, cin).
inline Mat<float> conv3x3(const Mat<float>& in, int height, int width, const Mat<float>& weight,
                          const Mat<float>& bias) {
  const auto cin = in.cols();
  require(weight.rows() == 9 * cin, "conv3x3: weight rows must be 9 * input channels");
  Mat<float> cols = Mat<float>::Zero(Eigen::Index(height) * width, 9 * cin);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const Eigen::Index row = Eigen::Index(r) * width + c;
      for (int dy = -1; dy <= 1; ++dy) {
        const int rr = r + dy;
        if (rr < 0 || rr >= height) continue;
        for (int dx = -1; dx <= 1; ++dx) {
          const int cc = c + dx;
          if (cc < 0 || cc >= width) continue;
          const int k = (dy + 1) * 3 + (dx + 1);
          cols.block(row, k * cin, 1, cin) = in.row(Eigen::Index(rr) * width + cc);
        }
      }
    }
  }
  Mat<float> out = cols * weight;
  out.rowwise() += bias.row(0);
  return out;
}

struct FeatureMap {
  int width = 0;
  int height = 0;
  Mat<float> trunk;     // (H*W) x C, output of layer2
  Mat<float> features;  // (H*W) x F, L2-normalized

  int dim() const { return static_cast<int>(features.cols()); }
  Eigen::Index index(int row, int col) const { return Eigen::Index(row) * width + col; }
};

// layer1: conv3x3(3 -> C) + ReLU
// layer2: residual block conv3x3 - ReLU - conv3x3, + identity, ReLU
// outconv: 1x1 (C -> F), then per-pixel L2 normalization
// Only outconv is trainable.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(int channels = 32, int feature_dim = 32, std::uint64_t seed = 0)
      : channels_(channels) {
    require(channels >= 1 && feature_dim >= 1, "feature extractor: sizes must be positive");
    std::mt19937_64 rng(seed);
    auto he = [&](int fan_in, int rows, int cols) {
      std::normal_distribution<float> n(0.f, std::sqrt(2.f / fan_in));
      Mat<float> m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
      return m;
    };
    l1_w = he(27, 27, channels);
    l1_b = Mat<float>::Zero(1, channels);
    l2a_w = he(9 * channels, 9 * channels, channels);
    l2a_b = Mat<float>::Zero(1, channels);
    l2b_w = he(9 * channels, 9 * channels, channels);
    l2b_b = Mat<float>::Zero(1, channels);
    outconv_weight = ad::Tensor<float>::parameter(he(channels, channels, feature_dim));
    outconv_bias = ad::Tensor<float>::parameter(Mat<float>::Zero(1, feature_dim));
  }

  FeatureExtractor(const FeatureExtractor& o)
      : l1_w(o.l1_w), l1_b(o.l1_b), l2a_w(o.l2a_w), l2a_b(o.l2a_b), l2b_w(o.l2b_w), l2b_b(o.l2b_b),
        outconv_weight(ad::Tensor<float>::parameter(o.outconv_weight.value())),
        outconv_bias(ad::Tensor<float>::parameter(o.outconv_bias.value())),
        channels_(o.channels_) {}
  FeatureExtractor& operator=(const FeatureExtractor& o) {
    if (this != &o) *this = FeatureExtractor(o);
    return *this;
  }
  FeatureExtractor(FeatureExtractor&&) = default;
  FeatureExtractor& operator=(FeatureExtractor&&) = default;

  int channels() const { return channels_; }
  int feature_dim() const { return static_cast<int>(outconv_weight.cols()); }

  Mat<float> trunk(const Image& rgb) const {
    require(rgb.channels == 3, "extract_features: image must have 3 channels");
    const int H = rgb.height, W = rgb.width;
    Mat<float> x(Eigen::Index(H) * W, 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (int k = 0; k < 3; ++k) x(i, k) = rgb.data[std::size_t(i) * 3 + k] - 0.5f;
    Mat<float> h1 = conv3x3(x, H, W, l1_w, l1_b).cwiseMax(0.f);
    Mat<float> h2 = conv3x3(h1, H, W, l2a_w, l2a_b).cwiseMax(0.f);
    Mat<float> h3 = conv3x3(h2, H, W, l2b_w, l2b_b);
    return (h3 + h1).cwiseMax(0.f);
  }

  // Features for trunk rows, with gradients flowing into outconv.
  ad::Tensor<float> head(const Mat<float>& trunk_rows) const {
    auto y = ad::linear(ad::Tensor<float>::constant(trunk_rows), outconv_weight, outconv_bias);
    auto norm = ad::add_scalar(ad::row_norm(y), 1e-12f);
    return ad::mul_col(y, ad::reciprocal(norm));
  }

  Mat<float> head_values(const Mat<float>& trunk_rows) const {
    Mat<float> y = trunk_rows * outconv_weight.value();
    y.rowwise() += outconv_bias.value().row(0);
    Eigen::VectorXf n = y.rowwise().norm().array() + 1e-12f;
    return (y.array().colwise() / n.array()).matrix();
  }

  FeatureMap extract(const Image& rgb) const {
    FeatureMap f;
    f.width = rgb.width;
    f.height = rgb.height;
    f.trunk = trunk(rgb);
    f.features = head_values(f.trunk);
    return f;
  }

  std::vector<ad::Tensor<float>> trainable() const { return {outconv_weight, outconv_bias}; }

  std::uint64_t trunk_checksum() const {
    Checksum c;
    for (const auto* m : {&l1_w, &l1_b, &l2a_w, &l2a_b, &l2b_w, &l2b_b}) c.add(*m);
    return c.value();
  }

  std::uint64_t outconv_checksum() const {
    Checksum c;
    c.add(outconv_weight.value());
    c.add(outconv_bias.value());
    return c.value();
  }

  Mat<float> l1_w, l1_b, l2a_w, l2a_b, l2b_w, l2b_b;
  ad::Tensor<float> outconv_weight, outconv_bias;

 private:
  int channels_;
};

// ---------------------------------------------------------------------------
// Correspondences

struct Correspondence {
  Pixel current;
  Pixel reference;         // nearest reference feature
  Pixel second;            // second-nearest reference feature
  Vec3 p_c = Vec3::Zero(); // current camera frame
  Vec3 p_r = Vec3::Zero(); // reference camera frame
  double w = 0;            // 1 - d1 / d2
  int cell = 0;            // 4 x 4 grid cell of the current pixel
};

struct CorrespondenceSet {
  std::vector<Correspondence> entries;
  int candidates = 0;  // valid-depth current pixels considered

  std::size_t size() const { return entries.size(); }
};

inline int grid_cell_4x4(const Pixel& p, int width, int height) {
  return std::min(3, p.row * 4 / height) * 4 + std::min(3, p.col * 4 / width);
}

// For every current pixel with depth: nearest and second-nearest reference
// features among reference pixels with depth on a stride grid, w = 1 - d1/d2.
// Candidates are taken greedily by decreasing w, at most floor(K/16) per 4x4
// cell of the current image and K in total.
inline CorrespondenceSet find_correspondences(const FeatureMap& fc, const FeatureMap& fr, const Frame& cur,
                                              const Frame& ref, int K, int ref_stride = 2) {
  require(K >= 16, "find_correspondences: K must be at least 16");
  require(ref_stride >= 1, "find_correspondences: stride must be positive");
  require(fc.width == cur.width() && fc.height == cur.height() && fr.width == ref.width() &&
              fr.height == ref.height(),
          "find_correspondences: feature maps not aligned with depth");
  std::vector<Pixel> cpx, rpx;
  for (int r = 0; r < cur.height(); ++r)
    for (int c = 0; c < cur.width(); ++c)
      if (cur.depth.at(r, c) > 0) cpx.push_back({r, c});
  for (int r = 0; r < ref.height(); r += ref_stride)
    for (int c = 0; c < ref.width(); c += ref_stride)
      if (ref.depth.at(r, c) > 0) rpx.push_back({r, c});

  CorrespondenceSet out;
  out.candidates = static_cast<int>(cpx.size());
  if (cpx.empty() || rpx.size() < 2) throw TrackerLost("find_correspondences: no valid-depth candidates");

  const int F = fc.dim();
  Mat<float> A(Eigen::Index(cpx.size()), F), Bm(Eigen::Index(rpx.size()), F);
  for (std::size_t i = 0; i < cpx.size(); ++i) A.row(Eigen::Index(i)) = fc.features.row(fc.index(cpx[i].row, cpx[i].col));
  for (std::size_t j = 0; j < rpx.size(); ++j) Bm.row(Eigen::Index(j)) = fr.features.row(fr.index(rpx[j].row, rpx[j].col));
  const Eigen::VectorXf an = A.rowwise().squaredNorm(), bn = Bm.rowwise().squaredNorm();

  struct Cand {
    std::size_t i, j1, j2;
    double w;
  };
  std::vector<Cand> cands;
  cands.reserve(cpx.size());
  constexpr Eigen::Index kChunk = 1024;
  for (Eigen::Index start = 0; start < A.rows(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, A.rows() - start);
    const Mat<float> dots = A.middleRows(start, n) * Bm.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      float b1 = std::numeric_limits<float>::infinity(), b2 = b1;
      Eigen::Index j1 = 0, j2 = 0;
      for (Eigen::Index j = 0; j < dots.cols(); ++j) {
        const float d2 = an(start + i) + bn(j) - 2 * dots(i, j);
        if (d2 < b1) {
          b2 = b1;
          j2 = j1;
          b1 = d2;
          j1 = j;
        } else if (d2 < b2) {
          b2 = d2;
          j2 = j;
        }
      }
      // exact distances for the two winners
      const double d1 = (A.row(start + i) - Bm.row(j1)).norm();
      const double d2 = (A.row(start + i) - Bm.row(j2)).norm();
      const double w = d2 > 1e-12 ? std::max(0.0, 1.0 - d1 / d2) : 0.0;
      cands.push_back({std::size_t(start + i), std::size_t(j1), std::size_t(j2), w});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.w > b.w; });

  const int cap = K / 16;
  std::array<int, 16> per_cell{};
  for (const auto& c : cands) {
    if (static_cast<int>(out.entries.size()) >= K) break;
    const Pixel& pc = cpx[c.i];
    const int cell = grid_cell_4x4(pc, cur.width(), cur.height());
    if (per_cell[cell] >= cap) continue;
    ++per_cell[cell];
    Correspondence e;
    e.current = pc;
    e.reference = rpx[c.j1];
    e.second = rpx[c.j2];
    e.w = c.w;
    e.cell = cell;
    e.p_c = cur.intrinsics.unproject(pc.row, pc.col) * double(cur.depth.at(pc.row, pc.col));
    e.p_r = ref.intrinsics.unproject(e.reference.row, e.reference.col) *
            double(ref.depth.at(e.reference.row, e.reference.col));
    out.entries.push_back(e);
  }
  if (out.entries.size() < 3) throw TrackerLost("find_correspondences: fewer than 3 correspondences");
  return out;
}

// pixel pairs and weights, one line per correspondence
inline void write_correspondences_csv(std::ostream& os, const CorrespondenceSet& set) {
  os << "row_c,col_c,row_r,col_r,weight,cell\n";
  for (const auto& e : set.entries)
    os << e.current.row << ',' << e.current.col << ',' << e.reference.row << ',' << e.reference.col << ','
       << e.w << ',' << e.cell << '\n';
}

// ---------------------------------------------------------------------------
// Procrustes

// argmin_(R,t) sum w_i ||p_r,i - (R p_c,i + t)||^2, i.e. reference-from-current.
inline PoseSE3 weighted_procrustes(std::span<const Vec3> p_c, std::span<const Vec3> p_r,
                                   std::span<const double> w) {
  require(p_c.size() == p_r.size() && p_c.size() == w.size(), "weighted_procrustes: size mismatch");
  double total = 0;
  for (double wi : w) {
    if (!std::isfinite(wi) || wi < 0) throw ContractViolation("weighted_procrustes: weights must be finite and >= 0");
    total += wi;
  }
  if (p_c.size() < 3 || !(total > 0)) throw TrackerLost("weighted_procrustes: fewer than 3 weighted points");
  Vec3 mu_c = Vec3::Zero(), mu_r = Vec3::Zero();
  for (std::size_t i = 0; i < w.size(); ++i) {
    mu_c += w[i] * p_c[i];
    mu_r += w[i] * p_r[i];
  }
  mu_c /= total;
  mu_r /= total;
  Mat3 M = Mat3::Zero();
  for (std::size_t i = 0; i < w.size(); ++i) M += w[i] * (p_r[i] - mu_r) * (p_c[i] - mu_c).transpose();
  Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  // rank < 2: coincident or collinear points leave the rotation undetermined
  if (!(sv(0) > 0) || sv(1) <= 1e-12 * sv(0)) throw TrackerLost("weighted_procrustes: degenerate configuration");
  const Mat3 U = svd.matrixU(), V = svd.matrixV();
  Mat3 D = Mat3::Identity();
  D(2, 2) = (U * V.transpose()).determinant() > 0 ? 1.0 : -1.0;
  PoseSE3 T;
  T.R = U * D * V.transpose();
  T.t = mu_r - T.R * mu_c;
  return T;
}

inline PoseSE3 weighted_procrustes(const CorrespondenceSet& set) {
  std::vector<Vec3> pc, pr;
  std::vector<double> w;
  for (const auto& e : set.entries) {
    pc.push_back(e.p_c);
    pr.push_back(e.p_r);
    w.push_back(e.w);
  }
  return weighted_procrustes(pc, pr, w);
}

// Weighted median of ||p_r - T p_c|| (T reference-from-current).
inline double weighted_median_residual(const CorrespondenceSet& set, const PoseSE3& T) {
  std::vector<std::pair<double, double>> rw;
  double total = 0;
  for (const auto& e : set.entries) {
    rw.emplace_back((e.p_r - T * e.p_c).norm(), e.w);
    total += e.w;
  }
  require(!rw.empty(), "weighted median of an empty set");
  std::sort(rw.begin(), rw.end());
  if (!(total > 0)) return rw[rw.size() / 2].first;
  double acc = 0;
  for (const auto& [r, w] : rw) {
    acc += w;
    if (acc >= 0.5 * total) return r;
  }
  return rw.back().first;
}

namespace ad {

// Differentiable Procrustes solution, expressed as the increment delta
// (1 x 6, value 0) around the solved pose in the pivoted frame of
// apply_increment. With y_i = T p_c,i - c0 and a_i = T_r p_r,i - c0 the
// solution minimizes E = sum w_i ||a_i - exp(w) y_i - v||^2; the implicit
// function theorem gives d delta / d w_i = -H^-1 g_i with g_i the gradient of
// the i-th term and H the Hessian of E, both at delta = 0.
template <class S>
Tensor<S> procrustes_increment(const Tensor<S>& weights, std::span<const Vec3> y, std::span<const Vec3> a) {
  require(weights.cols() == 1 && weights.rows() == static_cast<Index>(y.size()) && y.size() == a.size(),
          "procrustes_increment: shape mismatch");
  const auto n = y.size();
  std::vector<Vec6> g(n);
  Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 r = a[i] - y[i];
    const Mat3 Y = hat(y[i]);
    g[i].head<3>() = -2 * y[i].cross(r);
    g[i].tail<3>() = -2 * r;
    Eigen::Matrix<double, 6, 6> Hi;
    Hi.topLeftCorner<3, 3>() = -2 * Y * Y - (r * y[i].transpose() + y[i] * r.transpose()) +
                               2 * r.dot(y[i]) * Mat3::Identity();
    Hi.topRightCorner<3, 3>() = 2 * Y;
    Hi.bottomLeftCorner<3, 3>() = -2 * Y;
    Hi.bottomRightCorner<3, 3>() = 2 * Mat3::Identity();
    H += double(weights.value()(Index(i), 0)) * Hi;
  }
  auto* wn = weights.raw();
  return make_op<S>(Mat<S>::Zero(1, 6), {weights}, [wn, g = std::move(g), H](const Mat<S>& G) {
    Vec6 up;
    for (int k = 0; k < 6; ++k) up(k) = double(G(0, k));
    Eigen::FullPivLU<Eigen::Matrix<double, 6, 6>> lu(H);
    if (!lu.isInvertible()) return;
    const Vec6 u = lu.solve(up);  // H symmetric
    Mat<S> gw(Index(g.size()), 1);
    for (std::size_t i = 0; i < g.size(); ++i) gw(Index(i), 0) = S(-u.dot(g[i]));
    wn->accumulate(gw);
  });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Tracking

struct TrackResult {
  PoseSE3 pose;      // world-from-camera of the current frame
  PoseSE3 relative;  // reference-from-current
  bool lost = false;
  double residual = 0;
  std::string reason;
  CorrespondenceSet correspondences;
};

inline TrackResult track_features(const FeatureMap& fc, const FeatureMap& fr, const Frame& cur,
                                  const Keyframe& ref, const PoseSE3& fallback, const SystemConfig& cfg) {
  TrackResult res;
  try {
    res.correspondences = find_correspondences(fc, fr, cur, ref.frame, cfg.n_correspondences, cfg.reference_stride);
    res.relative = weighted_procrustes(res.correspondences);
    res.residual = weighted_median_residual(res.correspondences, res.relative);
    res.pose = ref.pose * res.relative;
    res.pose.orthonormalize();
    if (res.residual > cfg.lost_residual) {
      res.lost = true;
      res.reason = "median residual above threshold";
      res.pose = fallback;
    }
  } catch (const TrackerLost& e) {
    res.lost = true;
    res.reason = e.what();
    res.pose = fallback;
  }
  return res;
}

// Pose of `cur` from correspondences against `ref`; on failure the pose is
// `fallback` (the previous frame's pose) and lost is set.
inline TrackResult track(const FeatureExtractor& ex, const Frame& cur, const Keyframe& ref,
                         const PoseSE3& fallback, const SystemConfig& cfg) {
  return track_features(ex.extract(cur.rgb), ex.extract(ref.frame.rgb), cur, ref, fallback, cfg);
}

// ---------------------------------------------------------------------------
// Finetuning

struct FinetuneStep {
  bool skipped = false;
  double l_p = 0, l_d = 0, l_r = 0, total = 0;
};

struct FinetuneReport {
  bool ran = false;  // false when fewer than N_kf keyframes are stored
  int iterations = 0;
  int skipped = 0;
  std::vector<FinetuneStep> steps;
};

// One descent step of w_p L_p + w_d L_d + w_r L_r on outconv for the pair
// (reference = ref, current = cur), both stored keyframes with known poses.
inline FinetuneStep finetune_step(FeatureExtractor& ex, ad::AdamState<float>& state, const ImplicitMap<float>& map,
                                  const Keyframe& ref, const Keyframe& cur, const SystemConfig& cfg,
                                  std::mt19937_64& rng) {
  FinetuneStep step;
  const FeatureMap fc = ex.extract(cur.frame.rgb), fr = ex.extract(ref.frame.rgb);
  CorrespondenceSet corr;
  PoseSE3 rel;
  try {
    corr = find_correspondences(fc, fr, cur.frame, ref.frame, cfg.n_correspondences, cfg.reference_stride);
    rel = weighted_procrustes(corr);
  } catch (const TrackerLost&) {
    step.skipped = true;
    return step;
  }
  PoseSE3 Tc = ref.pose * rel;
  Tc.orthonormalize();
  const Vec3 c0 = Tc.t;

  // differentiable confidences
  const auto n = static_cast<Eigen::Index>(corr.size());
  Mat<float> tc(n, fc.trunk.cols()), t1(n, fc.trunk.cols()), t2(n, fc.trunk.cols());
  std::vector<Vec3> y, a;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = corr.entries[std::size_t(i)];
    tc.row(i) = fc.trunk.row(fc.index(e.current.row, e.current.col));
    t1.row(i) = fr.trunk.row(fr.index(e.reference.row, e.reference.col));
    t2.row(i) = fr.trunk.row(fr.index(e.second.row, e.second.col));
    y.push_back(Tc * e.p_c - c0);
    a.push_back(ref.pose * e.p_r - c0);
  }
  const auto f_c = ex.head(tc), f_1 = ex.head(t1), f_2 = ex.head(t2);
  auto d1 = ad::row_norm(ad::sub(f_c, f_1));
  auto d2 = ad::add_scalar(ad::row_norm(ad::sub(f_c, f_2)), 1e-12f);
  auto w = ad::add_scalar(ad::neg(ad::mul(d1, ad::reciprocal(d2))), 1.f);
  {
    // ratios above 1 cannot occur for a true second neighbour; guard anyway
    Mat<float> clamp = (w.value().array() >= 0.f).cast<float>().matrix();
    w = ad::mul(w, ad::Tensor<float>::constant(std::move(clamp)));
  }
  auto delta = ad::procrustes_increment<float>(w, y, a);

  // L_r = (1/|C|) sum w ||a - T(delta) y||
  Mat<float> ym(n, 3), am(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      ym(i, k) = float(y[std::size_t(i)](k));
      am(i, k) = float(a[std::size_t(i)](k));
    }
  auto moved = ad::rigid_apply(ad::Tensor<float>::constant(ym), delta, true);
  auto lr = ad::mean(ad::mul(w, ad::row_norm(ad::sub(ad::Tensor<float>::constant(am), moved))));

  // L_p and L_d on sampled pixels of the current keyframe, rendered at T_c
  FreezeGuard<float> freeze(map);
  std::vector<Pixel> px;
  std::uniform_int_distribution<int> ur(0, cur.frame.height() - 1), uc(0, cur.frame.width() - 1);
  for (int i = 0; i < cfg.finetune_batch_rays; ++i) px.push_back({ur(rng), uc(rng)});
  const RaySet rs = make_ray_set(cur.frame, Tc, std::move(px), cfg, rng);
  PoseIncrement<float> inc{delta, c0};
  auto batch = render_rays<float>(map, rs.rays, rs.samples, cfg.truncation, &inc);
  Mat<float> rgb(Eigen::Index(rs.rays.size()), 3), depth(Eigen::Index(rs.rays.size()), 1), mask(depth.rows(), 1);
  int valid = 0;
  for (std::size_t i = 0; i < rs.rays.size(); ++i) {
    for (int k = 0; k < 3; ++k) rgb(Eigen::Index(i), k) = float(rs.rays[i].measured_rgb(k));
    depth(Eigen::Index(i), 0) = float(rs.rays[i].measured_depth);
    mask(Eigen::Index(i), 0) = rs.rays[i].measured_depth > 0 ? 1.f : 0.f;
    valid += rs.rays[i].measured_depth > 0;
  }
  auto lp = photometric_loss(batch.comp.rgb, rgb);
  ad::Tensor<float> ld = ad::Tensor<float>::scalar(0.f);
  if (valid > 0) {
    mask /= float(valid);
    ld = ad::sum(ad::mul(ad::abs(ad::sub(batch.comp.depth, ad::Tensor<float>::constant(depth))),
                         ad::Tensor<float>::constant(mask)));
  }
  const auto& lw = cfg.finetune_loss;
  auto total = ad::add(ad::add(ad::scale(lp, float(lw.w_p)), ad::scale(ld, float(lw.w_d))),
                       ad::scale(lr, float(lw.w_r)));
  step.l_p = lp.item();
  step.l_d = ld.item();
  step.l_r = lr.item();
  step.total = total.item();
  if (!std::isfinite(step.total)) {
    step.skipped = true;
    return step;
  }

  auto params = ex.trainable();
  ad::zero_grad(params);
  ad::backward(total);
  std::vector<Mat<float>*> values;
  std::vector<Mat<float>> zeros;
  zeros.reserve(params.size());
  std::vector<const Mat<float>*> grads;
  for (auto& p : params) {
    values.push_back(&p.mutable_value());
    if (p.has_grad() && p.grad().allFinite()) {
      grads.push_back(&p.grad());
    } else {
      zeros.push_back(Mat<float>::Zero(p.rows(), p.cols()));
      grads.push_back(&zeros.back());
    }
  }
  ad::adam_step<float>(std::span<Mat<float>* const>(values), std::span<const Mat<float>* const>(grads), state);
  ad::zero_grad(params);
  return step;
}

// Pairs of keyframes adjacent in id order: (reference, current).
inline std::vector<std::pair<Keyframe*, Keyframe*>> consecutive_pairs(const KeyframeStore& store) {
  auto kfs = store.keyframes();
  std::sort(kfs.begin(), kfs.end(), [](const Keyframe* a, const Keyframe* b) { return a->id < b->id; });
  std::vector<std::pair<Keyframe*, Keyframe*>> out;
  for (std::size_t i = 1; i < kfs.size(); ++i) out.emplace_back(kfs[i - 1], kfs[i]);
  return out;
}

inline FinetuneReport finetune_extractor(FeatureExtractor& ex, ad::AdamState<float>& state,
                                         const ImplicitMap<float>& map, const KeyframeStore& store,
                                         const SystemConfig& cfg, std::mt19937_64& rng, int iterations) {
  FinetuneReport rep;
  if (static_cast<int>(store.size()) < cfg.n_kf_finetune) return rep;
  const auto pairs = consecutive_pairs(store);
  if (pairs.empty()) return rep;
  rep.ran = true;
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  for (int it = 0; it < iterations; ++it) {
    const auto& [ref, cur] = pairs[pick(rng)];
    auto s = finetune_step(ex, state, map, *ref, *cur, cfg, rng);
    rep.skipped += s.skipped;
    rep.iterations += !s.skipped;
    rep.steps.push_back(s);
  }
  return rep;
}

inline ad::AdamState<float> make_conv_optimizer(const SystemConfig& cfg) {
  return ad::AdamState<float>(ad::AdamOptions{cfg.lr_conv});
}

}  // namespace idf
