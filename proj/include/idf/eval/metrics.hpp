#pragma once

// Trajectory and reconstruction metrics.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "idf/geometry.hpp"

namespace idf::eval {

struct StampedPose {
  double timestamp = 0;
  PoseSE3 pose;
};

struct AteResult {
  double rmse = 0;
  double mean = 0;
  double median = 0;
  int associated = 0;
  PoseSE3 alignment;  // applied to the estimate
  std::vector<double> errors;
};

// Pairs each estimated pose with the nearest ground-truth timestamp within
// max_dt; each ground-truth pose is used at most once.
inline std::vector<std::pair<std::size_t, std::size_t>> associate(const std::vector<StampedPose>& est,
                                                                  const std::vector<StampedPose>& gt,
                                                                  double max_dt = 0.01) {
  std::vector<std::size_t> order(gt.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return gt[a].timestamp < gt[b].timestamp; });
  std::vector<double> stamps;
  for (auto i : order) stamps.push_back(gt[i].timestamp);
  std::vector<bool> used(gt.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double t = est[i].timestamp;
    auto it = std::lower_bound(stamps.begin(), stamps.end(), t);
    std::size_t best = gt.size();
    double best_dt = max_dt;
    for (auto cand : {it, it == stamps.begin() ? it : std::prev(it)}) {
      if (cand == stamps.end()) continue;
      const std::size_t k = order[std::size_t(cand - stamps.begin())];
      const double dt = std::abs(gt[k].timestamp - t);
      if (dt <= best_dt && !used[k]) {
        best_dt = dt;
        best = k;
      }
    }
    if (best < gt.size()) {
      used[best] = true;
      out.emplace_back(i, best);
    }
  }
  return out;
}

// Rigid (rotation + translation, no scale) least-squares alignment of
// `source` onto `target`: argmin sum ||target_i - (R source_i + t)||^2.
inline PoseSE3 align_rigid(const std::vector<Vec3>& source, const std::vector<Vec3>& target) {
  require(source.size() == target.size() && !source.empty(), "align_rigid: point sets must match");
  Vec3 ms = Vec3::Zero(), mt = Vec3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    ms += source[i];
    mt += target[i];
  }
  ms /= double(source.size());
  mt /= double(source.size());
  Mat3 C = Mat3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) C += (target[i] - mt) * (source[i] - ms).transpose();
  Eigen::JacobiSVD<Mat3> svd(C, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 D = Mat3::Identity();
  D(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() > 0 ? 1.0 : -1.0;
  PoseSE3 T;
  T.R = svd.matrixU() * D * svd.matrixV().transpose();
  T.t = mt - T.R * ms;
  return T;
}

inline double median_of(std::vector<double> v) {
  require(!v.empty(), "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline AteResult ate(const std::vector<StampedPose>& estimated, const std::vector<StampedPose>& ground_truth,
                     double max_dt = 0.01) {
  const auto pairs = associate(estimated, ground_truth, max_dt);
  if (pairs.size() < 3) throw MetricError("ate: fewer than 3 associated poses");
  std::vector<Vec3> src, dst;
  for (auto [i, j] : pairs) {
    src.push_back(estimated[i].pose.t);
    dst.push_back(ground_truth[j].pose.t);
  }
  AteResult r;
  r.associated = static_cast<int>(pairs.size());
  r.alignment = align_rigid(src, dst);
  double sq = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double e = (dst[i] - r.alignment * src[i]).norm();
    r.errors.push_back(e);
    sq += e * e;
  }
  const double n = double(src.size());
  r.rmse = std::sqrt(sq / n);
  r.mean = std::accumulate(r.errors.begin(), r.errors.end(), 0.0) / n;
  r.median = median_of(r.errors);
  return r;
}

struct ReconMetrics {
  double accuracy = 0;          // meters
  double completion = 0;        // meters
  double completion_ratio = 0;  // percent
};

// Distance from every query point to its nearest reference point. The
// nearest index comes from blocked |r|^2 - 2 q.r products; the returned
// distance is recomputed directly.
inline std::vector<double> nearest_distances(const std::vector<Vec3>& query, const std::vector<Vec3>& ref) {
  require(!ref.empty(), "nearest_distances: empty reference set");
  using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
  MatX3 R(Eigen::Index(ref.size()), 3);
  for (std::size_t j = 0; j < ref.size(); ++j) R.row(Eigen::Index(j)) = ref[j].transpose();
  const Eigen::VectorXd rn = R.rowwise().squaredNorm();
  std::vector<double> out(query.size());
  constexpr std::size_t kChunk = 512;
  for (std::size_t start = 0; start < query.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, query.size() - start);
    MatX3 Q(Eigen::Index(n), 3);
    for (std::size_t i = 0; i < n; ++i) Q.row(Eigen::Index(i)) = query[start + i].transpose();
    const Eigen::MatrixXd dots = Q * R.transpose();
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (rn.transpose() - 2 * dots.row(Eigen::Index(i))).minCoeff(&best);
      out[start + i] = (query[start + i] - ref[std::size_t(best)]).norm();
    }
  }
  return out;
}

inline ReconMetrics reconstruction_metrics(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau) {
  if (pred.empty() || gt.empty()) throw MetricError("reconstruction_metrics: empty point set");
  const auto acc = nearest_distances(pred, gt);
  const auto comp = nearest_distances(gt, pred);
  ReconMetrics m;
  m.accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / double(acc.size());
  m.completion = std::accumulate(comp.begin(), comp.end(), 0.0) / double(comp.size());
  const auto within = std::count_if(comp.begin(), comp.end(), [&](double d) { return d < tau; });
  m.completion_ratio = 100.0 * double(within) / double(comp.size());
  return m;
}

}  // namespace idf::eval
