#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "idf/common.hpp"

namespace idf {

inline Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Rodrigues' formula.
inline Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 W = hat(w);
  if (theta < 1e-8) return Mat3::Identity() + W + 0.5 * W * W;
  return Mat3::Identity() + (std::sin(theta) / theta) * W +
         ((1 - std::cos(theta)) / (theta * theta)) * W * W;
}

inline Vec3 so3_log(const Mat3& R) {
  Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

// Left Jacobian of SO(3): exp(w + dw) ~= exp(J_l(w) dw) exp(w).
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 W = hat(w);
  if (theta < 1e-5) return Mat3::Identity() + 0.5 * W + (1.0 / 6.0) * W * W;
  const double t2 = theta * theta;
  return Mat3::Identity() + ((1 - std::cos(theta)) / t2) * W +
         ((theta - std::sin(theta)) / (t2 * theta)) * W * W;
}

inline double rotation_angle(const Mat3& R) {
  const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }
inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// Rigid transform. For camera poses this is world-from-camera.
struct PoseSE3 {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static PoseSE3 identity() { return {}; }

  static PoseSE3 from_matrix(const Mat4& m) {
    PoseSE3 p;
    p.R = m.topLeftCorner<3, 3>();
    p.t = m.topRightCorner<3, 1>();
    return p;
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R;
    m.topRightCorner<3, 1>() = t;
    return m;
  }

  PoseSE3 inverse() const {
    PoseSE3 p;
    p.R = R.transpose();
    p.t = -(p.R * t);
    return p;
  }

  PoseSE3 operator*(const PoseSE3& o) const {
    PoseSE3 p;
    p.R = R * o.R;
    p.t = R * o.t + t;
    return p;
  }

  Vec3 operator*(const Vec3& x) const { return R * x + t; }

  bool has_valid_rotation(double tol = 1e-6) const {
    return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(R.determinant() - 1.0) <= tol;
  }

  // Re-orthonormalizes R (used after float round trips).
  void orthonormalize() {
    Eigen::JacobiSVD<Mat3> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
    R = svd.matrixU() * svd.matrixV().transpose();
    if (R.determinant() < 0) {
      Mat3 U = svd.matrixU();
      U.col(2) *= -1;
      R = U * svd.matrixV().transpose();
    }
  }
};

// Applies a 6-vector increment (axis-angle w, translation v) on the left, in a
// world-aligned frame whose origin is `pivot`:
//   x -> exp(w) (x - pivot) + pivot + v
// With pivot at the camera center the rotation part turns the camera in place.
inline PoseSE3 apply_increment(const PoseSE3& base, const Vec6& delta, const Vec3& pivot) {
  const Mat3 dR = so3_exp(delta.head<3>());
  PoseSE3 out;
  out.R = dR * base.R;
  out.t = dR * (base.t - pivot) + pivot + delta.tail<3>();
  return out;
}

struct PoseError {
  double translation = 0;  // meters
  double rotation_deg = 0;
};

inline PoseError pose_error(const PoseSE3& a, const PoseSE3& b) {
  return {(a.t - b.t).norm(), rad2deg(rotation_angle(a.R.transpose() * b.R))};
}

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    require(fx > 0 && fy > 0, "intrinsics: focal lengths must be positive");
    require(width > 0 && height > 0, "intrinsics: image size must be positive");
  }

  bool in_bounds(int row, int col) const {
    return row >= 0 && col >= 0 && row < height && col < width;
  }

  // Camera-frame ray through pixel center (row, col), with z = 1.
  Vec3 unproject(double row, double col) const {
    return {(col - cx) / fx, (row - cy) / fy, 1.0};
  }

  Mat3 matrix() const {
    Mat3 K;
    K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return K;
  }
};

}  // namespace idf
