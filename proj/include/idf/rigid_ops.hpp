#pragma once

// Differentiable application of a pose increment to point and direction rows.

#include "idf/autodiff.hpp"
#include "idf/geometry.hpp"

namespace idf::ad {

// rows x_i = exp(w) y_i (+ v when `translate`), with delta = [w | v] as 1 x 6.
template <class S>
Tensor<S> rigid_apply(const Tensor<S>& points, const Tensor<S>& delta, bool translate) {
  require(points.cols() == 3, "rigid_apply: points must be N x 3");
  require(delta.rows() == 1 && delta.cols() == 6, "rigid_apply: delta must be 1 x 6");
  const Vec3 w(delta.value()(0, 0), delta.value()(0, 1), delta.value()(0, 2));
  const Mat3 R = so3_exp(w);
  const Eigen::Matrix<S, 3, 3, Eigen::RowMajor> Rs = R.cast<S>();
  Mat<S> out = points.value() * Rs.transpose();
  Mat<S> rotated = out;
  if (translate) {
    for (int k = 0; k < 3; ++k) out.col(k).array() += delta.value()(0, 3 + k);
  }
  auto* pn = points.raw();
  auto* dn = delta.raw();
  const Mat3 J = so3_left_jacobian(w);
  return make_op<S>(std::move(out), {points, delta},
                    [pn, dn, Rs, J, translate, rotated = std::move(rotated)](const Mat<S>& g) {
                      if (pn->requires_grad) pn->accumulate(g * Rs);
                      if (dn->requires_grad) {
                        Vec3 torque = Vec3::Zero();
                        for (Index i = 0; i < g.rows(); ++i) {
                          Vec3 a(rotated(i, 0), rotated(i, 1), rotated(i, 2));
                          Vec3 gi(g(i, 0), g(i, 1), g(i, 2));
                          torque += a.cross(gi);
                        }
                        const Vec3 gw = J.transpose() * torque;
                        Mat<S> gd = Mat<S>::Zero(1, 6);
                        for (int k = 0; k < 3; ++k) gd(0, k) = static_cast<S>(gw(k));
                        if (translate) {
                          auto cs = g.colwise().sum();
                          for (int k = 0; k < 3; ++k) gd(0, 3 + k) = cs(k);
                        }
                        dn->accumulate(gd);
                      }
                    });
}

}  // namespace idf::ad
