#pragma once

#include <cstdint>
#include <memory>

#include "step/measurements.hpp"
#include "step/preintegration.hpp"
#include "step/robot_model.hpp"
#include "step/state.hpp"

namespace step {

enum class FactorKind {
  Prior,
  Imu,
  Visual,
  ForwardKinematics,
  FootVelocity,
  NonslipContact,  // ablation baseline; mutually exclusive with FootVelocity
};

struct RobustLoss {
  enum Type { None, Huber } type = None;
  double delta = 1.0;
};

/// Huber rho applied to the squared whitened norm s = |r|^2.
inline double huber_rho(double s, double delta) {
  const double d2 = delta * delta;
  if (s <= d2) return s;
  return 2.0 * delta * std::sqrt(s) - d2;
}

/// IRLS scaling so that |w r|^2 = rho(|r|^2).
inline double robust_weight(const RobustLoss& loss, double squared_norm) {
  if (loss.type == RobustLoss::None || squared_norm <= loss.delta * loss.delta) {
    return 1.0;
  }
  return std::sqrt(huber_rho(squared_norm, loss.delta) / squared_norm);
}

/// Square-root information U with U^T U = cov^-1. Eigenvalues are floored to
/// keep degenerate covariances usable.
inline Eigen::MatrixXd sqrt_information(const Eigen::MatrixXd& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const double floor_value =
      std::max(1e-16, 1e-12 * std::max(1.0, eig.eigenvalues().maxCoeff()));
  const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(floor_value);
  return lam.cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
}

// ---------------------------------------------------------------------------
// Prior factor

/// Whitened boxminus difference from the prior mean.
inline Eigen::VectorXd prior_residual(const KeyframeState& state,
                                      const KeyframeState& prior_mean,
                                      const Eigen::MatrixXd& prior_sqrt_info,
                                      const StateLayout& layout) {
  if (prior_sqrt_info.rows() != layout.dim() || prior_sqrt_info.cols() != layout.dim()) {
    throw DimensionMismatch("prior_residual: sqrt_info does not match layout");
  }
  return prior_sqrt_info * boxminus_state(state, prior_mean, layout);
}

/// Jacobian of the whitened prior residual w.r.t. the state tangent.
inline Eigen::MatrixXd prior_jacobian(const KeyframeState& state,
                                      const KeyframeState& prior_mean,
                                      const Eigen::MatrixXd& prior_sqrt_info,
                                      const StateLayout& layout) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Identity(layout.dim(), layout.dim());
  j.block<3, 3>(layout.r(), layout.r()) =
      right_jacobian_inv(boxminus(state.R, prior_mean.R));
  if (layout.with_feet) {
    for (int l = 0; l < layout.num_legs; ++l) {
      j.block<3, 3>(layout.psi(l), layout.psi(l)) =
          right_jacobian_inv(boxminus(state.feet[l].Psi, prior_mean.feet[l].Psi));
    }
  }
  return prior_sqrt_info * j;
}

// ---------------------------------------------------------------------------
// IMU factor (raw residual; order p, v, R, ba, bg)

inline Eigen::Matrix<double, 15, 1> imu_residual(const KeyframeState& xi,
                                                 const KeyframeState& xj,
                                                 const ImuPreintegral& pre,
                                                 const Vec3& gravity) {
  const double dt = pre.dt_total;
  const Mat3 ri_t = xi.R.matrix().transpose();
  Eigen::Matrix<double, 15, 1> r;
  r.segment<3>(0) = ri_t * (xj.p - xi.p - xi.v * dt - 0.5 * gravity * dt * dt) - pre.dp;
  r.segment<3>(3) = ri_t * (xj.v - xi.v - gravity * dt) - pre.dv;
  r.segment<3>(6) = log_so3(pre.dR.inverse() * xi.R.inverse() * xj.R);
  r.segment<3>(9) = xj.b_a - xi.b_a;
  r.segment<3>(12) = xj.b_g - xi.b_g;
  return r;
}

/// Raw Jacobians of imu_residual w.r.t. the tangents of xi and xj.
inline void imu_jacobians(const KeyframeState& xi, const KeyframeState& xj,
                          const ImuPreintegral& pre, const Vec3& gravity,
                          const StateLayout& layout, Eigen::MatrixXd& ji,
                          Eigen::MatrixXd& jj) {
  const double dt = pre.dt_total;
  const Mat3 ri_t = xi.R.matrix().transpose();
  const Vec3 r_rot = log_so3(pre.dR.inverse() * xi.R.inverse() * xj.R);
  const Mat3 jr_inv = right_jacobian_inv(r_rot);

  ji = Eigen::MatrixXd::Zero(15, layout.dim());
  jj = Eigen::MatrixXd::Zero(15, layout.dim());

  ji.block<3, 3>(0, layout.p()) = -ri_t;
  ji.block<3, 3>(0, layout.r()) =
      hat(ri_t * (xj.p - xi.p - xi.v * dt - 0.5 * gravity * dt * dt));
  ji.block<3, 3>(0, layout.v()) = -ri_t * dt;
  jj.block<3, 3>(0, layout.p()) = ri_t;

  ji.block<3, 3>(3, layout.r()) = hat(ri_t * (xj.v - xi.v - gravity * dt));
  ji.block<3, 3>(3, layout.v()) = -ri_t;
  jj.block<3, 3>(3, layout.v()) = ri_t;

  ji.block<3, 3>(6, layout.r()) = -jr_inv * (xj.R.inverse() * xi.R).matrix();
  jj.block<3, 3>(6, layout.r()) = jr_inv;

  ji.block<3, 3>(9, layout.ba()) = -Mat3::Identity();
  jj.block<3, 3>(9, layout.ba()) = Mat3::Identity();
  ji.block<3, 3>(12, layout.bg()) = -Mat3::Identity();
  jj.block<3, 3>(12, layout.bg()) = Mat3::Identity();
}

/// 15x15 covariance of the IMU residual: preintegral covariance permuted to
/// residual order plus the bias random-walk blocks.
inline Eigen::Matrix<double, 15, 15> imu_residual_covariance(const ImuPreintegral& pre,
                                                             const Vec3& bias_accel_rw,
                                                             const Vec3& bias_gyro_rw) {
  // preintegral order (phi, v, p) -> residual order (p, v, phi)
  Eigen::Matrix<double, 15, 15> cov = Eigen::Matrix<double, 15, 15>::Zero();
  const int map[3] = {6, 3, 0};  // residual slot -> preintegral slot
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      cov.block<3, 3>(3 * a, 3 * b) = pre.cov.block<3, 3>(map[a], map[b]);
    }
  }
  const double dt = std::max(pre.dt_total, 1e-9);
  cov.block<3, 3>(9, 9) = (bias_accel_rw * dt).asDiagonal();
  cov.block<3, 3>(12, 12) = (bias_gyro_rw * dt).asDiagonal();
  return cov;
}

// ---------------------------------------------------------------------------
// Visual factor (inverse-depth landmark in its first-observation frame)

/// World-from-camera pose of a keyframe.
inline std::pair<Rotation, Vec3> camera_pose(const KeyframeState& x, const Extrinsics& ext) {
  return {x.R * ext.r_body_from_camera, x.p + x.R * ext.p_body_from_camera};
}

inline Vec3 landmark_world_point(const KeyframeState& anchor, const Extrinsics& ext,
                                 const Vec2& bearing, double inv_depth) {
  const auto [r_wc, t_wc] = camera_pose(anchor, ext);
  const Vec3 h(bearing.x(), bearing.y(), 1.0);
  return r_wc * (h / inv_depth) + t_wc;
}

/// Reprojection residual obs - pi(X) in normalized image coordinates.
/// Throws BehindCamera when the projected depth drops below 1e-3 m.
inline Vec2 visual_residual(const KeyframeState& xi, const KeyframeState& anchor,
                            const Vec2& anchor_bearing, double inv_depth,
                            const Vec2& observation, const Extrinsics& ext) {
  const Vec3 x_w = landmark_world_point(anchor, ext, anchor_bearing, inv_depth);
  const auto [r_wc, t_wc] = camera_pose(xi, ext);
  const Vec3 x_c = r_wc.inverse() * (x_w - t_wc);
  if (x_c.z() <= 1e-3) {
    throw BehindCamera("visual_residual: projected depth <= 1e-3 m");
  }
  return observation - Vec2(x_c.x() / x_c.z(), x_c.y() / x_c.z());
}

/// Raw Jacobians w.r.t. the observing keyframe, the anchor keyframe, and the
/// inverse depth.
inline void visual_jacobians(const KeyframeState& xi, const KeyframeState& anchor,
                             const Vec2& anchor_bearing, double inv_depth,
                             const Extrinsics& ext, const StateLayout& layout,
                             Eigen::MatrixXd& ji, Eigen::MatrixXd& ja,
                             Eigen::Vector2d& jlambda) {
  const Mat3 r_bc = ext.r_body_from_camera.matrix();
  const Vec3 h(anchor_bearing.x(), anchor_bearing.y(), 1.0);
  const Vec3 x_w = landmark_world_point(anchor, ext, anchor_bearing, inv_depth);
  const auto [r_wc_i, t_wc_i] = camera_pose(xi, ext);
  const Vec3 x_c = r_wc_i.inverse() * (x_w - t_wc_i);

  Eigen::Matrix<double, 2, 3> dpi;
  const double z_inv = 1.0 / x_c.z();
  dpi << z_inv, 0.0, -x_c.x() * z_inv * z_inv,
         0.0, z_inv, -x_c.y() * z_inv * z_inv;

  // observing frame
  const Eigen::Matrix<double, 2, 3> dr_dxc = -dpi;  // r = obs - pi(x_c)
  ji = Eigen::MatrixXd::Zero(2, layout.dim());
  ji.block<2, 3>(0, layout.p()) = dr_dxc * (-r_wc_i.matrix().transpose());
  ji.block<2, 3>(0, layout.r()) =
      dr_dxc * (r_bc.transpose() * hat(xi.R.inverse() * (x_w - xi.p)));

  // anchor frame
  const Mat3 dxc_dxw = r_wc_i.matrix().transpose();
  const Vec3 z_cam = r_bc * (h / inv_depth) + ext.p_body_from_camera;
  ja = Eigen::MatrixXd::Zero(2, layout.dim());
  ja.block<2, 3>(0, layout.p()) = dr_dxc * dxc_dxw;
  ja.block<2, 3>(0, layout.r()) = dr_dxc * dxc_dxw * (-anchor.R.matrix() * hat(z_cam));

  // inverse depth
  const auto [r_wc_a, t_wc_a] = camera_pose(anchor, ext);
  const Vec3 dxw_dlambda = r_wc_a * h * (-1.0 / (inv_depth * inv_depth));
  jlambda = dr_dxc * dxc_dxw * dxw_dlambda;
}

// ---------------------------------------------------------------------------
// Forward kinematics factor (order: rotation, position)

inline Eigen::Matrix<double, 6, 1> fk_residual(const KeyframeState& xi, const LegModel& leg,
                                               int leg_index, const JointAngles& q) {
  const Rotation gamma_r = fk_rotation(leg, q);
  const Vec3 gamma_p = fk_position(leg, q);
  const FootState& foot = xi.feet[leg_index];
  Eigen::Matrix<double, 6, 1> r;
  r.head<3>() = log_so3(gamma_r.inverse() * xi.R.inverse() * foot.Psi);
  r.tail<3>() = xi.R.inverse() * (foot.s - xi.p) - gamma_p;
  return r;
}

inline Eigen::MatrixXd fk_jacobian(const KeyframeState& xi, const LegModel& leg,
                                   int leg_index, const JointAngles& q,
                                   const StateLayout& layout) {
  const Rotation gamma_r = fk_rotation(leg, q);
  const FootState& foot = xi.feet[leg_index];
  const Vec3 r_rot = log_so3(gamma_r.inverse() * xi.R.inverse() * foot.Psi);
  const Mat3 jr_inv = right_jacobian_inv(r_rot);

  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(6, layout.dim());
  j.block<3, 3>(0, layout.psi(leg_index)) = jr_inv;
  j.block<3, 3>(0, layout.r()) = -jr_inv * (foot.Psi.inverse() * xi.R).matrix();
  j.block<3, 3>(3, layout.s(leg_index)) = xi.R.matrix().transpose();
  j.block<3, 3>(3, layout.p()) = -xi.R.matrix().transpose();
  j.block<3, 3>(3, layout.r()) = hat(xi.R.inverse() * (foot.s - xi.p));
  return j;
}

// ---------------------------------------------------------------------------
// Preintegrated foot velocity factor (order: rotation, position)

inline Eigen::Matrix<double, 6, 1> foot_velocity_residual(const KeyframeState& xi,
                                                          const KeyframeState& xj,
                                                          int leg_index,
                                                          const FootPreintegral& pre) {
  const FootState& fi = xi.feet[leg_index];
  const FootState& fj = xj.feet[leg_index];
  Eigen::Matrix<double, 6, 1> r;
  r.head<3>() = log_so3(pre.dPsi.inverse() * fi.Psi.inverse() * fj.Psi);
  r.tail<3>() = fi.Psi.inverse() * (fj.s - fi.s) - pre.ds;
  return r;
}

inline void foot_velocity_jacobians(const KeyframeState& xi, const KeyframeState& xj,
                                    int leg_index, const FootPreintegral& pre,
                                    const StateLayout& layout, Eigen::MatrixXd& ji,
                                    Eigen::MatrixXd& jj) {
  const FootState& fi = xi.feet[leg_index];
  const FootState& fj = xj.feet[leg_index];
  const Vec3 r_rot = log_so3(pre.dPsi.inverse() * fi.Psi.inverse() * fj.Psi);
  const Mat3 jr_inv = right_jacobian_inv(r_rot);

  ji = Eigen::MatrixXd::Zero(6, layout.dim());
  jj = Eigen::MatrixXd::Zero(6, layout.dim());
  ji.block<3, 3>(0, layout.psi(leg_index)) = -jr_inv * (fj.Psi.inverse() * fi.Psi).matrix();
  jj.block<3, 3>(0, layout.psi(leg_index)) = jr_inv;
  ji.block<3, 3>(3, layout.psi(leg_index)) = hat(fi.Psi.inverse() * (fj.s - fi.s));
  ji.block<3, 3>(3, layout.s(leg_index)) = -fi.Psi.matrix().transpose();
  jj.block<3, 3>(3, layout.s(leg_index)) = fi.Psi.matrix().transpose();
}

// ---------------------------------------------------------------------------
// Non-slip contact factor (ablation): zero expected foot displacement while
// both keyframes are in contact, slip absorbed as Gaussian noise.

inline Vec3 nonslip_contact_residual(const KeyframeState& xi, const KeyframeState& xj,
                                     int leg_index) {
  return xi.feet[leg_index].Psi.inverse() * (xj.feet[leg_index].s - xi.feet[leg_index].s);
}

inline void nonslip_contact_jacobians(const KeyframeState& xi, const KeyframeState& xj,
                                      int leg_index, const StateLayout& layout,
                                      Eigen::MatrixXd& ji, Eigen::MatrixXd& jj) {
  const Mat3 psi_t = xi.feet[leg_index].Psi.matrix().transpose();
  ji = Eigen::MatrixXd::Zero(3, layout.dim());
  jj = Eigen::MatrixXd::Zero(3, layout.dim());
  ji.block<3, 3>(0, layout.psi(leg_index)) =
      hat(psi_t * (xj.feet[leg_index].s - xi.feet[leg_index].s));
  ji.block<3, 3>(0, layout.s(leg_index)) = -psi_t;
  jj.block<3, 3>(0, layout.s(leg_index)) = psi_t;
}

// ---------------------------------------------------------------------------

/// One residual block of the sliding-window problem. Keyframes are referenced
/// by their stable ids; payload fields beyond the kind's needs stay empty.
struct ResidualBlock {
  FactorKind kind = FactorKind::Prior;
  std::int64_t kf_i = -1;
  std::int64_t kf_j = -1;
  int leg = -1;
  std::int64_t landmark_id = -1;
  int dim = 0;
  Eigen::MatrixXd sqrt_info;
  RobustLoss robust;

  std::shared_ptr<const ImuPreintegral> imu;
  std::shared_ptr<const FootPreintegral> foot;
  JointAngles fk_meas;
  Vec2 pixel = Vec2::Zero();
  std::shared_ptr<const KeyframeState> prior_mean;
};

}  // namespace step
