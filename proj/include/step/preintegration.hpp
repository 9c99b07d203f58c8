#pragma once

#include <vector>

#include "step/measurements.hpp"
#include "step/so3.hpp"

namespace step {

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat9 = Eigen::Matrix<double, 9, 9>;

namespace detail {

template <typename M>
inline void symmetrize(M& cov) {
  cov = 0.5 * (cov + cov.transpose()).eval();
}

}  // namespace detail

/// On-manifold IMU preintegral between two keyframes. Covariance is ordered
/// (dphi, dv, dp). The bias linearization point is fixed at window creation;
/// no first-order bias correction is carried, re-preintegration via
/// repropagate() covers bias updates instead.
struct ImuPreintegral {
  double dt_total = 0.0;
  Rotation dR;
  Vec3 dv = Vec3::Zero();
  Vec3 dp = Vec3::Zero();
  Mat9 cov = Mat9::Zero();
  Vec3 bias_ref_gyro = Vec3::Zero();
  Vec3 bias_ref_accel = Vec3::Zero();

  // raw samples kept for re-preintegration at a moved bias
  std::vector<double> dt_buf;
  std::vector<Vec3> gyro_buf;
  std::vector<Vec3> accel_buf;
};

/// One integration step. Position and velocity use the pre-update orientation
/// (k-index), then the rotation advances.
inline ImuPreintegral imu_integrate_step(ImuPreintegral acc, const ImuSample& sample,
                                         double dt, const NoiseConfig& noise) {
  if (dt <= 0.0) {
    throw NonPositiveDt("imu_integrate_step: dt must be positive");
  }
  const Vec3 w = sample.gyro - acc.bias_ref_gyro;
  const Vec3 a = sample.accel - acc.bias_ref_accel;
  const Mat3 dR_old = acc.dR.matrix();
  const Rotation incr = exp_so3(w * dt);

  Mat9 A = Mat9::Identity();
  A.block<3, 3>(0, 0) = incr.matrix().transpose();
  A.block<3, 3>(3, 0) = -dR_old * hat(a) * dt;
  A.block<3, 3>(6, 0) = -0.5 * dR_old * hat(a) * dt * dt;
  A.block<3, 3>(6, 3) = Mat3::Identity() * dt;

  Eigen::Matrix<double, 9, 6> B = Eigen::Matrix<double, 9, 6>::Zero();
  B.block<3, 3>(0, 0) = right_jacobian(w * dt) * dt;
  B.block<3, 3>(3, 3) = dR_old * dt;
  B.block<3, 3>(6, 3) = 0.5 * dR_old * dt * dt;

  Mat6 noise_d = Mat6::Zero();
  noise_d.diagonal().head<3>() = noise.cov_gyro / dt;
  noise_d.diagonal().tail<3>() = noise.cov_accel / dt;

  acc.cov = A * acc.cov * A.transpose() + B * noise_d * B.transpose();
  detail::symmetrize(acc.cov);

  acc.dp += acc.dv * dt + 0.5 * dR_old * a * dt * dt;
  acc.dv += dR_old * a * dt;
  acc.dR = acc.dR * incr;
  acc.dt_total += dt;

  acc.dt_buf.push_back(dt);
  acc.gyro_buf.push_back(sample.gyro);
  acc.accel_buf.push_back(sample.accel);
  return acc;
}

inline ImuPreintegral reset(ImuPreintegral pre) {
  pre.dt_total = 0.0;
  pre.dR = Rotation::identity();
  pre.dv.setZero();
  pre.dp.setZero();
  pre.cov.setZero();
  pre.dt_buf.clear();
  pre.gyro_buf.clear();
  pre.accel_buf.clear();
  return pre;
}

/// Replays the buffered samples at a new bias linearization point.
inline ImuPreintegral repropagate(const ImuPreintegral& pre, const Vec3& bias_gyro,
                                  const Vec3& bias_accel, const NoiseConfig& noise) {
  ImuPreintegral out;
  out.bias_ref_gyro = bias_gyro;
  out.bias_ref_accel = bias_accel;
  for (std::size_t k = 0; k < pre.dt_buf.size(); ++k) {
    ImuSample s;
    s.gyro = pre.gyro_buf[k];
    s.accel = pre.accel_buf[k];
    out = imu_integrate_step(std::move(out), s, pre.dt_buf[k], noise);
  }
  return out;
}

/// Preintegrated foot orientation and position with 6x6 covariance ordered
/// (dpsi, ds). Starts at identity / zero covariance; no bias terms inside
/// the preintegral.
struct FootPreintegral {
  int leg_id = 0;
  double dt_total = 0.0;
  Rotation dPsi;
  Vec3 ds = Vec3::Zero();
  Mat6 cov = Mat6::Zero();
  Vec3 bias_ref_gyro = Vec3::Zero();
};

/// Covariance recursion cov <- A cov A^T + B cov_n B^T with
///   A = [[I, 0], [-dPsi (nu)^ dt, I]],
///   B = [[J_r(omega dt) dt, 0], [0, dPsi dt]],
/// evaluated at the pre-update dPsi. Discrete covariances are cov/dt;
/// cov_scale inflates the linear-velocity noise (swing / camera dropout).
inline Mat6 foot_propagate_covariance(const FootPreintegral& acc, const Vec3& omega_f,
                                      const Vec3& nu_f, double dt,
                                      const NoiseConfig& noise, double cov_scale = 1.0) {
  const Mat3 dpsi = acc.dPsi.matrix();
  Mat6 A = Mat6::Identity();
  A.block<3, 3>(3, 0) = -dpsi * hat(nu_f) * dt;

  Mat6 B = Mat6::Zero();
  B.block<3, 3>(0, 0) = right_jacobian(omega_f * dt) * dt;
  B.block<3, 3>(3, 3) = dpsi * dt;

  Mat6 noise_d = Mat6::Zero();
  noise_d.diagonal().head<3>() = noise.cov_foot_ang / dt;
  noise_d.diagonal().tail<3>() = cov_scale * noise.cov_foot_lin / dt;

  Mat6 cov = A * acc.cov * A.transpose() + B * noise_d * B.transpose();
  detail::symmetrize(cov);
  return cov;
}

/// One preintegration step. The position accumulates with the pre-update
/// rotation (the k-index of the sum), then the rotation advances.
inline FootPreintegral foot_integrate_step(FootPreintegral acc, const Vec3& omega_f,
                                           const Vec3& nu_f, double dt,
                                           const NoiseConfig& noise,
                                           double cov_scale = 1.0) {
  if (dt <= 0.0) {
    throw NonPositiveDt("foot_integrate_step: dt must be positive");
  }
  acc.cov = foot_propagate_covariance(acc, omega_f, nu_f, dt, noise, cov_scale);
  acc.ds += acc.dPsi * nu_f * dt;
  acc.dPsi = acc.dPsi * exp_so3(omega_f * dt);
  acc.dt_total += dt;
  return acc;
}

inline FootPreintegral reset(FootPreintegral pre) {
  pre.dt_total = 0.0;
  pre.dPsi = Rotation::identity();
  pre.ds.setZero();
  pre.cov.setZero();
  return pre;
}

/// Raw per-sample inputs of one foot preintegration interval, kept so the
/// preintegral can be rebuilt when the gyro bias linearization point moves.
struct FootRawStep {
  double dt = 0.0;
  Vec3 gyro = Vec3::Zero();
  JointAngles q;
  Vec3 v_body = Vec3::Zero();  // held body-frame velocity measurement
  double cov_scale = 1.0;
};

inline FootPreintegral build_foot_preintegral(const LegModel& leg, int leg_id,
                                              const std::vector<FootRawStep>& steps,
                                              const Vec3& bias_gyro,
                                              const NoiseConfig& noise) {
  FootPreintegral pre;
  pre.leg_id = leg_id;
  pre.bias_ref_gyro = bias_gyro;
  for (const FootRawStep& s : steps) {
    const Vec3 omega = foot_angular_velocity(leg, s.q, s.gyro, bias_gyro);
    const Vec3 nu = foot_linear_velocity(leg, s.q, s.gyro, bias_gyro, s.v_body);
    pre = foot_integrate_step(std::move(pre), omega, nu, s.dt, noise, s.cov_scale);
  }
  return pre;
}

}  // namespace step
