#pragma once

#include <cstdint>
#include <vector>

#include "step/robot_model.hpp"
#include "step/so3.hpp"

namespace step {

struct ImuSample {
  double t = 0.0;   // s
  Vec3 accel = Vec3::Zero();  // m/s^2, body frame
  Vec3 gyro = Vec3::Zero();   // rad/s, body frame
};

struct JointSample {
  double t = 0.0;
  std::vector<JointAngles> legs;  // one entry per leg
};

struct BodyVelocitySample {
  double t = 0.0;
  Vec3 v_cam = Vec3::Zero();  // m/s, camera frame
  bool valid = true;
};

struct FeatureObservation {
  double t = 0.0;
  std::int64_t feature_id = -1;
  Vec2 pixel = Vec2::Zero();  // normalized image coordinates, left camera
};

/// Diagonal sensor covariances in SI units. Rate-sensor entries (gyro, accel,
/// foot_ang, foot_lin) are continuous-time densities; the discrete per-sample
/// covariance is cov / dt. The foot terms are the combined single-noise model
/// covering gyro noise, encoder noise, and kinematic model error.
struct NoiseConfig {
  Vec3 cov_gyro = Vec3::Constant(2.5e-5);        // (rad/s)^2 / Hz
  Vec3 cov_accel = Vec3::Constant(4.0e-4);       // (m/s^2)^2 / Hz
  Vec3 cov_joint_angle = Vec3::Constant(4.0e-6); // rad^2 per sample
  Vec3 cov_joint_rate = Vec3::Constant(4.0e-4);  // (rad/s)^2 per sample
  Vec3 cov_foot_ang = Vec3::Constant(1.0e-4);    // (rad/s)^2 / Hz
  Vec3 cov_foot_lin = Vec3::Constant(4.0e-4);    // (m/s)^2 / Hz
  Vec3 cov_cam_vel = Vec3::Constant(4.0e-4);     // (m/s)^2 per sample
  double cov_pixel = 4.0e-6;                     // normalized units^2 per obs
  // Forward-kinematics factor covariances (weak foot-orientation
  // observability for a point foot; kept configurable).
  Vec3 cov_fk_rot = Vec3::Constant(1.0e-4);      // rad^2
  Vec3 cov_fk_pos = Vec3::Constant(2.5e-5);      // m^2
  double swing_cov_scale = 1.0;   // inflation of cov_foot_lin during swing
  double dropout_cov_scale = 10.0;  // inflation after a stale camera velocity

  void validate() const {
    auto psd = [](const Vec3& v) { return (v.array() >= 0.0).all(); };
    if (!psd(cov_gyro) || !psd(cov_accel) || !psd(cov_joint_angle) ||
        !psd(cov_joint_rate) || !psd(cov_foot_ang) || !psd(cov_foot_lin) ||
        !psd(cov_cam_vel) || cov_pixel < 0.0 || !psd(cov_fk_rot) ||
        !psd(cov_fk_pos)) {
      throw Error("NoiseConfig: covariances must be nonnegative");
    }
  }
};

/// Foot angular velocity in the foot frame. Combines the bias-corrected body
/// rate conjugated into the foot frame with the revolute-chain rate sum.
inline Vec3 foot_angular_velocity(const LegModel& leg, const JointAngles& q,
                                  const Vec3& gyro, const Vec3& gyro_bias) {
  const Rotation chain = fk_rotation(leg, q);
  const Vec3 w_joints = chain_angular_velocity_map(leg, q.alpha) * q.alpha_rate;
  return chain.inverse() * (gyro - gyro_bias + w_joints);
}

/// Foot linear velocity in the foot frame. v_body is the body-frame velocity
/// measurement standing in for R^T v.
inline Vec3 foot_linear_velocity(const LegModel& leg, const JointAngles& q,
                                 const Vec3& gyro, const Vec3& gyro_bias,
                                 const Vec3& v_body) {
  const Rotation chain = fk_rotation(leg, q);
  const Vec3 lever = (gyro - gyro_bias).cross(fk_position(leg, q));
  const Vec3 joint_term = fk_position_jacobian(leg, q) * q.alpha_rate;
  return chain.inverse() * (lever + joint_term + v_body);
}

}  // namespace step
