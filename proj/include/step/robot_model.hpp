#pragma once

#include <array>
#include <vector>

#include "step/so3.hpp"

namespace step {

// Joints per leg; the serial chain is hip-abduction, hip-flexion, knee.
inline constexpr int kJointsPerLeg = 3;

/// 3-DOF revolute serial chain with a point foot. Offsets are expressed in
/// the body frame at zero joint angles: hip mount, hip->thigh, thigh->shank,
/// shank->foot.
struct LegModel {
  int leg_id = 0;
  std::array<Vec3, kJointsPerLeg> joint_axes{Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitY()};
  std::array<Vec3, kJointsPerLeg + 1> link_offsets{Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  Vec3 joint_lower{-1.0, -2.2, -2.8};
  Vec3 joint_upper{1.0, 2.2, -0.1};

  void validate() const {
    for (const Vec3& a : joint_axes) {
      if (std::abs(a.norm() - 1.0) > kMatrixTol) {
        throw Error("LegModel: joint axis must be unit norm");
      }
    }
    if (((joint_upper - joint_lower).array() <= 0.0).any()) {
      throw Error("LegModel: joint_upper must exceed joint_lower");
    }
  }
};

struct JointAngles {
  Vec3 alpha = Vec3::Zero();       // rad
  Vec3 alpha_rate = Vec3::Zero();  // rad/s
};

/// Camera-to-body extrinsic calibration.
struct Extrinsics {
  Rotation r_body_from_camera;
  Vec3 p_body_from_camera = Vec3::Zero();
};

/// Foot position in the body frame:
/// p = o0 + Exp(a1 q1) (o1 + Exp(a2 q2) (o2 + Exp(a3 q3) o3)).
inline Vec3 fk_position(const LegModel& leg, const JointAngles& q) {
  Vec3 p = leg.link_offsets[kJointsPerLeg];
  for (int k = kJointsPerLeg - 1; k >= 0; --k) {
    p = leg.link_offsets[k] + exp_so3(leg.joint_axes[k] * q.alpha[k]) * p;
  }
  return p;
}

/// Foot orientation in the body frame: product of the joint rotations.
inline Rotation fk_rotation(const LegModel& leg, const JointAngles& q) {
  Rotation r;
  for (int k = 0; k < kJointsPerLeg; ++k) {
    r = r * exp_so3(leg.joint_axes[k] * q.alpha[k]);
  }
  return r;
}

/// Columns are d(foot position)/d(alpha_k): axis_world x (foot - joint origin).
/// Rank loss at a straight-leg configuration is accepted.
inline Mat3 fk_position_jacobian(const LegModel& leg, const JointAngles& q) {
  const Vec3 foot = fk_position(leg, q);
  Mat3 jac;
  Rotation chain;
  Vec3 origin = leg.link_offsets[0];
  for (int k = 0; k < kJointsPerLeg; ++k) {
    const Vec3 axis_world = chain * leg.joint_axes[k];
    jac.col(k) = axis_world.cross(foot - origin);
    chain = chain * exp_so3(leg.joint_axes[k] * q.alpha[k]);
    origin += chain * leg.link_offsets[k + 1];
  }
  return jac;
}

/// Columns map joint rates to the chain angular velocity in the body frame:
/// w_chain = W(alpha) * alpha_rate.
inline Mat3 chain_angular_velocity_map(const LegModel& leg, const Vec3& alpha) {
  Mat3 w;
  Rotation chain;
  for (int k = 0; k < kJointsPerLeg; ++k) {
    w.col(k) = chain * leg.joint_axes[k];
    chain = chain * exp_so3(leg.joint_axes[k] * alpha[k]);
  }
  return w;
}

/// Body-frame velocity from a camera-frame velocity measurement.
inline Vec3 body_velocity_from_camera(const Extrinsics& ext, const Vec3& v_cam) {
  return ext.r_body_from_camera * v_cam;
}

struct RobotModel {
  std::vector<LegModel> legs;
  Extrinsics extrinsics;

  int num_legs() const { return static_cast<int>(legs.size()); }
};

/// Quadruped at Mini-Cheetah scale: legs FL, FR, RL, RR with a forward-looking
/// camera. All numbers are configurable through the run config.
inline RobotModel default_robot() {
  RobotModel robot;
  const double hip_x = 0.19, hip_y = 0.11, thigh_y = 0.08;
  const double thigh = 0.21, shank = 0.19;
  const std::array<double, 4> sx{1.0, 1.0, -1.0, -1.0};
  const std::array<double, 4> sy{1.0, -1.0, 1.0, -1.0};
  for (int l = 0; l < 4; ++l) {
    LegModel leg;
    leg.leg_id = l;
    leg.link_offsets = {Vec3(sx[l] * hip_x, sy[l] * hip_y, 0.0),
                        Vec3(0.0, sy[l] * thigh_y, 0.0),
                        Vec3(0.0, 0.0, -thigh),
                        Vec3(0.0, 0.0, -shank)};
    leg.validate();
    robot.legs.push_back(leg);
  }
  // Camera: z forward, x right, y down; body: x forward, y left, z up.
  Mat3 r_bc;
  r_bc << 0, 0, 1,
         -1, 0, 0,
          0, -1, 0;
  robot.extrinsics.r_body_from_camera = Rotation::from_matrix(r_bc);
  robot.extrinsics.p_body_from_camera = Vec3(0.2, 0.0, 0.0);
  return robot;
}

}  // namespace step
