#pragma once

#include <vector>

#include "step/so3.hpp"

namespace step {

struct FootState {
  Rotation Psi;           // foot orientation, world frame
  Vec3 s = Vec3::Zero();  // foot position, world frame
};

/// Per-keyframe state: body pose/velocity, per-leg foot pose, IMU biases.
struct KeyframeState {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Rotation R;
  Vec3 v = Vec3::Zero();
  std::vector<FootState> feet;
  Vec3 b_a = Vec3::Zero();
  Vec3 b_g = Vec3::Zero();
};

/// Column offsets of one keyframe's local tangent parameterization. Foot
/// states are excluded when no leg factor is active.
struct StateLayout {
  int num_legs = 4;
  bool with_feet = true;

  int dim() const { return 9 + (with_feet ? 6 * num_legs : 0) + 6; }
  int p() const { return 0; }
  int r() const { return 3; }
  int v() const { return 6; }
  int psi(int leg) const { return 9 + 6 * leg; }
  int s(int leg) const { return 9 + 6 * leg + 3; }
  int ba() const { return 9 + (with_feet ? 6 * num_legs : 0); }
  int bg() const { return ba() + 3; }
};

/// Retraction: addition on vectors, R * Exp(delta) on rotations.
inline KeyframeState boxplus_state(const KeyframeState& x, const Eigen::VectorXd& delta,
                                   const StateLayout& layout) {
  if (delta.size() != layout.dim()) {
    throw DimensionMismatch("boxplus_state: delta size does not match layout");
  }
  KeyframeState out = x;
  out.p += delta.segment<3>(layout.p());
  out.R = boxplus(x.R, delta.segment<3>(layout.r()));
  out.v += delta.segment<3>(layout.v());
  if (layout.with_feet) {
    for (int l = 0; l < layout.num_legs; ++l) {
      out.feet[l].Psi = boxplus(x.feet[l].Psi, delta.segment<3>(layout.psi(l)));
      out.feet[l].s += delta.segment<3>(layout.s(l));
    }
  }
  out.b_a += delta.segment<3>(layout.ba());
  out.b_g += delta.segment<3>(layout.bg());
  return out;
}

/// Lift: a (-) b, rotations via boxminus, vectors via subtraction.
inline Eigen::VectorXd boxminus_state(const KeyframeState& a, const KeyframeState& b,
                                      const StateLayout& layout) {
  Eigen::VectorXd delta(layout.dim());
  delta.segment<3>(layout.p()) = a.p - b.p;
  delta.segment<3>(layout.r()) = boxminus(a.R, b.R);
  delta.segment<3>(layout.v()) = a.v - b.v;
  if (layout.with_feet) {
    for (int l = 0; l < layout.num_legs; ++l) {
      delta.segment<3>(layout.psi(l)) = boxminus(a.feet[l].Psi, b.feet[l].Psi);
      delta.segment<3>(layout.s(l)) = a.feet[l].s - b.feet[l].s;
    }
  }
  delta.segment<3>(layout.ba()) = a.b_a - b.b_a;
  delta.segment<3>(layout.bg()) = a.b_g - b.b_g;
  return delta;
}

}  // namespace step
