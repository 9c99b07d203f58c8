#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "step/errors.hpp"

namespace step {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Axis-angle tangent vector of SO(3), radians. Operations taking the log
// assume the angle is below pi.
using TangentVec = Eigen::Vector3d;

// Angle below which Rodrigues coefficients switch to their Taylor expansion.
inline constexpr double kSmallAngle = 1e-6;

// Tolerance for orthonormality / unit-determinant / skew-symmetry checks.
inline constexpr double kMatrixTol = 1e-9;

/// Skew-symmetric matrix of v, satisfying hat(v) * w = v x w.
inline Mat3 hat(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return s;
}

namespace detail {

inline Vec3 vee_unchecked(const Mat3& s) {
  return Vec3(s(2, 1), s(0, 2), s(1, 0));
}

inline Mat3 polar_project(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

}  // namespace detail

/// Inverse of hat. Throws NonSkewInput if the symmetric part exceeds tolerance.
inline Vec3 vee(const Mat3& s) {
  if ((s + s.transpose()).norm() > kMatrixTol) {
    throw NonSkewInput("vee: input is not skew-symmetric");
  }
  return detail::vee_unchecked(s);
}

/// 3x3 orthonormal rotation matrix with det +1.
///
/// Products re-orthonormalize via polar projection every 100 compositions so
/// long chains do not drift off the manifold.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation identity() { return Rotation(); }

  /// Validates orthonormality and determinant within 1e-9, then projects the
  /// input onto SO(3) exactly.
  static Rotation from_matrix(const Mat3& m) {
    if ((m.transpose() * m - Mat3::Identity()).norm() > kMatrixTol ||
        std::abs(m.determinant() - 1.0) > kMatrixTol) {
      throw Error("Rotation::from_matrix: input is not a rotation matrix");
    }
    return Rotation(detail::polar_project(m), 0);
  }

  const Mat3& matrix() const { return m_; }

  Rotation inverse() const { return Rotation(m_.transpose(), chain_); }

  Vec3 operator*(const Vec3& v) const { return m_ * v; }

  Rotation operator*(const Rotation& o) const {
    Rotation r(m_ * o.m_, std::max(chain_, o.chain_) + 1);
    if (r.chain_ >= 100) {
      r.m_ = detail::polar_project(r.m_);
      r.chain_ = 0;
    }
    return r;
  }

  bool is_valid(double tol = kMatrixTol) const {
    return (m_.transpose() * m_ - Mat3::Identity()).norm() <= tol &&
           std::abs(m_.determinant() - 1.0) <= tol;
  }

 private:
  Rotation(const Mat3& m, int chain) : m_(m), chain_(chain) {}

  Mat3 m_;
  int chain_ = 0;  // compositions since last re-orthonormalization

  friend Rotation exp_so3(const Vec3&);
};

/// Exponential map via the Rodrigues formula. Below kSmallAngle the sin/cos
/// coefficients use their second-order Taylor expansions.
inline Rotation exp_so3(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b;  // sin(t)/t and (1-cos(t))/t^2
  if (theta < kSmallAngle) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 s = hat(phi);
  return Rotation(Mat3(Mat3::Identity() + a * s + b * s * s), 0);
}

/// Logarithm map. Returns the zero vector at the identity (the axis is fixed
/// to zero there). Throws NearPiAngle when the angle is within 1e-6 of pi.
inline Vec3 log_so3(const Rotation& rot) {
  const Mat3& m = rot.matrix();
  const Vec3 w = detail::vee_unchecked((m - m.transpose()) * 0.5);  // sin(t)*axis
  const double s = w.norm();
  const double c = std::clamp((m.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::atan2(s, c);
  if (M_PI - theta < 1e-6) {
    throw NearPiAngle("log_so3: rotation angle within 1e-6 of pi");
  }
  if (theta < kSmallAngle) {
    return w * (1.0 + theta * theta / 6.0);
  }
  return w * (theta / s);
}

/// Right Jacobian of SO(3), Taylor fallback below kSmallAngle.
inline Mat3 right_jacobian(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 s = hat(phi);
  if (theta2 < kSmallAngle * kSmallAngle) {
    return Mat3::Identity() - 0.5 * s + (1.0 / 6.0) * s * s;
  }
  const double theta = std::sqrt(theta2);
  const double theta3 = theta2 * theta;
  return Mat3::Identity() - ((1.0 - std::cos(theta)) / theta2) * s +
         ((theta - std::sin(theta)) / theta3) * s * s;
}

/// Inverse of the right Jacobian.
inline Mat3 right_jacobian_inv(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 s = hat(phi);
  if (theta2 < kSmallAngle * kSmallAngle) {
    return Mat3::Identity() + 0.5 * s + (1.0 / 12.0) * s * s;
  }
  const double theta = std::sqrt(theta2);
  // 1/t^2 - cot(t/2)/(2t); the half-angle form stays stable toward pi.
  const double coeff =
      1.0 / theta2 -
      std::cos(0.5 * theta) / (2.0 * theta * std::sin(0.5 * theta));
  return Mat3::Identity() + 0.5 * s + coeff * s * s;
}

/// Retraction R * Exp(delta).
inline Rotation boxplus(const Rotation& r, const Vec3& delta) {
  return r * exp_so3(delta);
}

/// Lift Log(r2^-1 * r1). Throws NearPiAngle at the chart boundary.
inline Vec3 boxminus(const Rotation& r1, const Rotation& r2) {
  return log_so3(r2.inverse() * r1);
}

}  // namespace step
