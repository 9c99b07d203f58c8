#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "step/robot_model.hpp"

using namespace step;

namespace {

// Independent 4x4 homogeneous transform chain.
Eigen::Matrix4d transform(const Mat3& r, const Vec3& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = t;
  return m;
}

Eigen::Matrix4d chain_oracle(const LegModel& leg, const Vec3& alpha) {
  Eigen::Matrix4d m = transform(Mat3::Identity(), leg.link_offsets[0]);
  for (int k = 0; k < kJointsPerLeg; ++k) {
    m = m * transform(oracle::exp_series(leg.joint_axes[k] * alpha[k]), Vec3::Zero());
    m = m * transform(Mat3::Identity(), leg.link_offsets[k + 1]);
  }
  return m;
}

LegModel spec_leg() {
  LegModel leg;
  leg.link_offsets = {Vec3(0.2, 0.1, 0.0), Vec3(0.0, 0.08, 0.0),
                      Vec3(0.0, 0.0, -0.21), Vec3(0.0, 0.0, -0.19)};
  return leg;
}

JointAngles random_q(std::mt19937_64& rng) {
  JointAngles q;
  std::uniform_real_distribution<double> u(-1.2, 1.2);
  q.alpha = Vec3(u(rng), u(rng), u(rng));
  q.alpha_rate = oracle::random_vec3(rng, 2.0);
  return q;
}

}  // namespace

TEST_CASE("fk_position zero-angle chain is the offset sum") {
  const LegModel leg = spec_leg();
  CHECK(fk_position(leg, JointAngles{}).isApprox(Vec3(0.2, 0.18, -0.40), 1e-15));
}

TEST_CASE("fk_position knee bend matches the transform-chain oracle") {
  const LegModel leg = spec_leg();
  JointAngles q;
  q.alpha = Vec3(0.0, 0.0, -M_PI / 2);
  const Vec3 expected = chain_oracle(leg, q.alpha).topRightCorner<3, 1>();
  const Vec3 p = fk_position(leg, q);
  CHECK(p.isApprox(expected, 1e-12));
  CHECK(p.z() > fk_position(leg, JointAngles{}).z());  // foot lifted

  std::mt19937_64 rng(21);
  for (int i = 0; i < 200; ++i) {
    const JointAngles rq = random_q(rng);
    CHECK((fk_position(leg, rq) -
           Vec3(chain_oracle(leg, rq.alpha).topRightCorner<3, 1>()))
              .norm() < 1e-12);
  }
}

TEST_CASE("fk_rotation") {
  const LegModel leg = spec_leg();
  CHECK(fk_rotation(leg, JointAngles{}).matrix().isIdentity(1e-15));

  JointAngles q;
  q.alpha = Vec3(0.5, 0.0, 0.0);
  CHECK(fk_rotation(leg, q).matrix().isApprox(exp_so3(Vec3(0.5, 0, 0)).matrix(), 1e-13));

  std::mt19937_64 rng(22);
  for (int i = 0; i < 200; ++i) {
    const JointAngles rq = random_q(rng);
    const Rotation r = fk_rotation(leg, rq);
    CHECK(r.is_valid());
    CHECK((r.matrix() - Mat3(chain_oracle(leg, rq.alpha).topLeftCorner<3, 3>())).norm() < 1e-12);
  }
}

TEST_CASE("fk_position_jacobian matches central finite differences") {
  const LegModel leg = spec_leg();
  const double h = 1e-5;
  std::mt19937_64 rng(23);
  for (int i = 0; i < 1000; ++i) {
    const JointAngles q = random_q(rng);
    const Mat3 jac = fk_position_jacobian(leg, q);
    Mat3 fd;
    for (int k = 0; k < kJointsPerLeg; ++k) {
      JointAngles qp = q, qm = q;
      qp.alpha[k] += h;
      qm.alpha[k] -= h;
      fd.col(k) = (fk_position(leg, qp) - fk_position(leg, qm)) / (2.0 * h);
    }
    CHECK((jac - fd).norm() / std::max(1.0, fd.norm()) < 1e-6);
  }
}

TEST_CASE("straight-leg singular configuration is accepted") {
  const LegModel leg = spec_leg();
  JointAngles q;  // fully extended: knee axis column degenerates
  const Mat3 jac = fk_position_jacobian(leg, q);
  Eigen::JacobiSVD<Mat3> svd(jac);
  CHECK(svd.singularValues()(2) < 1e-9);
}

TEST_CASE("fk is deterministic") {
  const LegModel leg = spec_leg();
  std::mt19937_64 rng(24);
  const JointAngles q = random_q(rng);
  const Vec3 a = fk_position(leg, q);
  const Vec3 b = fk_position(leg, q);
  CHECK(a == b);
  CHECK(fk_rotation(leg, q).matrix() == fk_rotation(leg, q).matrix());
}

TEST_CASE("chain_angular_velocity_map matches d/dt of fk_rotation") {
  const LegModel leg = spec_leg();
  std::mt19937_64 rng(25);
  const double h = 1e-6;
  for (int i = 0; i < 100; ++i) {
    const JointAngles q = random_q(rng);
    const Vec3 w_chain = chain_angular_velocity_map(leg, q.alpha) * q.alpha_rate;
    JointAngles qp = q, qm = q;
    qp.alpha += h * q.alpha_rate;
    qm.alpha -= h * q.alpha_rate;
    const Mat3 rdot =
        (fk_rotation(leg, qp).matrix() - fk_rotation(leg, qm).matrix()) / (2.0 * h);
    // body-frame angular velocity: w^ = Rdot R^T
    const Vec3 w_fd = detail::vee_unchecked(rdot * fk_rotation(leg, q).matrix().transpose());
    CHECK((w_chain - w_fd).norm() < 1e-6 * std::max(1.0, w_fd.norm()));
  }
}

TEST_CASE("body_velocity_from_camera") {
  Extrinsics ident;
  CHECK(body_velocity_from_camera(ident, Vec3(1, 0, 0)).isApprox(Vec3(1, 0, 0), 1e-15));

  Extrinsics yaw90;
  yaw90.r_body_from_camera = exp_so3(Vec3(0, 0, M_PI / 2));
  CHECK(body_velocity_from_camera(yaw90, Vec3(1, 0, 0)).isApprox(Vec3(0, 1, 0), 1e-12));

  std::mt19937_64 rng(26);
  for (int i = 0; i < 50; ++i) {
    Extrinsics e;
    e.r_body_from_camera = oracle::random_rotation(rng);
    const Vec3 v = oracle::random_vec3(rng);
    CHECK(body_velocity_from_camera(e, v).isApprox(e.r_body_from_camera.matrix() * v, 1e-14));
  }
}

TEST_CASE("default_robot is well formed") {
  const RobotModel robot = default_robot();
  REQUIRE(robot.num_legs() == 4);
  for (const LegModel& leg : robot.legs) {
    CHECK_NOTHROW(leg.validate());
    const Vec3 foot = fk_position(leg, JointAngles{});
    CHECK(foot.z() == -0.40);
  }
  CHECK(robot.extrinsics.r_body_from_camera.is_valid());
}
