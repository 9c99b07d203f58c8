#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "step/factors.hpp"

using namespace step;

namespace {

constexpr int kLegs = 4;

StateLayout full_layout() { return StateLayout{kLegs, true}; }

KeyframeState random_state(std::mt19937_64& rng) {
  KeyframeState x;
  x.p = oracle::random_vec3(rng, 2.0);
  x.R = oracle::random_rotation(rng, 1.5);
  x.v = oracle::random_vec3(rng, 1.0);
  for (int l = 0; l < kLegs; ++l) {
    FootState f;
    f.Psi = oracle::random_rotation(rng, 1.5);
    f.s = oracle::random_vec3(rng, 2.0);
    x.feet.push_back(f);
  }
  x.b_a = oracle::random_vec3(rng, 0.05);
  x.b_g = oracle::random_vec3(rng, 0.01);
  return x;
}

// Central finite differences of a raw residual w.r.t. one state's tangent.
template <typename F>
Eigen::MatrixXd numeric_jacobian(const F& residual_of, const KeyframeState& x,
                                 const StateLayout& layout, int res_dim,
                                 double h = 1e-6) {
  Eigen::MatrixXd j(res_dim, layout.dim());
  for (int c = 0; c < layout.dim(); ++c) {
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(layout.dim());
    delta(c) = h;
    const Eigen::VectorXd rp = residual_of(boxplus_state(x, delta, layout));
    delta(c) = -h;
    const Eigen::VectorXd rm = residual_of(boxplus_state(x, delta, layout));
    j.col(c) = (rp - rm) / (2.0 * h);
  }
  return j;
}

void check_close(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric,
                 double rel = 1e-5) {
  const double scale = std::max(1.0, numeric.norm());
  CHECK((analytic - numeric).norm() / scale < rel);
}

Eigen::MatrixXd random_psd(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> d(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = d(rng);
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
}

}  // namespace

TEST_CASE("prior residual") {
  const StateLayout layout = full_layout();
  std::mt19937_64 rng(51);
  const KeyframeState mean = random_state(rng);
  const Eigen::MatrixXd identity_info =
      Eigen::MatrixXd::Identity(layout.dim(), layout.dim());

  CHECK(prior_residual(mean, mean, identity_info, layout).norm() < 1e-14);

  KeyframeState shifted = mean;
  shifted.p += Vec3(0.1, 0, 0);
  const Eigen::VectorXd r = prior_residual(shifted, mean, identity_info, layout);
  CHECK(r(layout.p()) == Catch::Approx(0.1));
  CHECK(r.norm() == Catch::Approx(0.1));

  // whitening oracle: explicit cov^-1/2 * delta
  for (int i = 0; i < 20; ++i) {
    const KeyframeState x = random_state(rng);
    const Eigen::MatrixXd cov = random_psd(rng, layout.dim());
    const Eigen::MatrixXd sqrt_info = sqrt_information(cov);
    const Eigen::VectorXd got = prior_residual(x, mean, sqrt_info, layout);
    const Eigen::VectorXd delta = boxminus_state(x, mean, layout);
    CHECK(std::abs(got.squaredNorm() - delta.dot(cov.inverse() * delta)) <
          1e-9 * std::max(1.0, delta.squaredNorm()));
  }

  CHECK_THROWS_AS(prior_residual(mean, mean, Eigen::MatrixXd::Identity(3, 3), layout),
                  DimensionMismatch);
}

TEST_CASE("imu residual closed forms") {
  const Vec3 gravity(0, 0, -9.81);
  KeyframeState xi, xj;
  for (int l = 0; l < kLegs; ++l) {
    xi.feet.push_back(FootState{});
    xj.feet.push_back(FootState{});
  }

  // stationary robot over 0.1 s: the preintegral sees only the gravity
  // reaction, dv = (0,0,0.981), dp = (0,0,0.04905)
  ImuPreintegral pre;
  pre.dt_total = 0.1;
  pre.dv = Vec3(0, 0, 0.981);
  pre.dp = Vec3(0, 0, 0.04905);
  CHECK(imu_residual(xi, xj, pre, gravity).norm() < 1e-12);

  // bias random-walk slots
  xj.b_g = Vec3(1e-3, 0, 0);
  const auto r = imu_residual(xi, xj, pre, gravity);
  CHECK(r.segment<3>(12).isApprox(Vec3(1e-3, 0, 0), 1e-15));
  CHECK(r.segment<3>(9).norm() == 0.0);
}

TEST_CASE("imu residual zero on exact propagation") {
  const Vec3 gravity(0, 0, -9.81);
  NoiseConfig quiet;
  quiet.cov_gyro.setZero();
  quiet.cov_accel.setZero();
  std::mt19937_64 rng(52);
  for (int rep = 0; rep < 20; ++rep) {
    KeyframeState xi = random_state(rng);
    xi.b_a.setZero();
    xi.b_g.setZero();
    ImuPreintegral pre;
    for (int k = 0; k < 40; ++k) {
      ImuSample s;
      s.gyro = oracle::random_vec3(rng, 1.0);
      s.accel = oracle::random_vec3(rng, 3.0);
      pre = imu_integrate_step(std::move(pre), s, 0.0025, quiet);
    }
    KeyframeState xj = xi;
    const double dt = pre.dt_total;
    xj.p = xi.p + xi.v * dt + 0.5 * gravity * dt * dt + xi.R * pre.dp;
    xj.v = xi.v + gravity * dt + xi.R * pre.dv;
    xj.R = xi.R * pre.dR;
    CHECK(imu_residual(xi, xj, pre, gravity).norm() < 1e-9);
  }
}

TEST_CASE("visual residual closed forms and projection oracle") {
  const Extrinsics ident;
  std::mt19937_64 rng(53);
  KeyframeState anchor = random_state(rng);

  // landmark 2 m straight ahead of the anchor camera
  const Vec2 bearing(0.0, 0.0);
  const double lambda = 0.5;

  // observation from the anchor pose itself reprojects exactly
  CHECK(visual_residual(anchor, anchor, bearing, lambda, Vec2(0, 0), ident).norm() < 1e-12);
  CHECK(visual_residual(anchor, anchor, bearing, lambda, Vec2(0.01, 0), ident)
            .isApprox(Vec2(0.01, 0), 1e-12));

  // random geometry against an independent project-and-subtract oracle
  const Extrinsics ext = default_robot().extrinsics;
  for (int i = 0; i < 100; ++i) {
    const KeyframeState xa = random_state(rng);
    KeyframeState xi = xa;
    xi.p += oracle::random_vec3(rng, 0.5);
    xi.R = xa.R * exp_so3(oracle::random_ball(rng, 0.3));
    const Vec2 b(0.2 * oracle::random_vec3(rng).x(), 0.2 * oracle::random_vec3(rng).y());
    const double inv_depth = 1.0 / (2.0 + 3.0 * std::abs(oracle::random_vec3(rng).x()));
    const Vec2 obs(0.01, -0.02);

    // oracle: homogeneous transforms straight from the definition
    Eigen::Matrix4d t_wb_a = Eigen::Matrix4d::Identity();
    t_wb_a.topLeftCorner<3, 3>() = xa.R.matrix();
    t_wb_a.topRightCorner<3, 1>() = xa.p;
    Eigen::Matrix4d t_bc = Eigen::Matrix4d::Identity();
    t_bc.topLeftCorner<3, 3>() = ext.r_body_from_camera.matrix();
    t_bc.topRightCorner<3, 1>() = ext.p_body_from_camera;
    Eigen::Matrix4d t_wb_i = Eigen::Matrix4d::Identity();
    t_wb_i.topLeftCorner<3, 3>() = xi.R.matrix();
    t_wb_i.topRightCorner<3, 1>() = xi.p;
    Eigen::Vector4d pt_a(b.x() / inv_depth, b.y() / inv_depth, 1.0 / inv_depth, 1.0);
    Eigen::Vector4d pt_c = (t_wb_i * t_bc).inverse() * (t_wb_a * t_bc) * pt_a;
    if (pt_c.z() <= 1e-3) continue;
    const Vec2 expected = obs - Vec2(pt_c.x() / pt_c.z(), pt_c.y() / pt_c.z());

    CHECK((visual_residual(xi, xa, b, inv_depth, obs, ext) - expected).norm() < 1e-10);
  }

  // behind-camera guard
  KeyframeState behind = anchor;
  behind.p = anchor.p + anchor.R * Vec3(0, 0, 5.0);  // move past the landmark
  Extrinsics look_z;  // camera aligned with body: landmark sits behind now
  CHECK_THROWS_AS(visual_residual(behind, anchor, bearing, lambda, Vec2(0, 0), look_z),
                  BehindCamera);
}

TEST_CASE("fk residual closed forms") {
  const RobotModel robot = default_robot();
  const StateLayout layout = full_layout();
  std::mt19937_64 rng(54);

  KeyframeState xi = random_state(rng);
  JointAngles q;
  q.alpha = Vec3(0.2, 0.5, -1.2);
  const int leg = 1;

  // measurement-model consistency: Psi = R Gamma_R, s = R Gamma_p + p
  xi.feet[leg].Psi = xi.R * fk_rotation(robot.legs[leg], q);
  xi.feet[leg].s = xi.R * fk_position(robot.legs[leg], q) + xi.p;
  CHECK(fk_residual(xi, robot.legs[leg], leg, q).norm() < 1e-12);

  // +1 cm world-x displacement with identity body rotation
  KeyframeState level = xi;
  level.R = Rotation::identity();
  level.feet[leg].Psi = fk_rotation(robot.legs[leg], q);
  level.feet[leg].s = fk_position(robot.legs[leg], q) + level.p;
  level.feet[leg].s.x() += 0.01;
  const auto r = fk_residual(level, robot.legs[leg], leg, q);
  CHECK(r.tail<3>().isApprox(Vec3(0.01, 0, 0), 1e-12));
  CHECK(r.head<3>().norm() < 1e-12);

  // random states against the direct formula
  for (int i = 0; i < 50; ++i) {
    const KeyframeState x = random_state(rng);
    JointAngles rq;
    rq.alpha = Vec3(0.3, -0.4, 0.8);
    const Rotation gamma_r = fk_rotation(robot.legs[leg], rq);
    const Vec3 gamma_p = fk_position(robot.legs[leg], rq);
    const auto got = fk_residual(x, robot.legs[leg], leg, rq);
    const Vec3 want_rot =
        log_so3(Rotation::from_matrix(gamma_r.matrix().transpose() *
                                      x.R.matrix().transpose() * x.feet[leg].Psi.matrix()));
    const Vec3 want_pos = x.R.matrix().transpose() * (x.feet[leg].s - x.p) - gamma_p;
    CHECK((got.head<3>() - want_rot).norm() < 1e-9);
    CHECK((got.tail<3>() - want_pos).norm() < 1e-12);
  }
  (void)layout;
}

TEST_CASE("foot velocity residual closed forms") {
  std::mt19937_64 rng(55);
  KeyframeState xi = random_state(rng);
  KeyframeState xj = xi;

  FootPreintegral pre;  // identity / zero
  CHECK(foot_velocity_residual(xi, xj, 2, pre).norm() < 1e-12);

  xj.feet[2].s = xi.feet[2].s + Vec3(0.05, 0, 0);
  xi.feet[2].Psi = Rotation::identity();
  const auto r = foot_velocity_residual(xi, xj, 2, pre);
  CHECK(r.tail<3>().isApprox(Vec3(0.05, 0, 0), 1e-12));

  // noise-free preintegral on exact foot motion
  NoiseConfig quiet;
  quiet.cov_foot_ang.setZero();
  quiet.cov_foot_lin.setZero();
  for (int rep = 0; rep < 20; ++rep) {
    KeyframeState a = random_state(rng);
    FootPreintegral p2;
    for (int k = 0; k < 40; ++k) {
      p2 = foot_integrate_step(std::move(p2), oracle::random_vec3(rng, 1.0),
                               oracle::random_vec3(rng, 0.5), 0.0025, quiet);
    }
    KeyframeState b = a;
    b.feet[0].Psi = a.feet[0].Psi * p2.dPsi;
    b.feet[0].s = a.feet[0].s + a.feet[0].Psi * p2.ds;
    CHECK(foot_velocity_residual(a, b, 0, p2).norm() < 1e-10);
  }
}

TEST_CASE("nonslip contact residual") {
  std::mt19937_64 rng(56);
  KeyframeState xi = random_state(rng);
  KeyframeState xj = xi;
  CHECK(nonslip_contact_residual(xi, xj, 0).norm() == 0.0);

  xi.feet[0].Psi = Rotation::identity();
  xj.feet[0].s = xi.feet[0].s + Vec3(0.1, 0, 0);
  CHECK(nonslip_contact_residual(xi, xj, 0).isApprox(Vec3(0.1, 0, 0), 1e-14));
}

TEST_CASE("analytic jacobians match finite differences") {
  const StateLayout layout = full_layout();
  const RobotModel robot = default_robot();
  const Vec3 gravity(0, 0, -9.81);
  std::mt19937_64 rng(57);
  NoiseConfig noise;

  for (int rep = 0; rep < 30; ++rep) {
    const KeyframeState xi = random_state(rng);
    const KeyframeState xj = random_state(rng);

    {
      // prior
      const KeyframeState mean = random_state(rng);
      const Eigen::MatrixXd sqrt_info = sqrt_information(random_psd(rng, layout.dim()));
      const Eigen::MatrixXd analytic = prior_jacobian(xi, mean, sqrt_info, layout);
      const Eigen::MatrixXd numeric = numeric_jacobian(
          [&](const KeyframeState& x) {
            return Eigen::VectorXd(prior_residual(x, mean, sqrt_info, layout));
          },
          xi, layout, layout.dim());
      check_close(analytic, numeric);
    }

    {
      // imu
      ImuPreintegral pre;
      for (int k = 0; k < 10; ++k) {
        ImuSample s;
        s.gyro = oracle::random_vec3(rng, 1.0);
        s.accel = oracle::random_vec3(rng, 3.0);
        pre = imu_integrate_step(std::move(pre), s, 0.01, noise);
      }
      Eigen::MatrixXd ji, jj;
      imu_jacobians(xi, xj, pre, gravity, layout, ji, jj);
      check_close(ji, numeric_jacobian(
                          [&](const KeyframeState& x) {
                            return Eigen::VectorXd(imu_residual(x, xj, pre, gravity));
                          },
                          xi, layout, 15));
      check_close(jj, numeric_jacobian(
                          [&](const KeyframeState& x) {
                            return Eigen::VectorXd(imu_residual(xi, x, pre, gravity));
                          },
                          xj, layout, 15));
    }

    {
      // visual
      const Extrinsics ext = robot.extrinsics;
      KeyframeState near = xi;
      near.p = xj.p + oracle::random_vec3(rng, 0.3);
      near.R = xj.R * exp_so3(oracle::random_ball(rng, 0.2));
      const Vec2 bearing(0.1, -0.05);
      const double inv_depth = 0.4;
      const Vec2 obs(0.02, 0.01);
      try {
        Eigen::MatrixXd ji, ja;
        Eigen::Vector2d jl;
        visual_jacobians(near, xj, bearing, inv_depth, ext, layout, ji, ja, jl);
        check_close(ji, numeric_jacobian(
                            [&](const KeyframeState& x) {
                              return Eigen::VectorXd(
                                  visual_residual(x, xj, bearing, inv_depth, obs, ext));
                            },
                            near, layout, 2));
        check_close(ja, numeric_jacobian(
                            [&](const KeyframeState& x) {
                              return Eigen::VectorXd(
                                  visual_residual(near, x, bearing, inv_depth, obs, ext));
                            },
                            xj, layout, 2));
        const double h = 1e-7;
        const Vec2 rp = visual_residual(near, xj, bearing, inv_depth + h, obs, ext);
        const Vec2 rm = visual_residual(near, xj, bearing, inv_depth - h, obs, ext);
        check_close(jl, Eigen::MatrixXd((rp - rm) / (2.0 * h)), 1e-4);
      } catch (const BehindCamera&) {
        // geometry happened to put the landmark behind; skip this draw
      }
    }

    {
      // forward kinematics
      JointAngles q;
      q.alpha = Vec3(0.3, 0.7, -1.1);
      const Eigen::MatrixXd analytic = fk_jacobian(xi, robot.legs[2], 2, q, layout);
      check_close(analytic, numeric_jacobian(
                                [&](const KeyframeState& x) {
                                  return Eigen::VectorXd(fk_residual(x, robot.legs[2], 2, q));
                                },
                                xi, layout, 6));
    }

    {
      // foot velocity
      FootPreintegral pre;
      for (int k = 0; k < 10; ++k) {
        pre = foot_integrate_step(std::move(pre), oracle::random_vec3(rng, 1.0),
                                  oracle::random_vec3(rng, 0.5), 0.01, noise);
      }
      Eigen::MatrixXd ji, jj;
      foot_velocity_jacobians(xi, xj, 1, pre, layout, ji, jj);
      check_close(ji, numeric_jacobian(
                          [&](const KeyframeState& x) {
                            return Eigen::VectorXd(foot_velocity_residual(x, xj, 1, pre));
                          },
                          xi, layout, 6));
      check_close(jj, numeric_jacobian(
                          [&](const KeyframeState& x) {
                            return Eigen::VectorXd(foot_velocity_residual(xi, x, 1, pre));
                          },
                          xj, layout, 6));
    }

    {
      // nonslip contact
      Eigen::MatrixXd ji, jj;
      nonslip_contact_jacobians(xi, xj, 3, layout, ji, jj);
      check_close(ji, numeric_jacobian(
                          [&](const KeyframeState& x) {
                            return Eigen::VectorXd(nonslip_contact_residual(x, xj, 3));
                          },
                          xi, layout, 3));
      check_close(jj, numeric_jacobian(
                          [&](const KeyframeState& x) {
                            return Eigen::VectorXd(nonslip_contact_residual(xi, x, 3));
                          },
                          xj, layout, 3));
    }
  }
}

TEST_CASE("robust weight") {
  RobustLoss none;
  CHECK(robust_weight(none, 100.0) == 1.0);

  RobustLoss huber{RobustLoss::Huber, 1.0};
  CHECK(robust_weight(huber, 0.25) == 1.0);  // inside the quadratic region
  const double s = 16.0;                     // |r| = 4
  const double w = robust_weight(huber, s);
  CHECK(w * w * s == Catch::Approx(huber_rho(s, 1.0)));
  CHECK(huber_rho(s, 1.0) == Catch::Approx(2.0 * 4.0 - 1.0));
}
