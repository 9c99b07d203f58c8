#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "step/so3.hpp"

using namespace step;

TEST_CASE("hat basics") {
  CHECK(hat(Vec3::Zero()).isZero(0.0));

  Mat3 expected;
  expected << 0, -3, 2, 3, 0, -1, -2, 1, 0;
  CHECK(hat(Vec3(1, 2, 3)).isApprox(expected, 1e-15));

  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    const Vec3 a = oracle::random_vec3(rng);
    const Vec3 b = oracle::random_vec3(rng);
    CHECK((hat(a) * b + hat(b) * a).norm() < 1e-12);        // anticommutative
    CHECK((hat(a) * b - a.cross(b)).norm() < 1e-12);        // cross product
    CHECK((hat(a) + hat(a).transpose()).isZero(0.0));       // skew
  }
}

TEST_CASE("vee inverts hat") {
  CHECK(vee(hat(Vec3(1, 2, 3))).isApprox(Vec3(1, 2, 3), 1e-15));
  CHECK(vee(Mat3::Zero()) == Vec3::Zero());

  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    const Vec3 v = oracle::random_vec3(rng, 5.0);
    CHECK(vee(hat(v)).isApprox(v, 1e-14));
  }

  Mat3 not_skew = Mat3::Identity();
  CHECK_THROWS_AS(vee(not_skew), NonSkewInput);
}

TEST_CASE("exp_so3 closed forms and series oracle") {
  CHECK(exp_so3(Vec3::Zero()).matrix().isIdentity(0.0));

  Mat3 quarter_x;
  quarter_x << 1, 0, 0, 0, 0, -1, 0, 1, 0;
  CHECK(exp_so3(Vec3(M_PI / 2, 0, 0)).matrix().isApprox(quarter_x, 1e-12));

  // 2.5 rad keeps the 20-term series truncation safely below the tolerance.
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    const Vec3 phi = oracle::random_ball(rng, 2.5);
    const Rotation r = exp_so3(phi);
    CHECK((r.matrix() - oracle::exp_series(phi)).norm() < 1e-10);
    CHECK(r.is_valid());
  }
}

TEST_CASE("log_so3 round trips and axis-aligned cases") {
  CHECK(log_so3(Rotation::identity()) == Vec3::Zero());
  CHECK(log_so3(exp_so3(Vec3(0.3, -0.2, 0.1))).isApprox(Vec3(0.3, -0.2, 0.1), 1e-12));
  CHECK(log_so3(exp_so3(Vec3(0, 0, M_PI / 2))).isApprox(Vec3(0, 0, M_PI / 2), 1e-12));

  std::mt19937_64 rng(10);
  for (int i = 0; i < 500; ++i) {
    const Vec3 phi = oracle::random_ball(rng, M_PI - 0.1);
    CHECK((log_so3(exp_so3(phi)) - phi).norm() < 1e-9);
  }

  // Round trip holds up to the chart boundary.
  for (int i = 0; i < 50; ++i) {
    const Vec3 axis = oracle::random_ball(rng, 1.0).normalized();
    const Vec3 phi = axis * (M_PI - 2e-6);
    const Rotation r = exp_so3(phi);
    CHECK((exp_so3(log_so3(r)).matrix() - r.matrix()).norm() < 1e-9);
  }

  CHECK_THROWS_AS(log_so3(exp_so3(Vec3(M_PI - 1e-8, 0, 0))), NearPiAngle);
  CHECK_THROWS_AS(log_so3(exp_so3(Vec3(M_PI, 0, 0))), NearPiAngle);
}

TEST_CASE("right_jacobian first-order expansion and quadrature oracle") {
  CHECK(right_jacobian(Vec3::Zero()).isIdentity(0.0));

  // Finite-difference check of Exp(phi + eps*delta) ~ Exp(phi)Exp(J_r eps*delta):
  // the defect must shrink as O(eps^2).
  std::mt19937_64 rng(11);
  for (int i = 0; i < 20; ++i) {
    const Vec3 phi = oracle::random_ball(rng, 2.5);
    const Vec3 delta = oracle::random_ball(rng, 1.0).normalized();
    const Mat3 jr = right_jacobian(phi);
    auto defect = [&](double eps) {
      const Rotation lhs = exp_so3(phi + eps * delta);
      const Rotation rhs = exp_so3(phi) * exp_so3(jr * (eps * delta));
      return log_so3(rhs.inverse() * lhs).norm();
    };
    const double d1 = defect(1e-3);
    const double d2 = defect(1e-4);
    if (d1 > 1e-12) {
      const double order = std::log10(d1 / std::max(d2, 1e-16));
      CHECK(order > 1.9);
    }
  }

  CHECK((right_jacobian(Vec3(M_PI / 2, 0, 0)) -
         oracle::right_jacobian_quadrature(Vec3(M_PI / 2, 0, 0)))
            .norm() < 1e-8);
  for (int i = 0; i < 10; ++i) {
    const Vec3 phi = oracle::random_ball(rng, 3.0);
    CHECK((right_jacobian(phi) - oracle::right_jacobian_quadrature(phi)).norm() < 1e-8);
  }
}

TEST_CASE("right_jacobian_inv is the matrix inverse") {
  CHECK(right_jacobian_inv(Vec3::Zero()).isIdentity(0.0));

  std::mt19937_64 rng(12);
  for (int i = 0; i < 100; ++i) {
    const Vec3 phi = oracle::random_ball(rng, M_PI - 0.2);
    CHECK((right_jacobian(phi) * right_jacobian_inv(phi) - Mat3::Identity()).norm() < 1e-9);
  }

  // Log(Exp(phi)Exp(dphi)) ~ phi + Jr^-1(phi) dphi with O(|dphi|^2) residual.
  for (int i = 0; i < 20; ++i) {
    const Vec3 phi = oracle::random_ball(rng, 2.0);
    const Vec3 delta = oracle::random_ball(rng, 1.0).normalized();
    auto defect = [&](double eps) {
      const Vec3 lhs = log_so3(exp_so3(phi) * exp_so3(eps * delta));
      return (lhs - (phi + right_jacobian_inv(phi) * (eps * delta))).norm();
    };
    const double d1 = defect(1e-3);
    const double d2 = defect(1e-4);
    if (d1 > 1e-12) {
      CHECK(std::log10(d1 / std::max(d2, 1e-16)) > 1.9);
    }
  }
}

TEST_CASE("boxplus / boxminus round trip") {
  CHECK(boxplus(Rotation::identity(), Vec3::Zero()).matrix().isIdentity(0.0));

  std::mt19937_64 rng(13);
  for (int i = 0; i < 100; ++i) {
    const Rotation r = oracle::random_rotation(rng);
    CHECK(boxminus(r, r).norm() < 1e-12);
    const Vec3 delta = oracle::random_ball(rng, M_PI - 0.2);
    CHECK((boxminus(boxplus(r, delta), r) - delta).norm() < 1e-9);
  }
}

TEST_CASE("exponential conjugation identity") {
  std::mt19937_64 rng(14);
  for (int i = 0; i < 100; ++i) {
    const Rotation r = oracle::random_rotation(rng);
    const Vec3 phi = oracle::random_ball(rng, 3.0);
    const Mat3 lhs = r.matrix() * exp_so3(phi).matrix() * r.matrix().transpose();
    const Mat3 rhs = exp_so3(r * phi).matrix();
    CHECK((lhs - rhs).norm() < 1e-9);
  }
}

TEST_CASE("small-angle branches are continuous at the switch point") {
  std::mt19937_64 rng(15);
  for (int i = 0; i < 50; ++i) {
    const Vec3 dir = oracle::random_ball(rng, 1.0).normalized();
    const Vec3 lo = dir * (kSmallAngle * (1.0 - 1e-9));
    const Vec3 hi = dir * (kSmallAngle * (1.0 + 1e-9));
    CHECK((exp_so3(lo).matrix() - exp_so3(hi).matrix()).norm() < 1e-10);
    CHECK((right_jacobian(lo) - right_jacobian(hi)).norm() < 1e-10);
    CHECK((right_jacobian_inv(lo) - right_jacobian_inv(hi)).norm() < 1e-10);
  }
}

TEST_CASE("long product chains stay on the manifold") {
  std::mt19937_64 rng(16);
  Rotation r = Rotation::identity();
  for (int i = 0; i < 5000; ++i) {
    r = r * exp_so3(oracle::random_ball(rng, 0.02));
  }
  CHECK(r.is_valid(1e-11));
}

TEST_CASE("from_matrix validates input") {
  CHECK_THROWS_AS(Rotation::from_matrix(2.0 * Mat3::Identity()), Error);
  Mat3 reflected = Mat3::Identity();
  reflected(2, 2) = -1.0;
  CHECK_THROWS_AS(Rotation::from_matrix(reflected), Error);
  std::mt19937_64 rng(17);
  const Rotation r = oracle::random_rotation(rng);
  CHECK(Rotation::from_matrix(r.matrix()).matrix().isApprox(r.matrix(), 1e-12));
}
