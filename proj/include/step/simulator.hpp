#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include "step/measurements.hpp"
#include "step/preintegration.hpp"
#include "step/robot_model.hpp"
#include "step/state.hpp"

namespace step {

enum class PathKind { Straight, Circle, Lemniscate };

struct PathSpec {
  PathKind kind = PathKind::Straight;
  double radius = 3.0;  // m, circle
  double scale = 3.0;   // m, lemniscate half-width
};

struct GaitConfig {
  double period = 0.5;       // s
  double duty_factor = 0.5;  // stance fraction of the cycle
  double step_height = 0.04; // m
};

/// Joint-rate synthesis. Analytic emits the instantaneous IK derivative;
/// ChainConsistent additionally aligns the rates per keyframe window so the
/// discrete preintegration chains reproduce the ground truth exactly.
enum class RateSynthesis { Analytic, ChainConsistent };

struct TrajectoryConfig {
  double duration = 60.0;  // s
  PathSpec path;
  double speed = 0.5;  // m/s
  GaitConfig gait;
  double body_height = 0.30;  // m above ground
  double imu_rate = 400.0;    // Hz
  double joint_rate = 400.0;  // Hz
  double cam_rate = 10.0;     // Hz
  std::uint64_t seed = 0;
  RateSynthesis rate_synthesis = RateSynthesis::ChainConsistent;
  double fov_half_tangent = 1.0;   // normalized-coordinate field of view
  double min_feature_depth = 0.3;  // m
  double max_feature_depth = 30.0; // m

  void validate() const {
    if (duration <= 0.0) throw ConfigError("TrajectoryConfig: duration must be positive");
    if (imu_rate < cam_rate || joint_rate < cam_rate) {
      throw ConfigError("TrajectoryConfig: sensor rates must be >= cam_rate");
    }
    if (gait.duty_factor <= 0.0 || gait.duty_factor >= 1.0) {
      throw ConfigError("TrajectoryConfig: duty factor must lie in (0,1)");
    }
    const double ratio = imu_rate / cam_rate;
    if (std::abs(ratio - std::round(ratio)) > 1e-9) {
      throw ConfigError("TrajectoryConfig: imu_rate must be a multiple of cam_rate");
    }
    if (std::abs(imu_rate - joint_rate) > 1e-9) {
      throw ConfigError("TrajectoryConfig: joint_rate must equal imu_rate");
    }
  }
};

/// Commanded tangential drift of stance feet over [t_start, t_end].
struct SlipEvent {
  double t_start = 0.0;
  double t_end = 0.0;
  std::vector<int> leg_ids;
  Vec3 slip_velocity = Vec3::Zero();  // world frame, perpendicular to gravity

  void validate(double duration) const {
    if (!(t_start < t_end) || t_start < 0.0 || t_end > duration) {
      throw ConfigError("SlipEvent: interval must satisfy 0 <= t_start < t_end <= duration");
    }
    if (std::abs(slip_velocity.z()) > 1e-9) {
      throw ConfigError("SlipEvent: slip velocity must be perpendicular to gravity");
    }
  }
};

struct GroundTruthSample {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Rotation R;
  Vec3 v = Vec3::Zero();
  std::vector<FootState> feet;
  std::vector<std::uint8_t> contact;
  std::vector<std::uint8_t> slipping;
};

struct SimConfig {
  TrajectoryConfig traj;
  NoiseConfig noise;
  std::vector<SlipEvent> slip_events;
  double landmark_density = 0.5;  // per m^3
  int max_features_per_frame = 60;
  std::vector<std::pair<double, double>> cam_dropouts;
  bool add_noise = true;
  Vec3 bias_gyro{-0.002, 0.001, 0.003};
  Vec3 bias_accel{0.02, -0.01, 0.015};
};

struct SimDataset {
  TrajectoryConfig traj_config;
  NoiseConfig noise;
  std::vector<SlipEvent> slip_events;
  RobotModel robot;
  Vec3 bias_gyro = Vec3::Zero();
  Vec3 bias_accel = Vec3::Zero();

  std::vector<GroundTruthSample> ground_truth;  // imu rate
  std::vector<ImuSample> imu;
  std::vector<JointSample> joints;
  std::vector<BodyVelocitySample> cam_velocity;
  std::vector<FeatureObservation> features;
  std::map<std::int64_t, Vec3> landmarks;

  // largest |R^T v - held body velocity| seen while synthesizing, i.e. the
  // constant-velocity substitution error of the foot measurement model
  double velocity_substitution_error = 0.0;
};

// ---------------------------------------------------------------------------
// Body path

/// Twice-differentiable body path sampled in closed form.
class BodyPath {
 public:
  BodyPath(const TrajectoryConfig& cfg) : cfg_(cfg) {
    if (cfg.path.kind == PathKind::Lemniscate) {
      // mean |dp/du| over one period fixes the angular rate for the target speed
      const int n = 4096;
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        const double u = 2.0 * M_PI * i / n;
        sum += du_norm(u);
      }
      lemniscate_rate_ = cfg.speed / std::max(sum / n, 1e-9);
    }
  }

  Vec3 position(double t) const {
    const double h = cfg_.body_height;
    switch (cfg_.path.kind) {
      case PathKind::Straight:
        return Vec3(cfg_.speed * t, 0.0, h);
      case PathKind::Circle: {
        const double r = cfg_.path.radius;
        const double th = cfg_.speed / r * t;
        return Vec3(r * std::sin(th), r * (1.0 - std::cos(th)), h);
      }
      case PathKind::Lemniscate: {
        const double a = cfg_.path.scale;
        const double u = lemniscate_rate_ * t;
        return Vec3(a * std::sin(u), a * std::sin(u) * std::cos(u), h);
      }
    }
    return Vec3::Zero();
  }

  Vec3 velocity(double t) const {
    switch (cfg_.path.kind) {
      case PathKind::Straight:
        return Vec3(cfg_.speed, 0.0, 0.0);
      case PathKind::Circle: {
        const double w = cfg_.speed / cfg_.path.radius;
        const double th = w * t;
        return Vec3(cfg_.speed * std::cos(th), cfg_.speed * std::sin(th), 0.0);
      }
      case PathKind::Lemniscate: {
        const double a = cfg_.path.scale;
        const double w = lemniscate_rate_;
        const double u = w * t;
        return Vec3(a * w * std::cos(u), a * w * std::cos(2.0 * u), 0.0);
      }
    }
    return Vec3::Zero();
  }

  Vec3 acceleration(double t) const {
    switch (cfg_.path.kind) {
      case PathKind::Straight:
        return Vec3::Zero();
      case PathKind::Circle: {
        const double w = cfg_.speed / cfg_.path.radius;
        const double th = w * t;
        return Vec3(-cfg_.speed * w * std::sin(th), cfg_.speed * w * std::cos(th), 0.0);
      }
      case PathKind::Lemniscate: {
        const double a = cfg_.path.scale;
        const double w = lemniscate_rate_;
        const double u = w * t;
        return Vec3(-a * w * w * std::sin(u), -2.0 * a * w * w * std::sin(2.0 * u), 0.0);
      }
    }
    return Vec3::Zero();
  }

  double yaw(double t) const {
    switch (cfg_.path.kind) {
      case PathKind::Straight:
        return 0.0;
      case PathKind::Circle:
        return cfg_.speed / cfg_.path.radius * t;
      case PathKind::Lemniscate: {
        if (std::abs(cfg_.speed) < 1e-12) return 0.0;
        const Vec3 v = velocity(t);
        return std::atan2(v.y(), v.x());
      }
    }
    return 0.0;
  }

  double yaw_rate(double t) const {
    switch (cfg_.path.kind) {
      case PathKind::Straight:
        return 0.0;
      case PathKind::Circle:
        return cfg_.speed / cfg_.path.radius;
      case PathKind::Lemniscate: {
        const Vec3 v = velocity(t);
        const Vec3 a = acceleration(t);
        const double n2 = v.x() * v.x() + v.y() * v.y();
        if (n2 < 1e-12) return 0.0;
        return (v.x() * a.y() - v.y() * a.x()) / n2;
      }
    }
    return 0.0;
  }

  Rotation rotation(double t) const { return exp_so3(Vec3(0.0, 0.0, yaw(t))); }

 private:
  double du_norm(double u) const {
    const double a = cfg_.path.scale;
    const double dx = a * std::cos(u);
    const double dy = a * std::cos(2.0 * u);
    return std::sqrt(dx * dx + dy * dy);
  }

  TrajectoryConfig cfg_;
  double lemniscate_rate_ = 0.0;
};

// ---------------------------------------------------------------------------
// Leg inverse kinematics (hip-abduction x, hip-flexion y, knee y)

/// Closed-form IK of the 3-DOF chain, knee-backward branch. Throws
/// UnreachableFootTarget / IkSingular at the workspace boundary.
inline Vec3 leg_ik(const LegModel& leg, const Vec3& target_body) {
  const Vec3 u = target_body - leg.link_offsets[0];
  const double d = leg.link_offsets[1].y();
  const double r_yz = std::hypot(u.y(), u.z());
  if (r_yz < std::abs(d) + 1e-9) {
    throw UnreachableFootTarget("leg_ik: target inside the abduction singularity");
  }
  const double alpha1 =
      std::atan2(u.z(), u.y()) + std::acos(std::clamp(d / r_yz, -1.0, 1.0));

  const Vec3 w = exp_so3(Vec3(-alpha1, 0, 0)) * u - leg.link_offsets[1];
  const double l1 = std::abs(leg.link_offsets[2].z());
  const double l2 = std::abs(leg.link_offsets[3].z());
  const double w2 = w.x() * w.x() + w.z() * w.z();
  const double c3 = (w2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  if (c3 >= 1.0 - 1e-9 || c3 <= -1.0 + 1e-9) {
    throw IkSingular("leg_ik: straight-leg or folded boundary");
  }
  const double alpha3 = -std::acos(c3);  // knee-backward branch

  const Vec3 m(-l2 * std::sin(alpha3), 0.0, -l1 - l2 * std::cos(alpha3));
  auto planar_angle = [](const Vec3& v) { return std::atan2(v.x(), -v.z()); };
  const double alpha2 = planar_angle(m) - planar_angle(w);

  const Vec3 alpha(alpha1, alpha2, alpha3);
  if ((alpha.array() < leg.joint_lower.array() - 1e-9).any() ||
      (alpha.array() > leg.joint_upper.array() + 1e-9).any()) {
    throw UnreachableFootTarget("leg_ik: solution violates joint limits");
  }
  return alpha;
}

/// Instantaneous joint rates realizing a body-frame foot-velocity target.
inline Vec3 leg_ik_rate(const LegModel& leg, const Vec3& alpha, const Vec3& gamma_p_dot) {
  JointAngles q;
  q.alpha = alpha;
  const Mat3 jac = fk_position_jacobian(leg, q);
  Eigen::FullPivLU<Mat3> lu(jac);
  if (!lu.isInvertible()) {
    throw IkSingular("leg_ik_rate: position Jacobian is singular");
  }
  return lu.solve(gamma_p_dot);
}

// ---------------------------------------------------------------------------
// Gait planner: trot with per-leg phase offsets, slip as commanded drift

class GaitPlanner {
 public:
  GaitPlanner(const TrajectoryConfig& cfg, const RobotModel& robot,
              std::vector<SlipEvent> slip, const BodyPath* path)
      : cfg_(cfg), robot_(robot), slip_(std::move(slip)), path_(path) {
    offsets_ = {0.0, 0.5, 0.5, 0.0};  // FL, FR, RL, RR trot pairs
    offsets_.resize(robot.num_legs(), 0.0);
  }

  bool in_stance(double t, int leg) const { return phase(t, leg) < cfg_.gait.duty_factor; }

  bool is_slipping(double t, int leg) const {
    if (!in_stance(t, leg)) return false;
    for (const SlipEvent& e : slip_) {
      if (t >= e.t_start && t < e.t_end) {
        for (int id : e.leg_ids) {
          if (id == leg) return true;
        }
      }
    }
    return false;
  }

  Vec3 foot_position(double t, int leg) const {
    const double duty = cfg_.gait.duty_factor;
    const double period = cfg_.gait.period;
    const long cycle = cycle_index(t, leg);
    const double t_td = (cycle - offsets_[leg]) * period;
    const double t_lo = t_td + duty * period;

    if (t < t_lo) {  // stance
      return anchor(cycle, leg) + slip_drift(t_td, t, leg);
    }
    // swing from the lifted point toward the next touchdown target
    const double t_td_next = (cycle + 1 - offsets_[leg]) * period;
    const Vec3 lift = anchor(cycle, leg) + slip_drift(t_td, t_lo, leg);
    const Vec3 target = anchor(cycle + 1, leg);
    const double u = (t - t_lo) / (t_td_next - t_lo);
    const double s = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
    Vec3 pos = lift + (target - lift) * s;
    const double sp = std::sin(M_PI * u);
    pos.z() += cfg_.gait.step_height * sp * sp;
    return pos;
  }

  Vec3 foot_velocity(double t, int leg) const {
    const double duty = cfg_.gait.duty_factor;
    const double period = cfg_.gait.period;
    const long cycle = cycle_index(t, leg);
    const double t_td = (cycle - offsets_[leg]) * period;
    const double t_lo = t_td + duty * period;

    if (t < t_lo) {
      return is_slipping(t, leg) ? active_slip_velocity(t, leg) : Vec3::Zero();
    }
    const double t_td_next = (cycle + 1 - offsets_[leg]) * period;
    const double swing = t_td_next - t_lo;
    const Vec3 lift = anchor(cycle, leg) + slip_drift(t_td, t_lo, leg);
    const Vec3 target = anchor(cycle + 1, leg);
    const double u = (t - t_lo) / swing;
    const double ds = 30.0 * u * u * (1.0 - u) * (1.0 - u) / swing;
    Vec3 vel = (target - lift) * ds;
    vel.z() += cfg_.gait.step_height * M_PI * std::sin(2.0 * M_PI * u) / swing;
    return vel;
  }

  /// Nominal ground point under the shoulder plus half a stance of lead.
  Vec3 anchor(long cycle, int leg) const {
    const double t_td = (cycle - offsets_[leg]) * cfg_.gait.period;
    const Vec3 hip_b = robot_.legs[leg].link_offsets[0] + robot_.legs[leg].link_offsets[1];
    Vec3 ground = path_->position(t_td) + path_->rotation(t_td) * hip_b;
    ground.z() = 0.0;
    Vec3 lead = path_->velocity(t_td) * (0.5 * cfg_.gait.duty_factor * cfg_.gait.period);
    lead.z() = 0.0;
    return ground + lead;
  }

 private:
  double phase(double t, int leg) const {
    const double psi = t / cfg_.gait.period + offsets_[leg];
    return psi - std::floor(psi);
  }

  long cycle_index(double t, int leg) const {
    return static_cast<long>(std::floor(t / cfg_.gait.period + offsets_[leg]));
  }

  Vec3 active_slip_velocity(double t, int leg) const {
    Vec3 v = Vec3::Zero();
    for (const SlipEvent& e : slip_) {
      if (t >= e.t_start && t < e.t_end) {
        for (int id : e.leg_ids) {
          if (id == leg) v += e.slip_velocity;
        }
      }
    }
    return v;
  }

  /// Integrated slip displacement of a stance interval [t_td, t).
  Vec3 slip_drift(double t_td, double t, int leg) const {
    Vec3 drift = Vec3::Zero();
    for (const SlipEvent& e : slip_) {
      bool applies = false;
      for (int id : e.leg_ids) applies = applies || id == leg;
      if (!applies) continue;
      const double a = std::max(t_td, e.t_start);
      const double b = std::min(t, e.t_end);
      if (b > a) drift += e.slip_velocity * (b - a);
    }
    return drift;
  }

  TrajectoryConfig cfg_;
  RobotModel robot_;
  std::vector<SlipEvent> slip_;
  const BodyPath* path_;
  std::vector<double> offsets_;
};

// ---------------------------------------------------------------------------
// Ground-truth and measurement synthesis

namespace sim_detail {

inline constexpr std::uint64_t kStreamImu = 0x494d55;
inline constexpr std::uint64_t kStreamJoints = 0x4a4e54;
inline constexpr std::uint64_t kStreamCam = 0x43414d;
inline constexpr std::uint64_t kStreamFeatures = 0x464541;
inline constexpr std::uint64_t kStreamLandmarks = 0x4c414e;

inline Vec3 gaussian3(std::mt19937_64& rng, const Vec3& cov) {
  std::normal_distribution<double> n01(0.0, 1.0);
  return Vec3(std::sqrt(cov.x()) * n01(rng), std::sqrt(cov.y()) * n01(rng),
              std::sqrt(cov.z()) * n01(rng));
}

}  // namespace sim_detail

/// Ground truth at IMU rate: analytic body path, gait feet, IK-consistent
/// foot orientations.
inline std::vector<GroundTruthSample> generate_ground_truth(
    const TrajectoryConfig& cfg, const RobotModel& robot,
    const std::vector<SlipEvent>& slip_events) {
  cfg.validate();
  for (const SlipEvent& e : slip_events) e.validate(cfg.duration);

  const BodyPath path(cfg);
  const GaitPlanner gait(cfg, robot, slip_events, &path);
  const int legs = robot.num_legs();
  const double dt = 1.0 / cfg.imu_rate;
  const int n = static_cast<int>(std::round(cfg.duration * cfg.imu_rate)) + 1;

  const double reach =
      std::abs(robot.legs[0].link_offsets[2].z()) + std::abs(robot.legs[0].link_offsets[3].z());

  std::vector<GroundTruthSample> out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    GroundTruthSample g;
    g.t = k * dt;
    g.p = path.position(g.t);
    g.R = path.rotation(g.t);
    g.v = path.velocity(g.t);
    g.feet.resize(legs);
    g.contact.resize(legs);
    g.slipping.resize(legs);
    for (int l = 0; l < legs; ++l) {
      const Vec3 s = gait.foot_position(g.t, l);
      const Vec3 hip_w = g.p + g.R * robot.legs[l].link_offsets[0];
      if ((s - hip_w).norm() > 0.98 * reach) {
        throw UnreachableFootTarget("generate_ground_truth: foot target beyond leg reach");
      }
      const Vec3 alpha = leg_ik(robot.legs[l], g.R.inverse() * (s - g.p));
      JointAngles q;
      q.alpha = alpha;
      g.feet[l].s = s;
      g.feet[l].Psi = g.R * fk_rotation(robot.legs[l], q);
      g.contact[l] = gait.in_stance(g.t, l) ? 1 : 0;
      g.slipping[l] = gait.is_slipping(g.t, l) ? 1 : 0;
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// IMU samples as interval-consistent average rates: dead-reckoning the
/// noise-free stream reproduces the ground-truth R and v exactly and p to
/// third order.
inline std::vector<ImuSample> synthesize_imu(const std::vector<GroundTruthSample>& gt,
                                             const NoiseConfig& noise, bool add_noise,
                                             const Vec3& bias_gyro, const Vec3& bias_accel,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ sim_detail::kStreamImu);
  const Vec3 gravity(0, 0, -9.81);
  std::vector<ImuSample> out;
  if (gt.size() < 2) return out;
  out.reserve(gt.size() - 1);
  for (std::size_t k = 0; k + 1 < gt.size(); ++k) {
    const double dt = gt[k + 1].t - gt[k].t;
    ImuSample s;
    s.t = gt[k].t;
    s.gyro = log_so3(gt[k].R.inverse() * gt[k + 1].R) / dt;
    s.accel = gt[k].R.inverse() * ((gt[k + 1].v - gt[k].v) / dt - gravity);
    if (add_noise) {
      s.gyro += bias_gyro + sim_detail::gaussian3(rng, noise.cov_gyro / dt);
      s.accel += bias_accel + sim_detail::gaussian3(rng, noise.cov_accel / dt);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Camera-frame body velocity at camera rate with dropout intervals.
inline std::vector<BodyVelocitySample> synthesize_camera_velocity(
    const std::vector<GroundTruthSample>& gt, const Extrinsics& ext,
    const NoiseConfig& noise, bool add_noise,
    const std::vector<std::pair<double, double>>& dropouts, double imu_rate,
    double cam_rate, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ sim_detail::kStreamCam);
  const int stride = static_cast<int>(std::round(imu_rate / cam_rate));
  std::vector<BodyVelocitySample> out;
  for (std::size_t k = 0; k < gt.size(); k += stride) {
    BodyVelocitySample s;
    s.t = gt[k].t;
    s.v_cam = ext.r_body_from_camera.inverse() * (gt[k].R.inverse() * gt[k].v);
    if (add_noise) s.v_cam += sim_detail::gaussian3(rng, noise.cov_cam_vel);
    s.valid = true;
    for (const auto& [a, b] : dropouts) {
      if (s.t >= a && s.t < b) s.valid = false;
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Body-frame velocity held from the last valid camera sample at or before
/// each query time; `stale` flags holds older than max_age.
inline void held_body_velocity(const std::vector<BodyVelocitySample>& cam,
                               const Extrinsics& ext, const std::vector<double>& times,
                               double max_age, std::vector<Vec3>& held,
                               std::vector<std::uint8_t>& stale) {
  held.assign(times.size(), Vec3::Zero());
  stale.assign(times.size(), 1);
  std::size_t c = 0;
  Vec3 current = Vec3::Zero();
  double current_t = -1e18;
  bool have = false;
  for (std::size_t i = 0; i < times.size(); ++i) {
    while (c < cam.size() && cam[c].t <= times[i] + 1e-12) {
      if (cam[c].valid) {
        current = body_velocity_from_camera(ext, cam[c].v_cam);
        current_t = cam[c].t;
        have = true;
      }
      ++c;
    }
    held[i] = current;
    stale[i] = (!have || times[i] - current_t > max_age) ? 1 : 0;
  }
}

namespace sim_detail {

/// Per-window least-norm joint-rate refinement: drives the preintegrated
/// rotation and position chains onto the ground-truth keyframe increments.
inline void chain_align_window(const RobotModel& robot, int leg,
                               const std::vector<GroundTruthSample>& gt,
                               const std::vector<ImuSample>& imu,
                               const std::vector<Vec3>& held_v, int i, int j,
                               std::vector<Vec3>& rates) {
  const LegModel& model = robot.legs[leg];
  const int n = j - i;
  const Rotation psi_i = gt[i].feet[leg].Psi;
  const Rotation target_rot = psi_i.inverse() * gt[j].feet[leg].Psi;
  const Vec3 target_pos = psi_i.inverse() * (gt[j].feet[leg].s - gt[i].feet[leg].s);

  std::vector<Vec3> alphas(n), omegas(n), nus(n);
  std::vector<double> dts(n);
  for (int k = 0; k < n; ++k) {
    const int g = i + k;
    dts[k] = gt[g + 1].t - gt[g].t;
    alphas[k] = leg_ik(model, gt[g].R.inverse() * (gt[g].feet[leg].s - gt[g].p));
  }

  for (int pass = 0; pass < 8; ++pass) {
    // evaluate the measured chains
    Rotation dpsi;
    Vec3 ds = Vec3::Zero();
    std::vector<Rotation> partial(n);  // dPsi before step k
    for (int k = 0; k < n; ++k) {
      const int g = i + k;
      JointAngles q;
      q.alpha = alphas[k];
      q.alpha_rate = rates[g];
      omegas[k] = foot_angular_velocity(model, q, imu[g].gyro, Vec3::Zero());
      nus[k] = foot_linear_velocity(model, q, imu[g].gyro, Vec3::Zero(), held_v[g]);
      partial[k] = dpsi;
      ds += dpsi * nus[k] * dts[k];
      dpsi = dpsi * exp_so3(omegas[k] * dts[k]);
    }
    const Vec3 defect_rot = log_so3(dpsi.inverse() * target_rot);
    const Vec3 defect_pos = target_pos - ds;
    if (defect_rot.norm() < 1e-13 && defect_pos.norm() < 1e-13) return;

    // impulse response of the chain ends to each sample's rate perturbation
    Eigen::MatrixXd m(6, 3 * n);
    for (int k = 0; k < n; ++k) {
      JointAngles q;
      q.alpha = alphas[k];
      const Rotation chain = fk_rotation(model, q);
      const Mat3 g_w = chain.matrix().transpose() * chain_angular_velocity_map(model, alphas[k]);
      const Mat3 g_v = chain.matrix().transpose() * fk_position_jacobian(model, q);
      Mat3 u_r = right_jacobian(omegas[k] * dts[k]) * g_w * dts[k];
      Mat3 u_s = partial[k].matrix() * g_v * dts[k];
      for (int f = k + 1; f < n; ++f) {
        u_s -= partial[f].matrix() * hat(nus[f]) * u_r * dts[f];
        u_r = (exp_so3(-omegas[f] * dts[f]).matrix() * u_r).eval();
      }
      m.block<3, 3>(0, 3 * k) = u_r;
      m.block<3, 3>(3, 3 * k) = u_s;
    }

    Eigen::Matrix<double, 6, 1> defect;
    defect << defect_rot, defect_pos;
    Eigen::Matrix<double, 6, 6> mmt = m * m.transpose();
    mmt.diagonal().array() += 1e-12 * std::max(1.0, mmt.trace());
    const Eigen::VectorXd correction = m.transpose() * mmt.ldlt().solve(defect);
    for (int k = 0; k < n; ++k) {
      rates[i + k] += correction.segment<3>(3 * k);
    }
  }
}

}  // namespace sim_detail

/// Joint samples: exact IK angles plus joint rates per the configured
/// synthesis mode, with optional measurement noise.
inline std::vector<JointSample> synthesize_joints(const std::vector<GroundTruthSample>& gt,
                                                  const RobotModel& robot,
                                                  const TrajectoryConfig& cfg,
                                                  const GaitPlanner& gait, const BodyPath& path,
                                                  const std::vector<ImuSample>& imu,
                                                  const std::vector<BodyVelocitySample>& cam,
                                                  const NoiseConfig& noise, bool add_noise,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ sim_detail::kStreamJoints);
  const int legs = robot.num_legs();
  const std::size_t n_rate = gt.size() > 0 ? gt.size() - 1 : 0;

  std::vector<double> times(gt.size());
  for (std::size_t k = 0; k < gt.size(); ++k) times[k] = gt[k].t;
  std::vector<Vec3> held;
  std::vector<std::uint8_t> stale;
  held_body_velocity(cam, robot.extrinsics, times, 1.0 / cfg.cam_rate + 1e-9, held, stale);

  // instantaneous analytic rates
  std::vector<std::vector<Vec3>> rates(legs, std::vector<Vec3>(gt.size(), Vec3::Zero()));
  for (std::size_t k = 0; k < gt.size(); ++k) {
    const GroundTruthSample& g = gt[k];
    const Vec3 w_body(0.0, 0.0, path.yaw_rate(g.t));
    for (int l = 0; l < legs; ++l) {
      const Vec3 alpha = leg_ik(robot.legs[l], g.R.inverse() * (g.feet[l].s - g.p));
      const Vec3 gamma_p = g.R.inverse() * (g.feet[l].s - g.p);
      const Vec3 gamma_p_dot =
          g.R.inverse() * (gait.foot_velocity(g.t, l) - g.v) - w_body.cross(gamma_p);
      rates[l][k] = leg_ik_rate(robot.legs[l], alpha, gamma_p_dot);
    }
  }

  if (cfg.rate_synthesis == RateSynthesis::ChainConsistent && n_rate > 0) {
    const int stride = static_cast<int>(std::round(cfg.imu_rate / cfg.cam_rate));
    for (int l = 0; l < legs; ++l) {
      for (int i = 0; i + stride < static_cast<int>(gt.size()); i += stride) {
        sim_detail::chain_align_window(robot, l, gt, imu, held, i, i + stride, rates[l]);
      }
    }
  }

  std::vector<JointSample> out;
  out.reserve(n_rate);
  for (std::size_t k = 0; k < n_rate; ++k) {
    JointSample s;
    s.t = gt[k].t;
    s.legs.resize(legs);
    for (int l = 0; l < legs; ++l) {
      s.legs[l].alpha = leg_ik(robot.legs[l], gt[k].R.inverse() * (gt[k].feet[l].s - gt[k].p));
      s.legs[l].alpha_rate = rates[l][k];
      if (add_noise) {
        s.legs[l].alpha += sim_detail::gaussian3(rng, noise.cov_joint_angle);
        s.legs[l].alpha_rate += sim_detail::gaussian3(rng, noise.cov_joint_rate);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Static landmarks scattered around the path and their pinhole observations.
inline void synthesize_features(const std::vector<GroundTruthSample>& gt,
                                const TrajectoryConfig& cfg, const Extrinsics& ext,
                                double landmark_density, int max_per_frame,
                                const NoiseConfig& noise, bool add_noise, std::uint64_t seed,
                                std::vector<FeatureObservation>& observations,
                                std::map<std::int64_t, Vec3>& landmarks) {
  observations.clear();
  landmarks.clear();
  if (landmark_density <= 0.0 || gt.empty()) return;  // texture-less case

  Vec3 lo = gt.front().p, hi = gt.front().p;
  for (const GroundTruthSample& g : gt) {
    lo = lo.cwiseMin(g.p);
    hi = hi.cwiseMax(g.p);
  }
  lo -= Vec3(4.0, 4.0, 1.5);
  hi += Vec3(4.0, 4.0, 1.5);
  const double volume = (hi - lo).prod();
  const int count = static_cast<int>(std::round(landmark_density * volume));

  std::mt19937_64 lm_rng(seed ^ sim_detail::kStreamLandmarks);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int i = 0; i < count; ++i) {
    landmarks[i] = Vec3(lo.x() + u01(lm_rng) * (hi.x() - lo.x()),
                        lo.y() + u01(lm_rng) * (hi.y() - lo.y()),
                        lo.z() + u01(lm_rng) * (hi.z() - lo.z()));
  }

  std::mt19937_64 obs_rng(seed ^ sim_detail::kStreamFeatures);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double sigma = std::sqrt(noise.cov_pixel);
  const int stride = static_cast<int>(std::round(cfg.imu_rate / cfg.cam_rate));

  for (std::size_t k = 0; k < gt.size(); k += stride) {
    const GroundTruthSample& g = gt[k];
    const Rotation r_wc = g.R * ext.r_body_from_camera;
    const Vec3 t_wc = g.p + g.R * ext.p_body_from_camera;

    std::vector<std::pair<double, std::int64_t>> visible;
    for (const auto& [id, pt] : landmarks) {
      const Vec3 x_c = r_wc.inverse() * (pt - t_wc);
      if (x_c.z() < cfg.min_feature_depth || x_c.z() > cfg.max_feature_depth) continue;
      if (std::abs(x_c.x() / x_c.z()) > cfg.fov_half_tangent ||
          std::abs(x_c.y() / x_c.z()) > cfg.fov_half_tangent) {
        continue;
      }
      visible.push_back({x_c.z(), id});
    }
    std::sort(visible.begin(), visible.end());
    if (static_cast<int>(visible.size()) > max_per_frame) visible.resize(max_per_frame);

    for (const auto& [depth, id] : visible) {
      const Vec3 x_c = r_wc.inverse() * (landmarks.at(id) - t_wc);
      Vec2 px(x_c.x() / x_c.z(), x_c.y() / x_c.z());
      if (add_noise) px += Vec2(sigma * n01(obs_rng), sigma * n01(obs_rng));
      observations.push_back({g.t, id, px});
    }
  }
}

/// Full dataset generation; deterministic for a fixed config and seed.
inline SimDataset simulate(const SimConfig& cfg, const RobotModel& robot) {
  SimDataset ds;
  ds.traj_config = cfg.traj;
  ds.noise = cfg.noise;
  ds.slip_events = cfg.slip_events;
  ds.robot = robot;
  if (cfg.add_noise) {
    ds.bias_gyro = cfg.bias_gyro;
    ds.bias_accel = cfg.bias_accel;
  }

  ds.ground_truth = generate_ground_truth(cfg.traj, robot, cfg.slip_events);
  ds.imu = synthesize_imu(ds.ground_truth, cfg.noise, cfg.add_noise, cfg.bias_gyro,
                          cfg.bias_accel, cfg.traj.seed);

  // the joint-rate alignment needs the noise-free streams
  const std::vector<ImuSample> imu_clean =
      cfg.add_noise ? synthesize_imu(ds.ground_truth, cfg.noise, false, Vec3::Zero(),
                                     Vec3::Zero(), cfg.traj.seed)
                    : ds.imu;
  const std::vector<BodyVelocitySample> cam_clean = synthesize_camera_velocity(
      ds.ground_truth, robot.extrinsics, cfg.noise, false, cfg.cam_dropouts, cfg.traj.imu_rate,
      cfg.traj.cam_rate, cfg.traj.seed);

  ds.cam_velocity = cfg.add_noise
                        ? synthesize_camera_velocity(ds.ground_truth, robot.extrinsics,
                                                     cfg.noise, true, cfg.cam_dropouts,
                                                     cfg.traj.imu_rate, cfg.traj.cam_rate,
                                                     cfg.traj.seed)
                        : cam_clean;

  const BodyPath path(cfg.traj);
  const GaitPlanner gait(cfg.traj, robot, cfg.slip_events, &path);
  ds.joints = synthesize_joints(ds.ground_truth, robot, cfg.traj, gait, path, imu_clean,
                                cam_clean, cfg.noise, cfg.add_noise, cfg.traj.seed);

  synthesize_features(ds.ground_truth, cfg.traj, robot.extrinsics, cfg.landmark_density,
                      cfg.max_features_per_frame, cfg.noise, cfg.add_noise, cfg.traj.seed,
                      ds.features, ds.landmarks);

  // Eq-28 constant-velocity substitution diagnostic
  std::vector<double> times(ds.ground_truth.size());
  for (std::size_t k = 0; k < times.size(); ++k) times[k] = ds.ground_truth[k].t;
  std::vector<Vec3> held;
  std::vector<std::uint8_t> stale;
  held_body_velocity(cam_clean, robot.extrinsics, times, 1e18, held, stale);
  for (std::size_t k = 0; k < times.size(); ++k) {
    const Vec3 true_body_v =
        ds.ground_truth[k].R.inverse() * ds.ground_truth[k].v;
    ds.velocity_substitution_error =
        std::max(ds.velocity_substitution_error, (true_body_v - held[k]).norm());
  }
  return ds;
}

}  // namespace step
