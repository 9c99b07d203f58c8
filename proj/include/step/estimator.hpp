#pragma once

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "step/factors.hpp"

namespace step {

struct EstimatorConfig {
  int window_size = 10;
  Vec3 gravity{0.0, 0.0, -9.81};

  // Levenberg-Marquardt
  double lm_init_lambda = 1e-4;
  int lm_max_iterations = 20;
  double lm_cost_tolerance = 1e-8;   // relative cost decrease
  double lm_step_tolerance = 1e-10;  // step norm
  double lm_lambda_up = 4.0;
  double lm_lambda_down = 0.5;
  double lm_max_lambda = 1e16;

  NoiseConfig noise;
  double huber_delta = 1.0;
  double keyframe_interval = 0.1;  // s

  // factor toggles; foot_velocity and nonslip_contact are mutually exclusive
  bool use_imu = true;
  bool use_visual = true;
  bool use_fk = true;
  bool use_foot_velocity = true;
  bool use_nonslip_contact = false;

  Vec3 cov_contact = Vec3::Constant(1e-4);  // m^2, ablation slip-as-noise model
  Vec3 cov_bias_accel_rw = Vec3::Constant(1e-5);
  Vec3 cov_bias_gyro_rw = Vec3::Constant(1e-6);
  double bias_repre_threshold_gyro = 0.01;  // rad/s
  double bias_repre_threshold_accel = 0.05; // m/s^2

  // first-keyframe anchor
  double prior_sigma_p = 1e-4;
  double prior_sigma_rot = 1e-4;
  double prior_sigma_v = 0.2;
  double prior_sigma_foot_rot = 0.05;
  double prior_sigma_foot_pos = 0.02;
  double prior_sigma_ba = 0.1;
  double prior_sigma_bg = 0.05;

  double landmark_min_depth = 0.2;   // m
  double landmark_max_depth = 100.0; // m
  double landmark_init_depth = 2.0;  // fallback when triangulation degenerates

  void validate() const {
    if (window_size < 2) throw ConfigError("EstimatorConfig: window_size must be >= 2");
    if (lm_init_lambda <= 0.0) throw ConfigError("EstimatorConfig: damping must be positive");
    if (use_foot_velocity && use_nonslip_contact) {
      throw ConfigError("EstimatorConfig: foot_velocity and nonslip_contact are mutually exclusive");
    }
    noise.validate();
  }

  bool estimate_feet() const { return use_fk || use_foot_velocity || use_nonslip_contact; }
};

struct OptimizeReport {
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  bool converged = false;
  int skipped_visual = 0;  // behind-camera factors dropped this solve
};

struct TrajectorySample {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Rotation R;
  Vec3 v = Vec3::Zero();
  std::vector<FootState> feet;
};

/// Sliding-window factor graph over keyframe states and inverse-depth
/// landmarks. Single-writer: add_keyframe / optimize / shift_window mutate,
/// current_estimate snapshots.
class FactorGraph {
 public:
  FactorGraph(RobotModel robot, EstimatorConfig config)
      : robot_(std::move(robot)), config_(std::move(config)) {
    config_.validate();
    layout_.num_legs = robot_.num_legs();
    layout_.with_feet = config_.estimate_feet();
    initial_state_.feet.resize(robot_.num_legs());
  }

  const EstimatorConfig& config() const { return config_; }
  const RobotModel& robot() const { return robot_; }
  const StateLayout& layout() const { return layout_; }

  /// Anchor pose/velocity/biases for the first keyframe (its feet are
  /// re-derived from forward kinematics of the first joint measurement).
  void set_initial_state(const KeyframeState& x0) { initial_state_ = x0; }

  void add_keyframe(double t, std::shared_ptr<const ImuPreintegral> imu_pre,
                    std::vector<std::shared_ptr<const FootPreintegral>> foot_pres,
                    std::vector<JointAngles> fk_meas,
                    const std::vector<FeatureObservation>& features,
                    std::vector<bool> contact = {},
                    std::vector<std::vector<FootRawStep>> foot_raw = {}) {
    if (!window_.empty()) {
      if (t <= window_.back().state.t) {
        throw NonMonotonicTime("add_keyframe: keyframe time must increase");
      }
      if (!imu_pre) {
        throw Error("add_keyframe: IMU preintegral required after the first keyframe");
      }
    }

    Keyframe kf;
    kf.id = next_id_++;
    kf.imu_pre = std::move(imu_pre);
    kf.foot_pres = std::move(foot_pres);
    kf.fk_meas = std::move(fk_meas);
    kf.contact = std::move(contact);
    kf.foot_raw = std::move(foot_raw);

    if (window_.empty()) {
      kf.state = initial_state_;
      kf.state.t = t;
      kf.state.feet.resize(robot_.num_legs());
      feet_from_fk(kf.state, kf.fk_meas);
      window_.push_back(std::move(kf));
      init_prior();
    } else {
      const KeyframeState& prev = window_.back().state;
      kf.state = dead_reckon(prev, *kf.imu_pre, config_.gravity);
      kf.state.t = t;
      feet_from_fk(kf.state, kf.fk_meas);
      if (kf.imu_pre) {
        kf.imu_sqrt_info = sqrt_information(imu_residual_covariance(
            *kf.imu_pre, config_.cov_bias_accel_rw, config_.cov_bias_gyro_rw));
      }
      for (const auto& fp : kf.foot_pres) {
        kf.foot_sqrt_info.push_back(fp ? sqrt_information(fp->cov) : Eigen::MatrixXd());
      }
      window_.push_back(std::move(kf));
    }

    ingest_features(window_.back().id, features);
  }

  /// Dead-reckons one IMU preintegral forward from a state.
  static KeyframeState dead_reckon(const KeyframeState& x, const ImuPreintegral& pre,
                                   const Vec3& gravity) {
    KeyframeState out = x;
    const double dt = pre.dt_total;
    out.t = x.t + dt;
    out.p = x.p + x.v * dt + 0.5 * gravity * dt * dt + x.R * pre.dp;
    out.v = x.v + gravity * dt + x.R * pre.dv;
    out.R = x.R * pre.dR;
    return out;
  }

  OptimizeReport optimize() {
    re_preintegrate_if_needed();

    OptimizeReport report;
    std::vector<KeyframeState> states;
    for (const Keyframe& kf : window_) states.push_back(kf.state);
    std::map<std::int64_t, double> lambdas = active_landmarks(states);

    double cost = evaluate_cost(states, lambdas, &report.skipped_visual);
    if (!std::isfinite(cost)) {
      throw SolverFailure("optimize: non-finite initial cost");
    }
    report.initial_cost = cost;

    double damping = config_.lm_init_lambda;
    const int d = static_cast<int>(window_.size()) * layout_.dim();

    for (int iter = 0; iter < config_.lm_max_iterations; ++iter) {
      ++report.iterations;

      Eigen::MatrixXd h;
      Eigen::VectorXd g;
      std::map<std::int64_t, LandmarkAcc> lm_acc;
      linearize(states, lambdas, h, g, lm_acc);

      bool accepted = false;
      while (damping <= config_.lm_max_lambda) {
        Eigen::MatrixXd h_damped = h;
        h_damped.diagonal() += damping * h.diagonal().cwiseMax(1e-9);
        Eigen::VectorXd g_red = g;
        std::map<std::int64_t, double> h_ll_damped;
        for (const auto& [id, acc] : lm_acc) {
          const double hll = acc.h_ll * (1.0 + damping) + 1e-12;
          h_ll_damped[id] = hll;
          h_damped.noalias() -= acc.h_xl * (acc.h_xl.transpose() / hll);
          g_red.noalias() -= acc.h_xl * (acc.g_l / hll);
        }

        Eigen::LDLT<Eigen::MatrixXd> ldlt(h_damped);
        Eigen::VectorXd dx = ldlt.solve(-g_red);
        if (ldlt.info() != Eigen::Success || !dx.allFinite()) {
          damping *= config_.lm_lambda_up;
          continue;
        }

        std::map<std::int64_t, double> cand_lambdas = lambdas;
        double step_norm2 = dx.squaredNorm();
        for (auto& [id, lam] : cand_lambdas) {
          const auto& acc = lm_acc.at(id);
          const double dl = (-acc.g_l - acc.h_xl.dot(dx)) / h_ll_damped.at(id);
          step_norm2 += dl * dl;
          lam = std::clamp(lam + dl, 1.0 / config_.landmark_max_depth,
                           1.0 / config_.landmark_min_depth);
        }

        std::vector<KeyframeState> cand(states.size());
        for (std::size_t w = 0; w < states.size(); ++w) {
          cand[w] = boxplus_state(states[w], dx.segment(w * layout_.dim(), layout_.dim()),
                                  layout_);
        }
        const double cand_cost = evaluate_cost(cand, cand_lambdas, nullptr);

        if (std::isfinite(cand_cost) && cand_cost <= cost) {
          const double decrease = cost - cand_cost;
          states = std::move(cand);
          lambdas = std::move(cand_lambdas);
          marginal_ = MarginalCache{std::move(h_damped), static_cast<int>(window_.size())};
          accepted = true;
          damping = std::max(damping * config_.lm_lambda_down, 1e-12);
          const bool cost_done = decrease <= config_.lm_cost_tolerance * std::max(cost, 1e-300);
          cost = cand_cost;
          if (cost_done || std::sqrt(step_norm2) < config_.lm_step_tolerance) {
            report.converged = true;
          }
          break;
        }
        damping *= config_.lm_lambda_up;
      }

      if (!accepted || report.converged) {
        report.converged = report.converged || accepted;
        break;
      }
      (void)d;
    }

    for (std::size_t w = 0; w < window_.size(); ++w) window_[w].state = states[w];
    for (const auto& [id, lam] : lambdas) landmarks_.at(id).inv_depth = lam;
    if (!layout_.with_feet) {
      for (Keyframe& kf : window_) feet_from_fk(kf.state, kf.fk_meas);
    }
    report.final_cost = cost;
    return report;
  }

  /// Removes the oldest keyframe and re-priors the new oldest state with the
  /// diagonal block of the damped normal-equations inverse from the last
  /// accepted solve. Landmarks anchored solely in the dropped frame are
  /// re-anchored (preserving the world point) or dropped.
  void shift_window() {
    if (window_.size() < 2) return;
    const Keyframe& dropped = window_.front();
    const Keyframe& next = window_[1];

    Eigen::MatrixXd cov_block = marginal_block(1);
    prior_.mean = std::make_shared<KeyframeState>(next.state);
    prior_.sqrt_info = sqrt_information(cov_block);

    reanchor_landmarks(dropped.id);
    window_.pop_front();
    prior_.kf_id = window_.front().id;
    marginal_.reset();
  }

  std::vector<TrajectorySample> current_estimate() const {
    std::vector<TrajectorySample> out;
    out.reserve(window_.size());
    for (const Keyframe& kf : window_) {
      out.push_back({kf.state.t, kf.state.p, kf.state.R, kf.state.v, kf.state.feet});
    }
    return out;
  }

  int window_size() const { return static_cast<int>(window_.size()); }
  const KeyframeState& window_state(int idx) const { return window_.at(idx).state; }
  void set_window_state(int idx, const KeyframeState& x) { window_.at(idx).state = x; }
  std::int64_t window_id(int idx) const { return window_.at(idx).id; }
  int num_landmarks() const { return static_cast<int>(landmarks_.size()); }

  double total_cost() {
    std::vector<KeyframeState> states;
    for (const Keyframe& kf : window_) states.push_back(kf.state);
    const auto lambdas = active_landmarks(states);
    return evaluate_cost(states, lambdas, nullptr);
  }

  double landmark_inv_depth(std::int64_t id) const { return landmarks_.at(id).inv_depth; }

  /// Assembled view of the current residual blocks (tests and diagnostics).
  std::vector<ResidualBlock> blocks() const {
    std::vector<ResidualBlock> out;
    if (prior_.mean) {
      ResidualBlock b;
      b.kind = FactorKind::Prior;
      b.kf_i = prior_.kf_id;
      b.dim = layout_.dim();
      b.sqrt_info = prior_.sqrt_info;
      b.prior_mean = prior_.mean;
      out.push_back(std::move(b));
    }
    for (std::size_t w = 1; w < window_.size(); ++w) {
      const Keyframe& kf = window_[w];
      if (config_.use_imu && kf.imu_pre) {
        ResidualBlock b;
        b.kind = FactorKind::Imu;
        b.kf_i = window_[w - 1].id;
        b.kf_j = kf.id;
        b.dim = 15;
        b.sqrt_info = kf.imu_sqrt_info;
        b.imu = kf.imu_pre;
        out.push_back(std::move(b));
      }
      if (config_.use_foot_velocity) {
        for (std::size_t l = 0; l < kf.foot_pres.size(); ++l) {
          if (!kf.foot_pres[l]) continue;
          ResidualBlock b;
          b.kind = FactorKind::FootVelocity;
          b.kf_i = window_[w - 1].id;
          b.kf_j = kf.id;
          b.leg = static_cast<int>(l);
          b.dim = 6;
          b.sqrt_info = kf.foot_sqrt_info[l];
          b.foot = kf.foot_pres[l];
          out.push_back(std::move(b));
        }
      }
      if (config_.use_nonslip_contact) {
        for (int l = 0; l < robot_.num_legs(); ++l) {
          if (!both_in_contact(w, l)) continue;
          ResidualBlock b;
          b.kind = FactorKind::NonslipContact;
          b.kf_i = window_[w - 1].id;
          b.kf_j = kf.id;
          b.leg = l;
          b.dim = 3;
          b.sqrt_info = contact_sqrt_info();
          out.push_back(std::move(b));
        }
      }
    }
    if (config_.use_fk) {
      for (const Keyframe& kf : window_) {
        for (int l = 0; l < robot_.num_legs(); ++l) {
          ResidualBlock b;
          b.kind = FactorKind::ForwardKinematics;
          b.kf_i = kf.id;
          b.leg = l;
          b.dim = 6;
          b.sqrt_info = fk_sqrt_info();
          b.fk_meas = kf.fk_meas[l];
          out.push_back(std::move(b));
        }
      }
    }
    if (config_.use_visual) {
      for (const auto& [id, lm] : landmarks_) {
        if (!lm.initialized) continue;
        for (const auto& [kf_id, pixel] : lm.obs) {
          if (kf_id == lm.anchor_kf || !in_window(kf_id) || !in_window(lm.anchor_kf)) continue;
          ResidualBlock b;
          b.kind = FactorKind::Visual;
          b.kf_i = kf_id;
          b.kf_j = lm.anchor_kf;
          b.landmark_id = id;
          b.dim = 2;
          b.sqrt_info = visual_sqrt_info();
          b.robust = RobustLoss{RobustLoss::Huber, config_.huber_delta};
          b.pixel = pixel;
          out.push_back(std::move(b));
        }
      }
    }
    return out;
  }

 private:
  struct Keyframe {
    std::int64_t id = 0;
    KeyframeState state;
    std::shared_ptr<const ImuPreintegral> imu_pre;
    std::vector<std::shared_ptr<const FootPreintegral>> foot_pres;
    std::vector<JointAngles> fk_meas;
    std::vector<bool> contact;
    std::vector<std::vector<FootRawStep>> foot_raw;  // per leg
    Eigen::MatrixXd imu_sqrt_info;
    std::vector<Eigen::MatrixXd> foot_sqrt_info;
  };

  struct Landmark {
    std::int64_t anchor_kf = -1;
    Vec2 bearing = Vec2::Zero();  // normalized coords in the anchor camera
    double inv_depth = 0.5;
    bool initialized = false;
    std::map<std::int64_t, Vec2> obs;
  };

  struct Prior {
    std::int64_t kf_id = -1;
    std::shared_ptr<const KeyframeState> mean;
    Eigen::MatrixXd sqrt_info;
  };

  struct LandmarkAcc {
    Eigen::VectorXd h_xl;
    double h_ll = 0.0;
    double g_l = 0.0;
  };

  struct MarginalCache {
    Eigen::MatrixXd h_damped;  // reduced, damped normal equations
    int num_states = 0;
  };

  void feet_from_fk(KeyframeState& state, const std::vector<JointAngles>& fk_meas) {
    state.feet.resize(robot_.num_legs());
    for (int l = 0; l < robot_.num_legs(); ++l) {
      const JointAngles q = l < static_cast<int>(fk_meas.size()) ? fk_meas[l] : JointAngles{};
      state.feet[l].Psi = state.R * fk_rotation(robot_.legs[l], q);
      state.feet[l].s = state.R * fk_position(robot_.legs[l], q) + state.p;
    }
  }

  void init_prior() {
    const int d = layout_.dim();
    Eigen::VectorXd sigmas(d);
    sigmas.segment<3>(layout_.p()).setConstant(config_.prior_sigma_p);
    sigmas.segment<3>(layout_.r()).setConstant(config_.prior_sigma_rot);
    sigmas.segment<3>(layout_.v()).setConstant(config_.prior_sigma_v);
    if (layout_.with_feet) {
      for (int l = 0; l < layout_.num_legs; ++l) {
        sigmas.segment<3>(layout_.psi(l)).setConstant(config_.prior_sigma_foot_rot);
        sigmas.segment<3>(layout_.s(l)).setConstant(config_.prior_sigma_foot_pos);
      }
    }
    sigmas.segment<3>(layout_.ba()).setConstant(config_.prior_sigma_ba);
    sigmas.segment<3>(layout_.bg()).setConstant(config_.prior_sigma_bg);

    prior_.kf_id = window_.front().id;
    prior_.mean = std::make_shared<KeyframeState>(window_.front().state);
    prior_.sqrt_info = sigmas.cwiseInverse().asDiagonal();
  }

  void ingest_features(std::int64_t kf_id, const std::vector<FeatureObservation>& features) {
    for (const FeatureObservation& f : features) {
      Landmark& lm = landmarks_[f.feature_id];
      if (lm.obs.empty()) {
        lm.anchor_kf = kf_id;
        lm.bearing = f.pixel;
      }
      lm.obs[kf_id] = f.pixel;
      if (!lm.initialized && lm.obs.size() >= 2 && lm.anchor_kf != kf_id) {
        triangulate(lm, f.pixel);
      }
    }
  }

  const KeyframeState* state_of(std::int64_t kf_id,
                                const std::vector<KeyframeState>& states) const {
    for (std::size_t w = 0; w < window_.size(); ++w) {
      if (window_[w].id == kf_id) return &states[w];
    }
    return nullptr;
  }

  bool in_window(std::int64_t kf_id) const {
    for (const Keyframe& kf : window_) {
      if (kf.id == kf_id) return true;
    }
    return false;
  }

  int window_index(std::int64_t kf_id) const {
    for (std::size_t w = 0; w < window_.size(); ++w) {
      if (window_[w].id == kf_id) return static_cast<int>(w);
    }
    return -1;
  }

  void triangulate(Landmark& lm, const Vec2& second_obs) {
    const KeyframeState* anchor = nullptr;
    const KeyframeState* other = nullptr;
    for (const Keyframe& kf : window_) {
      if (kf.id == lm.anchor_kf) anchor = &kf.state;
    }
    if (!window_.empty()) other = &window_.back().state;
    if (!anchor || !other) return;

    const auto [r_a, t_a] = camera_pose(*anchor, robot_.extrinsics);
    const auto [r_b, t_b] = camera_pose(*other, robot_.extrinsics);
    const Vec3 da = (r_a * Vec3(lm.bearing.x(), lm.bearing.y(), 1.0)).normalized();
    const Vec3 db = (r_b * Vec3(second_obs.x(), second_obs.y(), 1.0)).normalized();

    Eigen::Matrix<double, 3, 2> a;
    a.col(0) = da;
    a.col(1) = -db;
    const Eigen::Matrix2d ata = a.transpose() * a;
    double depth = config_.landmark_init_depth;
    if (std::abs(ata.determinant()) > 1e-9) {
      const Eigen::Vector2d ranges = ata.inverse() * (a.transpose() * (t_b - t_a));
      const Vec3 pa = t_a + ranges(0) * da;
      const Vec3 pb = t_b + ranges(1) * db;
      const Vec3 mid = 0.5 * (pa + pb);
      const double z = (r_a.inverse() * (mid - t_a)).z();
      if (z > config_.landmark_min_depth && z < config_.landmark_max_depth) depth = z;
    }
    lm.inv_depth = 1.0 / depth;
    lm.initialized = true;
  }

  bool both_in_contact(std::size_t w, int leg) const {
    const auto& ci = window_[w - 1].contact;
    const auto& cj = window_[w].contact;
    return static_cast<int>(ci.size()) > leg && static_cast<int>(cj.size()) > leg &&
           ci[leg] && cj[leg];
  }

  Eigen::MatrixXd fk_sqrt_info() const {
    Eigen::VectorXd diag(6);
    diag.head<3>() = config_.noise.cov_fk_rot;
    diag.tail<3>() = config_.noise.cov_fk_pos;
    return Eigen::MatrixXd(diag.cwiseSqrt().cwiseInverse().asDiagonal());
  }

  Eigen::MatrixXd visual_sqrt_info() const {
    return Eigen::MatrixXd(
        (1.0 / std::sqrt(std::max(config_.noise.cov_pixel, 1e-16))) *
        Eigen::Matrix2d::Identity());
  }

  Eigen::MatrixXd contact_sqrt_info() const {
    return Eigen::MatrixXd(
        Vec3(config_.cov_contact).cwiseSqrt().cwiseInverse().asDiagonal());
  }

  std::map<std::int64_t, double> active_landmarks(
      const std::vector<KeyframeState>& states) const {
    std::map<std::int64_t, double> out;
    if (!config_.use_visual) return out;
    for (const auto& [id, lm] : landmarks_) {
      if (!lm.initialized || !in_window(lm.anchor_kf)) continue;
      int in_win = 0;
      for (const auto& [kf_id, _] : lm.obs) {
        if (kf_id != lm.anchor_kf && in_window(kf_id)) ++in_win;
      }
      if (in_win >= 1) out[id] = lm.inv_depth;
    }
    (void)states;
    return out;
  }

  // Walks every active factor. With accumulate=false only the cost is
  // computed; otherwise H, g, and the landmark Schur terms fill in.
  template <bool accumulate>
  double walk_blocks(const std::vector<KeyframeState>& states,
                     const std::map<std::int64_t, double>& lambdas, Eigen::MatrixXd* h,
                     Eigen::VectorXd* g, std::map<std::int64_t, LandmarkAcc>* lm_acc,
                     int* skipped_visual) {
    const int d = layout_.dim();
    double cost = 0.0;

    auto add_unary = [&](int wi, const Eigen::VectorXd& r, const Eigen::MatrixXd& ji) {
      cost += 0.5 * r.squaredNorm();
      if constexpr (accumulate) {
        const int ci = wi * d;
        h->block(ci, ci, d, d).noalias() += ji.transpose() * ji;
        g->segment(ci, d).noalias() += ji.transpose() * r;
      }
    };
    auto add_binary = [&](int wi, int wj, const Eigen::VectorXd& r,
                          const Eigen::MatrixXd& ji, const Eigen::MatrixXd& jj) {
      cost += 0.5 * r.squaredNorm();
      if constexpr (accumulate) {
        const int ci = wi * d, cj = wj * d;
        h->block(ci, ci, d, d).noalias() += ji.transpose() * ji;
        h->block(cj, cj, d, d).noalias() += jj.transpose() * jj;
        h->block(ci, cj, d, d).noalias() += ji.transpose() * jj;
        h->block(cj, ci, d, d).noalias() += jj.transpose() * ji;
        g->segment(ci, d).noalias() += ji.transpose() * r;
        g->segment(cj, d).noalias() += jj.transpose() * r;
      }
    };

    // prior
    if (prior_.mean) {
      const int wi = window_index(prior_.kf_id);
      if (wi >= 0) {
        const Eigen::VectorXd r =
            prior_residual(states[wi], *prior_.mean, prior_.sqrt_info, layout_);
        if constexpr (accumulate) {
          add_unary(wi, r, prior_jacobian(states[wi], *prior_.mean, prior_.sqrt_info, layout_));
        } else {
          cost += 0.5 * r.squaredNorm();
        }
      }
    }

    for (std::size_t w = 1; w < window_.size(); ++w) {
      const Keyframe& kf = window_[w];
      const int wi = static_cast<int>(w) - 1;
      const int wj = static_cast<int>(w);
      const KeyframeState& xi = states[wi];
      const KeyframeState& xj = states[wj];

      if (config_.use_imu && kf.imu_pre) {
        const Eigen::VectorXd r =
            kf.imu_sqrt_info * imu_residual(xi, xj, *kf.imu_pre, config_.gravity);
        if constexpr (accumulate) {
          Eigen::MatrixXd ji, jj;
          imu_jacobians(xi, xj, *kf.imu_pre, config_.gravity, layout_, ji, jj);
          add_binary(wi, wj, r, kf.imu_sqrt_info * ji, kf.imu_sqrt_info * jj);
        } else {
          cost += 0.5 * r.squaredNorm();
        }
      }

      if (config_.use_foot_velocity) {
        for (std::size_t l = 0; l < kf.foot_pres.size(); ++l) {
          if (!kf.foot_pres[l]) continue;
          const Eigen::MatrixXd& si = kf.foot_sqrt_info[l];
          const Eigen::VectorXd r =
              si * foot_velocity_residual(xi, xj, static_cast<int>(l), *kf.foot_pres[l]);
          if constexpr (accumulate) {
            Eigen::MatrixXd ji, jj;
            foot_velocity_jacobians(xi, xj, static_cast<int>(l), *kf.foot_pres[l], layout_,
                                    ji, jj);
            add_binary(wi, wj, r, si * ji, si * jj);
          } else {
            cost += 0.5 * r.squaredNorm();
          }
        }
      }

      if (config_.use_nonslip_contact) {
        const Eigen::MatrixXd si = contact_sqrt_info();
        for (int l = 0; l < robot_.num_legs(); ++l) {
          if (!both_in_contact(w, l)) continue;
          const Eigen::VectorXd r = si * nonslip_contact_residual(xi, xj, l);
          if constexpr (accumulate) {
            Eigen::MatrixXd ji, jj;
            nonslip_contact_jacobians(xi, xj, l, layout_, ji, jj);
            add_binary(wi, wj, r, si * ji, si * jj);
          } else {
            cost += 0.5 * r.squaredNorm();
          }
        }
      }
    }

    if (config_.use_fk) {
      const Eigen::MatrixXd si = fk_sqrt_info();
      for (std::size_t w = 0; w < window_.size(); ++w) {
        const Keyframe& kf = window_[w];
        for (int l = 0; l < robot_.num_legs(); ++l) {
          const Eigen::VectorXd r =
              si * fk_residual(states[w], robot_.legs[l], l, kf.fk_meas[l]);
          if constexpr (accumulate) {
            add_unary(static_cast<int>(w), r,
                      si * fk_jacobian(states[w], robot_.legs[l], l, kf.fk_meas[l], layout_));
          } else {
            cost += 0.5 * r.squaredNorm();
          }
        }
      }
    }

    if (config_.use_visual) {
      const Eigen::MatrixXd si = visual_sqrt_info();
      const RobustLoss huber{RobustLoss::Huber, config_.huber_delta};
      for (const auto& [id, lam] : lambdas) {
        const Landmark& lm = landmarks_.at(id);
        const int wa = window_index(lm.anchor_kf);
        if (wa < 0) continue;
        const KeyframeState& xa = states[wa];
        for (const auto& [kf_id, pixel] : lm.obs) {
          if (kf_id == lm.anchor_kf) continue;
          const int wi = window_index(kf_id);
          if (wi < 0) continue;
          try {
            const Vec2 raw =
                visual_residual(states[wi], xa, lm.bearing, lam, pixel, robot_.extrinsics);
            Eigen::VectorXd r = si * raw;
            const double weight = robust_weight(huber, r.squaredNorm());
            cost += 0.5 * huber_rho(r.squaredNorm(), config_.huber_delta);
            if constexpr (accumulate) {
              r *= weight;
              Eigen::MatrixXd ji, ja;
              Eigen::Vector2d jl;
              visual_jacobians(states[wi], xa, lm.bearing, lam, robot_.extrinsics, layout_,
                               ji, ja, jl);
              ji = weight * si * ji;
              ja = weight * si * ja;
              jl = weight * si * jl;

              const int ci = wi * d, ca = wa * d;
              h->block(ci, ci, d, d).noalias() += ji.transpose() * ji;
              h->block(ca, ca, d, d).noalias() += ja.transpose() * ja;
              h->block(ci, ca, d, d).noalias() += ji.transpose() * ja;
              h->block(ca, ci, d, d).noalias() += ja.transpose() * ji;
              g->segment(ci, d).noalias() += ji.transpose() * r;
              g->segment(ca, d).noalias() += ja.transpose() * r;

              LandmarkAcc& acc = (*lm_acc)[id];
              if (acc.h_xl.size() == 0) {
                acc.h_xl = Eigen::VectorXd::Zero(h->rows());
              }
              acc.h_xl.segment(ci, d).noalias() += ji.transpose() * jl;
              acc.h_xl.segment(ca, d).noalias() += ja.transpose() * jl;
              acc.h_ll += jl.squaredNorm();
              acc.g_l += jl.dot(r);
            }
          } catch (const BehindCamera&) {
            if (skipped_visual) ++(*skipped_visual);
          }
        }
      }
    }
    return cost;
  }

  double evaluate_cost(const std::vector<KeyframeState>& states,
                       const std::map<std::int64_t, double>& lambdas, int* skipped) {
    return walk_blocks<false>(states, lambdas, nullptr, nullptr, nullptr, skipped);
  }

  double linearize(const std::vector<KeyframeState>& states,
                   const std::map<std::int64_t, double>& lambdas, Eigen::MatrixXd& h,
                   Eigen::VectorXd& g, std::map<std::int64_t, LandmarkAcc>& lm_acc) {
    const int n = static_cast<int>(window_.size()) * layout_.dim();
    h = Eigen::MatrixXd::Zero(n, n);
    g = Eigen::VectorXd::Zero(n);
    lm_acc.clear();
    return walk_blocks<true>(states, lambdas, &h, &g, &lm_acc, nullptr);
  }

  /// Marginal covariance block of window state `idx` from the cached damped
  /// normal equations (falls back to a fresh linearization).
  Eigen::MatrixXd marginal_block(int idx) {
    const int d = layout_.dim();
    if (!marginal_ || marginal_->num_states != static_cast<int>(window_.size())) {
      std::vector<KeyframeState> states;
      for (const Keyframe& kf : window_) states.push_back(kf.state);
      const auto lambdas = active_landmarks(states);
      Eigen::MatrixXd h;
      Eigen::VectorXd g;
      std::map<std::int64_t, LandmarkAcc> lm_acc;
      linearize(states, lambdas, h, g, lm_acc);
      h.diagonal() += config_.lm_init_lambda * h.diagonal().cwiseMax(1e-9);
      for (const auto& [id, acc] : lm_acc) {
        const double hll = acc.h_ll * (1.0 + config_.lm_init_lambda) + 1e-12;
        h.noalias() -= acc.h_xl * (acc.h_xl.transpose() / hll);
      }
      marginal_ = MarginalCache{std::move(h), static_cast<int>(window_.size())};
    }

    Eigen::LDLT<Eigen::MatrixXd> ldlt(marginal_->h_damped);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(marginal_->h_damped.rows(), d);
    rhs.block(idx * d, 0, d, d).setIdentity();
    Eigen::MatrixXd cov = ldlt.solve(rhs).block(idx * d, 0, d, d);
    cov = 0.5 * (cov + cov.transpose()).eval();
    return cov;
  }

  void reanchor_landmarks(std::int64_t dropped_id) {
    const KeyframeState* dropped_state = nullptr;
    for (const Keyframe& kf : window_) {
      if (kf.id == dropped_id) dropped_state = &kf.state;
    }
    for (auto it = landmarks_.begin(); it != landmarks_.end();) {
      Landmark& lm = it->second;
      lm.obs.erase(dropped_id);
      if (lm.anchor_kf == dropped_id) {
        bool rehomed = false;
        if (dropped_state && lm.initialized) {
          const Vec3 x_w =
              landmark_world_point(*dropped_state, robot_.extrinsics, lm.bearing, lm.inv_depth);
          // earliest surviving observation becomes the new anchor; the world
          // point is preserved exactly so surviving residuals are continuous
          for (const auto& [kf_id, pixel] : lm.obs) {
            const int wi = window_index(kf_id);
            if (wi < 0) continue;
            const auto [r_wc, t_wc] = camera_pose(window_[wi].state, robot_.extrinsics);
            const Vec3 x_c = r_wc.inverse() * (x_w - t_wc);
            if (x_c.z() <= config_.landmark_min_depth) continue;
            lm.anchor_kf = kf_id;
            lm.bearing = Vec2(x_c.x() / x_c.z(), x_c.y() / x_c.z());
            lm.inv_depth = 1.0 / x_c.z();
            rehomed = true;
            break;
          }
        }
        if (!rehomed) {
          it = landmarks_.erase(it);
          continue;
        }
      }
      if (lm.obs.empty()) {
        it = landmarks_.erase(it);
        continue;
      }
      ++it;
    }
  }

  void re_preintegrate_if_needed() {
    for (std::size_t w = 1; w < window_.size(); ++w) {
      Keyframe& kf = window_[w];
      const KeyframeState& prev = window_[w - 1].state;
      if (kf.imu_pre &&
          ((kf.imu_pre->bias_ref_gyro - prev.b_g).norm() > config_.bias_repre_threshold_gyro ||
           (kf.imu_pre->bias_ref_accel - prev.b_a).norm() >
               config_.bias_repre_threshold_accel)) {
        auto fresh = std::make_shared<ImuPreintegral>(
            repropagate(*kf.imu_pre, prev.b_g, prev.b_a, config_.noise));
        kf.imu_pre = fresh;
        kf.imu_sqrt_info = sqrt_information(imu_residual_covariance(
            *fresh, config_.cov_bias_accel_rw, config_.cov_bias_gyro_rw));
      }
      for (std::size_t l = 0; l < kf.foot_pres.size(); ++l) {
        if (!kf.foot_pres[l] || l >= kf.foot_raw.size() || kf.foot_raw[l].empty()) continue;
        if ((kf.foot_pres[l]->bias_ref_gyro - prev.b_g).norm() <=
            config_.bias_repre_threshold_gyro) {
          continue;
        }
        auto fresh = std::make_shared<FootPreintegral>(
            build_foot_preintegral(robot_.legs[l], static_cast<int>(l), kf.foot_raw[l],
                                   prev.b_g, config_.noise));
        kf.foot_pres[l] = fresh;
        kf.foot_sqrt_info[l] = sqrt_information(fresh->cov);
      }
    }
  }

  RobotModel robot_;
  EstimatorConfig config_;
  StateLayout layout_;
  KeyframeState initial_state_;

  std::deque<Keyframe> window_;
  std::map<std::int64_t, Landmark> landmarks_;
  Prior prior_;
  std::int64_t next_id_ = 0;
  std::optional<MarginalCache> marginal_;
};

}  // namespace step
