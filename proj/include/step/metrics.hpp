#pragma once

#include "step/trajectory.hpp"

namespace step {

/// Absolute trajectory error: RMSE of position differences with the estimate
/// interpolated at ground-truth stamps. No alignment transform is applied
/// (starting points coincide by construction).
inline double ate(const Trajectory& est, const Trajectory& gt) {
  if (est.empty() || gt.empty()) throw NoOverlap("ate: empty trajectory");
  const double t0 = std::max(est.front().t, gt.front().t);
  const double t1 = std::min(est.back().t, gt.back().t);
  if (t1 <= t0) throw NoOverlap("ate: trajectories do not overlap in time");

  double sum = 0.0;
  long count = 0;
  for (const TrajectoryPoint& g : gt) {
    if (g.t < t0 - 1e-12 || g.t > t1 + 1e-12) continue;
    const TrajectoryPoint e = interpolate(est, std::clamp(g.t, t0, t1));
    sum += (e.p - g.p).squaredNorm();
    ++count;
  }
  if (count == 0) throw NoOverlap("ate: no ground-truth stamps inside the overlap");
  return std::sqrt(sum / count);
}

/// Relative pose error over a fixed path length: for every pair of
/// ground-truth poses `delta` meters apart along arc length, the RMSE of the
/// translation of (T_gt,ab)^-1 (T_est,ab).
inline double rpe(const Trajectory& est, const Trajectory& gt, double delta = 1.0) {
  if (est.empty() || gt.empty()) throw NoOverlap("rpe: empty trajectory");
  const double t0 = std::max(est.front().t, gt.front().t);
  const double t1 = std::min(est.back().t, gt.back().t);
  if (t1 <= t0) throw NoOverlap("rpe: trajectories do not overlap in time");

  std::vector<std::size_t> idx;  // ground-truth samples inside the overlap
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i].t >= t0 - 1e-12 && gt[i].t <= t1 + 1e-12) idx.push_back(i);
  }
  if (idx.size() < 2) throw NoOverlap("rpe: no ground-truth stamps inside the overlap");

  std::vector<double> arc(idx.size(), 0.0);
  for (std::size_t k = 1; k < idx.size(); ++k) {
    arc[k] = arc[k - 1] + (gt[idx[k]].p - gt[idx[k - 1]].p).norm();
  }
  if (arc.back() < delta) {
    throw InsufficientLength("rpe: trajectory shorter than the evaluation distance");
  }

  std::vector<TrajectoryPoint> est_at;  // estimate interpolated at gt stamps
  est_at.reserve(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    est_at.push_back(interpolate(est, std::clamp(gt[idx[k]].t, t0, t1)));
  }

  double sum = 0.0;
  long count = 0;
  std::size_t b = 0;
  for (std::size_t a = 0; a < idx.size(); ++a) {
    while (b < idx.size() && arc[b] - arc[a] < delta) ++b;
    if (b >= idx.size()) break;
    const TrajectoryPoint& ga = gt[idx[a]];
    const TrajectoryPoint& gb = gt[idx[b]];
    const Vec3 t_gt = ga.R.inverse() * (gb.p - ga.p);
    const Vec3 t_est = est_at[a].R.inverse() * (est_at[b].p - est_at[a].p);
    // translation of (T_gt,ab)^-1 (T_est,ab)
    const Rotation r_gt_ab = ga.R.inverse() * gb.R;
    sum += (r_gt_ab.inverse() * (t_est - t_gt)).squaredNorm();
    ++count;
  }
  if (count == 0) {
    throw InsufficientLength("rpe: no pose pairs at the evaluation distance");
  }
  return std::sqrt(sum / count);
}

/// Rigid SE(3) alignment of the estimate onto the ground truth (opt-in for
/// external datasets; never applied by default).
inline Trajectory align_se3(const Trajectory& est, const Trajectory& gt) {
  if (est.empty() || gt.empty()) throw NoOverlap("align_se3: empty trajectory");
  const double t0 = std::max(est.front().t, gt.front().t);
  const double t1 = std::min(est.back().t, gt.back().t);
  if (t1 <= t0) throw NoOverlap("align_se3: trajectories do not overlap");

  std::vector<Vec3> src, dst;
  for (const TrajectoryPoint& g : gt) {
    if (g.t < t0 || g.t > t1) continue;
    src.push_back(interpolate(est, g.t).p);
    dst.push_back(g.p);
  }
  Eigen::MatrixXd a(3, src.size()), b(3, dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    a.col(i) = src[i];
    b.col(i) = dst[i];
  }
  const Eigen::Matrix4d t = Eigen::umeyama(a, b, false);
  const Rotation r_align = Rotation::from_matrix(t.topLeftCorner<3, 3>());
  const Vec3 t_align = t.topRightCorner<3, 1>();

  Trajectory out = est;
  for (TrajectoryPoint& pt : out) {
    pt.p = r_align * pt.p + t_align;
    pt.R = r_align * pt.R;
  }
  return out;
}

}  // namespace step
