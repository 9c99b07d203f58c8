#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "step/so3.hpp"

namespace step {

struct TrajectoryPoint {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Rotation R;
};

using Trajectory = std::vector<TrajectoryPoint>;

namespace traj_detail {

inline Eigen::Quaterniond to_quaternion(const Rotation& r) {
  Eigen::Quaterniond q(r.matrix());
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  return q;
}

inline Rotation from_quaternion(double qx, double qy, double qz, double qw,
                                const std::string& where) {
  Eigen::Quaterniond q(qw, qx, qy, qz);
  if (std::abs(q.norm() - 1.0) > 1e-9) {
    throw ParseError(where + ": quaternion is not unit norm");
  }
  return Rotation::from_matrix(q.normalized().toRotationMatrix());
}

}  // namespace traj_detail

/// Plain-text "timestamp tx ty tz qx qy qz qw" lines, 9 significant digits.
inline void write_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw Error("write_trajectory: cannot open " + path);
  char line[256];
  for (const TrajectoryPoint& pt : traj) {
    const Eigen::Quaterniond q = traj_detail::to_quaternion(pt.R);
    std::snprintf(line, sizeof(line), "%.9g %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", pt.t,
                  pt.p.x(), pt.p.y(), pt.p.z(), q.x(), q.y(), q.z(), q.w());
    out << line;
  }
}

inline Trajectory read_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("read_trajectory: cannot open " + path);
  Trajectory traj;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double t, tx, ty, tz, qx, qy, qz, qw;
    if (!(ss >> t >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected 8 fields 'timestamp tx ty tz qx qy qz qw'");
    }
    if (!traj.empty() && t <= traj.back().t) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": timestamps must be strictly increasing");
    }
    TrajectoryPoint pt;
    pt.t = t;
    pt.p = Vec3(tx, ty, tz);
    pt.R = traj_detail::from_quaternion(qx, qy, qz, qw,
                                        path + ":" + std::to_string(line_no));
    traj.push_back(std::move(pt));
  }
  return traj;
}

/// Pose at time t by linear position interpolation and quaternion slerp.
/// t must lie within the trajectory's time range.
inline TrajectoryPoint interpolate(const Trajectory& traj, double t) {
  if (traj.empty() || t < traj.front().t - 1e-9 || t > traj.back().t + 1e-9) {
    throw NoOverlap("interpolate: query time outside the trajectory");
  }
  auto it = std::lower_bound(traj.begin(), traj.end(), t,
                             [](const TrajectoryPoint& a, double v) { return a.t < v; });
  if (it == traj.begin()) return traj.front();
  if (it == traj.end()) return traj.back();
  const TrajectoryPoint& b = *it;
  const TrajectoryPoint& a = *(it - 1);
  const double u = (t - a.t) / std::max(b.t - a.t, 1e-12);

  TrajectoryPoint out;
  out.t = t;
  out.p = (1.0 - u) * a.p + u * b.p;
  const Eigen::Quaterniond qa = traj_detail::to_quaternion(a.R);
  const Eigen::Quaterniond qb = traj_detail::to_quaternion(b.R);
  out.R = Rotation::from_matrix(qa.slerp(u, qb).toRotationMatrix());
  return out;
}

}  // namespace step
