#include "wscloc/trajectory.hpp"

#include <Eigen/Geometry>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace wscloc::lie {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string format_tum_line(const TrajectoryEntry& entry) {
  Eigen::Quaterniond q(entry.pose.rotation().matrix());
  q.normalize();
  // Canonical sign so equal rotations print identically.
  if (q.w() < 0.0 || (q.w() == 0.0 && (q.x() < 0.0 || (q.x() == 0.0 && (q.y() < 0.0 || (q.y() == 0.0 && q.z() < 0.0)))))) {
    q.coeffs() = -q.coeffs();
  }
  const Vec3& t = entry.pose.translation();
  std::string line = fmt17(entry.timestamp);
  for (double v : {t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w(), entry.pose.scale()}) {
    line += ' ';
    line += fmt17(v);
  }
  return line;
}

TrajectoryEntry parse_tum_line(const std::string& line) {
  std::istringstream in(line);
  double ts, tx, ty, tz, qx, qy, qz, qw, s;
  if (!(in >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw >> s))
    throw std::invalid_argument("trajectory: malformed line: " + line);
  Eigen::Quaterniond q(qw, qx, qy, qz);
  if (q.norm() < 1e-12) throw std::invalid_argument("trajectory: zero quaternion");
  q.normalize();
  TrajectoryEntry entry;
  entry.timestamp = ts;
  entry.pose = Sim3Pose(Rotation::from_matrix_unchecked(q.toRotationMatrix()),
                        Vec3(tx, ty, tz), s);
  return entry;
}

void write_trajectory(const std::filesystem::path& path,
                      const std::vector<TrajectoryEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("trajectory: cannot open for writing: " + path.string());
  for (const auto& e : entries) out << format_tum_line(e) << '\n';
}

std::vector<TrajectoryEntry> read_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("trajectory: cannot open: " + path.string());
  std::vector<TrajectoryEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    entries.push_back(parse_tum_line(line));
  }
  return entries;
}

}  // namespace wscloc::lie
