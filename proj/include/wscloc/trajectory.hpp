#pragma once

#include "wscloc/liegroup.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace wscloc::lie {

struct TrajectoryEntry {
  double timestamp = 0.0;
  Sim3Pose pose;
};

// One pose per line, TUM format extended with a trailing scale column:
//   timestamp tx ty tz qx qy qz qw s
// Floats are written with 17 significant digits so reruns are byte-identical
// and values round-trip exactly.
std::string format_tum_line(const TrajectoryEntry& entry);
TrajectoryEntry parse_tum_line(const std::string& line);

void write_trajectory(const std::filesystem::path& path,
                      const std::vector<TrajectoryEntry>& entries);
std::vector<TrajectoryEntry> read_trajectory(const std::filesystem::path& path);

}  // namespace wscloc::lie
