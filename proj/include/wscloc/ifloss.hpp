#pragma once

#include "wscloc/features.hpp"
#include "wscloc/liegroup.hpp"

#include <span>
#include <vector>

namespace wscloc::ifloss {

using lie::Mat3;
using lie::Vec3;
using feat::Vec2;

struct PointCloud {
  std::vector<Vec3> points;
  int source_frame = -1;
};

struct GaussianFit {
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
};

// Lift depths at normalized image coordinates to 3-D and transform by the
// camera-to-world pose. Pairs with non-positive depth are dropped (count
// logged).
PointCloud backproject(std::span<const double> depths, std::span<const Vec2> coords,
                       const lie::Sim3Pose& pose);

// Relative pose mapping frame-i camera coordinates into frame i+1.
lie::Sim3Pose relative_pose(const lie::Sim3Pose& pose_i, const lie::Sim3Pose& pose_i1);

// Mean squared Euclidean distance over index-matched pairs:
// (1/n) sum_k | a_k - T b_k |^2.
double pc_loss(const PointCloud& cloud_a, const PointCloud& cloud_b, const lie::Sim3Pose& t);

// Sample mean and covariance (n-1 divisor) with a 1e-8 I floor.
GaussianFit gaussian_fit(const PointCloud& cloud);

// Closed-form KL divergence between two Gaussian fits, KL(a || b).
double gaussian_kl(const GaussianFit& a, const GaussianFit& b);

// Matched-feature geometry of one consecutive frame pair. Depths and
// normalized coordinates are index-aligned through the match set.
struct FramePair {
  lie::Sim3Pose pose_i, pose_i1;
  std::vector<double> depth_i, depth_i1;
  std::vector<Vec2> coord_i, coord_i1;
};

// Point-cloud loss between the frame-(i+1) camera cloud and the
// relative-pose-transformed frame-i cloud, plus the KL term between their
// Gaussian fits when at least 4 matches survive.
double if_loss(const FramePair& pair);

enum class PoseSide { First, Second };

// Gradient of if_loss with respect to the left-retraction tangent of one
// pose: analytic for the point-cloud term, central finite differences
// (h = 1e-6) for the KL term.
lie::Sim3Tangent grad_if_loss(const FramePair& pair, PoseSide side);

}  // namespace wscloc::ifloss
