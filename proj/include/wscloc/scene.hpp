#pragma once

#include "wscloc/image.hpp"
#include "wscloc/liegroup.hpp"

#include <cstdint>
#include <vector>

namespace wscloc::scene {

using lie::Vec3;

// One Gaussian emission blob. The center moves linearly with the time code,
// which is what makes the ground-truth scene time-dependent.
struct Blob {
  Vec3 center0 = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  double sigma_spatial = 0.1;
  double amplitude = 1.0;
  Vec3 color = Vec3::Constant(0.5);
};

struct BlobField {
  std::vector<Blob> blobs;

  // Throws std::invalid_argument when a blob violates the invariants
  // (positive amplitude and width, color components in [0, 1]).
  void validate() const;
};

struct FieldSample {
  double density = 0.0;
  Vec3 color = Vec3::Zero();
};

// density = sum of blob Gaussians at the time-advected centers; color is the
// density-weighted blend of blob colors (plain average below the floor).
FieldSample field_eval(const BlobField& field, const Vec3& x, double t);

struct PinholeCamera {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  double near = 0.1, far = 10.0;  // ray integration bounds
};

// Cameras on a spiral orbit around `target`, all looking at it, scale 1.
// Azimuth advances by 2*pi*turns/n per frame; elevation ramps linearly over
// elevation_range centered on the orbit plane.
std::vector<lie::Sim3Pose> make_orbit_rig(int n_frames, double radius, const Vec3& target,
                                          double elevation_range, double turns = 1.0);

struct Frame {
  img::ImageRGB image;
  img::ImageGray depth;  // expected termination depth under compositing weights
  int time_index = 0;
  double time_code = 0.0;
  lie::Sim3Pose gt_pose;    // camera-to-world
  lie::Sim3Pose init_pose;  // noisy starting estimate
};

struct FrameDataset {
  PinholeCamera camera;
  std::vector<Frame> frames;
};

struct PoseNoise {
  double trans_sigma = 0.0;     // meters
  double rot_sigma = 0.0;       // radians
  double logscale_sigma = 0.0;  // log-scale units
};

struct DatasetOptions {
  int blur_substeps = 1;
  PoseNoise noise;
  uint64_t seed = 0;
  int n_coarse = 64;  // render quality for the generated reference images
  int n_fine = 64;
  int threads = 1;
};

// Deterministic in (field, rig, camera, options): motion blur is simulated by
// averaging renders over a half-frame shutter window, depth comes from the
// nominal pose, and init poses are ground truth perturbed by Gaussian tangent
// noise with per-frame seed streams.
FrameDataset gen_dataset(const BlobField& field, const std::vector<lie::Sim3Pose>& rig,
                         const PinholeCamera& camera, const DatasetOptions& options);

}  // namespace wscloc::scene
