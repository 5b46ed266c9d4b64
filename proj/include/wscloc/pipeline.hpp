#pragma once

#include "wscloc/features.hpp"
#include "wscloc/ifloss.hpp"
#include "wscloc/optim.hpp"
#include "wscloc/render.hpp"
#include "wscloc/scene.hpp"

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wscloc::pipeline {

using lie::Vec3;

// Raised when the stage-1 loop trips its divergence guard.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Stage1Config {
  int iters = 600;
  int rays_per_frame = 64;
  optim::BlockLearningRates lrs;
  render::RenderConfig render;
  render::MlpFieldConfig mlp;
  std::string backend = "mlp";  // "mlp" or "blob"
  scene::BlobField blob_init;   // starting parameters for the blob backend
  double alpha_schedule_frac = 0.3;
  double keypoint_mix = 0.5;
  int max_keypoints = 64;
  double nms_radius = 3.0;
  uint64_t seed = 1;
  bool ablate_sc = false;  // freeze the log-scale block at its noisy init
  bool ablate_te = false;  // disable time conditioning
  int threads = 1;
};

struct Stage1Result {
  std::shared_ptr<render::RadianceField> field;
  std::vector<lie::Sim3Pose> refined_poses;
  std::vector<double> loss_history;
};

// Joint field + pose optimization: per iteration, a keypoint-weighted pixel
// batch per frame drives Adam updates of the field parameters and of each
// frame's pose tangent at independent rho/phi/sigma rates.
Stage1Result stage1_train(const scene::FrameDataset& dataset, const Stage1Config& cfg);

struct RvsNoise {
  double trans = 0.2;     // meters, ball radius
  double rot_deg = 10.0;  // degrees, max rotation angle
};

struct SyntheticView {
  img::ImageRGB image;
  lie::Sim3Pose pose;
  double time_code = 0.0;
  int source_frame = -1;
};

// Random view synthesis around the given poses: per source pose, multiplier
// perturbed views rendered by the (trained) field at the source frame's time
// code.
std::vector<SyntheticView> rvs_generate(const render::RadianceField& field,
                                        std::span<const lie::Sim3Pose> poses,
                                        std::span<const double> time_codes, int multiplier,
                                        const RvsNoise& noise,
                                        const scene::PinholeCamera& camera,
                                        const render::RenderConfig& rc, uint64_t seed,
                                        int threads = 1);

inline constexpr int kRegressorInputSize = 16;  // 16x16 grayscale input

struct RegressorModel {
  optim::DenseNet net;               // 256 -> ... -> 7 tangent coordinates
  lie::Sim3Pose reference_pose;      // decoded pose = exp(tangent) o reference
};

Eigen::VectorXd regressor_input(const img::ImageRGB& image);
lie::Sim3Pose regressor_predict(const RegressorModel& model, const img::ImageRGB& image);

struct Stage2Config {
  int iters = 1200;
  optim::BlockLearningRates lrs;
  double beta = 1.0;    // rotation term weight of the pose loss
  double gamma = 1.0;   // log-scale term weight
  double lambda = 0.1;  // inter-frame loss weight
  int rvs_multiplier = 10;
  RvsNoise rvs_noise;
  bool ablate_rvs = false;
  bool ablate_if = false;
  int depth_refresh = 25;  // iterations between depth re-renders
  int max_matches = 32;
  double match_ratio = 0.8;
  int max_keypoints = 64;
  double nms_radius = 3.0;
  int regressor_hidden = 64;
  int regressor_layers = 2;
  render::RenderConfig render;  // depth rendering and RVS image quality
  uint64_t seed = 1;
  int threads = 1;
};

struct Stage2Result {
  RegressorModel model;
  std::vector<double> loss_history;
  int rvs_count = 0;
};

// Pose-regressor training against the stage-1 labels: pose loss on every
// (real + synthesized) view plus the inter-frame geometric loss on
// consecutive real pairs, with depths rendered by the frozen field at the
// regressor's current predictions.
Stage2Result stage2_train(const scene::FrameDataset& dataset,
                          std::span<const lie::Sim3Pose> labels,
                          const render::RadianceField& field, const Stage2Config& cfg);

// Closed-form least-squares similarity aligning est onto gt (Umeyama with
// reflection correction). Throws std::invalid_argument on degenerate input.
lie::Sim3Pose umeyama_align(std::span<const Vec3> est, std::span<const Vec3> gt);

struct EvalReport {
  double median_translation_error = 0.0;  // meters, lower median
  double median_rotation_error_deg = 0.0;
  std::vector<double> per_frame_translation;
  std::vector<double> per_frame_rotation_deg;
  lie::Sim3Pose alignment;
};

EvalReport evaluate(std::span<const lie::Sim3Pose> est, std::span<const lie::Sim3Pose> gt,
                    bool align);

// Mean per-frame PSNR of the field re-rendered at the given poses against
// the dataset images.
double rerender_psnr(const render::RadianceField& field, const scene::FrameDataset& dataset,
                     std::span<const lie::Sim3Pose> poses, const render::RenderConfig& rc,
                     int threads = 1);

double lower_median(std::vector<double> values);

}  // namespace wscloc::pipeline
