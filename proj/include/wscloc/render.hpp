#pragma once

#include "wscloc/liegroup.hpp"
#include "wscloc/optim.hpp"
#include "wscloc/rng.hpp"
#include "wscloc/scene.hpp"

#include <memory>
#include <span>
#include <vector>

namespace wscloc::render {

using lie::Vec3;

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();  // unit length
  double t_near = 0.0, t_far = 1.0;
};

struct PixelCoord {
  int u = 0, v = 0;
};

// Windowed (coarse-to-fine) positional encoding state. alpha sweeps from 0
// (raw input only) to n_freqs (all frequency bands open).
struct EncodingConfig {
  int n_freqs = 0;
  double alpha = 0.0;
};

// Window weight of frequency band j (1-based).
double encoding_window(const EncodingConfig& cfg, int j);

// [x, w_1 sin(2^0 pi x), w_1 cos(2^0 pi x), ..., w_L sin(2^{L-1} pi x), ...]
Eigen::VectorXd positional_encoding(const Eigen::VectorXd& x, const EncodingConfig& cfg);

struct RenderOutput {
  Vec3 rgb = Vec3::Zero();
  double depth = 0.0;
  std::vector<double> weights;
  double opacity = 0.0;
};

std::vector<Ray> gen_rays(const scene::PinholeCamera& camera, const lie::Sim3Pose& pose,
                          std::span<const PixelCoord> pixels);
Ray gen_ray(const scene::PinholeCamera& camera, const lie::Sim3Pose& pose, PixelCoord pixel);

// n depths in [t_near, t_far]: stratum midpoints, or one uniform draw per
// stratum when stratified.
std::vector<double> sample_coarse(const Ray& ray, int n, bool stratified, util::Rng& rng);

// Inverse-CDF draws from the piecewise-constant pdf given by the coarse
// weights over the coarse bins, merged with the coarse depths and sorted.
// All-zero weights fall back to a uniform pdf.
std::vector<double> sample_fine(const Ray& ray, std::span<const double> coarse_depths,
                                std::span<const double> coarse_weights, int n, util::Rng& rng);

// One-neighborhood max blur applied to the coarse weights before the fine
// pdf is built, so absorption fronts straddling a bin boundary still receive
// fine samples.
std::vector<double> fine_pdf_weights(std::span<const double> weights);

// Discrete emission-absorption compositing with alpha_i = 1 - exp(-density
// * delta); the last interval extends to t_far.
RenderOutput composite(std::span<const double> depths, std::span<const double> densities,
                       std::span<const Vec3> colors, double t_far);

// Queryable differentiable field: (3-D point, time code) -> (density, color).
class RadianceField {
 public:
  virtual ~RadianceField() = default;

  virtual Eigen::Index param_count() const = 0;
  virtual Eigen::VectorXd params() const = 0;
  virtual void set_params(const Eigen::VectorXd& p) = 0;

  virtual void eval(std::span<const Vec3> xs, double time_code, std::span<double> density,
                    std::span<Vec3> color) const = 0;

  // Reverse pass for the same query points: given upstream gradients with
  // respect to density and color, accumulate gradients with respect to the
  // query positions (when x_grad is non-empty) and the field parameters
  // (when param_grad is non-null; sized on first use).
  virtual void eval_grad(std::span<const Vec3> xs, double time_code,
                         std::span<const double> d_density, std::span<const Vec3> d_color,
                         std::span<Vec3> x_grad, Eigen::VectorXd* param_grad) const = 0;

  scene::FieldSample eval_one(const Vec3& x, double time_code) const;
};

// Analytic blob-mixture backend wrapping the scene ground truth. Parameters
// are the raw blob fields in order (center0, velocity, sigma, amplitude,
// color) per blob.
class BlobFieldBackend final : public RadianceField {
 public:
  explicit BlobFieldBackend(scene::BlobField field);

  Eigen::Index param_count() const override;
  Eigen::VectorXd params() const override;
  void set_params(const Eigen::VectorXd& p) override;
  void eval(std::span<const Vec3> xs, double time_code, std::span<double> density,
            std::span<Vec3> color) const override;
  void eval_grad(std::span<const Vec3> xs, double time_code, std::span<const double> d_density,
                 std::span<const Vec3> d_color, std::span<Vec3> x_grad,
                 Eigen::VectorXd* param_grad) const override;

  void set_time_enabled(bool enabled) { time_enabled_ = enabled; }
  const scene::BlobField& field() const { return field_; }

 private:
  scene::BlobField field_;
  bool time_enabled_ = true;
};

struct MlpFieldConfig {
  int n_freqs_xyz = 6;
  int n_freqs_time = 4;
  int hidden_width = 48;
  int hidden_layers = 3;
  double pos_scale = 0.25;  // maps scene units into the encoding domain
};

// Tiny MLP backend: windowed positional encoding of the scaled position
// concatenated with the time encoding, softplus density head, sigmoid color
// head.
class MlpField final : public RadianceField {
 public:
  MlpField(const MlpFieldConfig& cfg, uint64_t init_seed);

  Eigen::Index param_count() const override;
  Eigen::VectorXd params() const override;
  void set_params(const Eigen::VectorXd& p) override;
  void eval(std::span<const Vec3> xs, double time_code, std::span<double> density,
            std::span<Vec3> color) const override;
  void eval_grad(std::span<const Vec3> xs, double time_code, std::span<const double> d_density,
                 std::span<const Vec3> d_color, std::span<Vec3> x_grad,
                 Eigen::VectorXd* param_grad) const override;

  void set_alpha(double alpha);  // window progress in [0, n_freqs_xyz]
  double alpha() const { return enc_xyz_.alpha; }
  void set_time_enabled(bool enabled) { time_enabled_ = enabled; }

  const optim::DenseNet& net() const { return net_; }
  void set_net(optim::DenseNet net);
  const MlpFieldConfig& config() const { return cfg_; }

 private:
  Eigen::MatrixXd encode(std::span<const Vec3> xs, double time_code) const;

  MlpFieldConfig cfg_;
  EncodingConfig enc_xyz_, enc_time_;
  bool time_enabled_ = true;
  optim::DenseNet net_;
};

struct RenderConfig {
  int n_coarse = 32;
  int n_fine = 32;
  bool stratified = true;
  Vec3 background = Vec3::Zero();
};

RenderOutput render_pixel(const RadianceField& field, const scene::PinholeCamera& camera,
                          const lie::Sim3Pose& pose, double time_code, PixelCoord pixel,
                          const RenderConfig& cfg, util::Rng& rng);

img::ImageRGB render_image(const RadianceField& field, const scene::PinholeCamera& camera,
                           const lie::Sim3Pose& pose, double time_code, const RenderConfig& cfg,
                           int threads = 1);

struct ImageDepthRender {
  img::ImageRGB rgb;
  img::ImageGray depth;
};

// One pass producing both the color image and the expected-depth map.
ImageDepthRender render_image_depth(const RadianceField& field,
                                    const scene::PinholeCamera& camera,
                                    const lie::Sim3Pose& pose, double time_code,
                                    const RenderConfig& cfg, int threads = 1);

// Depth of the fine pass at one pixel (expected termination depth).
double render_depth(const RadianceField& field, const scene::PinholeCamera& camera,
                    const lie::Sim3Pose& pose, double time_code, PixelCoord pixel,
                    const RenderConfig& cfg);

// Mean squared error over all channels.
double photometric_loss(std::span<const Vec3> rendered, std::span<const Vec3> reference);

// Per-pixel sample depths frozen at gradient time; gradients flow through the
// sample world positions x = o + t d, never through the sampler.
struct FrozenSamples {
  PixelCoord pixel;
  std::vector<double> depths;
};

FrozenSamples freeze_samples(const RadianceField& field, const scene::PinholeCamera& camera,
                             const lie::Sim3Pose& pose, double time_code, PixelCoord pixel,
                             const RenderConfig& cfg, util::Rng& rng);

// Forward render at fixed sample depths (the surrogate the gradients and the
// finite-difference checks share).
Vec3 render_frozen(const RadianceField& field, const scene::PinholeCamera& camera,
                   const lie::Sim3Pose& pose, double time_code, const FrozenSamples& samples,
                   const RenderConfig& cfg);

struct BatchGradResult {
  double loss = 0.0;
  lie::Sim3Tangent pose_grad;
  Eigen::VectorXd field_grad;
  std::vector<FrozenSamples> frozen;  // one entry per pixel
};

// Photometric loss over a pixel batch with analytic gradients with respect
// to the left-retraction pose tangent and the field parameters.
BatchGradResult render_batch_grad(const RadianceField& field, const scene::PinholeCamera& camera,
                                  const lie::Sim3Pose& pose, double time_code,
                                  std::span<const PixelCoord> pixels,
                                  std::span<const Vec3> reference, const RenderConfig& cfg,
                                  util::Rng& rng, bool want_pose, bool want_field,
                                  const std::vector<FrozenSamples>* reuse_frozen = nullptr);

lie::Sim3Tangent grad_pose(const RadianceField& field, const scene::PinholeCamera& camera,
                           const lie::Sim3Pose& pose, double time_code,
                           std::span<const PixelCoord> pixels, std::span<const Vec3> reference,
                           const RenderConfig& cfg, util::Rng& rng);

Eigen::VectorXd grad_field(const RadianceField& field, const scene::PinholeCamera& camera,
                           const lie::Sim3Pose& pose, double time_code,
                           std::span<const PixelCoord> pixels, std::span<const Vec3> reference,
                           const RenderConfig& cfg, util::Rng& rng);

// Pixel sampler mixing a uniform distribution with Gaussian windows (sigma =
// 2 px) around the given keypoints; used to spend rays in feature-rich areas.
struct KeypointPixel {
  double u = 0.0, v = 0.0;
};
std::vector<PixelCoord> keypoint_weighted_pixels(std::span<const KeypointPixel> keypoints,
                                                 int width, int height, int n, double mix,
                                                 util::Rng& rng);

}  // namespace wscloc::render
