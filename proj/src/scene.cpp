#include "wscloc/scene.hpp"

#include "wscloc/parallel.hpp"
#include "wscloc/render.hpp"
#include "wscloc/rng.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <stdexcept>

namespace wscloc::scene {

void BlobField::validate() const {
  for (const auto& b : blobs) {
    if (!(b.amplitude > 0.0)) throw std::invalid_argument("BlobField: amplitude must be > 0");
    if (!(b.sigma_spatial > 0.0)) throw std::invalid_argument("BlobField: sigma must be > 0");
    for (int k = 0; k < 3; ++k)
      if (b.color[k] < 0.0 || b.color[k] > 1.0)
        throw std::invalid_argument("BlobField: color components must lie in [0, 1]");
    if (!b.center0.allFinite() || !b.velocity.allFinite())
      throw std::invalid_argument("BlobField: non-finite blob");
  }
}

FieldSample field_eval(const BlobField& field, const Vec3& x, double t) {
  FieldSample out;
  Vec3 numer = Vec3::Zero();
  for (const auto& b : field.blobs) {
    const Vec3 center = b.center0 + t * b.velocity;
    const double s2 = b.sigma_spatial * b.sigma_spatial;
    const double g = b.amplitude * std::exp(-(x - center).squaredNorm() / (2.0 * s2));
    out.density += g;
    numer += g * b.color;
  }
  if (out.density < 1e-12) {
    if (!field.blobs.empty()) {
      for (const auto& b : field.blobs) out.color += b.color;
      out.color /= static_cast<double>(field.blobs.size());
    }
  } else {
    out.color = numer / out.density;
  }
  return out;
}

std::vector<lie::Sim3Pose> make_orbit_rig(int n_frames, double radius, const Vec3& target,
                                          double elevation_range, double turns) {
  if (n_frames < 2) throw std::invalid_argument("make_orbit_rig: need at least 2 frames");
  std::vector<lie::Sim3Pose> rig;
  rig.reserve(n_frames);
  const Vec3 up = Vec3::UnitZ();
  for (int k = 0; k < n_frames; ++k) {
    const double az = 2.0 * M_PI * turns * k / n_frames;
    const double elev = elevation_range * (static_cast<double>(k) / (n_frames - 1) - 0.5);
    const Vec3 position =
        target + radius * Vec3(std::cos(az) * std::cos(elev), std::sin(az) * std::cos(elev),
                               std::sin(elev));
    const Vec3 forward = (target - position).normalized();
    Vec3 hint = up;
    if (std::abs(forward.dot(up)) > 0.999) hint = Vec3::UnitX();
    const Vec3 right = forward.cross(hint).normalized();
    const Vec3 down = forward.cross(right);
    lie::Mat3 r;  // camera axes: x right, y down, z forward
    r.col(0) = right;
    r.col(1) = down;
    r.col(2) = forward;
    rig.emplace_back(lie::Rotation::from_matrix_unchecked(r), position, 1.0);
  }
  return rig;
}

namespace {

// Geodesic interpolation between consecutive rig poses (rotation slerp via
// the so(3) log, linear translation, geometric scale).
lie::Sim3Pose interpolate_pose(const lie::Sim3Pose& a, const lie::Sim3Pose& b, double f) {
  const lie::Vec3 dphi = lie::so3_log(a.rotation().transposed() * b.rotation());
  const lie::Rotation r = a.rotation() * lie::so3_exp(f * dphi);
  const Vec3 t = (1.0 - f) * a.translation() + f * b.translation();
  const double s = std::exp((1.0 - f) * std::log(a.scale()) + f * std::log(b.scale()));
  return lie::Sim3Pose(r, t, s);
}

}  // namespace

FrameDataset gen_dataset(const BlobField& field, const std::vector<lie::Sim3Pose>& rig,
                         const PinholeCamera& camera, const DatasetOptions& options) {
  field.validate();
  if (options.blur_substeps < 1)
    throw std::invalid_argument("gen_dataset: blur_substeps must be >= 1");
  const int n = static_cast<int>(rig.size());
  if (n < 1) throw std::invalid_argument("gen_dataset: empty rig");

  const render::BlobFieldBackend backend(field);
  render::RenderConfig rc;
  rc.n_coarse = options.n_coarse;
  rc.n_fine = options.n_fine;
  rc.stratified = false;

  FrameDataset dataset;
  dataset.camera = camera;
  dataset.frames.resize(n);

  util::parallel_for(n, options.threads, [&](int i) {
    Frame& frame = dataset.frames[i];
    frame.time_index = i;
    frame.time_code = static_cast<double>(i) / std::max(1, n - 1);
    frame.gt_pose = rig[i];

    const lie::Sim3Pose& next = rig[std::min(i + 1, n - 1)];
    const double t_next = static_cast<double>(std::min(i + 1, n - 1)) / std::max(1, n - 1);

    img::ImageRGB accum(camera.width, camera.height);
    for (int k = 0; k < options.blur_substeps; ++k) {
      // Half-frame shutter window: fractions in [0, 0.5).
      const double f = k * 0.5 / options.blur_substeps;
      const lie::Sim3Pose pose_k = interpolate_pose(rig[i], next, f);
      const double time_k = frame.time_code + f * (t_next - frame.time_code);
      img::ImageRGB sub;
      if (k == 0) {
        // f == 0 is the nominal pose; its pass also provides the depth map.
        render::ImageDepthRender nominal =
            render::render_image_depth(backend, camera, pose_k, time_k, rc, 1);
        sub = std::move(nominal.rgb);
        frame.depth = std::move(nominal.depth);
      } else {
        sub = render::render_image(backend, camera, pose_k, time_k, rc, 1);
      }
      for (size_t p = 0; p < accum.px.size(); ++p) accum.px[p] += sub.px[p];
    }
    for (auto& px : accum.px) px /= options.blur_substeps;
    frame.image = std::move(accum);

    util::Rng rng(util::mix_seed(options.seed, static_cast<uint64_t>(i)));
    const lie::Sim3Tangent noise(rng.normal3(options.noise.trans_sigma),
                                 rng.normal3(options.noise.rot_sigma),
                                 options.noise.logscale_sigma * rng.normal());
    frame.init_pose =
        (options.noise.trans_sigma == 0.0 && options.noise.rot_sigma == 0.0 &&
         options.noise.logscale_sigma == 0.0)
            ? frame.gt_pose
            : lie::sim3_retract(frame.gt_pose, noise);
  });

  return dataset;
}

}  // namespace wscloc::scene
