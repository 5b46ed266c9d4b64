#include "wscloc/ifloss.hpp"

#include "wscloc/logging.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <stdexcept>

namespace wscloc::ifloss {

PointCloud backproject(std::span<const double> depths, std::span<const Vec2> coords,
                       const lie::Sim3Pose& pose) {
  if (depths.size() != coords.size())
    throw std::invalid_argument("backproject: depth/coordinate count mismatch");
  PointCloud cloud;
  cloud.points.reserve(depths.size());
  int dropped = 0;
  for (size_t k = 0; k < depths.size(); ++k) {
    if (!(depths[k] > 0.0)) {
      ++dropped;
      continue;
    }
    const Vec3 cam_point(depths[k] * coords[k][0], depths[k] * coords[k][1], depths[k]);
    cloud.points.push_back(lie::sim3_apply(pose, cam_point));
  }
  if (dropped > 0)
    util::log_debug("backproject: dropped " + std::to_string(dropped) +
                    " non-positive depths");
  return cloud;
}

lie::Sim3Pose relative_pose(const lie::Sim3Pose& pose_i, const lie::Sim3Pose& pose_i1) {
  return lie::sim3_compose(lie::sim3_inverse(pose_i1), pose_i);
}

double pc_loss(const PointCloud& cloud_a, const PointCloud& cloud_b, const lie::Sim3Pose& t) {
  if (cloud_a.points.empty() || cloud_a.points.size() != cloud_b.points.size())
    throw std::invalid_argument("pc_loss: clouds must be non-empty and index-matched");
  double sum = 0.0;
  for (size_t k = 0; k < cloud_a.points.size(); ++k)
    sum += (cloud_a.points[k] - lie::sim3_apply(t, cloud_b.points[k])).squaredNorm();
  return sum / static_cast<double>(cloud_a.points.size());
}

GaussianFit gaussian_fit(const PointCloud& cloud) {
  const size_t n = cloud.points.size();
  if (n < 4) throw std::invalid_argument("gaussian_fit: need at least 4 points");
  GaussianFit fit;
  fit.mean = Vec3::Zero();
  for (const Vec3& p : cloud.points) fit.mean += p;
  fit.mean /= static_cast<double>(n);
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : cloud.points) {
    const Vec3 d = p - fit.mean;
    cov += d * d.transpose();
  }
  fit.cov = cov / static_cast<double>(n - 1) + 1e-8 * Mat3::Identity();
  return fit;
}

double gaussian_kl(const GaussianFit& a, const GaussianFit& b) {
  const Eigen::LLT<Mat3> llt_b(b.cov);
  if (llt_b.info() != Eigen::Success)
    throw std::runtime_error("gaussian_kl: covariance not positive definite");
  const Mat3 b_inv = llt_b.solve(Mat3::Identity());
  const Vec3 dm = b.mean - a.mean;
  const double log_det_a = std::log(a.cov.determinant());
  const double log_det_b = std::log(b.cov.determinant());
  return 0.5 * ((b_inv * a.cov).trace() + dm.dot(b_inv * dm) - 3.0 + log_det_b - log_det_a);
}

namespace {

struct PairGeometry {
  std::vector<Vec3> cam_i;   // frame-i camera points d * (x, y, 1)
  std::vector<Vec3> cam_i1;  // frame-(i+1) camera points
};

PairGeometry filter_pair(const FramePair& pair) {
  const size_t n = pair.depth_i.size();
  if (pair.depth_i1.size() != n || pair.coord_i.size() != n || pair.coord_i1.size() != n)
    throw std::invalid_argument("if_loss: pair arrays must be index-aligned");
  PairGeometry geo;
  int dropped = 0;
  for (size_t k = 0; k < n; ++k) {
    if (!(pair.depth_i[k] > 0.0) || !(pair.depth_i1[k] > 0.0)) {
      ++dropped;
      continue;
    }
    geo.cam_i.emplace_back(pair.depth_i[k] * pair.coord_i[k][0],
                           pair.depth_i[k] * pair.coord_i[k][1], pair.depth_i[k]);
    geo.cam_i1.emplace_back(pair.depth_i1[k] * pair.coord_i1[k][0],
                            pair.depth_i1[k] * pair.coord_i1[k][1], pair.depth_i1[k]);
  }
  if (dropped > 0)
    util::log_debug("if_loss: dropped " + std::to_string(dropped) + " non-positive depths");
  if (geo.cam_i.empty()) throw std::invalid_argument("if_loss: no usable matches");
  return geo;
}

double if_loss_impl(const PairGeometry& geo, const lie::Sim3Pose& pose_i,
                    const lie::Sim3Pose& pose_i1, bool* kl_used = nullptr) {
  const lie::Sim3Pose rel = relative_pose(pose_i, pose_i1);
  PointCloud transformed;
  transformed.points.reserve(geo.cam_i.size());
  for (const Vec3& p : geo.cam_i) transformed.points.push_back(lie::sim3_apply(rel, p));

  double sum = 0.0;
  for (size_t k = 0; k < geo.cam_i1.size(); ++k)
    sum += (geo.cam_i1[k] - transformed.points[k]).squaredNorm();
  double loss = sum / static_cast<double>(geo.cam_i1.size());

  if (geo.cam_i1.size() >= 4) {
    PointCloud ref;
    ref.points = geo.cam_i1;
    loss += gaussian_kl(gaussian_fit(ref), gaussian_fit(transformed));
    if (kl_used != nullptr) *kl_used = true;
  } else {
    util::log_debug("if_loss: fewer than 4 matches, KL term skipped");
    if (kl_used != nullptr) *kl_used = false;
  }
  return loss;
}

double kl_term(const PairGeometry& geo, const lie::Sim3Pose& pose_i,
               const lie::Sim3Pose& pose_i1) {
  if (geo.cam_i1.size() < 4) return 0.0;
  const lie::Sim3Pose rel = relative_pose(pose_i, pose_i1);
  PointCloud transformed, ref;
  transformed.points.reserve(geo.cam_i.size());
  for (const Vec3& p : geo.cam_i) transformed.points.push_back(lie::sim3_apply(rel, p));
  ref.points = geo.cam_i1;
  return gaussian_kl(gaussian_fit(ref), gaussian_fit(transformed));
}

}  // namespace

double if_loss(const FramePair& pair) {
  const PairGeometry geo = filter_pair(pair);
  return if_loss_impl(geo, pair.pose_i, pair.pose_i1);
}

lie::Sim3Tangent grad_if_loss(const FramePair& pair, PoseSide side) {
  const PairGeometry geo = filter_pair(pair);
  const size_t n = geo.cam_i.size();

  // Analytic gradient of the point-cloud term. With w_k the frame-i point
  // mapped into the world, the left perturbation enters as
  // P_{i+1}^{-1} exp(+/- eps) w_k.
  const lie::Sim3Pose inv_i1 = lie::sim3_inverse(pair.pose_i1);
  const Mat3 linear_inv_i1 = inv_i1.scale() * inv_i1.rotation().matrix();
  const double sign = side == PoseSide::First ? 1.0 : -1.0;

  Vec3 g_rho = Vec3::Zero(), g_phi = Vec3::Zero();
  double g_sigma = 0.0;
  const lie::Sim3Pose rel = relative_pose(pair.pose_i, pair.pose_i1);
  for (size_t k = 0; k < n; ++k) {
    const Vec3 w = lie::sim3_apply(pair.pose_i, geo.cam_i[k]);
    const Vec3 r = lie::sim3_apply(rel, geo.cam_i[k]) - geo.cam_i1[k];
    const Vec3 mr = linear_inv_i1.transpose() * r;
    g_rho += mr;
    g_phi += w.cross(mr);
    g_sigma += mr.dot(w);
  }
  const double scale = sign * 2.0 / static_cast<double>(n);
  lie::Sim3Tangent grad(scale * g_rho, scale * g_phi, scale * g_sigma);

  // KL term by central differences on the 7 tangent coordinates.
  if (geo.cam_i1.size() >= 4) {
    const double h = 1e-6;
    for (int c = 0; c < 7; ++c) {
      lie::Vec7 delta = lie::Vec7::Zero();
      auto eval_at = [&](double step) {
        delta[c] = step;
        const lie::Sim3Pose perturbed =
            lie::sim3_retract(side == PoseSide::First ? pair.pose_i : pair.pose_i1,
                              lie::Sim3Tangent::from_vector(delta));
        return side == PoseSide::First ? kl_term(geo, perturbed, pair.pose_i1)
                                       : kl_term(geo, pair.pose_i, perturbed);
      };
      const double fp = eval_at(h);
      const double fm = eval_at(-h);
      const double g = (fp - fm) / (2.0 * h);
      if (c < 3)
        grad.rho[c] += g;
      else if (c < 6)
        grad.phi[c - 3] += g;
      else
        grad.sigma += g;
    }
  }
  return grad;
}

}  // namespace wscloc::ifloss
