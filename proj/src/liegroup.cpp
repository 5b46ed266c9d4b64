#include "wscloc/liegroup.hpp"

#include <Eigen/LU>

#include <cmath>
#include <stdexcept>

namespace wscloc::lie {

namespace {

constexpr double kTaylorEps = 1e-4;  // series branch threshold for J_s
constexpr double kSo3ExpEps = 1e-8;
constexpr double kNearPiEps = 1e-6;

void require_finite(const Vec3& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace

Mat3 hat(const Vec3& v) {
  Mat3 m;
  // clang-format off
  m <<    0.0, -v.z(),  v.y(),
        v.z(),    0.0, -v.x(),
       -v.y(),  v.x(),    0.0;
  // clang-format on
  return m;
}

Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

Rotation Rotation::from_matrix(const Mat3& m) {
  if (!m.allFinite()) throw std::invalid_argument("Rotation: non-finite matrix");
  const double ortho_err = (m * m.transpose() - Mat3::Identity()).norm();
  if (ortho_err > 1e-9)
    throw std::invalid_argument("Rotation: matrix is not orthonormal");
  if (std::abs(m.determinant() - 1.0) > 1e-9)
    throw std::invalid_argument("Rotation: determinant is not +1");
  return Rotation(m);
}

Vec3 Sim3Tangent::axis() const {
  const double t = theta();
  if (t < 1e-15) return Vec3::Zero();
  return phi / t;
}

Vec7 Sim3Tangent::as_vector() const {
  Vec7 v;
  v << rho, phi, sigma;
  return v;
}

Sim3Tangent Sim3Tangent::from_vector(const Vec7& v) {
  return Sim3Tangent(v.segment<3>(0), v.segment<3>(3), v[6]);
}

bool Sim3Tangent::is_finite() const {
  return rho.allFinite() && phi.allFinite() && std::isfinite(sigma);
}

Sim3Pose::Sim3Pose(const Rotation& rotation, const Vec3& translation, double scale)
    : rotation_(rotation), translation_(translation), scale_(scale) {
  if (!translation.allFinite() || !std::isfinite(scale))
    throw std::invalid_argument("Sim3Pose: non-finite input");
  if (scale <= 0.0) throw std::invalid_argument("Sim3Pose: scale must be positive");
}

Mat4 Sim3Pose::as_matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = scale_ * rotation_.matrix();
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

Rotation so3_exp(const Vec3& phi) {
  require_finite(phi, "so3_exp");
  const double theta2 = phi.squaredNorm();
  const double theta = std::sqrt(theta2);
  double k1, k2;  // sin(t)/t and (1 - cos(t))/t^2
  if (theta < kSo3ExpEps) {
    k1 = 1.0 - theta2 / 6.0;
    k2 = 0.5 - theta2 / 24.0;
  } else {
    k1 = std::sin(theta) / theta;
    k2 = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 omega = hat(phi);
  const Mat3 r = Mat3::Identity() + k1 * omega + k2 * omega * omega;
  return Rotation::from_matrix_unchecked(r);
}

Vec3 so3_log(const Rotation& rot) {
  const Mat3& r = rot.matrix();
  const double cos_theta = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  const Vec3 w = vee(r - r.transpose()) * 0.5;  // sin(theta) * axis

  if (theta < 1e-10) return w;  // sin(t)/t -> 1

  if (theta > M_PI - kNearPiEps) {
    // Axis from the dominant diagonal of (R + I) / 2 ~= a a^T near pi; the
    // symmetric part drops the O(pi - theta) skew contamination, and ties
    // resolve to the largest diagonal entry, then the lowest index.
    const Mat3 b = 0.25 * (r + r.transpose()) + 0.5 * Mat3::Identity();
    int j = 0;
    for (int i = 1; i < 3; ++i)
      if (b(i, i) > b(j, j)) j = i;
    Vec3 axis = b.col(j);
    const double n = axis.norm();
    if (n < 1e-12) throw std::invalid_argument("so3_log: degenerate rotation");
    axis /= n;
    // Keep the sign consistent with the (small but signed) skew part.
    if (w.norm() > 1e-12 && w.dot(axis) < 0.0) axis = -axis;
    // arccos is ill-conditioned this close to pi; the skew norm recovers the
    // remaining angle at full precision.
    const double refined = M_PI - std::asin(std::min(1.0, w.norm()));
    return refined * axis;
  }

  const double sin_theta = std::sin(theta);
  return (theta / sin_theta) * w;
}

Mat3 sim3_jacobian(const Vec3& phi, double sigma) {
  require_finite(phi, "sim3_jacobian");
  require_finite(sigma, "sim3_jacobian");

  const double theta = phi.norm();
  const Mat3 omega = hat(phi);
  const Mat3 identity = Mat3::Identity();

  if (theta < kTaylorEps && std::abs(sigma) < kTaylorEps) {
    // Both small: third-order series of the defining integral in the
    // combined generator M = sigma I + hat(phi).
    const Mat3 m = sigma * identity + omega;
    const Mat3 m2 = m * m;
    return identity + 0.5 * m + m2 / 6.0 + (m2 * m) / 24.0;
  }

  // J_s = c I + a hat(phi) + b hat(phi)^2
  double c;
  if (std::abs(sigma) < kTaylorEps) {
    c = 1.0 + sigma * (0.5 + sigma * (1.0 / 6.0 + sigma / 24.0));
  } else {
    c = std::expm1(sigma) / sigma;
  }

  double a, b;
  if (theta < kTaylorEps) {
    // theta -> 0 with sigma away from zero: expand the sin/cos factors of
    // the integrand; the exp(sigma u) moments have closed forms.
    const double es = std::exp(sigma);
    const double s2 = sigma * sigma;
    const double s3 = s2 * sigma;
    const double s4 = s2 * s2;
    const double mom1 = (es * (sigma - 1.0) + 1.0) / s2;
    const double mom2 = (es * (s2 - 2.0 * sigma + 2.0) - 2.0) / s3;
    const double mom3 = (es * (s3 - 3.0 * s2 + 6.0 * sigma - 6.0) + 6.0) / s4;
    const double mom4 =
        (es * (s4 - 4.0 * s3 + 12.0 * s2 - 24.0 * sigma + 24.0) - 24.0) / (s4 * sigma);
    const double t2 = theta * theta;
    a = mom1 - t2 * mom3 / 6.0;
    b = 0.5 * mom2 - t2 * mom4 / 24.0;
  } else {
    const double es = std::exp(sigma);
    const double st = std::sin(theta);
    const double one_minus_ct = 2.0 * std::sin(0.5 * theta) * std::sin(0.5 * theta);
    const double ct = 1.0 - one_minus_ct;
    const double d = sigma * sigma + theta * theta;
    a = (sigma * es * st + theta * (one_minus_ct - ct * std::expm1(sigma))) /
        (theta * d);
    b = (c - ((es * ct - 1.0) * sigma + es * st * theta) / d) / (theta * theta);
  }

  return c * identity + a * omega + b * omega * omega;
}

Sim3Pose sim3_exp(const Sim3Tangent& xi) {
  if (!xi.is_finite()) throw std::invalid_argument("sim3_exp: non-finite tangent");
  const Rotation r = so3_exp(xi.phi);
  const Mat3 j = sim3_jacobian(xi.phi, xi.sigma);
  return Sim3Pose(r, j * xi.rho, std::exp(xi.sigma));
}

Sim3Tangent sim3_log(const Sim3Pose& t) {
  Sim3Tangent xi;
  xi.sigma = std::log(t.scale());
  xi.phi = so3_log(t.rotation());
  const Mat3 j = sim3_jacobian(xi.phi, xi.sigma);
  const Eigen::PartialPivLU<Mat3> lu(j);
  // J_s is invertible for theta < pi and finite sigma; anything else is a
  // caller bug, so fail hard.
  if (std::abs(lu.determinant()) < 1e-12)
    throw std::runtime_error("sim3_log: singular translation Jacobian");
  xi.rho = lu.solve(t.translation());
  return xi;
}

Sim3Pose sim3_compose(const Sim3Pose& a, const Sim3Pose& b) {
  return Sim3Pose(a.rotation() * b.rotation(),
                  a.scale() * (a.rotation() * b.translation()) + a.translation(),
                  a.scale() * b.scale());
}

Sim3Pose sim3_inverse(const Sim3Pose& t) {
  const Rotation rt = t.rotation().transposed();
  const double inv_s = 1.0 / t.scale();
  return Sim3Pose(rt, -inv_s * (rt * t.translation()), inv_s);
}

Vec3 sim3_apply(const Sim3Pose& t, const Vec3& p) {
  if (!p.allFinite()) throw std::invalid_argument("sim3_apply: non-finite point");
  return t.scale() * (t.rotation() * p) + t.translation();
}

Sim3Pose sim3_retract(const Sim3Pose& t0, const Sim3Tangent& delta) {
  return sim3_compose(sim3_exp(delta), t0);
}

}  // namespace wscloc::lie
