#pragma once

// Independent test oracles. Everything here is deliberately implemented from
// first principles (series, quadrature, brute force) and must stay decoupled
// from the library code paths it checks.

#include "wscloc/liegroup.hpp"
#include "wscloc/rng.hpp"
#include "wscloc/scene.hpp"

#include <Eigen/Core>

#include <cmath>
#include <vector>

namespace oracle {

using wscloc::lie::Mat3;
using wscloc::lie::Mat4;
using wscloc::lie::Vec3;

// Truncated matrix-exponential series, sum of m^k / k!.
template <typename Matrix>
Matrix exp_series(const Matrix& m, int terms) {
  Matrix sum = Matrix::Identity();
  Matrix power = Matrix::Identity();
  double factorial = 1.0;
  for (int k = 1; k <= terms; ++k) {
    power = Matrix(power * m);
    factorial *= k;
    sum += power / factorial;
  }
  return sum;
}

inline Mat3 hat3(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// 4x4 sim(3) algebra element [[sigma I + hat(phi), rho], [0, 0]].
inline Mat4 sim3_hat(const Vec3& rho, const Vec3& phi, double sigma) {
  Mat4 m = Mat4::Zero();
  m.topLeftCorner<3, 3>() = sigma * Mat3::Identity() + hat3(phi);
  m.topRightCorner<3, 1>() = rho;
  return m;
}

// Composite-Simpson quadrature of exp(sigma u) * exp_series(u hat(phi)) over
// [0, 1]; the defining integral of the sim(3) translation Jacobian. The
// series powers hat(phi)^k / k! are hoisted out of the u loop.
inline Mat3 jacobian_quadrature(const Vec3& phi, double sigma, int intervals = 10000) {
  if (intervals % 2 != 0) ++intervals;
  constexpr int kTerms = 30;
  std::vector<Mat3> terms(kTerms + 1);
  terms[0] = Mat3::Identity();
  Mat3 power = Mat3::Identity();
  double factorial = 1.0;
  const Mat3 a = hat3(phi);
  for (int k = 1; k <= kTerms; ++k) {
    power = Mat3(power * a);
    factorial *= k;
    terms[k] = power / factorial;
  }
  const auto f = [&](double u) -> Mat3 {
    Mat3 series = Mat3::Zero();
    double uk = 1.0;
    for (int k = 0; k <= kTerms; ++k) {
      series += uk * terms[k];
      uk *= u;
    }
    return std::exp(sigma * u) * series;
  };
  Mat3 sum = f(0.0) + f(1.0);
  const double h = 1.0 / intervals;
  for (int i = 1; i < intervals; ++i) sum += (i % 2 == 1 ? 4.0 : 2.0) * f(i * h);
  return sum * (h / 3.0);
}

// Continuous emission-absorption integral along a ray through a blob field
// by midpoint-rule quadrature with running transmittance.
inline Vec3 transmittance_quadrature(const wscloc::scene::BlobField& field, const Vec3& origin,
                                     const Vec3& direction, double t_near, double t_far,
                                     double time_code, int steps = 20000) {
  const double h = (t_far - t_near) / steps;
  double optical_depth = 0.0;
  Vec3 rgb = Vec3::Zero();
  for (int i = 0; i < steps; ++i) {
    const double t = t_near + (i + 0.5) * h;
    const auto s = wscloc::scene::field_eval(field, origin + t * direction, time_code);
    const double transmittance = std::exp(-(optical_depth + 0.5 * s.density * h));
    rgb += transmittance * s.density * s.color * h;
    optical_depth += s.density * h;
  }
  return rgb;
}

inline wscloc::lie::Sim3Tangent random_tangent(wscloc::util::Rng& rng, double max_theta,
                                               double max_sigma, double max_rho) {
  const double theta = rng.uniform(0.0, max_theta);
  const Vec3 phi = theta * rng.unit_vector();
  return {rng.in_ball(max_rho), phi, rng.uniform(-max_sigma, max_sigma)};
}

inline wscloc::lie::Sim3Pose random_pose(wscloc::util::Rng& rng, double max_theta = M_PI - 0.2,
                                         double max_sigma = 1.5, double max_rho = 2.0) {
  return wscloc::lie::sim3_exp(random_tangent(rng, max_theta, max_sigma, max_rho));
}

}  // namespace oracle
