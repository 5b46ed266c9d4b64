#pragma once

#include <Eigen/Core>

namespace wscloc::lie {

using Vec3 = Eigen::Vector3d;
using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// Skew-symmetric matrix such that hat(v) * u = v x u.
Mat3 hat(const Vec3& v);
Vec3 vee(const Mat3& m);

// 3x3 orthonormal matrix with determinant +1. Checked constructions go
// through from_matrix(); internal operations build rotations that are
// orthonormal to rounding and skip the check.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  // Validates orthonormality and determinant to 1e-9 (Frobenius);
  // throws std::invalid_argument otherwise.
  static Rotation from_matrix(const Mat3& m);

  // Unchecked; callers must pass an orthonormal matrix.
  static Rotation from_matrix_unchecked(const Mat3& m) { return Rotation(m); }

  const Mat3& matrix() const { return m_; }
  Rotation transposed() const { return Rotation(m_.transpose()); }

  Vec3 operator*(const Vec3& p) const { return m_ * p; }
  Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_); }

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

// Exponential coordinates of sim(3): translational part rho, rotational
// part phi (radians times unit axis), log-scale sigma.
struct Sim3Tangent {
  Vec3 rho = Vec3::Zero();
  Vec3 phi = Vec3::Zero();
  double sigma = 0.0;

  Sim3Tangent() = default;
  Sim3Tangent(const Vec3& rho_in, const Vec3& phi_in, double sigma_in)
      : rho(rho_in), phi(phi_in), sigma(sigma_in) {}

  double theta() const { return phi.norm(); }
  // Unit rotation axis; zero vector when theta() vanishes.
  Vec3 axis() const;

  Vec7 as_vector() const;
  static Sim3Tangent from_vector(const Vec7& v);

  bool is_finite() const;
};

// Similarity transform: x -> scale * R * x + t, matrix form [[sR, t], [0, 1]].
class Sim3Pose {
 public:
  Sim3Pose() : scale_(1.0) {}

  // Validates scale > 0 and finiteness; throws std::invalid_argument.
  Sim3Pose(const Rotation& rotation, const Vec3& translation, double scale);

  static Sim3Pose identity() { return Sim3Pose(); }

  const Rotation& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  double scale() const { return scale_; }

  Mat4 as_matrix() const;

 private:
  Rotation rotation_;
  Vec3 translation_ = Vec3::Zero();
  double scale_;
};

// Rodrigues formula with a Taylor branch below 1e-8.
Rotation so3_exp(const Vec3& phi);

// Principal logarithm, theta in [0, pi]. Near pi the axis is recovered from
// the dominant diagonal of (R + I) / 2.
Vec3 so3_log(const Rotation& r);

// The 3x3 matrix coupling rho to the translation of sim3_exp; equals the
// integral of exp(u * sigma) * so3_exp(u * phi) for u in [0, 1]. Series
// branches take over when theta or |sigma| drop below 1e-4.
Mat3 sim3_jacobian(const Vec3& phi, double sigma);

Sim3Pose sim3_exp(const Sim3Tangent& xi);
Sim3Tangent sim3_log(const Sim3Pose& t);

Sim3Pose sim3_compose(const Sim3Pose& a, const Sim3Pose& b);
Sim3Pose sim3_inverse(const Sim3Pose& t);
Vec3 sim3_apply(const Sim3Pose& t, const Vec3& p);

// Left-multiplicative update: sim3_exp(delta) composed onto t0.
Sim3Pose sim3_retract(const Sim3Pose& t0, const Sim3Tangent& delta);

}  // namespace wscloc::lie
