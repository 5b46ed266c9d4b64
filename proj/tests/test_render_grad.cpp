#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "wscloc/optim.hpp"
#include "wscloc/render.hpp"

#include <cmath>

using namespace wscloc;
using lie::Vec3;
using render::PixelCoord;

namespace {

scene::PinholeCamera test_camera(int size = 24) {
  scene::PinholeCamera cam;
  cam.width = cam.height = size;
  cam.fx = cam.fy = size * 0.9;
  cam.cx = cam.cy = size / 2.0;
  cam.near = 0.5;
  cam.far = 6.0;
  return cam;
}

scene::BlobField grad_scene() {
  scene::BlobField field;
  field.blobs.push_back({{0.35, 0.1, 0.0}, {0.1, 0, 0}, 0.3, 2.5, {0.9, 0.2, 0.1}});
  field.blobs.push_back({{-0.3, -0.2, 0.15}, {0, 0.05, 0}, 0.35, 2.0, {0.1, 0.7, 0.8}});
  field.blobs.push_back({{0.0, 0.35, -0.2}, {0, 0, 0}, 0.25, 3.0, {0.3, 0.9, 0.2}});
  return field;
}

// Loss surrogate shared by the analytic path and the finite-difference
// oracle: photometric MSE rendered at fixed per-pixel sample depths.
double frozen_loss(const render::RadianceField& field, const scene::PinholeCamera& cam,
                   const lie::Sim3Pose& pose, double time_code,
                   const std::vector<render::FrozenSamples>& frozen,
                   const std::vector<Vec3>& reference, const render::RenderConfig& cfg) {
  std::vector<Vec3> rendered;
  rendered.reserve(frozen.size());
  for (const auto& f : frozen)
    rendered.push_back(render::render_frozen(field, cam, pose, time_code, f, cfg));
  return render::photometric_loss(rendered, reference);
}

double rel_err(const lie::Vec7& analytic, const lie::Vec7& fd) {
  const double scale = fd.cwiseAbs().maxCoeff();
  double worst = 0.0;
  for (int i = 0; i < 7; ++i)
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / (std::abs(fd[i]) + 1e-8 * scale));
  return worst;
}

std::vector<PixelCoord> random_pixels(util::Rng& rng, const scene::PinholeCamera& cam, int n) {
  std::vector<PixelCoord> px;
  for (int i = 0; i < n; ++i)
    px.push_back({static_cast<int>(rng.uniform_int(cam.width)),
                  static_cast<int>(rng.uniform_int(cam.height))});
  return px;
}

}  // namespace

TEST_CASE("grad_pose vanishes at the photometric minimum") {
  const render::BlobFieldBackend field(grad_scene());
  const auto cam = test_camera();
  const auto pose = scene::make_orbit_rig(4, 2.5, Vec3::Zero(), 0.3)[1];
  render::RenderConfig cfg;
  util::Rng rng(21);

  const auto pixels = random_pixels(rng, cam, 16);
  // Reference rendered at the very sample depths the gradient pass will use.
  std::vector<render::FrozenSamples> frozen;
  for (const auto& p : pixels)
    frozen.push_back(render::freeze_samples(field, cam, pose, 0.4, p, cfg, rng));
  std::vector<Vec3> reference;
  for (const auto& f : frozen)
    reference.push_back(render::render_frozen(field, cam, pose, 0.4, f, cfg));

  const auto res = render::render_batch_grad(field, cam, pose, 0.4, pixels, reference, cfg, rng,
                                             true, false, &frozen);
  CHECK(res.loss == 0.0);
  CHECK(res.pose_grad.as_vector().norm() < 1e-8);
}

TEST_CASE("grad_pose: +x translation offset produces a dominant restoring rho_x") {
  // Radially symmetric scene straight ahead of the camera.
  scene::BlobField field;
  field.blobs.push_back({{0, 0, 0}, {0, 0, 0}, 0.3, 3.0, {0.9, 0.9, 0.9}});
  const render::BlobFieldBackend backend(field);

  scene::PinholeCamera cam = test_camera();
  // Camera at -z looking toward +z (world x maps to pixel x).
  const lie::Sim3Pose gt(lie::Rotation(), Vec3(0, 0, -2.5), 1.0);
  const lie::Sim3Pose offset =
      lie::sim3_retract(gt, lie::Sim3Tangent(Vec3(0.15, 0, 0), Vec3::Zero(), 0.0));

  render::RenderConfig cfg;
  cfg.n_coarse = 48;
  cfg.n_fine = 48;
  util::Rng rng(22);
  std::vector<PixelCoord> pixels;
  for (int v = 4; v < 20; v += 2)
    for (int u = 4; u < 20; u += 2) pixels.push_back({u, v});
  std::vector<Vec3> reference;
  for (const auto& p : pixels) {
    util::Rng ref_rng(1000 + p.v * 100 + p.u);
    reference.push_back(render::render_pixel(backend, cam, gt, 0.0, p, cfg, ref_rng).rgb);
  }

  const auto res = render::render_batch_grad(backend, cam, offset, 0.0, pixels, reference, cfg,
                                             rng, true, false);
  const Vec3 g_rho = res.pose_grad.rho;
  CHECK(g_rho[0] > 0.0);  // descent pushes back toward the ground truth
  CHECK(std::abs(g_rho[0]) > std::abs(g_rho[1]));
  CHECK(std::abs(g_rho[0]) > std::abs(g_rho[2]));

  // Finite differences confirm sign and dominance on the same surrogate.
  const auto fd_probe = [&](const lie::Vec7& eps) {
    return frozen_loss(backend, cam,
                       lie::sim3_retract(offset, lie::Sim3Tangent::from_vector(eps)), 0.0,
                       res.frozen, reference, cfg);
  };
  Eigen::VectorXd fd = optim::fd_gradient(
      [&](const Eigen::VectorXd& x) { return fd_probe(lie::Vec7(x)); },
      Eigen::VectorXd::Zero(7), 1e-5);
  CHECK(fd[0] > 0.0);
  CHECK(std::abs(fd[0]) > std::abs(fd[1]));
}

TEST_CASE("grad_pose matches central finite differences on random configurations") {
  const render::BlobFieldBackend blob_field(grad_scene());
  render::MlpFieldConfig mcfg;
  mcfg.n_freqs_xyz = 3;
  mcfg.n_freqs_time = 2;
  mcfg.hidden_width = 16;
  mcfg.hidden_layers = 2;
  render::MlpField mlp_field(mcfg, 12345);

  const auto cam = test_camera();
  const auto rig = scene::make_orbit_rig(6, 2.5, Vec3::Zero(), 0.5);
  util::Rng rng(23);
  double worst = 0.0;

  for (int trial = 0; trial < 20; ++trial) {
    const render::RadianceField& field =
        trial % 3 == 2 ? static_cast<const render::RadianceField&>(mlp_field)
                       : static_cast<const render::RadianceField&>(blob_field);
    lie::Sim3Pose pose = rig[trial % rig.size()];
    // Random sim(3) offset including a scale component.
    pose = lie::sim3_retract(pose, oracle::random_tangent(rng, 0.15, 0.1, 0.15));
    const double time_code = rng.uniform();

    render::RenderConfig cfg;
    cfg.n_coarse = 24;
    cfg.n_fine = 24;
    const auto pixels = random_pixels(rng, cam, 6);
    std::vector<Vec3> reference;
    for (size_t i = 0; i < pixels.size(); ++i)
      reference.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());

    const auto res = render::render_batch_grad(field, cam, pose, time_code, pixels, reference,
                                               cfg, rng, true, false);
    const auto fd_loss = [&](const Eigen::VectorXd& eps) {
      return frozen_loss(field, cam,
                         lie::sim3_retract(pose, lie::Sim3Tangent::from_vector(eps)), time_code,
                         res.frozen, reference, cfg);
    };
    const Eigen::VectorXd fd = optim::fd_gradient(fd_loss, Eigen::VectorXd::Zero(7), 1e-5);
    worst = std::max(worst, rel_err(res.pose_grad.as_vector(), lie::Vec7(fd)));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("grad_field: MLP through the renderer matches finite differences") {
  render::MlpFieldConfig mcfg;
  mcfg.n_freqs_xyz = 2;
  mcfg.n_freqs_time = 1;
  mcfg.hidden_width = 16;
  mcfg.hidden_layers = 2;
  render::MlpField field(mcfg, 777);

  const auto cam = test_camera(16);
  const auto pose = scene::make_orbit_rig(3, 2.5, Vec3::Zero(), 0.2)[0];
  render::RenderConfig cfg;
  cfg.n_coarse = 12;
  cfg.n_fine = 12;
  util::Rng rng(24);

  const auto pixels = random_pixels(rng, cam, 4);
  std::vector<Vec3> reference;
  for (size_t i = 0; i < pixels.size(); ++i)
    reference.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());

  const auto res =
      render::render_batch_grad(field, cam, pose, 0.3, pixels, reference, cfg, rng, false, true);

  render::MlpField probe = field;
  const auto fd_loss = [&](const Eigen::VectorXd& p) {
    probe.set_params(p);
    return frozen_loss(probe, cam, pose, 0.3, res.frozen, reference, cfg);
  };
  const Eigen::VectorXd fd = optim::fd_gradient(fd_loss, field.params(), 1e-5);
  const double rel = (res.field_grad - fd).norm() / std::max(fd.norm(), 1e-12);
  CHECK(rel < 1e-3);
}

TEST_CASE("grad_field: single-sample single-pixel toy case is near-exact") {
  render::MlpFieldConfig mcfg;
  mcfg.n_freqs_xyz = 1;
  mcfg.n_freqs_time = 1;
  mcfg.hidden_width = 8;
  mcfg.hidden_layers = 1;
  render::MlpField field(mcfg, 31);

  scene::PinholeCamera cam = test_camera(4);
  const lie::Sim3Pose pose;
  render::RenderConfig cfg;
  util::Rng rng(25);
  const std::vector<PixelCoord> pixels = {{2, 2}};
  const std::vector<Vec3> reference = {Vec3(0.25, 0.5, 0.75)};
  std::vector<render::FrozenSamples> frozen = {{{2, 2}, {1.7}}};

  const auto res = render::render_batch_grad(field, cam, pose, 0.5, pixels, reference, cfg, rng,
                                             false, true, &frozen);
  render::MlpField probe = field;
  const auto fd_loss = [&](const Eigen::VectorXd& p) {
    probe.set_params(p);
    return frozen_loss(probe, cam, pose, 0.5, frozen, reference, cfg);
  };
  const Eigen::VectorXd fd = optim::fd_gradient(fd_loss, field.params(), 1e-6);
  const double rel = (res.field_grad - fd).norm() / std::max(fd.norm(), 1e-12);
  CHECK(rel < 1e-6);
}

TEST_CASE("grad_field: blob-parameter gradients match finite differences") {
  render::BlobFieldBackend field(grad_scene());
  const auto cam = test_camera(16);
  const auto pose = scene::make_orbit_rig(3, 2.5, Vec3::Zero(), 0.2)[1];
  render::RenderConfig cfg;
  cfg.n_coarse = 16;
  cfg.n_fine = 16;
  util::Rng rng(26);

  const auto pixels = random_pixels(rng, cam, 5);
  std::vector<Vec3> reference;
  for (size_t i = 0; i < pixels.size(); ++i)
    reference.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());

  const auto res =
      render::render_batch_grad(field, cam, pose, 0.6, pixels, reference, cfg, rng, false, true);

  render::BlobFieldBackend probe = field;
  const auto fd_loss = [&](const Eigen::VectorXd& p) {
    probe.set_params(p);
    return frozen_loss(probe, cam, pose, 0.6, res.frozen, reference, cfg);
  };
  const Eigen::VectorXd fd = optim::fd_gradient(fd_loss, field.params(), 1e-6);
  const double rel = (res.field_grad - fd).norm() / std::max(fd.norm(), 1e-12);
  CHECK(rel < 1e-5);
}

TEST_CASE("grad_field: zero output layer cuts gradients to hidden layers") {
  render::MlpFieldConfig mcfg;
  mcfg.n_freqs_xyz = 2;
  mcfg.n_freqs_time = 1;
  mcfg.hidden_width = 8;
  mcfg.hidden_layers = 2;
  render::MlpField field(mcfg, 5);
  // Zero the last layer (weights and biases sit at the tail of the flat
  // parameter vector).
  Eigen::VectorXd p = field.params();
  const Eigen::Index last = 8 * 4 + 4;
  p.tail(last).setZero();
  field.set_params(p);

  const auto cam = test_camera(8);
  render::RenderConfig cfg;
  cfg.n_coarse = 8;
  cfg.n_fine = 8;
  util::Rng rng(27);
  const std::vector<PixelCoord> pixels = {{4, 4}, {2, 6}};
  const std::vector<Vec3> reference = {Vec3(0.2, 0.4, 0.6), Vec3(0.1, 0.1, 0.9)};
  const auto res = render::render_batch_grad(field, cam, lie::Sim3Pose(), 0.2, pixels, reference,
                                             cfg, rng, false, true);
  CHECK(res.field_grad.head(res.field_grad.size() - last).norm() == 0.0);
}

TEST_CASE("grad_field: duplicated pixel batch leaves the mean gradient unchanged") {
  const render::BlobFieldBackend field(grad_scene());
  const auto cam = test_camera(16);
  const auto pose = scene::make_orbit_rig(3, 2.5, Vec3::Zero(), 0.2)[2];
  render::RenderConfig cfg;
  cfg.n_coarse = 12;
  cfg.n_fine = 12;
  util::Rng rng(28);

  const auto pixels = random_pixels(rng, cam, 4);
  std::vector<Vec3> reference;
  for (size_t i = 0; i < pixels.size(); ++i)
    reference.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());

  util::Rng rng_a(29);
  const auto res = render::render_batch_grad(field, cam, pose, 0.1, pixels, reference, cfg,
                                             rng_a, true, true);

  std::vector<PixelCoord> pixels2 = pixels;
  pixels2.insert(pixels2.end(), pixels.begin(), pixels.end());
  std::vector<Vec3> reference2 = reference;
  reference2.insert(reference2.end(), reference.begin(), reference.end());
  std::vector<render::FrozenSamples> frozen2 = res.frozen;
  frozen2.insert(frozen2.end(), res.frozen.begin(), res.frozen.end());

  util::Rng rng_b(29);
  const auto res2 = render::render_batch_grad(field, cam, pose, 0.1, pixels2, reference2, cfg,
                                              rng_b, true, true, &frozen2);
  CHECK(res2.loss == doctest::Approx(res.loss).epsilon(1e-12));
  CHECK((res2.field_grad - res.field_grad).norm() < 1e-12);
  CHECK((res2.pose_grad.as_vector() - res.pose_grad.as_vector()).norm() < 1e-12);
}

TEST_CASE("grad wrappers expose the pose and field paths") {
  const render::BlobFieldBackend field(grad_scene());
  const auto cam = test_camera(12);
  const auto pose = scene::make_orbit_rig(3, 2.5, Vec3::Zero(), 0.2)[0];
  render::RenderConfig cfg;
  cfg.n_coarse = 8;
  cfg.n_fine = 8;
  const std::vector<PixelCoord> pixels = {{6, 6}, {3, 8}};
  const std::vector<Vec3> reference = {Vec3(0.5, 0.5, 0.5), Vec3(0.2, 0.8, 0.4)};

  util::Rng r1(30), r2(30), r3(30);
  const auto both =
      render::render_batch_grad(field, cam, pose, 0.5, pixels, reference, cfg, r1, true, true);
  const auto pg = render::grad_pose(field, cam, pose, 0.5, pixels, reference, cfg, r2);
  const auto fg = render::grad_field(field, cam, pose, 0.5, pixels, reference, cfg, r3);
  CHECK((pg.as_vector() - both.pose_grad.as_vector()).norm() == 0.0);
  CHECK((fg - both.field_grad).norm() == 0.0);
}
