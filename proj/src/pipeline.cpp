#include "wscloc/pipeline.hpp"

#include "wscloc/logging.hpp"
#include "wscloc/parallel.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wscloc::pipeline {

double lower_median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("lower_median: empty input");
  std::sort(values.begin(), values.end());
  return values[(values.size() - 1) / 2];
}

// ---------------------------------------------------------------------------
// Stage 1

namespace {

std::shared_ptr<render::RadianceField> make_field(const Stage1Config& cfg) {
  if (cfg.backend == "mlp") {
    auto field = std::make_shared<render::MlpField>(cfg.mlp, util::mix_seed(cfg.seed, 0xF1E1D));
    field->set_time_enabled(!cfg.ablate_te);
    return field;
  }
  if (cfg.backend == "blob") {
    auto field = std::make_shared<render::BlobFieldBackend>(cfg.blob_init);
    field->set_time_enabled(!cfg.ablate_te);
    return field;
  }
  throw std::invalid_argument("stage1_train: unknown field backend " + cfg.backend);
}

void set_field_alpha(render::RadianceField& field, double alpha) {
  if (auto* mlp = dynamic_cast<render::MlpField*>(&field)) mlp->set_alpha(alpha);
}

}  // namespace

Stage1Result stage1_train(const scene::FrameDataset& dataset, const Stage1Config& cfg) {
  const int n_frames = static_cast<int>(dataset.frames.size());
  if (n_frames == 0) throw std::invalid_argument("stage1_train: empty dataset");

  Stage1Result result;
  result.field = make_field(cfg);
  render::RadianceField& field = *result.field;

  // Keypoints once per frame; they steer the per-iteration ray batches.
  std::vector<std::vector<render::KeypointPixel>> frame_keypoints(n_frames);
  for (int i = 0; i < n_frames; ++i) {
    const auto kps = feat::detect_keypoints(img::rgb_to_gray(dataset.frames[i].image),
                                            cfg.max_keypoints, cfg.nms_radius);
    for (const auto& kp : kps) frame_keypoints[i].push_back({kp.u, kp.v});
  }

  std::vector<lie::Sim3Pose> poses;
  poses.reserve(n_frames);
  for (const auto& f : dataset.frames) poses.push_back(f.init_pose);

  Eigen::VectorXd field_params = field.params();
  optim::AdamState field_state(field_params.size());
  std::vector<optim::AdamState> rho_state(n_frames, optim::AdamState(3));
  std::vector<optim::AdamState> phi_state(n_frames, optim::AdamState(3));
  std::vector<optim::AdamState> sigma_state(n_frames, optim::AdamState(1));

  std::vector<util::Rng> frame_rng;
  frame_rng.reserve(n_frames);
  for (int i = 0; i < n_frames; ++i)
    frame_rng.emplace_back(util::mix_seed(cfg.seed, 0x51000 + static_cast<uint64_t>(i)));

  struct FrameWork {
    double loss = 0.0;
    lie::Sim3Tangent pose_grad;
    Eigen::VectorXd field_grad;
  };
  std::vector<FrameWork> work(n_frames);

  double initial_loss = -1.0;
  int divergence_run = 0;
  const int anneal_iters = std::max(1, static_cast<int>(cfg.alpha_schedule_frac * cfg.iters));

  for (int iter = 0; iter < cfg.iters; ++iter) {
    set_field_alpha(field, cfg.mlp.n_freqs_xyz *
                               std::min(1.0, static_cast<double>(iter) / anneal_iters));

    util::parallel_for(n_frames, cfg.threads, [&](int i) {
      const auto& frame = dataset.frames[i];
      const auto pixels = render::keypoint_weighted_pixels(
          frame_keypoints[i], dataset.camera.width, dataset.camera.height, cfg.rays_per_frame,
          cfg.keypoint_mix, frame_rng[i]);
      std::vector<Vec3> reference(pixels.size());
      for (size_t p = 0; p < pixels.size(); ++p)
        reference[p] = frame.image.at(pixels[p].u, pixels[p].v);
      const auto res =
          render::render_batch_grad(field, dataset.camera, poses[i], frame.time_code, pixels,
                                    reference, cfg.render, frame_rng[i], true, true);
      work[i] = {res.loss, res.pose_grad, res.field_grad};
    });

    double loss = 0.0;
    Eigen::VectorXd field_grad = Eigen::VectorXd::Zero(field_params.size());
    for (int i = 0; i < n_frames; ++i) {  // fixed merge order
      loss += work[i].loss;
      field_grad += work[i].field_grad;
    }
    loss /= n_frames;
    field_grad /= n_frames;
    result.loss_history.push_back(loss);

    if (iter == 0) initial_loss = std::max(loss, 1e-12);
    divergence_run = loss > 10.0 * initial_loss ? divergence_run + 1 : 0;
    if (divergence_run >= 100)
      throw DivergenceError("stage1_train: loss exceeded 10x its initial value for 100 "
                            "consecutive iterations (iteration " +
                            std::to_string(iter) + ")");

    field_state.step(field_params, field_grad, cfg.lrs.lr_field);
    field.set_params(field_params);

    for (int i = 0; i < n_frames; ++i) {
      lie::Sim3Tangent delta;
      Eigen::VectorXd block3 = Eigen::VectorXd::Zero(3);
      rho_state[i].step(block3, work[i].pose_grad.rho, cfg.lrs.lr_rho);
      delta.rho = block3;
      block3.setZero();
      phi_state[i].step(block3, work[i].pose_grad.phi, cfg.lrs.lr_phi);
      delta.phi = block3;
      if (!cfg.ablate_sc) {
        Eigen::VectorXd block1 = Eigen::VectorXd::Zero(1);
        Eigen::VectorXd grad1(1);
        grad1[0] = work[i].pose_grad.sigma;
        sigma_state[i].step(block1, grad1, cfg.lrs.lr_sigma);
        delta.sigma = block1[0];
      }
      poses[i] = lie::sim3_retract(poses[i], delta);
    }
  }

  result.refined_poses = std::move(poses);
  return result;
}

// ---------------------------------------------------------------------------
// Random view synthesis

std::vector<SyntheticView> rvs_generate(const render::RadianceField& field,
                                        std::span<const lie::Sim3Pose> poses,
                                        std::span<const double> time_codes, int multiplier,
                                        const RvsNoise& noise,
                                        const scene::PinholeCamera& camera,
                                        const render::RenderConfig& rc, uint64_t seed,
                                        int threads) {
  if (multiplier < 1) throw std::invalid_argument("rvs_generate: multiplier must be >= 1");
  if (poses.size() != time_codes.size())
    throw std::invalid_argument("rvs_generate: pose/time count mismatch");
  const double rot_rad = noise.rot_deg * M_PI / 180.0;

  const int total = static_cast<int>(poses.size()) * multiplier;
  std::vector<SyntheticView> views(total);
  // Perturbations are drawn per view from independent seed streams so the
  // result does not depend on render order.
  util::parallel_for(total, threads, [&](int v) {
    const int src = v / multiplier;
    util::Rng rng(util::mix_seed(seed, static_cast<uint64_t>(v)));
    const double angle = rng.uniform(0.0, rot_rad);
    const Vec3 axis = rng.unit_vector();
    const Vec3 dt = rng.in_ball(noise.trans);
    const lie::Sim3Pose& base = poses[src];
    const lie::Sim3Pose perturbed(base.rotation() * lie::so3_exp(angle * axis),
                                  base.translation() + dt, base.scale());
    views[v].pose = perturbed;
    views[v].time_code = time_codes[src];
    views[v].source_frame = src;
    views[v].image = render::render_image(field, camera, perturbed, time_codes[src], rc, 1);
  });
  return views;
}

// ---------------------------------------------------------------------------
// Stage 2

Eigen::VectorXd regressor_input(const img::ImageRGB& image) {
  const img::ImageGray small =
      img::downsample(img::rgb_to_gray(image), kRegressorInputSize, kRegressorInputSize);
  Eigen::VectorXd x(kRegressorInputSize * kRegressorInputSize);
  for (size_t i = 0; i < small.px.size(); ++i) x[static_cast<Eigen::Index>(i)] = small.px[i] - 0.5;
  return x;
}

lie::Sim3Pose regressor_predict(const RegressorModel& model, const img::ImageRGB& image) {
  const Eigen::MatrixXd out = model.net.forward(regressor_input(image));
  return lie::sim3_compose(lie::sim3_exp(lie::Sim3Tangent::from_vector(out.col(0))),
                           model.reference_pose);
}

namespace {

lie::Sim3Pose pose_centroid(std::span<const lie::Sim3Pose> poses) {
  Vec3 t = Vec3::Zero();
  lie::Mat3 r_sum = lie::Mat3::Zero();
  double log_s = 0.0;
  for (const auto& p : poses) {
    t += p.translation();
    r_sum += p.rotation().matrix();
    log_s += std::log(p.scale());
  }
  const double n = static_cast<double>(poses.size());
  // Chordal mean rotation: nearest orthonormal matrix to the sum.
  Eigen::JacobiSVD<lie::Mat3> svd(r_sum, Eigen::ComputeFullU | Eigen::ComputeFullV);
  lie::Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    lie::Mat3 flip = lie::Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return lie::Sim3Pose(lie::Rotation::from_matrix_unchecked(r), t / n, std::exp(log_s / n));
}

double pose_loss(const lie::Sim3Pose& pred, const lie::Sim3Pose& label, double beta,
                 double gamma) {
  const double t_term = (pred.translation() - label.translation()).squaredNorm();
  const double r_term =
      lie::so3_log(pred.rotation().transposed() * label.rotation()).squaredNorm();
  const double s_term = std::log(pred.scale()) - std::log(label.scale());
  return t_term + beta * r_term + gamma * s_term * s_term;
}

lie::Sim3Pose decode(const lie::Vec7& xi, const lie::Sim3Pose& reference) {
  return lie::sim3_compose(lie::sim3_exp(lie::Sim3Tangent::from_vector(xi)), reference);
}

// Central finite differences over the 7 regressor outputs; the decode and
// loss heads are tiny, so this stays cheap while the network body keeps its
// analytic backward pass.
lie::Vec7 fd_grad7(const std::function<double(const lie::Vec7&)>& f, const lie::Vec7& x,
                   double h) {
  lie::Vec7 g;
  lie::Vec7 xp = x;
  for (int i = 0; i < 7; ++i) {
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct PairFeatures {
  int frame_i = 0, frame_i1 = 0;          // sample indices of the two frames
  std::vector<render::PixelCoord> px_i, px_i1;
  std::vector<feat::Vec2> coord_i, coord_i1;
  std::vector<double> depth_i, depth_i1;  // refreshed during training
};

}  // namespace

Stage2Result stage2_train(const scene::FrameDataset& dataset,
                          std::span<const lie::Sim3Pose> labels,
                          const render::RadianceField& field, const Stage2Config& cfg) {
  const int n_real = static_cast<int>(dataset.frames.size());
  if (n_real == 0) throw std::invalid_argument("stage2_train: empty dataset");
  if (labels.size() != dataset.frames.size())
    throw std::invalid_argument("stage2_train: label count mismatch");

  Stage2Result result;
  result.model.reference_pose = pose_centroid(labels);

  // Training views: the real frames with their stage-1 labels, plus the
  // synthesized extension.
  struct Sample {
    Eigen::VectorXd input;
    lie::Sim3Pose label;
  };
  std::vector<Sample> samples;
  for (int i = 0; i < n_real; ++i)
    samples.push_back({regressor_input(dataset.frames[i].image), labels[i]});

  if (!cfg.ablate_rvs && cfg.rvs_multiplier > 0) {
    std::vector<double> time_codes;
    for (const auto& f : dataset.frames) time_codes.push_back(f.time_code);
    const auto views =
        rvs_generate(field, labels, time_codes, cfg.rvs_multiplier, cfg.rvs_noise,
                     dataset.camera, cfg.render, util::mix_seed(cfg.seed, 0x52565333),
                     cfg.threads);
    result.rvs_count = static_cast<int>(views.size());
    for (const auto& v : views) samples.push_back({regressor_input(v.image), v.pose});
  }
  const int n_samples = static_cast<int>(samples.size());

  // Matched features of consecutive real pairs for the inter-frame term.
  std::vector<PairFeatures> pairs;
  const bool use_if = !cfg.ablate_if && cfg.lambda > 0.0;
  if (use_if) {
    std::vector<std::vector<feat::Keypoint>> kps(n_real);
    std::vector<std::vector<feat::Descriptor>> desc(n_real);
    for (int i = 0; i < n_real; ++i) {
      const img::ImageGray gray = img::rgb_to_gray(dataset.frames[i].image);
      kps[i] = feat::detect_keypoints(gray, cfg.max_keypoints, cfg.nms_radius);
      for (const auto& kp : kps[i]) desc[i].push_back(feat::describe(gray, kp));
    }
    for (int i = 0; i + 1 < n_real; ++i) {
      feat::MatchSet matches = feat::match_frames(desc[i], desc[i + 1], cfg.match_ratio);
      if (matches.pairs.empty()) continue;
      std::sort(matches.pairs.begin(), matches.pairs.end(),
                [](const feat::Match& a, const feat::Match& b) {
                  if (a.distance != b.distance) return a.distance < b.distance;
                  return a.index_a < b.index_a;
                });
      if (static_cast<int>(matches.pairs.size()) > cfg.max_matches)
        matches.pairs.resize(cfg.max_matches);
      PairFeatures pf;
      pf.frame_i = i;
      pf.frame_i1 = i + 1;
      for (const auto& m : matches.pairs) {
        // Depths are rendered along integer pixel rays, so the normalized
        // coordinates come from the same pixel centers.
        const auto to_px = [&](const feat::Keypoint& kp) {
          return render::PixelCoord{
              std::clamp(static_cast<int>(std::lround(kp.u)), 0, dataset.camera.width - 1),
              std::clamp(static_cast<int>(std::lround(kp.v)), 0, dataset.camera.height - 1)};
        };
        const render::PixelCoord pa = to_px(kps[i][m.index_a]);
        const render::PixelCoord pb = to_px(kps[i + 1][m.index_b]);
        pf.px_i.push_back(pa);
        pf.px_i1.push_back(pb);
        feat::Keypoint ka, kb;
        ka.u = pa.u; ka.v = pa.v;
        kb.u = pb.u; kb.v = pb.v;
        pf.coord_i.push_back(feat::normalize_coord(ka, dataset.camera));
        pf.coord_i1.push_back(feat::normalize_coord(kb, dataset.camera));
      }
      pf.depth_i.resize(pf.px_i.size());
      pf.depth_i1.resize(pf.px_i1.size());
      pairs.push_back(std::move(pf));
    }
    if (pairs.empty())
      util::log_info("stage2_train: no matched pairs, inter-frame term inactive");
  }

  // Regressor network; the last layer starts small so early predictions stay
  // near the reference pose.
  std::vector<optim::LayerSpec> specs;
  int prev = kRegressorInputSize * kRegressorInputSize;
  for (int l = 0; l < cfg.regressor_layers; ++l) {
    specs.push_back({prev, cfg.regressor_hidden, optim::Activation::Relu});
    prev = cfg.regressor_hidden;
  }
  specs.push_back({prev, 7, optim::Activation::Identity});
  result.model.net = optim::DenseNet(specs);
  result.model.net.init_random(util::mix_seed(cfg.seed, 0x5247));
  {
    Eigen::VectorXd p = result.model.net.params();
    const Eigen::Index last = static_cast<Eigen::Index>(prev) * 7 + 7;
    p.tail(last) *= 0.01;
    result.model.net.set_params(p);
  }

  Eigen::MatrixXd inputs(kRegressorInputSize * kRegressorInputSize, n_samples);
  for (int s = 0; s < n_samples; ++s) inputs.col(s) = samples[s].input;

  Eigen::VectorXd params = result.model.net.params();
  optim::AdamState state(params.size());
  const lie::Sim3Pose& reference = result.model.reference_pose;
  const double fd_h = 1e-6;

  for (int iter = 0; iter < cfg.iters; ++iter) {
    optim::DenseNet::Tape tape;
    const Eigen::MatrixXd raw = result.model.net.forward(inputs, &tape);

    Eigen::MatrixXd out_grad = Eigen::MatrixXd::Zero(7, n_samples);
    double loss = 0.0;
    for (int s = 0; s < n_samples; ++s) {
      const lie::Vec7 xi = raw.col(s);
      const auto f = [&](const lie::Vec7& v) {
        return pose_loss(decode(v, reference), samples[s].label, cfg.beta, cfg.gamma);
      };
      loss += f(xi) / n_samples;
      out_grad.col(s) += fd_grad7(f, xi, fd_h) / n_samples;
    }

    if (use_if && !pairs.empty()) {
      const bool refresh = iter % std::max(1, cfg.depth_refresh) == 0;
      double if_total = 0.0;
      for (auto& pf : pairs) {
        const lie::Vec7 xi_i = raw.col(pf.frame_i);
        const lie::Vec7 xi_i1 = raw.col(pf.frame_i1);
        if (refresh) {
          // Depths from the frozen field at the current predictions; treated
          // as constants between refreshes (and for the gradients).
          const lie::Sim3Pose pi = decode(xi_i, reference);
          const lie::Sim3Pose pi1 = decode(xi_i1, reference);
          for (size_t k = 0; k < pf.px_i.size(); ++k) {
            pf.depth_i[k] = render::render_depth(field, dataset.camera, pi,
                                                 dataset.frames[pf.frame_i].time_code,
                                                 pf.px_i[k], cfg.render);
            pf.depth_i1[k] = render::render_depth(field, dataset.camera, pi1,
                                                  dataset.frames[pf.frame_i1].time_code,
                                                  pf.px_i1[k], cfg.render);
          }
        }
        const auto pair_loss = [&](const lie::Vec7& vi, const lie::Vec7& vi1) {
          ifloss::FramePair fp;
          fp.pose_i = decode(vi, reference);
          fp.pose_i1 = decode(vi1, reference);
          fp.depth_i = pf.depth_i;
          fp.depth_i1 = pf.depth_i1;
          fp.coord_i = pf.coord_i;
          fp.coord_i1 = pf.coord_i1;
          return ifloss::if_loss(fp);
        };
        if_total += pair_loss(xi_i, xi_i1);
        const double w = cfg.lambda / static_cast<double>(pairs.size());
        out_grad.col(pf.frame_i) +=
            w * fd_grad7([&](const lie::Vec7& v) { return pair_loss(v, xi_i1); }, xi_i, fd_h);
        out_grad.col(pf.frame_i1) +=
            w * fd_grad7([&](const lie::Vec7& v) { return pair_loss(xi_i, v); }, xi_i1, fd_h);
      }
      loss += cfg.lambda * if_total / static_cast<double>(pairs.size());
    }

    result.loss_history.push_back(loss);
    Eigen::VectorXd param_grad;
    result.model.net.backward(tape, out_grad, param_grad);
    state.step(params, param_grad, cfg.lrs.lr_regressor);
    result.model.net.set_params(params);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

lie::Sim3Pose umeyama_align(std::span<const Vec3> est, std::span<const Vec3> gt) {
  const size_t n = est.size();
  if (n != gt.size() || n < 3)
    throw std::invalid_argument("umeyama_align: need at least 3 point pairs");
  Vec3 mu_e = Vec3::Zero(), mu_g = Vec3::Zero();
  for (size_t i = 0; i < n; ++i) {
    mu_e += est[i];
    mu_g += gt[i];
  }
  mu_e /= static_cast<double>(n);
  mu_g /= static_cast<double>(n);

  lie::Mat3 cross = lie::Mat3::Zero();
  double var_e = 0.0;
  for (size_t i = 0; i < n; ++i) {
    cross += (gt[i] - mu_g) * (est[i] - mu_e).transpose();
    var_e += (est[i] - mu_e).squaredNorm();
  }
  cross /= static_cast<double>(n);
  var_e /= static_cast<double>(n);
  if (var_e < 1e-15) throw std::invalid_argument("umeyama_align: degenerate (coincident) input");

  Eigen::JacobiSVD<lie::Mat3> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d d = svd.singularValues();
  if (d[1] < 1e-12 * std::max(d[0], 1e-300))
    throw std::invalid_argument("umeyama_align: degenerate (collinear) input");
  lie::Mat3 s_fix = lie::Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) s_fix(2, 2) = -1.0;
  const lie::Mat3 r = svd.matrixU() * s_fix * svd.matrixV().transpose();
  const double scale = (d[0] + d[1] * s_fix(1, 1) + d[2] * s_fix(2, 2)) / var_e;
  const Vec3 t = mu_g - scale * (r * mu_e);
  return lie::Sim3Pose(lie::Rotation::from_matrix_unchecked(r), t, scale);
}

EvalReport evaluate(std::span<const lie::Sim3Pose> est, std::span<const lie::Sim3Pose> gt,
                    bool align) {
  if (est.size() != gt.size() || est.empty())
    throw std::invalid_argument("evaluate: pose count mismatch");
  EvalReport report;
  if (align) {
    std::vector<Vec3> te, tg;
    for (const auto& p : est) te.push_back(p.translation());
    for (const auto& p : gt) tg.push_back(p.translation());
    report.alignment = umeyama_align(te, tg);
  }
  for (size_t i = 0; i < est.size(); ++i) {
    const lie::Sim3Pose aligned = align ? lie::sim3_compose(report.alignment, est[i]) : est[i];
    report.per_frame_translation.push_back(
        (aligned.translation() - gt[i].translation()).norm());
    report.per_frame_rotation_deg.push_back(
        lie::so3_log(aligned.rotation().transposed() * gt[i].rotation()).norm() * 180.0 / M_PI);
  }
  report.median_translation_error = lower_median(report.per_frame_translation);
  report.median_rotation_error_deg = lower_median(report.per_frame_rotation_deg);
  return report;
}

double rerender_psnr(const render::RadianceField& field, const scene::FrameDataset& dataset,
                     std::span<const lie::Sim3Pose> poses, const render::RenderConfig& rc,
                     int threads) {
  if (poses.size() != dataset.frames.size())
    throw std::invalid_argument("rerender_psnr: pose count mismatch");
  double total = 0.0;
  for (size_t i = 0; i < poses.size(); ++i) {
    const img::ImageRGB rendered = render::render_image(
        field, dataset.camera, poses[i], dataset.frames[i].time_code, rc, threads);
    total += img::psnr(rendered, dataset.frames[i].image);
  }
  return total / static_cast<double>(poses.size());
}

}  // namespace wscloc::pipeline
