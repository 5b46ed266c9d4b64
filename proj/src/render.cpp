#include "wscloc/render.hpp"

#include "wscloc/logging.hpp"
#include "wscloc/parallel.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>

namespace wscloc::render {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

}  // namespace

double encoding_window(const EncodingConfig& cfg, int j) {
  const double raw = clamp01(cfg.alpha - (j - 1));
  return 0.5 * (1.0 - std::cos(M_PI * raw));
}

Eigen::VectorXd positional_encoding(const Eigen::VectorXd& x, const EncodingConfig& cfg) {
  const Eigen::Index k = x.size();
  Eigen::VectorXd out(k * (1 + 2 * cfg.n_freqs));
  out.head(k) = x;
  Eigen::Index off = k;
  for (int j = 1; j <= cfg.n_freqs; ++j) {
    const double w = encoding_window(cfg, j);
    const double freq = std::ldexp(M_PI, j - 1);  // 2^{j-1} * pi
    for (Eigen::Index i = 0; i < k; ++i) out[off + i] = w * std::sin(freq * x[i]);
    for (Eigen::Index i = 0; i < k; ++i) out[off + k + i] = w * std::cos(freq * x[i]);
    off += 2 * k;
  }
  return out;
}

Ray gen_ray(const scene::PinholeCamera& camera, const lie::Sim3Pose& pose, PixelCoord pixel) {
  if (pixel.u < 0 || pixel.u >= camera.width || pixel.v < 0 || pixel.v >= camera.height)
    throw std::invalid_argument("gen_ray: pixel out of bounds");
  const Vec3 dir_cam = Vec3((pixel.u + 0.5 - camera.cx) / camera.fx,
                            (pixel.v + 0.5 - camera.cy) / camera.fy, 1.0)
                           .normalized();
  Ray ray;
  // Pose scale deliberately does not rescale the unit direction; scale acts
  // through translations and depths only.
  ray.direction = (pose.rotation() * dir_cam).normalized();
  ray.origin = pose.translation();
  ray.t_near = camera.near;
  ray.t_far = camera.far;
  return ray;
}

std::vector<Ray> gen_rays(const scene::PinholeCamera& camera, const lie::Sim3Pose& pose,
                          std::span<const PixelCoord> pixels) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const PixelCoord& p : pixels) rays.push_back(gen_ray(camera, pose, p));
  return rays;
}

std::vector<double> sample_coarse(const Ray& ray, int n, bool stratified, util::Rng& rng) {
  if (n < 2) throw std::invalid_argument("sample_coarse: need at least 2 samples");
  const double step = (ray.t_far - ray.t_near) / n;
  std::vector<double> depths(n);
  for (int i = 0; i < n; ++i) {
    const double jitter = stratified ? rng.uniform() : 0.5;
    depths[i] = ray.t_near + (i + jitter) * step;
  }
  return depths;
}

std::vector<double> sample_fine(const Ray& ray, std::span<const double> coarse_depths,
                                std::span<const double> coarse_weights, int n, util::Rng& rng) {
  const size_t m = coarse_depths.size();
  if (m == 0 || coarse_weights.size() != m)
    throw std::invalid_argument("sample_fine: depth/weight size mismatch");
  for (double w : coarse_weights)
    if (w < 0.0) throw std::invalid_argument("sample_fine: negative weight");

  // Bin edges: ray bounds plus the midpoints between coarse samples.
  std::vector<double> edges(m + 1);
  edges[0] = ray.t_near;
  for (size_t i = 1; i < m; ++i) edges[i] = 0.5 * (coarse_depths[i - 1] + coarse_depths[i]);
  edges[m] = ray.t_far;

  double total = 0.0;
  for (double w : coarse_weights) total += w;
  std::vector<double> cdf(m);
  double acc = 0.0;
  for (size_t i = 0; i < m; ++i) {
    acc += total < 1e-12 ? 1.0 / static_cast<double>(m) : coarse_weights[i] / total;
    cdf[i] = acc;
  }
  cdf[m - 1] = 1.0;

  std::vector<double> out;
  out.reserve(static_cast<size_t>(n) + m);
  for (int k = 0; k < n; ++k) {
    // Stratified u draws keep the inverse-CDF samples well spread.
    const double u = (k + rng.uniform()) / n;
    const size_t bin = static_cast<size_t>(
        std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    const double lo_cdf = bin == 0 ? 0.0 : cdf[bin - 1];
    const double mass = cdf[bin] - lo_cdf;
    const double frac = mass > 0.0 ? (u - lo_cdf) / mass : 0.5;
    out.push_back(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
  }
  out.insert(out.end(), coarse_depths.begin(), coarse_depths.end());
  std::sort(out.begin(), out.end());
  return out;
}

RenderOutput composite(std::span<const double> depths, std::span<const double> densities,
                       std::span<const Vec3> colors, double t_far) {
  const size_t n = depths.size();
  if (densities.size() != n || colors.size() != n)
    throw std::invalid_argument("composite: input length mismatch");
  RenderOutput out;
  out.weights.resize(n);
  double transmittance = 1.0;
  double depth_acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (densities[i] < 0.0) throw std::invalid_argument("composite: negative density");
    const double delta = (i + 1 < n ? depths[i + 1] : t_far) - depths[i];
    const double alpha = -std::expm1(-densities[i] * delta);
    const double w = transmittance * alpha;
    out.weights[i] = w;
    out.rgb += w * colors[i];
    depth_acc += w * depths[i];
    out.opacity += w;
    transmittance *= 1.0 - alpha;
  }
  assert(out.opacity <= 1.0 + 1e-9);
  out.depth = depth_acc / std::max(out.opacity, 1e-9);
  return out;
}

std::vector<double> fine_pdf_weights(std::span<const double> weights) {
  // One-neighborhood max blur. A coarse sample just before an absorption
  // front carries zero weight although the front rises inside its bin; the
  // blur lets adjacent bins receive fine samples so the front gets resolved.
  std::vector<double> out(weights.size());
  for (size_t i = 0; i < weights.size(); ++i) {
    double w = weights[i];
    if (i > 0) w = std::max(w, weights[i - 1]);
    if (i + 1 < weights.size()) w = std::max(w, weights[i + 1]);
    out[i] = w;
  }
  return out;
}

scene::FieldSample RadianceField::eval_one(const Vec3& x, double time_code) const {
  double density;
  Vec3 color;
  eval(std::span<const Vec3>(&x, 1), time_code, std::span<double>(&density, 1),
       std::span<Vec3>(&color, 1));
  return {density, color};
}

// ---------------------------------------------------------------------------
// Blob backend

BlobFieldBackend::BlobFieldBackend(scene::BlobField field) : field_(std::move(field)) {
  field_.validate();
}

Eigen::Index BlobFieldBackend::param_count() const {
  return static_cast<Eigen::Index>(field_.blobs.size()) * 11;
}

Eigen::VectorXd BlobFieldBackend::params() const {
  Eigen::VectorXd p(param_count());
  Eigen::Index off = 0;
  for (const auto& b : field_.blobs) {
    p.segment<3>(off) = b.center0;
    p.segment<3>(off + 3) = b.velocity;
    p[off + 6] = b.sigma_spatial;
    p[off + 7] = b.amplitude;
    p.segment<3>(off + 8) = b.color;
    off += 11;
  }
  return p;
}

void BlobFieldBackend::set_params(const Eigen::VectorXd& p) {
  if (p.size() != param_count())
    throw std::invalid_argument("BlobFieldBackend: parameter size mismatch");
  Eigen::Index off = 0;
  for (auto& b : field_.blobs) {
    b.center0 = p.segment<3>(off);
    b.velocity = p.segment<3>(off + 3);
    b.sigma_spatial = p[off + 6];
    b.amplitude = p[off + 7];
    b.color = p.segment<3>(off + 8);
    off += 11;
  }
}

void BlobFieldBackend::eval(std::span<const Vec3> xs, double time_code, std::span<double> density,
                            std::span<Vec3> color) const {
  const double t = time_enabled_ ? time_code : 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const scene::FieldSample s = scene::field_eval(
        field_, xs[i], t);
    density[i] = s.density;
    color[i] = s.color;
  }
}

void BlobFieldBackend::eval_grad(std::span<const Vec3> xs, double time_code,
                                 std::span<const double> d_density,
                                 std::span<const Vec3> d_color, std::span<Vec3> x_grad,
                                 Eigen::VectorXd* param_grad) const {
  const double t = time_enabled_ ? time_code : 0.0;
  const size_t n_blobs = field_.blobs.size();
  if (param_grad != nullptr && param_grad->size() != param_count())
    *param_grad = Eigen::VectorXd::Zero(param_count());

  for (size_t i = 0; i < xs.size(); ++i) {
    // Recompute the forward pass for this sample.
    double total = 0.0;
    Vec3 numer = Vec3::Zero();
    std::vector<double> g(n_blobs);
    for (size_t b = 0; b < n_blobs; ++b) {
      const auto& blob = field_.blobs[b];
      const Vec3 r = xs[i] - (blob.center0 + t * blob.velocity);
      const double s2 = blob.sigma_spatial * blob.sigma_spatial;
      g[b] = blob.amplitude * std::exp(-r.squaredNorm() / (2.0 * s2));
      total += g[b];
      numer += g[b] * blob.color;
    }
    const bool floored = total < 1e-12;
    const Vec3 color = floored
                           ? (n_blobs == 0 ? Vec3::Zero()
                                           : [&] {
                                               Vec3 m = Vec3::Zero();
                                               for (const auto& blob : field_.blobs) m += blob.color;
                                               return Vec3(m / static_cast<double>(n_blobs));
                                             }())
                           : Vec3(numer / total);

    Vec3 xg = Vec3::Zero();
    for (size_t b = 0; b < n_blobs; ++b) {
      const auto& blob = field_.blobs[b];
      const Vec3 r = xs[i] - (blob.center0 + t * blob.velocity);
      const double s2 = blob.sigma_spatial * blob.sigma_spatial;
      // Upstream sensitivity to this blob's density response.
      double u = d_density[i];
      if (!floored) u += d_color[i].dot(blob.color - color) / total;
      const Vec3 dg_dx = -g[b] / s2 * r;
      xg += u * dg_dx;
      if (param_grad != nullptr) {
        const Eigen::Index off = static_cast<Eigen::Index>(b) * 11;
        const Vec3 dg_dc = g[b] / s2 * r;
        param_grad->segment<3>(off) += u * dg_dc;
        param_grad->segment<3>(off + 3) += u * t * dg_dc;
        (*param_grad)[off + 6] += u * g[b] * r.squaredNorm() / (s2 * blob.sigma_spatial);
        (*param_grad)[off + 7] += u * g[b] / blob.amplitude;
        if (!floored)
          param_grad->segment<3>(off + 8) += (g[b] / total) * d_color[i];
        else if (n_blobs > 0)
          param_grad->segment<3>(off + 8) += d_color[i] / static_cast<double>(n_blobs);
      }
    }
    if (!x_grad.empty()) x_grad[i] = xg;
  }
}

// ---------------------------------------------------------------------------
// MLP backend

MlpField::MlpField(const MlpFieldConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  enc_xyz_ = {cfg.n_freqs_xyz, static_cast<double>(cfg.n_freqs_xyz)};
  enc_time_ = {cfg.n_freqs_time, static_cast<double>(cfg.n_freqs_time)};
  const int in_dim = 3 * (1 + 2 * cfg.n_freqs_xyz) + (1 + 2 * cfg.n_freqs_time);
  std::vector<optim::LayerSpec> specs;
  int prev = in_dim;
  for (int l = 0; l < cfg.hidden_layers; ++l) {
    specs.push_back({prev, cfg.hidden_width, optim::Activation::Softplus});
    prev = cfg.hidden_width;
  }
  specs.push_back({prev, 4, optim::Activation::Identity});
  net_ = optim::DenseNet(specs);
  net_.init_random(init_seed);
}

void MlpField::set_alpha(double alpha) {
  enc_xyz_.alpha = std::clamp(alpha, 0.0, static_cast<double>(enc_xyz_.n_freqs));
}

void MlpField::set_net(optim::DenseNet net) {
  if (net.input_dim() != net_.input_dim() || net.output_dim() != 4)
    throw std::invalid_argument("MlpField: incompatible network");
  net_ = std::move(net);
}

Eigen::Index MlpField::param_count() const { return net_.param_count(); }
Eigen::VectorXd MlpField::params() const { return net_.params(); }
void MlpField::set_params(const Eigen::VectorXd& p) { net_.set_params(p); }

Eigen::MatrixXd MlpField::encode(std::span<const Vec3> xs, double time_code) const {
  const int xyz_dim = 3 * (1 + 2 * enc_xyz_.n_freqs);
  const int time_dim = 1 + 2 * enc_time_.n_freqs;
  Eigen::MatrixXd input(xyz_dim + time_dim, static_cast<Eigen::Index>(xs.size()));

  Eigen::VectorXd time_block = Eigen::VectorXd::Zero(time_dim);
  if (time_enabled_) {
    Eigen::VectorXd tv(1);
    tv[0] = time_code;
    time_block = positional_encoding(tv, enc_time_);
  }

  for (size_t c = 0; c < xs.size(); ++c) {
    const Vec3 p = cfg_.pos_scale * xs[c];
    input.block(0, static_cast<Eigen::Index>(c), 3, 1) = p;
    Eigen::Index off = 3;
    for (int j = 1; j <= enc_xyz_.n_freqs; ++j) {
      const double w = encoding_window(enc_xyz_, j);
      const double freq = std::ldexp(M_PI, j - 1);
      for (int i = 0; i < 3; ++i)
        input(off + i, static_cast<Eigen::Index>(c)) = w * std::sin(freq * p[i]);
      for (int i = 0; i < 3; ++i)
        input(off + 3 + i, static_cast<Eigen::Index>(c)) = w * std::cos(freq * p[i]);
      off += 6;
    }
    input.block(xyz_dim, static_cast<Eigen::Index>(c), time_dim, 1) = time_block;
  }
  return input;
}

void MlpField::eval(std::span<const Vec3> xs, double time_code, std::span<double> density,
                    std::span<Vec3> color) const {
  if (xs.empty()) return;
  const Eigen::MatrixXd raw = net_.forward(encode(xs, time_code));
  for (size_t i = 0; i < xs.size(); ++i) {
    const auto col = raw.col(static_cast<Eigen::Index>(i));
    density[i] = softplus(col[0]);
    color[i] = Vec3(sigmoid(col[1]), sigmoid(col[2]), sigmoid(col[3]));
  }
}

void MlpField::eval_grad(std::span<const Vec3> xs, double time_code,
                         std::span<const double> d_density, std::span<const Vec3> d_color,
                         std::span<Vec3> x_grad, Eigen::VectorXd* param_grad) const {
  if (xs.empty()) return;
  optim::DenseNet::Tape tape;
  const Eigen::MatrixXd raw = net_.forward(encode(xs, time_code), &tape);

  Eigen::MatrixXd d_raw(4, raw.cols());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    d_raw(0, c) = d_density[static_cast<size_t>(c)] * sigmoid(raw(0, c));  // softplus'
    for (int k = 0; k < 3; ++k) {
      const double s = sigmoid(raw(1 + k, c));
      d_raw(1 + k, c) = d_color[static_cast<size_t>(c)][k] * s * (1.0 - s);
    }
  }

  Eigen::VectorXd scratch;
  Eigen::VectorXd& pg = param_grad != nullptr ? *param_grad : scratch;
  const Eigen::MatrixXd d_input = net_.backward(tape, d_raw, pg);

  if (!x_grad.empty()) {
    for (Eigen::Index c = 0; c < raw.cols(); ++c) {
      const Vec3 p = cfg_.pos_scale * xs[static_cast<size_t>(c)];
      Vec3 dp = d_input.block(0, c, 3, 1);
      Eigen::Index off = 3;
      for (int j = 1; j <= enc_xyz_.n_freqs; ++j) {
        const double w = encoding_window(enc_xyz_, j);
        const double freq = std::ldexp(M_PI, j - 1);
        for (int i = 0; i < 3; ++i)
          dp[i] += d_input(off + i, c) * w * freq * std::cos(freq * p[i]);
        for (int i = 0; i < 3; ++i)
          dp[i] -= d_input(off + 3 + i, c) * w * freq * std::sin(freq * p[i]);
        off += 6;
      }
      x_grad[static_cast<size_t>(c)] = cfg_.pos_scale * dp;
    }
  }
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct PixelForward {
  Ray ray;
  std::vector<double> depths;
  RenderOutput out;
};

void eval_field_at(const RadianceField& field, const Ray& ray, std::span<const double> depths,
                   double time_code, std::vector<Vec3>& xs, std::vector<double>& density,
                   std::vector<Vec3>& color) {
  xs.resize(depths.size());
  for (size_t i = 0; i < depths.size(); ++i) xs[i] = ray.origin + depths[i] * ray.direction;
  density.resize(depths.size());
  color.resize(depths.size());
  field.eval(xs, time_code, density, color);
}

}  // namespace

RenderOutput render_pixel(const RadianceField& field, const scene::PinholeCamera& camera,
                          const lie::Sim3Pose& pose, double time_code, PixelCoord pixel,
                          const RenderConfig& cfg, util::Rng& rng) {
  const Ray ray = gen_ray(camera, pose, pixel);
  std::vector<Vec3> xs, color;
  std::vector<double> density;

  const std::vector<double> coarse = sample_coarse(ray, cfg.n_coarse, cfg.stratified, rng);
  eval_field_at(field, ray, coarse, time_code, xs, density, color);
  const RenderOutput coarse_out = composite(coarse, density, color, ray.t_far);

  const std::vector<double> fine =
      sample_fine(ray, coarse, fine_pdf_weights(coarse_out.weights), cfg.n_fine, rng);
  eval_field_at(field, ray, fine, time_code, xs, density, color);
  RenderOutput out = composite(fine, density, color, ray.t_far);
  out.rgb += (1.0 - out.opacity) * cfg.background;
  return out;
}

img::ImageRGB render_image(const RadianceField& field, const scene::PinholeCamera& camera,
                           const lie::Sim3Pose& pose, double time_code, const RenderConfig& cfg,
                           int threads) {
  img::ImageRGB image(camera.width, camera.height);
  util::parallel_for(camera.height, threads, [&](int y) {
    for (int x = 0; x < camera.width; ++x) {
      util::Rng rng(util::mix_seed(0x52454e44ull, static_cast<uint64_t>(y) * camera.width + x));
      image.at(x, y) = render_pixel(field, camera, pose, time_code, {x, y}, cfg, rng).rgb;
    }
  });
  return image;
}

ImageDepthRender render_image_depth(const RadianceField& field,
                                    const scene::PinholeCamera& camera,
                                    const lie::Sim3Pose& pose, double time_code,
                                    const RenderConfig& cfg, int threads) {
  ImageDepthRender out;
  out.rgb = img::ImageRGB(camera.width, camera.height);
  out.depth = img::ImageGray(camera.width, camera.height);
  util::parallel_for(camera.height, threads, [&](int y) {
    for (int x = 0; x < camera.width; ++x) {
      util::Rng rng(util::mix_seed(0x52454e44ull, static_cast<uint64_t>(y) * camera.width + x));
      const RenderOutput px = render_pixel(field, camera, pose, time_code, {x, y}, cfg, rng);
      out.rgb.at(x, y) = px.rgb;
      out.depth.at(x, y) = px.depth;
    }
  });
  return out;
}

double render_depth(const RadianceField& field, const scene::PinholeCamera& camera,
                    const lie::Sim3Pose& pose, double time_code, PixelCoord pixel,
                    const RenderConfig& cfg) {
  util::Rng rng(util::mix_seed(0x44455054ull,
                               static_cast<uint64_t>(pixel.v) * camera.width + pixel.u));
  return render_pixel(field, camera, pose, time_code, pixel, cfg, rng).depth;
}

double photometric_loss(std::span<const Vec3> rendered, std::span<const Vec3> reference) {
  if (rendered.size() != reference.size() || rendered.empty())
    throw std::invalid_argument("photometric_loss: shape mismatch");
  double sum = 0.0;
  for (size_t i = 0; i < rendered.size(); ++i) sum += (rendered[i] - reference[i]).squaredNorm();
  return sum / (3.0 * static_cast<double>(rendered.size()));
}

FrozenSamples freeze_samples(const RadianceField& field, const scene::PinholeCamera& camera,
                             const lie::Sim3Pose& pose, double time_code, PixelCoord pixel,
                             const RenderConfig& cfg, util::Rng& rng) {
  const Ray ray = gen_ray(camera, pose, pixel);
  std::vector<Vec3> xs, color;
  std::vector<double> density;
  const std::vector<double> coarse = sample_coarse(ray, cfg.n_coarse, cfg.stratified, rng);
  eval_field_at(field, ray, coarse, time_code, xs, density, color);
  const RenderOutput coarse_out = composite(coarse, density, color, ray.t_far);
  return {pixel, sample_fine(ray, coarse, fine_pdf_weights(coarse_out.weights), cfg.n_fine, rng)};
}

Vec3 render_frozen(const RadianceField& field, const scene::PinholeCamera& camera,
                   const lie::Sim3Pose& pose, double time_code, const FrozenSamples& samples,
                   const RenderConfig& cfg) {
  const Ray ray = gen_ray(camera, pose, samples.pixel);
  std::vector<Vec3> xs, color;
  std::vector<double> density;
  eval_field_at(field, ray, samples.depths, time_code, xs, density, color);
  RenderOutput out = composite(samples.depths, density, color, ray.t_far);
  return out.rgb + (1.0 - out.opacity) * cfg.background;
}

BatchGradResult render_batch_grad(const RadianceField& field, const scene::PinholeCamera& camera,
                                  const lie::Sim3Pose& pose, double time_code,
                                  std::span<const PixelCoord> pixels,
                                  std::span<const Vec3> reference, const RenderConfig& cfg,
                                  util::Rng& rng, bool want_pose, bool want_field,
                                  const std::vector<FrozenSamples>* reuse_frozen) {
  if (pixels.size() != reference.size() || pixels.empty())
    throw std::invalid_argument("render_batch_grad: batch shape mismatch");
  const size_t n_pixels = pixels.size();

  BatchGradResult result;
  std::vector<Ray> rays(n_pixels);
  for (size_t p = 0; p < n_pixels; ++p) rays[p] = gen_ray(camera, pose, pixels[p]);

  if (reuse_frozen != nullptr) {
    if (reuse_frozen->size() != n_pixels)
      throw std::invalid_argument("render_batch_grad: frozen sample count mismatch");
    result.frozen = *reuse_frozen;
  } else {
    // Coarse placement pass, batched across the whole pixel set.
    std::vector<std::vector<double>> coarse(n_pixels);
    std::vector<Vec3> coarse_xs;
    coarse_xs.reserve(n_pixels * static_cast<size_t>(cfg.n_coarse));
    for (size_t p = 0; p < n_pixels; ++p) {
      coarse[p] = sample_coarse(rays[p], cfg.n_coarse, cfg.stratified, rng);
      for (double t : coarse[p]) coarse_xs.push_back(rays[p].origin + t * rays[p].direction);
    }
    std::vector<double> cdensity(coarse_xs.size());
    std::vector<Vec3> ccolor(coarse_xs.size());
    field.eval(coarse_xs, time_code, cdensity, ccolor);
    result.frozen.reserve(n_pixels);
    size_t base = 0;
    for (size_t p = 0; p < n_pixels; ++p) {
      const size_t nc = coarse[p].size();
      const RenderOutput cout = composite(
          coarse[p], std::span<const double>(&cdensity[base], nc),
          std::span<const Vec3>(&ccolor[base], nc), rays[p].t_far);
      result.frozen.push_back({pixels[p], sample_fine(rays[p], coarse[p],
                                           fine_pdf_weights(cout.weights), cfg.n_fine, rng)});
      base += nc;
    }
  }

  // Gather every sample of every pixel into one field evaluation.
  std::vector<size_t> offsets(n_pixels + 1, 0);
  for (size_t p = 0; p < n_pixels; ++p)
    offsets[p + 1] = offsets[p] + result.frozen[p].depths.size();
  const size_t n_samples = offsets[n_pixels];
  std::vector<Vec3> xs(n_samples);
  for (size_t p = 0; p < n_pixels; ++p)
    for (size_t i = 0; i < result.frozen[p].depths.size(); ++i)
      xs[offsets[p] + i] = rays[p].origin + result.frozen[p].depths[i] * rays[p].direction;

  std::vector<double> density(n_samples);
  std::vector<Vec3> color(n_samples);
  field.eval(xs, time_code, density, color);

  // Forward compositing and backward pass through it, per pixel in index
  // order so reductions are reproducible.
  std::vector<double> d_density(n_samples, 0.0);
  std::vector<Vec3> d_color(n_samples, Vec3::Zero());
  const double inv_norm = 1.0 / (3.0 * static_cast<double>(n_pixels));

  for (size_t p = 0; p < n_pixels; ++p) {
    const auto& depths = result.frozen[p].depths;
    const size_t n = depths.size();
    const size_t base = offsets[p];
    const RenderOutput out = composite(
        std::span<const double>(depths.data(), n), std::span<const double>(&density[base], n),
        std::span<const Vec3>(&color[base], n), rays[p].t_far);
    const Vec3 rgb = out.rgb + (1.0 - out.opacity) * cfg.background;
    const Vec3 residual = rgb - reference[p];
    result.loss += residual.squaredNorm() * inv_norm;
    const Vec3 g = 2.0 * inv_norm * residual;

    // Backward through compositing: suffix sums give dL/dalpha.
    double suffix = 0.0;  // sum over later samples of dL/dw_j * w_j
    std::vector<double> dl_dw(n);
    for (size_t i = 0; i < n; ++i) dl_dw[i] = (color[base + i] - cfg.background).dot(g);
    double transmittance = 1.0;
    std::vector<double> trans(n);
    std::vector<double> alpha(n);
    for (size_t i = 0; i < n; ++i) {
      const double delta = (i + 1 < n ? depths[i + 1] : rays[p].t_far) - depths[i];
      alpha[i] = -std::expm1(-density[base + i] * delta);
      trans[i] = transmittance;
      transmittance *= 1.0 - alpha[i];
    }
    for (size_t ii = n; ii-- > 0;) {
      const double one_minus = 1.0 - alpha[ii];
      const double dl_dalpha =
          dl_dw[ii] * trans[ii] - (one_minus > 1e-12 ? suffix / one_minus : 0.0);
      const double delta = (ii + 1 < n ? depths[ii + 1] : rays[p].t_far) - depths[ii];
      d_density[base + ii] = dl_dalpha * delta * std::exp(-density[base + ii] * delta);
      d_color[base + ii] = out.weights[ii] * g;
      suffix += dl_dw[ii] * out.weights[ii];
    }
  }

  // One batched reverse pass through the field.
  std::vector<Vec3> x_grad;
  if (want_pose) x_grad.assign(n_samples, Vec3::Zero());
  Eigen::VectorXd* pg = nullptr;
  if (want_field) {
    result.field_grad = Eigen::VectorXd::Zero(field.param_count());
    pg = &result.field_grad;
  }
  if (want_pose || want_field)
    field.eval_grad(xs, time_code, d_density, d_color,
                    want_pose ? std::span<Vec3>(x_grad) : std::span<Vec3>(), pg);

  if (want_pose) {
    // Chain to the left-retraction tangent at the current pose: positions
    // x = o + t d with o and d functions of the tangent.
    const Vec3& t0 = pose.translation();
    Vec3 g_rho = Vec3::Zero();
    Vec3 g_phi = Vec3::Zero();
    double g_sigma = 0.0;
    for (size_t p = 0; p < n_pixels; ++p) {
      Vec3 g_o = Vec3::Zero();
      Vec3 g_d = Vec3::Zero();
      for (size_t i = 0; i < result.frozen[p].depths.size(); ++i) {
        g_o += x_grad[offsets[p] + i];
        g_d += result.frozen[p].depths[i] * x_grad[offsets[p] + i];
      }
      g_rho += g_o;
      g_phi += t0.cross(g_o) + rays[p].direction.cross(g_d);
      g_sigma += t0.dot(g_o);
    }
    result.pose_grad = lie::Sim3Tangent(g_rho, g_phi, g_sigma);
  }
  return result;
}

lie::Sim3Tangent grad_pose(const RadianceField& field, const scene::PinholeCamera& camera,
                           const lie::Sim3Pose& pose, double time_code,
                           std::span<const PixelCoord> pixels, std::span<const Vec3> reference,
                           const RenderConfig& cfg, util::Rng& rng) {
  return render_batch_grad(field, camera, pose, time_code, pixels, reference, cfg, rng,
                           /*want_pose=*/true, /*want_field=*/false)
      .pose_grad;
}

Eigen::VectorXd grad_field(const RadianceField& field, const scene::PinholeCamera& camera,
                           const lie::Sim3Pose& pose, double time_code,
                           std::span<const PixelCoord> pixels, std::span<const Vec3> reference,
                           const RenderConfig& cfg, util::Rng& rng) {
  return render_batch_grad(field, camera, pose, time_code, pixels, reference, cfg, rng,
                           /*want_pose=*/false, /*want_field=*/true)
      .field_grad;
}

std::vector<PixelCoord> keypoint_weighted_pixels(std::span<const KeypointPixel> keypoints,
                                                 int width, int height, int n, double mix,
                                                 util::Rng& rng) {
  if (n < 1) throw std::invalid_argument("keypoint_weighted_pixels: n must be positive");
  double effective_mix = mix;
  if (keypoints.empty() && mix > 0.0) {
    util::log_debug("keypoint_weighted_pixels: no keypoints, falling back to uniform");
    effective_mix = 0.0;
  }
  std::vector<PixelCoord> out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    if (effective_mix > 0.0 && rng.uniform() < effective_mix) {
      const auto& kp = keypoints[rng.uniform_int(keypoints.size())];
      const int u = static_cast<int>(std::lround(kp.u + 2.0 * rng.normal()));
      const int v = static_cast<int>(std::lround(kp.v + 2.0 * rng.normal()));
      out.push_back({std::clamp(u, 0, width - 1), std::clamp(v, 0, height - 1)});
    } else {
      out.push_back({static_cast<int>(rng.uniform_int(static_cast<uint64_t>(width))),
                     static_cast<int>(rng.uniform_int(static_cast<uint64_t>(height)))});
    }
  }
  return out;
}

}  // namespace wscloc::render
