#include "wscloc/optim.hpp"

#include "wscloc/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace wscloc::optim {

namespace {

double activate(Activation act, double x) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Softplus: return x > 30.0 ? x : std::log1p(std::exp(x));
    case Activation::Sigmoid: return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                              : std::exp(x) / (1.0 + std::exp(x));
  }
  return x;
}

double activate_deriv(Activation act, double pre) {
  switch (act) {
    case Activation::Identity: return 1.0;
    case Activation::Relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::Softplus: return activate(Activation::Sigmoid, pre);
    case Activation::Sigmoid: {
      const double s = activate(Activation::Sigmoid, pre);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

void write_u32_le(std::ofstream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f64_le(std::ofstream& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64_le(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

AdamState::AdamState(Eigen::Index dim, AdamConfig cfg)
    : cfg_(cfg), m_(VectorXd::Zero(dim)), v_(VectorXd::Zero(dim)) {}

void AdamState::step(VectorXd& params, const VectorXd& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  ++step_count_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grads;
  v_ = cfg_.beta2 * v_.array().matrix() + (1.0 - cfg_.beta2) * grads.cwiseProduct(grads);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  const VectorXd m_hat = m_ / bc1;
  const VectorXd v_hat = v_ / bc2;
  params -= lr * (m_hat.array() / (v_hat.array().sqrt() + cfg_.epsilon)).matrix();
}

void adam_step(AdamState& state, VectorXd& params, const VectorXd& grads, double lr) {
  state.step(params, grads, lr);
}

VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                     double h) {
  VectorXd g(x.size());
  VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("fd_gradient: non-finite function value");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

DenseNet::DenseNet(std::vector<LayerSpec> layers) : specs_(std::move(layers)) {
  if (specs_.empty()) throw std::invalid_argument("DenseNet: no layers");
  for (size_t i = 0; i + 1 < specs_.size(); ++i)
    if (specs_[i].out != specs_[i + 1].in)
      throw std::invalid_argument("DenseNet: layer dimensions do not chain");
  for (const auto& s : specs_) {
    weights_.emplace_back(MatrixXd::Zero(s.out, s.in));
    biases_.emplace_back(VectorXd::Zero(s.out));
  }
}

void DenseNet::init_random(uint64_t seed) {
  util::Rng rng(seed);
  for (size_t l = 0; l < specs_.size(); ++l) {
    const double bound = std::sqrt(6.0 / (specs_[l].in + specs_[l].out));
    for (Eigen::Index j = 0; j < weights_[l].cols(); ++j)
      for (Eigen::Index i = 0; i < weights_[l].rows(); ++i)
        weights_[l](i, j) = rng.uniform(-bound, bound);
    biases_[l].setZero();
  }
}

int DenseNet::input_dim() const { return specs_.front().in; }
int DenseNet::output_dim() const { return specs_.back().out; }

Eigen::Index DenseNet::param_count() const {
  Eigen::Index n = 0;
  for (const auto& s : specs_) n += static_cast<Eigen::Index>(s.out) * s.in + s.out;
  return n;
}

VectorXd DenseNet::params() const {
  VectorXd p(param_count());
  Eigen::Index off = 0;
  for (size_t l = 0; l < specs_.size(); ++l) {
    for (Eigen::Index i = 0; i < weights_[l].rows(); ++i)
      for (Eigen::Index j = 0; j < weights_[l].cols(); ++j) p[off++] = weights_[l](i, j);
    p.segment(off, biases_[l].size()) = biases_[l];
    off += biases_[l].size();
  }
  return p;
}

void DenseNet::set_params(const VectorXd& p) {
  if (p.size() != param_count()) throw std::invalid_argument("DenseNet: parameter size mismatch");
  Eigen::Index off = 0;
  for (size_t l = 0; l < specs_.size(); ++l) {
    for (Eigen::Index i = 0; i < weights_[l].rows(); ++i)
      for (Eigen::Index j = 0; j < weights_[l].cols(); ++j) weights_[l](i, j) = p[off++];
    biases_[l] = p.segment(off, biases_[l].size());
    off += biases_[l].size();
  }
}

MatrixXd DenseNet::forward(const MatrixXd& input, Tape* tape) const {
  if (input.rows() != input_dim())
    throw std::invalid_argument("DenseNet::forward: input dimension mismatch");
  if (tape != nullptr) {
    tape->input = input;
    tape->pre.clear();
    tape->post.clear();
    tape->specs = specs_;
  }
  MatrixXd x = input;
  for (size_t l = 0; l < specs_.size(); ++l) {
    MatrixXd pre = (weights_[l] * x).colwise() + biases_[l];
    MatrixXd post = pre.unaryExpr([&](double v) { return activate(specs_[l].act, v); });
    if (tape != nullptr) {
      tape->pre.push_back(pre);
      tape->post.push_back(post);
    }
    x = std::move(post);
  }
  return x;
}

MatrixXd DenseNet::backward(const Tape& tape, const MatrixXd& out_grad,
                            VectorXd& param_grad) const {
  if (tape.specs.size() != specs_.size() || tape.pre.size() != specs_.size())
    throw std::invalid_argument("DenseNet::backward: stale tape");
  for (size_t l = 0; l < specs_.size(); ++l)
    if (tape.specs[l].in != specs_[l].in || tape.specs[l].out != specs_[l].out ||
        tape.specs[l].act != specs_[l].act)
      throw std::invalid_argument("DenseNet::backward: stale tape");
  if (out_grad.rows() != output_dim() || out_grad.cols() != tape.input.cols())
    throw std::invalid_argument("DenseNet::backward: output gradient shape mismatch");

  if (param_grad.size() != param_count()) param_grad = VectorXd::Zero(param_count());

  // Flat layout offsets: per layer, row-major weights then bias.
  std::vector<Eigen::Index> offsets(specs_.size());
  Eigen::Index off = 0;
  for (size_t l = 0; l < specs_.size(); ++l) {
    offsets[l] = off;
    off += static_cast<Eigen::Index>(specs_[l].out) * specs_[l].in + specs_[l].out;
  }

  MatrixXd delta = out_grad;
  for (size_t li = specs_.size(); li-- > 0;) {
    const MatrixXd& pre = tape.pre[li];
    MatrixXd dpre =
        delta.array() * pre.unaryExpr([&](double v) { return activate_deriv(specs_[li].act, v); }).array();
    const MatrixXd& below = (li == 0) ? tape.input : tape.post[li - 1];
    const MatrixXd w_grad = dpre * below.transpose();
    const VectorXd b_grad = dpre.rowwise().sum();
    Eigen::Index p = offsets[li];
    for (Eigen::Index i = 0; i < w_grad.rows(); ++i)
      for (Eigen::Index j = 0; j < w_grad.cols(); ++j) param_grad[p++] += w_grad(i, j);
    param_grad.segment(p, b_grad.size()) += b_grad;
    delta = weights_[li].transpose() * dpre;
  }
  return delta;
}

void DenseNet::save(const std::filesystem::path& path) const {
  // Atomic write: temp file in the same directory, then rename.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("DenseNet::save: cannot open " + tmp.string());
    out.write("WSCN", 4);
    write_u32_le(out, 1);  // version
    write_u32_le(out, static_cast<uint32_t>(specs_.size()));
    for (const auto& s : specs_) {
      write_u32_le(out, static_cast<uint32_t>(s.in));
      write_u32_le(out, static_cast<uint32_t>(s.out));
      write_u32_le(out, static_cast<uint32_t>(s.act));
    }
    for (size_t l = 0; l < specs_.size(); ++l) {
      for (Eigen::Index i = 0; i < weights_[l].rows(); ++i)
        for (Eigen::Index j = 0; j < weights_[l].cols(); ++j) write_f64_le(out, weights_[l](i, j));
      for (Eigen::Index i = 0; i < biases_[l].size(); ++i) write_f64_le(out, biases_[l][i]);
    }
  }
  std::filesystem::rename(tmp, path);
}

DenseNet DenseNet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("DenseNet::load: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "WSCN", 4) != 0)
    throw std::runtime_error("DenseNet::load: bad magic in " + path.string());
  const uint32_t version = read_u32_le(in);
  if (version != 1) throw std::runtime_error("DenseNet::load: unsupported version");
  const uint32_t n_layers = read_u32_le(in);
  std::vector<LayerSpec> specs(n_layers);
  for (auto& s : specs) {
    s.in = static_cast<int>(read_u32_le(in));
    s.out = static_cast<int>(read_u32_le(in));
    s.act = static_cast<Activation>(read_u32_le(in));
  }
  DenseNet net(specs);
  for (size_t l = 0; l < specs.size(); ++l) {
    for (Eigen::Index i = 0; i < net.weights_[l].rows(); ++i)
      for (Eigen::Index j = 0; j < net.weights_[l].cols(); ++j)
        net.weights_[l](i, j) = read_f64_le(in);
    for (Eigen::Index i = 0; i < net.biases_[l].size(); ++i) net.biases_[l][i] = read_f64_le(in);
  }
  if (!in) throw std::runtime_error("DenseNet::load: truncated file " + path.string());
  return net;
}

std::pair<VectorXd, DenseNet::Tape> net_forward(const DenseNet& net, const VectorXd& input) {
  DenseNet::Tape tape;
  const MatrixXd out = net.forward(input, &tape);
  return {out.col(0), std::move(tape)};
}

std::pair<VectorXd, VectorXd> net_backward(const DenseNet& net, const DenseNet::Tape& tape,
                                           const VectorXd& output_grad) {
  VectorXd param_grad;
  const MatrixXd in_grad = net.backward(tape, output_grad, param_grad);
  return {param_grad, in_grad.col(0)};
}

}  // namespace wscloc::optim
