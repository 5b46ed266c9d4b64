#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

namespace wscloc::optim {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment state of one parameter block. The update is the
// standard bias-corrected Adam recurrence and is fully deterministic.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(Eigen::Index dim, AdamConfig cfg = {});

  void step(VectorXd& params, const VectorXd& grads, double lr);

  int64_t step_count() const { return step_count_; }
  const VectorXd& m() const { return m_; }
  const VectorXd& v() const { return v_; }

 private:
  AdamConfig cfg_;
  VectorXd m_, v_;
  int64_t step_count_ = 0;
};

void adam_step(AdamState& state, VectorXd& params, const VectorXd& grads, double lr);

// Per-block learning rates: the pose blocks are optimized at independent
// rates; sigma gets a smaller default because scale couples globally.
struct BlockLearningRates {
  double lr_rho = 1e-3;
  double lr_phi = 1e-3;
  double lr_sigma = 1e-4;
  double lr_field = 1e-3;
  double lr_regressor = 1e-3;
};

// Central finite differences; the universal gradient oracle of the test
// suites.
VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                     double h);

enum class Activation : uint32_t { Identity = 0, Relu = 1, Softplus = 2, Sigmoid = 3 };

struct LayerSpec {
  int in = 0;
  int out = 0;
  Activation act = Activation::Identity;
};

// Small dense network with explicit forward/backward. Inputs and outputs are
// stored column-wise so whole sample batches run as matrix products.
class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<LayerSpec> layers);

  void init_random(uint64_t seed);

  int input_dim() const;
  int output_dim() const;
  Eigen::Index param_count() const;
  const std::vector<LayerSpec>& layers() const { return specs_; }

  VectorXd params() const;
  void set_params(const VectorXd& p);

  struct Tape {
    MatrixXd input;
    std::vector<MatrixXd> pre;   // pre-activation per layer
    std::vector<MatrixXd> post;  // post-activation per layer
    std::vector<LayerSpec> specs;
  };

  // Columns are samples. The tape, when requested, holds what backward needs.
  MatrixXd forward(const MatrixXd& input, Tape* tape = nullptr) const;

  // Reverse-mode pass. Accumulates into param_grad (sized on first use) and
  // returns the gradient with respect to the input columns. Throws
  // std::invalid_argument when the tape does not match this net.
  MatrixXd backward(const Tape& tape, const MatrixXd& out_grad, VectorXd& param_grad) const;

  void save(const std::filesystem::path& path) const;
  static DenseNet load(const std::filesystem::path& path);

 private:
  std::vector<LayerSpec> specs_;
  std::vector<MatrixXd> weights_;
  std::vector<VectorXd> biases_;
};

// Single-sample wrappers matching the library-level operation contracts.
std::pair<VectorXd, DenseNet::Tape> net_forward(const DenseNet& net, const VectorXd& input);
std::pair<VectorXd, VectorXd> net_backward(const DenseNet& net, const DenseNet::Tape& tape,
                                           const VectorXd& output_grad);

}  // namespace wscloc::optim
