#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wscloc/optim.hpp"
#include "wscloc/rng.hpp"

#include <cmath>
#include <filesystem>

using namespace wscloc;
using optim::Activation;
using optim::DenseNet;
using optim::LayerSpec;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("adam_step: zero gradient leaves parameters unchanged") {
  optim::AdamState state(3);
  VectorXd p = VectorXd::Constant(3, 1.5);
  const VectorXd before = p;
  optim::adam_step(state, p, VectorXd::Zero(3), 1e-3);
  CHECK((p - before).norm() == 0.0);
  CHECK(state.step_count() == 1);
}

TEST_CASE("adam_step: first step matches the bias-corrected recurrence") {
  optim::AdamState state(1);
  VectorXd p = VectorXd::Zero(1);
  VectorXd g = VectorXd::Ones(1);
  optim::adam_step(state, p, g, 1e-3);
  // t = 1: m_hat = g, v_hat = g^2, delta = -lr * g / (|g| + eps).
  const double expected = -1e-3 * 1.0 / (1.0 + 1e-8);
  CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("adam_step: deterministic trajectories") {
  optim::AdamState s1(4), s2(4);
  util::Rng rng(7);
  VectorXd p1 = VectorXd::Zero(4), p2 = VectorXd::Zero(4);
  for (int i = 0; i < 1000; ++i) {
    VectorXd g(4);
    for (int k = 0; k < 4; ++k) g[k] = rng.normal();
    optim::adam_step(s1, p1, g, 1e-3);
    optim::adam_step(s2, p2, g, 1e-3);
  }
  CHECK(p1 == p2);  // bitwise
}

TEST_CASE("adam_step: scale invariance in the constant-gradient limit") {
  optim::AdamState s1(1), s2(1);
  VectorXd p1 = VectorXd::Zero(1), p2 = VectorXd::Zero(1);
  VectorXd g1 = VectorXd::Ones(1), g2 = 10.0 * VectorXd::Ones(1);
  double last1 = 0.0, last2 = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const double b1 = p1[0], b2 = p2[0];
    optim::adam_step(s1, p1, g1, 1e-3);
    optim::adam_step(s2, p2, g2, 1e-3);
    last1 = p1[0] - b1;
    last2 = p2[0] - b2;
  }
  CHECK(last1 < 0.0);
  CHECK(last2 < 0.0);
  CHECK(std::abs(last1 - last2) < 1e-6);
}

TEST_CASE("adam_step: shape mismatch is rejected") {
  optim::AdamState state(3);
  VectorXd p = VectorXd::Zero(2);
  CHECK_THROWS_AS(optim::adam_step(state, p, VectorXd::Zero(2), 1e-3), std::invalid_argument);
}

TEST_CASE("fd_gradient: quadratic, linear and analytic cases") {
  const auto sq = [](const VectorXd& x) { return x.squaredNorm(); };
  VectorXd x(3);
  x << 0.7, -1.3, 2.1;
  const VectorXd g = optim::fd_gradient(sq, x, 1e-5);
  CHECK((g - 2.0 * x).norm() < 1e-8);

  const auto lin = [](const VectorXd& x) { return 3.0 * x[0] - 2.0 * x[1]; };
  VectorXd y(2);
  y << 0.4, 0.9;
  const VectorXd gl = optim::fd_gradient(lin, y, 1e-5);
  CHECK(std::abs(gl[0] - 3.0) < 1e-10);
  CHECK(std::abs(gl[1] + 2.0) < 1e-10);

  const auto f = [](const VectorXd& x) { return std::sin(x[0]) * x[1]; };
  VectorXd z(2);
  z << 0.3, 2.0;
  const VectorXd gf = optim::fd_gradient(f, z, 1e-5);
  CHECK(std::abs(gf[0] - 2.0 * std::cos(0.3)) < 1e-9);
  CHECK(std::abs(gf[1] - std::sin(0.3)) < 1e-9);
}

TEST_CASE("net_forward: identity and constant layers") {
  DenseNet net({{3, 3, Activation::Identity}});
  VectorXd p(net.param_count());
  p.setZero();
  p[0] = p[4] = p[8] = 1.0;  // row-major identity weights, zero bias
  net.set_params(p);
  VectorXd x(3);
  x << 0.2, -0.5, 1.0;
  const auto [out, tape] = optim::net_forward(net, x);
  CHECK((out - x).norm() == 0.0);

  DenseNet biased({{3, 2, Activation::Identity}});
  VectorXd pb = VectorXd::Zero(biased.param_count());
  pb[6] = 4.0;
  pb[7] = -1.0;  // bias block after the 2x3 weights
  biased.set_params(pb);
  const auto [outb, tapeb] = optim::net_forward(biased, x);
  CHECK(outb[0] == 4.0);
  CHECK(outb[1] == -1.0);
}

TEST_CASE("net_forward matches an independent straight-line evaluation") {
  util::Rng rng(21);
  DenseNet net({{4, 6, Activation::Softplus}, {6, 5, Activation::Sigmoid},
                {5, 3, Activation::Identity}});
  net.init_random(99);
  const VectorXd params = net.params();

  VectorXd x(4);
  for (int i = 0; i < 4; ++i) x[i] = rng.normal();
  const auto [out, tape] = optim::net_forward(net, x);

  // Re-evaluate by hand from the flat parameter vector.
  VectorXd h = x;
  Eigen::Index off = 0;
  for (const auto& spec : net.layers()) {
    MatrixXd w(spec.out, spec.in);
    for (int r = 0; r < spec.out; ++r)
      for (int c = 0; c < spec.in; ++c) w(r, c) = params[off++];
    VectorXd b(spec.out);
    for (int r = 0; r < spec.out; ++r) b[r] = params[off++];
    VectorXd pre = w * h + b;
    for (int r = 0; r < spec.out; ++r) {
      switch (spec.act) {
        case Activation::Identity: break;
        case Activation::Relu: pre[r] = std::max(0.0, pre[r]); break;
        case Activation::Softplus: pre[r] = std::log1p(std::exp(pre[r])); break;
        case Activation::Sigmoid: pre[r] = 1.0 / (1.0 + std::exp(-pre[r])); break;
      }
    }
    h = pre;
  }
  CHECK((out - h).norm() < 1e-12);
}

TEST_CASE("net_backward: linear layer closed form") {
  DenseNet net({{2, 2, Activation::Identity}});
  VectorXd p(net.param_count());
  p << 1, 0, 0, 1, 0, 0;
  net.set_params(p);
  VectorXd x(2);
  x << 0.3, -0.7;
  const auto [out, tape] = optim::net_forward(net, x);
  VectorXd g(2);
  g << 2.0, -1.0;
  const auto [param_grad, in_grad] = optim::net_backward(net, tape, g);
  CHECK((in_grad - g).norm() == 0.0);
  // Weight gradient is g * x^T (row-major), bias gradient is g.
  CHECK(param_grad[0] == doctest::Approx(2.0 * 0.3));
  CHECK(param_grad[1] == doctest::Approx(2.0 * -0.7));
  CHECK(param_grad[2] == doctest::Approx(-1.0 * 0.3));
  CHECK(param_grad[3] == doctest::Approx(-1.0 * -0.7));
  CHECK(param_grad[4] == 2.0);
  CHECK(param_grad[5] == -1.0);
}

TEST_CASE("net_backward: dead relu blocks upstream gradients") {
  DenseNet net({{2, 2, Activation::Relu}, {2, 1, Activation::Identity}});
  VectorXd p = VectorXd::Zero(net.param_count());
  p[0] = -1.0;
  p[3] = -1.0;           // weights force negative pre-activations
  p[6] = p[7] = 1.0;     // output layer sums the hidden units
  net.set_params(p);
  VectorXd x(2);
  x << 1.0, 2.0;
  const auto [out, tape] = optim::net_forward(net, x);
  CHECK(out[0] == 0.0);
  const auto [param_grad, in_grad] = optim::net_backward(net, tape, VectorXd::Ones(1));
  CHECK(in_grad.norm() == 0.0);
  CHECK(param_grad.head(6).norm() == 0.0);  // first layer receives nothing
}

TEST_CASE("net_backward matches finite differences over random architectures") {
  util::Rng rng(31);
  double max_rel = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int depth = 1 + static_cast<int>(rng.uniform_int(4));
    std::vector<LayerSpec> specs;
    int in_dim = 2 + static_cast<int>(rng.uniform_int(5));
    const int first_in = in_dim;
    for (int l = 0; l < depth; ++l) {
      const int out_dim = 2 + static_cast<int>(rng.uniform_int(31));
      // Smooth activations keep the finite-difference probe well posed.
      const Activation act =
          rng.uniform() < 0.5 ? Activation::Softplus : Activation::Sigmoid;
      specs.push_back({in_dim, out_dim, l + 1 == depth ? Activation::Identity : act});
      in_dim = out_dim;
    }
    DenseNet net(specs);
    net.init_random(1000 + trial);

    VectorXd x(first_in);
    for (int i = 0; i < first_in; ++i) x[i] = rng.normal();
    VectorXd g(net.output_dim());
    for (int i = 0; i < net.output_dim(); ++i) g[i] = rng.normal();

    const auto [out, tape] = optim::net_forward(net, x);
    const auto [param_grad, in_grad] = optim::net_backward(net, tape, g);

    DenseNet probe = net;
    const auto loss = [&](const VectorXd& p) {
      probe.set_params(p);
      const auto [o, t] = optim::net_forward(probe, x);
      return g.dot(o);
    };
    const VectorXd fd = optim::fd_gradient(loss, net.params(), 1e-5);
    const double rel = (param_grad - fd).norm() / std::max(fd.norm(), 1e-12);
    max_rel = std::max(max_rel, rel);

    DenseNet probe_in = net;
    const auto loss_in = [&](const VectorXd& xv) {
      const auto [o, t] = optim::net_forward(probe_in, xv);
      return g.dot(o);
    };
    const VectorXd fd_in = optim::fd_gradient(loss_in, x, 1e-5);
    max_rel = std::max(max_rel, (in_grad - fd_in).norm() / std::max(fd_in.norm(), 1e-12));
  }
  CHECK(max_rel < 1e-5);
}

TEST_CASE("net_backward: stale tape is rejected") {
  DenseNet a({{2, 3, Activation::Softplus}, {3, 1, Activation::Identity}});
  DenseNet b({{2, 4, Activation::Softplus}, {4, 1, Activation::Identity}});
  a.init_random(1);
  b.init_random(2);
  const auto [out, tape] = optim::net_forward(a, VectorXd::Ones(2));
  VectorXd pg;
  CHECK_THROWS_AS(b.backward(tape, VectorXd::Ones(1), pg), std::invalid_argument);
}

TEST_CASE("checkpoint save/load round-trips exactly") {
  DenseNet net({{5, 8, Activation::Relu}, {8, 8, Activation::Softplus},
                {8, 4, Activation::Sigmoid}});
  net.init_random(77);
  const auto path = std::filesystem::temp_directory_path() / "wscn_test.ckpt";
  net.save(path);
  const DenseNet loaded = DenseNet::load(path);
  CHECK(loaded.params() == net.params());  // bitwise
  REQUIRE(loaded.layers().size() == net.layers().size());
  for (size_t i = 0; i < net.layers().size(); ++i) {
    CHECK(loaded.layers()[i].in == net.layers()[i].in);
    CHECK(loaded.layers()[i].out == net.layers()[i].out);
    CHECK(loaded.layers()[i].act == net.layers()[i].act);
  }

  // Header starts with the expected magic and version.
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "WSCN");
  std::filesystem::remove(path);
}

TEST_CASE("batched forward/backward agree with per-sample passes") {
  DenseNet net({{3, 6, Activation::Softplus}, {6, 2, Activation::Identity}});
  net.init_random(5);
  util::Rng rng(6);
  MatrixXd batch(3, 4);
  for (int i = 0; i < batch.size(); ++i) batch(i % 3, i / 3) = rng.normal();
  MatrixXd out_grad(2, 4);
  for (int i = 0; i < out_grad.size(); ++i) out_grad(i % 2, i / 2) = rng.normal();

  DenseNet::Tape tape;
  const MatrixXd out = net.forward(batch, &tape);
  VectorXd pg_batch;
  const MatrixXd in_grad = net.backward(tape, out_grad, pg_batch);

  VectorXd pg_sum = VectorXd::Zero(net.param_count());
  for (int c = 0; c < 4; ++c) {
    const auto [o, t] = optim::net_forward(net, batch.col(c));
    CHECK((o - out.col(c)).norm() < 1e-14);
    const auto [pg, ig] = optim::net_backward(net, t, out_grad.col(c));
    pg_sum += pg;
    CHECK((ig - in_grad.col(c)).norm() < 1e-13);
  }
  CHECK((pg_sum - pg_batch).norm() < 1e-12);
}

TEST_CASE("duplicated batch mean-gradient equals the single-batch gradient") {
  // Mean-reduction invariance: averaging the loss over a duplicated batch
  // leaves the parameter gradient unchanged.
  DenseNet net({{3, 5, Activation::Softplus}, {5, 2, Activation::Identity}});
  net.init_random(8);
  util::Rng rng(9);
  MatrixXd single(3, 2), doubled(3, 4);
  for (int i = 0; i < single.size(); ++i) single(i % 3, i / 3) = rng.normal();
  doubled << single, single;

  MatrixXd target = MatrixXd::Zero(2, 2);
  DenseNet::Tape t1, t2;
  const MatrixXd o1 = net.forward(single, &t1);
  const MatrixXd o2 = net.forward(doubled, &t2);
  VectorXd g1, g2;
  net.backward(t1, (o1 - target) / 2.0, g1);
  MatrixXd target2(2, 4);
  target2 << target, target;
  net.backward(t2, (o2 - target2) / 4.0, g2);
  CHECK((g1 - g2).norm() < 1e-13);
}
