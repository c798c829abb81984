#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "epivar/neural_kernel.hpp"

using namespace epivar;

namespace {

// Independent scalar forward pass: log softmax of the output layer.
double scalar_log_prob(const DenseNet& net, const std::vector<double>& x, int k) {
  std::vector<double> a = x;
  const auto& L = net.layers();
  for (std::size_t l = 0; l < L.size(); ++l) {
    std::vector<double> z(L[l].W.rows());
    for (int r = 0; r < L[l].W.rows(); ++r) {
      double s = L[l].b(r);
      for (int c = 0; c < L[l].W.cols(); ++c) s += L[l].W(r, c) * a[c];
      z[r] = (l + 1 < L.size()) ? std::max(0.0, s) : s;
    }
    a = z;
  }
  double m = *std::max_element(a.begin(), a.end()), zsum = 0.0;
  for (double v : a) zsum += std::exp(v - m);
  return a[k] - m - std::log(zsum);
}

}  // namespace

TEST(DenseNet, TaperedWidths) {
  EXPECT_EQ(tapered_widths(12, 4), (std::vector<int>{12, 10, 8, 6, 4}));
  EXPECT_EQ(tapered_widths(0, 3), (std::vector<int>{0, 3}));
}

TEST(DenseNet, ZeroNetIsUniform) {
  DenseNet net({3, 4, 5});
  std::vector<double> x{1, 0, 1};
  auto p = net.forward(x);
  for (int k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(p(k), 0.2);
  DenseNet one({2, 3, 1});
  Rng rng(1);
  one.init_he_uniform(rng);
  EXPECT_DOUBLE_EQ(one.forward(std::vector<double>{0.3, 1})(0), 1.0);
  EXPECT_THROW(net.forward(std::vector<double>{1, 0}), Error);
}

TEST(DenseNet, IdenticalOutputRowsGiveEqualProbabilities) {
  Rng rng(2);
  DenseNet net = DenseNet::tapered(4, 3, rng);
  auto& last = net.layers().back();
  last.W.row(2) = last.W.row(0);
  last.b(2) = last.b(0);
  auto p = net.forward(std::vector<double>{1, 0, 0, 1});
  EXPECT_DOUBLE_EQ(p(0), p(2));
}

TEST(DenseNet, BackwardMatchesFiniteDifferences) {
  Rng rng(3);
  DenseNet net({4, 8, 6, 4, 3});
  net.init_he_uniform(rng);
  for (auto& l : net.layers())
    for (int r = 0; r < l.b.size(); ++r) l.b(r) = 0.1 * (uniform01(rng) - 0.5);
  std::vector<double> x{1, 0, 1, 0.5};
  const int k = 1;
  NetGradient g = zero_gradient(net);
  backward(net, x, k, 1.0, g);
  const double h = 1e-5;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto check = [&](double& param, double analytic) {
      double keep = param;
      param = keep + h;
      double up = scalar_log_prob(net, x, k);
      param = keep - h;
      double dn = scalar_log_prob(net, x, k);
      param = keep;
      double fd = (up - dn) / (2 * h);
      double scale = std::max({std::abs(fd), std::abs(analytic), 1e-3});
      EXPECT_LT(std::abs(fd - analytic) / scale, 1e-4);
    };
    auto& L = net.layers()[l];
    for (int r = 0; r < L.W.rows(); ++r)
      for (int c = 0; c < L.W.cols(); ++c) check(L.W(r, c), g[l].W(r, c));
    for (int r = 0; r < L.b.size(); ++r) check(L.b(r), g[l].b(r));
  }
}

TEST(DenseNet, ZeroUpstreamAddsNothing) {
  Rng rng(4);
  DenseNet net = DenseNet::tapered(3, 4, rng);
  NetGradient g = zero_gradient(net);
  backward(net, std::vector<double>{1, 0, 1}, 2, 0.0, g);
  for (const auto& l : g) {
    EXPECT_EQ(l.W.norm(), 0.0);
    EXPECT_EQ(l.b.norm(), 0.0);
  }
}

TEST(DenseNet, InitKeepsHiddenUnitsAlive) {
  Rng rng(6);
  DenseNet net = DenseNet::tapered(7, 3, rng);
  const auto& L = net.layers();
  for (std::size_t l = 0; l + 1 < L.size(); ++l) EXPECT_TRUE((L[l].b.array() > 0.0).all());
  EXPECT_EQ(L.back().b.norm(), 0.0);
  // even with every weight zero, each hidden bias receives gradient
  for (Layer& l : net.layers()) l.W.setZero();
  NetGradient g = zero_gradient(net);
  backward(net, std::vector<double>{1, 0, 0, 0, 0, 0, 0}, 0, 1.0, g);
  EXPECT_GT(g.back().b.norm(), 0.0);
}

TEST(DenseNet, ExpectedScoreIsZero) {
  // sum_k p_k grad log p_k = grad sum_k p_k = 0
  Rng rng(5);
  DenseNet net = DenseNet::tapered(3, 4, rng);
  std::vector<double> x{0, 1, 1};
  auto p = net.forward(x);
  NetGradient g = zero_gradient(net);
  for (int k = 0; k < 4; ++k) backward(net, x, k, p(k), g);
  for (const auto& l : g) {
    EXPECT_LT(l.W.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(l.b.cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DenseNet, BatchBackwardEqualsSumOfSingles) {
  Rng rng(6);
  DenseNet net = DenseNet::tapered(5, 3, rng);
  Eigen::MatrixXd X(5, 3);
  X << 1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 0, 0, 1, 1;
  std::vector<int> idx{0, 2, 1};
  std::vector<double> w{0.5, -1.0, 2.0};
  DenseNet::Cache cache;
  Eigen::MatrixXd logits = net.forward_logits(X, cache);
  Eigen::MatrixXd d(3, 3);
  for (int s = 0; s < 3; ++s) {
    Eigen::VectorXd p = softmax(logits.col(s));
    d.col(s) = -w[s] * p;
    d(idx[s], s) += w[s];
  }
  NetGradient gb = zero_gradient(net), gs = zero_gradient(net);
  net.backward(cache, d, gb);
  for (int s = 0; s < 3; ++s) {
    std::vector<double> x(X.col(s).data(), X.col(s).data() + 5);
    backward(net, x, idx[s], w[s], gs);
  }
  for (std::size_t l = 0; l < gb.size(); ++l) {
    EXPECT_LT((gb[l].W - gs[l].W).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((gb[l].b - gs[l].b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Rng rng(7);
  DenseNet net = DenseNet::tapered(3, 3, rng);
  DenseNet before = net;
  AdamState st = make_adam(net);
  adam_step(net, zero_gradient(net), st);
  for (std::size_t l = 0; l < net.layers().size(); ++l) EXPECT_EQ(net.layers()[l].W, before.layers()[l].W);
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  DenseNet net({2, 2});
  AdamState st = make_adam(net, AdamConfig{0.01});
  NetGradient g = zero_gradient(net);
  g[0].W(0, 0) = 3.7;
  g[0].W(1, 1) = -1e-3;
  adam_step(net, g, st);
  EXPECT_NEAR(net.layers()[0].W(0, 0), -0.01, 1e-8);
  EXPECT_NEAR(net.layers()[0].W(1, 1), 0.01, 1e-4);
}

TEST(Adam, ConstantGradientDescends) {
  DenseNet net({1, 2});
  AdamState st = make_adam(net);
  NetGradient g = zero_gradient(net);
  g[0].b(0) = 0.5;
  for (int k = 0; k < 100; ++k) adam_step(net, g, st);
  EXPECT_LT(net.layers()[0].b(0), -0.05);
}

TEST(Adam, NonFiniteGradientAbortsWithoutChanges) {
  DenseNet net({2, 2});
  AdamState st = make_adam(net);
  NetGradient g = zero_gradient(net);
  g[0].W(0, 1) = std::nan("");
  EXPECT_THROW(adam_step(net, g, st), NonFiniteGradient);
  EXPECT_EQ(st.step, 0);
  EXPECT_EQ(net.layers()[0].W.norm(), 0.0);
}

TEST(DenseNet, JsonRoundTrip) {
  Rng rng(8);
  DenseNet net = DenseNet::tapered(6, 4, rng);
  DenseNet back = net_from_json(net_to_json(net));
  ASSERT_EQ(back.widths(), net.widths());
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    EXPECT_EQ(back.layers()[l].W, net.layers()[l].W);
    EXPECT_EQ(back.layers()[l].b, net.layers()[l].b);
  }
}
