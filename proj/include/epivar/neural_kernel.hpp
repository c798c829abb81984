#ifndef EPIVAR_NEURAL_KERNEL_HPP
#define EPIVAR_NEURAL_KERNEL_HPP

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "epivar/common.hpp"

namespace epivar {

struct Layer {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
};

using NetGradient = std::vector<Layer>;

/// Input width, three hidden widths interpolated linearly toward the
/// output width (rounded, at least 2), output width. Without inputs the net
/// is a bare output bias: hidden units would see a constant and sit on the
/// ReLU kink at zero bias, so they add nothing but dead parameters.
inline std::vector<int> tapered_widths(int in, int out) {
  if (in == 0) return {0, out};
  std::vector<int> w{in};
  for (int k = 1; k <= 3; ++k) {
    double x = in + (out - in) * (k / 4.0);
    w.push_back(std::max(2, static_cast<int>(std::lround(x))));
  }
  w.push_back(out);
  return w;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

/// Multilayer perceptron: ReLU on hidden layers, softmax on the output.
/// Batches are column-major: one column per sample.
class DenseNet {
 public:
  /// Activations of the last forward pass; act[0] is the input, act.back()
  /// the logits.
  struct Cache {
    std::vector<Eigen::MatrixXd> act;
  };

  DenseNet() = default;

  /// All parameters zero.
  explicit DenseNet(std::vector<int> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw Error("a dense net needs at least input and output widths");
    for (std::size_t k = 0; k + 1 < widths_.size(); ++k) {
      if (widths_[k] < 0 || widths_[k + 1] < 1) throw Error("invalid layer width");
      layers_.push_back(Layer{Eigen::MatrixXd::Zero(widths_[k + 1], widths_[k]),
                              Eigen::VectorXd::Zero(widths_[k + 1])});
    }
  }

  static DenseNet tapered(int in, int out, Rng& rng) {
    DenseNet net(tapered_widths(in, out));
    net.init_he_uniform(rng);
    return net;
  }

  /// Weights uniform in +-sqrt(6 / fan_in). Hidden biases start at a small
  /// positive value so that a layer whose inputs are all zero still passes
  /// gradient (narrow nets otherwise lose whole layers to dead ReLUs);
  /// output biases start at zero.
  void init_he_uniform(Rng& rng) {
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      Layer& l = layers_[k];
      double bound = l.W.cols() > 0 ? std::sqrt(6.0 / static_cast<double>(l.W.cols())) : 0.0;
      for (Eigen::Index c = 0; c < l.W.cols(); ++c)
        for (Eigen::Index r = 0; r < l.W.rows(); ++r) l.W(r, c) = (2.0 * uniform01(rng) - 1.0) * bound;
      l.b.setConstant(k + 1 < layers_.size() ? kHiddenBiasInit : 0.0);
    }
  }

  static constexpr double kHiddenBiasInit = 0.01;

  void set_zero() {
    for (Layer& l : layers_) {
      l.W.setZero();
      l.b.setZero();
    }
  }

  const std::vector<int>& widths() const { return widths_; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers_) n += l.W.size() + l.b.size();
    return n;
  }

  const Eigen::MatrixXd& forward_logits(const Eigen::MatrixXd& x, Cache& cache) const {
    if (x.rows() != input_width()) throw Error("dense net input has wrong dimension");
    cache.act.resize(layers_.size() + 1);
    cache.act[0] = x;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const Layer& l = layers_[k];
      cache.act[k + 1].noalias() = l.W * cache.act[k];
      cache.act[k + 1].colwise() += l.b;
      if (k + 1 < layers_.size()) cache.act[k + 1] = cache.act[k + 1].cwiseMax(0.0);
    }
    return cache.act.back();
  }

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
  void backward(const Cache& cache, const Eigen::MatrixXd& dlogits, NetGradient& grad) const {
    Eigen::MatrixXd delta = dlogits;
    for (std::size_t k = layers_.size(); k-- > 0;) {
      grad[k].W.noalias() += delta * cache.act[k].transpose();
      grad[k].b += delta.rowwise().sum();
      if (k == 0) break;
      Eigen::MatrixXd up = layers_[k].W.transpose() * delta;
      delta = up.cwiseProduct((cache.act[k].array() > 0.0).cast<double>().matrix());
    }
  }

  /// Probability vector for a single input.
  Eigen::VectorXd forward(std::span<const double> input) const {
    Cache cache;
    Eigen::MatrixXd x = Eigen::Map<const Eigen::VectorXd>(input.data(), static_cast<Eigen::Index>(input.size()));
    if (static_cast<int>(input.size()) != input_width()) throw Error("dense net input has wrong dimension");
    return softmax(forward_logits(x, cache).col(0));
  }

 private:
  std::vector<int> widths_;
  std::vector<Layer> layers_;
};

inline NetGradient zero_gradient(const DenseNet& net) {
  NetGradient g;
  for (const Layer& l : net.layers())
    g.push_back(Layer{Eigen::MatrixXd::Zero(l.W.rows(), l.W.cols()), Eigen::VectorXd::Zero(l.b.size())});
  return g;
}

inline void set_zero(NetGradient& g) {
  for (Layer& l : g) {
    l.W.setZero();
    l.b.setZero();
  }
}

/// Accumulates upstream * grad(log p[output_index]) into `grad`.
inline void backward(const DenseNet& net, std::span<const double> input, int output_index, double upstream,
                     NetGradient& grad) {
  if (static_cast<int>(input.size()) != net.input_width()) throw Error("dense net input has wrong dimension");
  DenseNet::Cache cache;
  Eigen::MatrixXd x = Eigen::Map<const Eigen::VectorXd>(input.data(), static_cast<Eigen::Index>(input.size()));
  Eigen::VectorXd p = softmax(net.forward_logits(x, cache).col(0));
  Eigen::MatrixXd d = -upstream * p;
  d(output_index, 0) += upstream;
  net.backward(cache, d, grad);
}

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  NetGradient m;
  NetGradient v;
  long step = 0;
};

inline AdamState make_adam(const DenseNet& net, AdamConfig cfg = {}) {
  return AdamState{cfg, zero_gradient(net), zero_gradient(net), 0};
}

inline bool all_finite(const NetGradient& g) {
  for (const Layer& l : g)
    if (!l.W.allFinite() || !l.b.allFinite()) return false;
  return true;
}

/// Bias-corrected Adam descent step. A non-finite gradient leaves the
/// parameters and moments untouched and throws.
inline void adam_step(DenseNet& net, const NetGradient& grad, AdamState& st) {
  if (!all_finite(grad)) throw NonFiniteGradient("non-finite gradient; Adam step skipped");
  const AdamConfig& c = st.config;
  ++st.step;
  double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  double step = c.lr / bc1;
  double sq = std::sqrt(bc2);
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    param.array() -= step * m.array() / (v.array().sqrt() / sq + c.eps);
  };
  auto& layers = net.layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    update(layers[k].W, grad[k].W, st.m[k].W, st.v[k].W);
    update(layers[k].b, grad[k].b, st.m[k].b, st.v[k].b);
  }
}

inline nlohmann::json net_to_json(const DenseNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const Layer& l : net.layers()) {
    std::vector<double> w(l.W.data(), l.W.data() + l.W.size());
    std::vector<double> b(l.b.data(), l.b.data() + l.b.size());
    layers.push_back({{"rows", l.W.rows()}, {"cols", l.W.cols()}, {"W", w}, {"b", b}});
  }
  return {{"widths", net.widths()}, {"layers", std::move(layers)}};
}

inline DenseNet net_from_json(const nlohmann::json& j) {
  DenseNet net(j.at("widths").get<std::vector<int>>());
  auto& layers = net.layers();
  const auto& jl = j.at("layers");
  if (jl.size() != layers.size()) throw Error("checkpoint layer count mismatch");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto w = jl[k].at("W").get<std::vector<double>>();
    auto b = jl[k].at("b").get<std::vector<double>>();
    if (w.size() != static_cast<std::size_t>(layers[k].W.size()) || b.size() != static_cast<std::size_t>(layers[k].b.size()))
      throw Error("checkpoint layer shape mismatch");
    layers[k].W = Eigen::Map<Eigen::MatrixXd>(w.data(), layers[k].W.rows(), layers[k].W.cols());
    layers[k].b = Eigen::Map<Eigen::VectorXd>(b.data(), layers[k].b.size());
  }
  return net;
}

}  // namespace epivar

#endif  // EPIVAR_NEURAL_KERNEL_HPP
