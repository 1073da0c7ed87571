#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynpen/rng.hpp"

namespace dynpen {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Activation { kRelu, kIdentity };

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::kRelu;
};

/// Fully-connected feedforward network. Weights are row-major (out x in)
/// per layer; the final layer is expected to use the identity activation.
struct Network {
  std::vector<LayerSpec> layers;
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  std::size_t input_width() const { return layers.front().in; }
  std::size_t output_width() const { return layers.back().out; }
  std::size_t depth() const { return layers.size(); }
};

inline void validate_specs(const std::vector<LayerSpec>& specs) {
  if (specs.empty()) throw std::invalid_argument("network needs at least one layer");
  for (const auto& s : specs) {
    if (s.in == 0 || s.out == 0) throw std::invalid_argument("layer widths must be >= 1");
  }
  for (std::size_t l = 1; l < specs.size(); ++l) {
    if (specs[l].in != specs[l - 1].out)
      throw std::invalid_argument("consecutive layer widths do not chain");
  }
}

/// He-style initialization: weights ~ N(0, 2 / fan_in), biases zero.
/// Fully determined by the rng state.
inline Network make_network(std::vector<LayerSpec> specs, Rng& rng) {
  validate_specs(specs);
  Network net;
  net.layers = std::move(specs);
  net.weights.reserve(net.layers.size());
  net.biases.reserve(net.layers.size());
  for (const auto& s : net.layers) {
    const double scale = std::sqrt(2.0 / static_cast<double>(s.in));
    std::vector<double> w(s.out * s.in);
    for (double& v : w) v = scale * rng.normal();
    net.weights.push_back(std::move(w));
    net.biases.push_back(std::vector<double>(s.out, 0.0));
  }
  return net;
}

/// Convenience builder: input -> hidden (ReLU each) -> linear output.
inline Network make_mlp(std::size_t input, const std::vector<std::size_t>& hidden,
                        std::size_t output, Rng& rng) {
  std::vector<LayerSpec> specs;
  std::size_t prev = input;
  for (std::size_t h : hidden) {
    specs.push_back({prev, h, Activation::kRelu});
    prev = h;
  }
  specs.push_back({prev, output, Activation::kIdentity});
  return make_network(std::move(specs), rng);
}

namespace detail {
inline double activate(Activation a, double z) {
  return a == Activation::kRelu ? (z > 0.0 ? z : 0.0) : z;
}
// ReLU subgradient at exactly 0 is taken as 0.
inline double activate_grad(Activation a, double z) {
  return a == Activation::kRelu ? (z > 0.0 ? 1.0 : 0.0) : 1.0;
}
}  // namespace detail

/// Reusable per-batch buffers for forward/backward passes.
struct ForwardPass {
  std::size_t batch = 0;
  std::vector<std::vector<double>> pre;  // pre[l]: batch x out_l pre-activations
  std::vector<std::vector<double>> act;  // act[0] = input, act[l+1] = layer l output

  std::span<const double> outputs() const { return act.back(); }
  std::span<const double> output_row(std::size_t b) const {
    const auto& out = act.back();
    const std::size_t width = out.size() / batch;
    return std::span<const double>(out).subspan(b * width, width);
  }
};

/// Run `batch` inputs (row-major, batch x input_width) through the network.
inline void forward_batch(const Network& net, std::span<const double> inputs,
                          std::size_t batch, ForwardPass& fp) {
  if (batch == 0) throw std::invalid_argument("forward_batch: empty batch");
  if (inputs.size() != batch * net.input_width())
    throw std::invalid_argument("forward_batch: input size does not match batch x width");

  const std::size_t L = net.depth();
  fp.batch = batch;
  fp.pre.resize(L);
  fp.act.resize(L + 1);
  fp.act[0].assign(inputs.begin(), inputs.end());

  for (std::size_t l = 0; l < L; ++l) {
    const auto& spec = net.layers[l];
    const double* w = net.weights[l].data();
    const double* b = net.biases[l].data();
    fp.pre[l].resize(batch * spec.out);
    fp.act[l + 1].resize(batch * spec.out);
    const double* in = fp.act[l].data();
    double* pre = fp.pre[l].data();
    double* out = fp.act[l + 1].data();
    for (std::size_t n = 0; n < batch; ++n) {
      const double* x = in + n * spec.in;
      for (std::size_t j = 0; j < spec.out; ++j) {
        const double* wj = w + j * spec.in;
        double z = b[j];
        for (std::size_t i = 0; i < spec.in; ++i) z += wj[i] * x[i];
        pre[n * spec.out + j] = z;
        out[n * spec.out + j] = detail::activate(spec.activation, z);
      }
    }
  }
}

/// Single-input forward pass.
inline std::vector<double> forward(const Network& net, std::span<const double> input) {
  if (input.size() != net.input_width())
    throw std::invalid_argument("forward: input width mismatch");
  ForwardPass fp;
  forward_batch(net, input, 1, fp);
  const auto out = fp.outputs();
  return std::vector<double>(out.begin(), out.end());
}

struct Gradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  void resize_like(const Network& net) {
    weights.resize(net.weights.size());
    biases.resize(net.biases.size());
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      weights[l].assign(net.weights[l].size(), 0.0);
      biases[l].assign(net.biases[l].size(), 0.0);
    }
  }
};

/// Backpropagate dL/d(output) (row-major, batch x output_width) through the
/// cached forward pass, writing exact parameter gradients into `grads`.
inline void backprop(const Network& net, const ForwardPass& fp,
                     std::span<const double> output_grad, Gradients& grads,
                     std::vector<double>& delta_scratch) {
  const std::size_t L = net.depth();
  const std::size_t batch = fp.batch;
  if (output_grad.size() != batch * net.output_width())
    throw std::invalid_argument("backprop: output_grad size mismatch");
  grads.resize_like(net);

  // delta for the current layer, batch x out_l
  std::vector<double>& delta = delta_scratch;
  delta.assign(output_grad.begin(), output_grad.end());
  std::vector<double> delta_prev;

  for (std::size_t li = L; li-- > 0;) {
    const auto& spec = net.layers[li];
    const double* pre = fp.pre[li].data();
    const double* a_in = fp.act[li].data();
    double* gw = grads.weights[li].data();
    double* gb = grads.biases[li].data();

    // fold the activation derivative into delta
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t j = 0; j < spec.out; ++j) {
        delta[n * spec.out + j] *=
            detail::activate_grad(spec.activation, pre[n * spec.out + j]);
      }
    }

    for (std::size_t n = 0; n < batch; ++n) {
      const double* x = a_in + n * spec.in;
      const double* d = delta.data() + n * spec.out;
      for (std::size_t j = 0; j < spec.out; ++j) {
        const double dj = d[j];
        gb[j] += dj;
        double* gwj = gw + j * spec.in;
        for (std::size_t i = 0; i < spec.in; ++i) gwj[i] += dj * x[i];
      }
    }

    if (li > 0) {
      delta_prev.assign(batch * spec.in, 0.0);
      const double* w = net.weights[li].data();
      for (std::size_t n = 0; n < batch; ++n) {
        const double* d = delta.data() + n * spec.out;
        double* dp = delta_prev.data() + n * spec.in;
        for (std::size_t j = 0; j < spec.out; ++j) {
          const double dj = d[j];
          const double* wj = w + j * spec.in;
          for (std::size_t i = 0; i < spec.in; ++i) dp[i] += wj[i] * dj;
        }
      }
      delta.swap(delta_prev);
    }
  }
}

/// Mean of squared differences over all elements.
inline double mse_loss(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size() || predictions.empty())
    throw std::invalid_argument("mse_loss: length mismatch or empty");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - targets[i];
    sum += d * d;
  }
  return sum / static_cast<double>(predictions.size());
}

/// Forward + exact analytic gradients of the batch MSE w.r.t. every weight
/// and bias. Inputs/targets are row-major (batch x width). Returns the loss.
inline double backward(const Network& net, std::span<const double> inputs,
                       std::span<const double> targets, std::size_t batch,
                       ForwardPass& fp, Gradients& grads,
                       std::vector<double>& delta_scratch) {
  if (targets.size() != batch * net.output_width())
    throw std::invalid_argument("backward: target size mismatch");
  forward_batch(net, inputs, batch, fp);
  const auto out = fp.outputs();
  const double loss = mse_loss(out, targets);
  std::vector<double> output_grad(out.size());
  const double scale = 2.0 / static_cast<double>(out.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    output_grad[i] = scale * (out[i] - targets[i]);
  backprop(net, fp, output_grad, grads, delta_scratch);
  return loss;
}

inline std::pair<Gradients, double> backward(const Network& net,
                                             std::span<const double> inputs,
                                             std::span<const double> targets,
                                             std::size_t batch) {
  ForwardPass fp;
  Gradients grads;
  std::vector<double> scratch;
  const double loss = backward(net, inputs, targets, batch, fp, grads, scratch);
  return {std::move(grads), loss};
}

enum class OptimizerRule { kSgd, kAdam };

struct Optimizer {
  OptimizerRule rule = OptimizerRule::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;
  // Adam moment accumulators, mirrors of the parameter shapes.
  std::vector<std::vector<double>> m_w, v_w, m_b, v_b;
};

inline Optimizer make_optimizer(const Network& net, OptimizerRule rule, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  Optimizer opt;
  opt.rule = rule;
  opt.learning_rate = lr;
  if (rule == OptimizerRule::kAdam) {
    auto zeros_like = [](const std::vector<std::vector<double>>& p) {
      std::vector<std::vector<double>> z(p.size());
      for (std::size_t l = 0; l < p.size(); ++l) z[l].assign(p[l].size(), 0.0);
      return z;
    };
    opt.m_w = zeros_like(net.weights);
    opt.v_w = zeros_like(net.weights);
    opt.m_b = zeros_like(net.biases);
    opt.v_b = zeros_like(net.biases);
  }
  return opt;
}

namespace detail {
inline void sgd_update(std::vector<double>& p, const std::vector<double>& g, double lr) {
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

inline void adam_update(std::vector<double>& p, const std::vector<double>& g,
                        std::vector<double>& m, std::vector<double>& v,
                        const Optimizer& opt, double bias1, double bias2) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
    const double m_hat = m[i] / bias1;
    const double v_hat = v[i] / bias2;
    p[i] -= opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.epsilon);
  }
}

inline bool all_finite(const std::vector<std::vector<double>>& p) {
  for (const auto& v : p)
    for (double x : v)
      if (!std::isfinite(x)) return false;
  return true;
}
}  // namespace detail

/// Apply one optimizer step. Throws TrainingDiverged if the gradients or the
/// resulting parameters are non-finite.
inline void step(Network& net, Optimizer& opt, const Gradients& grads) {
  if (!detail::all_finite(grads.weights) || !detail::all_finite(grads.biases))
    throw TrainingDiverged("non-finite gradient");
  opt.step_count += 1;
  if (opt.rule == OptimizerRule::kSgd) {
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      detail::sgd_update(net.weights[l], grads.weights[l], opt.learning_rate);
      detail::sgd_update(net.biases[l], grads.biases[l], opt.learning_rate);
    }
  } else {
    const double bias1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step_count));
    const double bias2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step_count));
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      detail::adam_update(net.weights[l], grads.weights[l], opt.m_w[l], opt.v_w[l], opt,
                          bias1, bias2);
      detail::adam_update(net.biases[l], grads.biases[l], opt.m_b[l], opt.v_b[l], opt,
                          bias1, bias2);
    }
  }
  if (!detail::all_finite(net.weights) || !detail::all_finite(net.biases))
    throw TrainingDiverged("non-finite parameter after update");
}

// ---------------------------------------------------------------------------
// Checkpoint format: a small text header (layer specs) followed by all
// parameters as %.17g values, row-major, weights then biases per layer.
// ---------------------------------------------------------------------------

inline void save_network(const Network& net, std::ostream& os) {
  os << "dynpen-network 1\n" << net.layers.size() << "\n";
  for (const auto& s : net.layers) {
    os << s.in << ' ' << s.out << ' '
       << (s.activation == Activation::kRelu ? "relu" : "identity") << "\n";
  }
  char buf[40];
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    for (double v : net.weights[l]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << buf << "\n";
    }
    for (double v : net.biases[l]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << buf << "\n";
    }
  }
}

inline void save_network(const Network& net, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  save_network(net, os);
}

inline Network load_network(std::istream& is) {
  std::string magic;
  int version = 0;
  is >> magic >> version;
  if (magic != "dynpen-network" || version != 1)
    throw std::runtime_error("unrecognized checkpoint header");
  std::size_t n_layers = 0;
  is >> n_layers;
  std::vector<LayerSpec> specs(n_layers);
  for (auto& s : specs) {
    std::string act;
    is >> s.in >> s.out >> act;
    s.activation = act == "relu" ? Activation::kRelu : Activation::kIdentity;
  }
  validate_specs(specs);
  Network net;
  net.layers = specs;
  for (const auto& s : specs) {
    std::vector<double> w(s.out * s.in);
    for (double& v : w) is >> v;
    std::vector<double> b(s.out);
    for (double& v : b) is >> v;
    net.weights.push_back(std::move(w));
    net.biases.push_back(std::move(b));
  }
  if (!is) throw std::runtime_error("truncated checkpoint");
  return net;
}

inline Network load_network(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return load_network(is);
}

}  // namespace dynpen
