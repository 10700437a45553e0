#pragma once

#include "twofold/error.hpp"
#include "twofold/nn/loss.hpp"
#include "twofold/nn/network.hpp"

#include <cmath>
#include <compare>
#include <map>
#include <string>
#include <vector>

namespace twofold::nn {

template <typename Scalar>
struct LayerCache {
  MatrixX<Scalar> input;
  MatrixX<Scalar> pre_activation;
  MatrixX<Scalar> output;
};

/// Activations recorded by a forward pass, indexed like the graph's nodes.
/// Nodes not needed for the requested outputs are left unevaluated.
template <typename Scalar>
struct ForwardPass {
  std::vector<std::vector<LayerCache<Scalar>>> layers;
  Index input_dim = 0;
  Index batch_rows = 0;

  bool evaluated(std::size_t node) const { return node < layers.size() && !layers[node].empty(); }
};

template <typename Scalar>
using HeadOutputs = std::map<std::string, MatrixX<Scalar>, std::less<>>;

/// Runs the nodes needed for `outputs` and keeps every intermediate.
template <typename Scalar>
ForwardPass<Scalar> forward_pass(const NetworkGraph<Scalar>& net, const MatrixX<Scalar>& batch,
                                 const std::vector<std::string>& outputs) {
  if (batch.cols() != net.input_dim())
    throw DimensionMismatch("batch has " + std::to_string(batch.cols()) +
                            " columns, network expects " + std::to_string(net.input_dim()));
  std::vector<bool> needed(net.node_count(), false);
  for (const auto& name : outputs)
    for (const auto& a : net.ancestors(name)) needed[net.index_of(a)] = true;

  ForwardPass<Scalar> pass;
  pass.layers.resize(net.node_count());
  pass.input_dim = net.input_dim();
  pass.batch_rows = batch.rows();
  const auto nodes = net.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!needed[i]) continue;
    const auto& n = nodes[i];
    MatrixX<Scalar> x(batch.rows(), net.input_width(n));
    Index col = 0;
    for (const auto& in : n.inputs) {
      const MatrixX<Scalar>& src =
          (in == NetworkGraph<Scalar>::kInput) ? batch : pass.layers[net.index_of(in)].back().output;
      x.middleCols(col, src.cols()) = src;
      col += src.cols();
    }
    for (const auto& l : n.layers) {
      LayerCache<Scalar> c;
      c.pre_activation = x * l.weights.transpose();
      c.pre_activation.rowwise() += l.bias.transpose();
      c.output = activate(l.activation, c.pre_activation);
      c.input = std::move(x);
      x = c.output;
      pass.layers[i].push_back(std::move(c));
    }
  }
  return pass;
}

template <typename Scalar>
const MatrixX<Scalar>& node_output(const NetworkGraph<Scalar>& net, const ForwardPass<Scalar>& pass,
                                   std::string_view name) {
  const std::size_t i = net.index_of(name);
  if (!pass.evaluated(i)) throw ContractViolation("node '" + std::string(name) + "' not evaluated");
  return pass.layers[i].back().output;
}

template <typename Scalar>
const MatrixX<Scalar>& head_logits(const NetworkGraph<Scalar>& net, const ForwardPass<Scalar>& pass,
                                   std::string_view name) {
  const std::size_t i = net.index_of(name);
  if (!pass.evaluated(i)) throw ContractViolation("node '" + std::string(name) + "' not evaluated");
  return pass.layers[i].back().pre_activation;
}

/// Outputs of the named nodes (usually heads) for a batch.
template <typename Scalar>
HeadOutputs<Scalar> forward(const NetworkGraph<Scalar>& net, const MatrixX<Scalar>& batch,
                            const std::vector<std::string>& outputs) {
  const auto pass = forward_pass(net, batch, outputs);
  HeadOutputs<Scalar> out;
  for (const auto& name : outputs) out.emplace(name, node_output(net, pass, name));
  return out;
}

struct LayerKey {
  std::string node;
  std::size_t layer = 0;
  auto operator<=>(const LayerKey&) const = default;
};

template <typename Scalar>
struct LayerGradient {
  MatrixX<Scalar> weights;
  VectorX<Scalar> bias;
};

/// Gradients for trainable layers only.
template <typename Scalar>
using GradientSet = std::map<LayerKey, LayerGradient<Scalar>>;

/// Backpropagates gradients given with respect to head logits. Frozen layers
/// pass gradients through to trainable ancestors but receive no entry.
template <typename Scalar>
GradientSet<Scalar> backward(const NetworkGraph<Scalar>& net, const ForwardPass<Scalar>& pass,
                             const HeadOutputs<Scalar>& head_logit_grads) {
  if (pass.layers.size() != net.node_count() || pass.input_dim != net.input_dim())
    throw ContractViolation("forward cache does not belong to this network");
  const auto nodes = net.nodes();

  // A node needs a gradient only when it or something upstream can learn.
  std::vector<bool> needs_grad(nodes.size(), false);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    bool need = nodes[i].has_trainable();
    for (const auto& in : nodes[i].inputs)
      if (in != NetworkGraph<Scalar>::kInput && needs_grad[net.index_of(in)]) need = true;
    needs_grad[i] = need;
  }

  std::vector<MatrixX<Scalar>> grad_out(nodes.size());
  std::vector<bool> is_logit_grad(nodes.size(), false);
  for (const auto& [name, g] : head_logit_grads) {
    const std::size_t i = net.index_of(name);
    if (!is_head(nodes[i].role)) throw ContractViolation("'" + name + "' is not a head");
    if (!pass.evaluated(i)) throw ContractViolation("missing forward cache for head '" + name + "'");
    const auto& logits = pass.layers[i].back().pre_activation;
    if (g.rows() != logits.rows() || g.cols() != logits.cols())
      throw DimensionMismatch("gradient for head '" + name + "' has the wrong shape");
    grad_out[i] = g;
    is_logit_grad[i] = true;
  }

  GradientSet<Scalar> grads;
  for (std::size_t i = nodes.size(); i-- > 0;) {
    if (grad_out[i].size() == 0 || !needs_grad[i]) continue;
    const auto& n = nodes[i];
    const auto& cache = pass.layers[i];
    MatrixX<Scalar> g = std::move(grad_out[i]);
    for (std::size_t li = n.layers.size(); li-- > 0;) {
      const auto& l = n.layers[li];
      const auto& c = cache[li];
      MatrixX<Scalar> dz = (li + 1 == n.layers.size() && is_logit_grad[i])
                               ? std::move(g)
                               : activation_backward(l.activation, c.pre_activation, c.output, g);
      if (l.trainable)
        grads[LayerKey{n.name, li}] = {dz.transpose() * c.input, dz.colwise().sum().transpose()};
      g = dz * l.weights;
    }
    Index col = 0;
    for (const auto& in : n.inputs) {
      const Index w = (in == NetworkGraph<Scalar>::kInput) ? net.input_dim()
                                                           : net.node(in).output_dim();
      if (in != NetworkGraph<Scalar>::kInput) {
        const std::size_t j = net.index_of(in);
        if (needs_grad[j]) {
          if (grad_out[j].size() == 0) grad_out[j] = MatrixX<Scalar>::Zero(g.rows(), w);
          grad_out[j] += g.middleCols(col, w);
        }
      }
      col += w;
    }
  }
  return grads;
}

/// Sum of head losses and per-head logit gradients for `labels`
/// (keyed by head name).
template <typename Scalar>
std::pair<Scalar, HeadOutputs<Scalar>> objective(const NetworkGraph<Scalar>& net,
                                                 const ForwardPass<Scalar>& pass,
                                                 const HeadOutputs<Scalar>& labels) {
  Scalar total(0);
  HeadOutputs<Scalar> grads;
  for (const auto& [head, y] : labels) {
    const auto& n = net.node(head);
    if (!is_head(n.role)) throw ContractViolation("'" + head + "' is not a head");
    auto r = loss_and_grad(head_logits(net, pass, head), y, loss_for(n.layers.back().activation));
    total += r.value;
    grads.emplace(head, std::move(r.grad));
  }
  return {total, std::move(grads)};
}

template <typename Scalar>
std::vector<std::string> keys_of(const HeadOutputs<Scalar>& m) {
  std::vector<std::string> out;
  for (const auto& [k, v] : m) out.push_back(k);
  return out;
}

namespace detail {
template <typename Scalar>
void check_gradients(const NetworkGraph<Scalar>& net, const GradientSet<Scalar>& grads) {
  for (const auto& [key, g] : grads) {
    const auto& l = net.layer(key.node, key.layer);
    if (!l.trainable)
      throw ContractViolation("gradient supplied for frozen layer " + key.node + "[" +
                              std::to_string(key.layer) + "]");
    if (g.weights.rows() != l.weights.rows() || g.weights.cols() != l.weights.cols() ||
        g.bias.size() != l.bias.size())
      throw DimensionMismatch("gradient shape mismatch for " + key.node);
  }
}
}  // namespace detail

/// p <- p - lr * g for every layer in `grads`. Validates everything before
/// touching any parameter, so a rejected step leaves the network unchanged.
template <typename Scalar>
void sgd_step(NetworkGraph<Scalar>& net, const GradientSet<Scalar>& grads, Scalar lr) {
  if (!(lr >= Scalar(0)) || !std::isfinite(static_cast<double>(lr)))
    throw ContractViolation("learning rate must be finite and non-negative");
  detail::check_gradients(net, grads);
  for (const auto& [key, g] : grads) {
    auto& l = net.layer(key.node, key.layer);
    l.weights -= lr * g.weights;
    l.bias -= lr * g.bias;
  }
}

/// SGD with optional heavy-ball momentum: v <- m*v + g; p <- p - lr*v.
/// With momentum 0 the update is identical to sgd_step.
template <typename Scalar>
class Sgd {
 public:
  Sgd(Scalar lr, Scalar momentum = Scalar(0)) : lr_(lr), momentum_(momentum) {
    if (!(momentum >= Scalar(0) && momentum < Scalar(1)))
      throw ContractViolation("momentum must lie in [0, 1)");
  }

  void step(NetworkGraph<Scalar>& net, const GradientSet<Scalar>& grads) {
    if (momentum_ == Scalar(0)) {
      sgd_step(net, grads, lr_);
      return;
    }
    detail::check_gradients(net, grads);
    GradientSet<Scalar> update;
    for (const auto& [key, g] : grads) {
      auto [it, fresh] = velocity_.try_emplace(key, g);
      if (!fresh) {
        it->second.weights = momentum_ * it->second.weights + g.weights;
        it->second.bias = momentum_ * it->second.bias + g.bias;
      }
      update.emplace(key, it->second);
    }
    sgd_step(net, update, lr_);
  }

 private:
  Scalar lr_;
  Scalar momentum_;
  GradientSet<Scalar> velocity_;
};

}  // namespace twofold::nn
