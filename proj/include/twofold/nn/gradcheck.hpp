#pragma once

#include "twofold/error.hpp"
#include "twofold/nn/backprop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace twofold::nn {

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_at_kink = 0;
};

namespace detail {

// Sign pattern of every evaluated ReLU pre-activation.
template <typename Scalar>
std::vector<std::uint8_t> relu_pattern(const NetworkGraph<Scalar>& net,
                                       const ForwardPass<Scalar>& pass) {
  std::vector<std::uint8_t> bits;
  const auto nodes = net.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!pass.evaluated(i)) continue;
    for (std::size_t li = 0; li < nodes[i].layers.size(); ++li) {
      if (nodes[i].layers[li].activation != Activation::relu) continue;
      const auto& z = pass.layers[i][li].pre_activation;
      for (Index k = 0; k < z.size(); ++k) bits.push_back(z.data()[k] > Scalar(0) ? 1 : 0);
    }
  }
  return bits;
}

}  // namespace detail

/// Compares `analytic` against central differences of the summed head losses.
/// Relative error per parameter is |a - n| / max(|a|, |n|, 1e-12). Parameters
/// whose +/- epsilon perturbation flips any ReLU across its kink are skipped.
/// When `max_per_layer` is nonzero only that many entries per layer are
/// sampled (deterministically from `sample_seed`).
template <typename Scalar>
GradientCheck finite_difference_check(const NetworkGraph<Scalar>& net, const MatrixX<Scalar>& batch,
                                      const HeadOutputs<Scalar>& labels, Scalar epsilon,
                                      const GradientSet<Scalar>& analytic,
                                      std::size_t max_per_layer = 0,
                                      std::uint64_t sample_seed = 0) {
  if (!(epsilon > Scalar(0) && epsilon <= Scalar(1e-2)))
    throw ContractViolation("epsilon must lie in (0, 1e-2]");
  const auto heads = keys_of(labels);
  const auto base_pattern = detail::relu_pattern(net, forward_pass(net, batch, heads));

  NetworkGraph<Scalar> work = net;
  std::mt19937_64 engine(sample_seed);
  GradientCheck result;

  auto evaluate = [&](std::vector<std::uint8_t>& pattern) {
    const auto pass = forward_pass(work, batch, heads);
    pattern = detail::relu_pattern(work, pass);
    return objective(work, pass, labels).first;
  };

  for (const auto& [key, g] : analytic) {
    auto& layer = work.layer(key.node, key.layer);
    const Index nw = layer.weights.size();
    const Index total = layer.parameter_count();
    std::vector<Index> picks(static_cast<std::size_t>(total));
    for (Index k = 0; k < total; ++k) picks[static_cast<std::size_t>(k)] = k;
    if (max_per_layer != 0 && picks.size() > max_per_layer) {
      std::shuffle(picks.begin(), picks.end(), engine);
      picks.resize(max_per_layer);
    }
    for (Index k : picks) {
      Scalar& param = k < nw ? layer.weights.data()[k] : layer.bias.data()[k - nw];
      const Scalar a = k < nw ? g.weights.data()[k] : g.bias.data()[k - nw];
      const Scalar saved = param;
      std::vector<std::uint8_t> up_pattern, down_pattern;
      param = saved + epsilon;
      const Scalar up = evaluate(up_pattern);
      param = saved - epsilon;
      const Scalar down = evaluate(down_pattern);
      param = saved;
      if (up_pattern != base_pattern || down_pattern != base_pattern) {
        ++result.skipped_at_kink;
        continue;
      }
      const Scalar numeric = (up - down) / (Scalar(2) * epsilon);
      const double denom = std::max({std::abs(static_cast<double>(a)),
                                     std::abs(static_cast<double>(numeric)), 1e-12});
      const double rel = std::abs(static_cast<double>(a - numeric)) / denom;
      result.max_relative_error = std::max(result.max_relative_error, rel);
      ++result.checked;
    }
  }
  return result;
}

/// Same check against the gradients produced by `backward`.
template <typename Scalar>
GradientCheck finite_difference_check(const NetworkGraph<Scalar>& net, const MatrixX<Scalar>& batch,
                                      const HeadOutputs<Scalar>& labels, Scalar epsilon,
                                      std::size_t max_per_layer = 0) {
  const auto pass = forward_pass(net, batch, keys_of(labels));
  const auto [loss, head_grads] = objective(net, pass, labels);
  return finite_difference_check(net, batch, labels, epsilon, backward(net, pass, head_grads),
                                 max_per_layer);
}

}  // namespace twofold::nn
