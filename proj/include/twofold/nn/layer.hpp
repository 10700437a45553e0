#pragma once

#include "twofold/error.hpp"
#include "twofold/nn/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace twofold::nn {

template <typename Scalar>
struct DenseLayer {
  MatrixX<Scalar> weights;  // out x in
  VectorX<Scalar> bias;     // out
  Activation activation = Activation::linear;
  bool trainable = true;

  Index in_dim() const noexcept { return weights.cols(); }
  Index out_dim() const noexcept { return weights.rows(); }
  Index parameter_count() const noexcept { return weights.size() + bias.size(); }

  template <typename Other>
  DenseLayer<Other> cast() const {
    return {weights.template cast<Other>(), bias.template cast<Other>(), activation, trainable};
  }
};

/// Uniform init in +/- sqrt(6 / (in + out)), zero bias. Weights are drawn in
/// row-major order so a given engine state always yields the same layer.
template <typename Scalar, typename Engine>
DenseLayer<Scalar> glorot_uniform(Index in, Index out, Activation activation, Engine& engine) {
  if (in <= 0 || out <= 0) throw DimensionMismatch("layer dimensions must be positive");
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  DenseLayer<Scalar> layer;
  layer.weights.resize(out, in);
  for (Index r = 0; r < out; ++r)
    for (Index c = 0; c < in; ++c) layer.weights(r, c) = static_cast<Scalar>(dist(engine));
  layer.bias = VectorX<Scalar>::Zero(out);
  layer.activation = activation;
  return layer;
}

template <typename Scalar>
DenseLayer<Scalar> identity_layer(Index width, bool trainable = false) {
  return {MatrixX<Scalar>::Identity(width, width), VectorX<Scalar>::Zero(width), Activation::linear,
          trainable};
}

/// Applies `activation` row-wise to a batch of pre-activations.
template <typename Scalar>
MatrixX<Scalar> activate(Activation activation, const MatrixX<Scalar>& z) {
  switch (activation) {
    case Activation::linear: return z;
    case Activation::relu: return z.cwiseMax(Scalar(0));
    case Activation::sigmoid: {
      // Kept strictly inside (0, 1); losses are taken on logits so this never
      // affects training.
      const Scalar lo = std::numeric_limits<Scalar>::min();
      const Scalar hi = Scalar(1) - std::numeric_limits<Scalar>::epsilon() / Scalar(2);
      return z.unaryExpr([=](Scalar v) { return std::clamp(Scalar(1) / (Scalar(1) + std::exp(-v)), lo, hi); });
    }
    case Activation::softmax: {
      MatrixX<Scalar> out(z.rows(), z.cols());
      for (Index r = 0; r < z.rows(); ++r) {
        const Scalar peak = z.row(r).maxCoeff();
        out.row(r) = (z.row(r).array() - peak).exp().matrix();
        out.row(r) /= out.row(r).sum();
      }
      return out;
    }
  }
  throw ContractViolation("unknown activation");
}

/// Gradient with respect to the pre-activation given the gradient with
/// respect to the activation output. ReLU uses subgradient 0 at exactly 0.
template <typename Scalar>
MatrixX<Scalar> activation_backward(Activation activation, const MatrixX<Scalar>& z,
                                    const MatrixX<Scalar>& a, const MatrixX<Scalar>& grad_a) {
  switch (activation) {
    case Activation::linear: return grad_a;
    case Activation::relu:
      return (z.array() > Scalar(0)).select(grad_a.array(), Scalar(0)).matrix();
    case Activation::sigmoid: return (grad_a.array() * a.array() * (Scalar(1) - a.array())).matrix();
    case Activation::softmax: {
      MatrixX<Scalar> out(a.rows(), a.cols());
      for (Index r = 0; r < a.rows(); ++r) {
        const Scalar dot = grad_a.row(r).dot(a.row(r));
        out.row(r) = (a.row(r).array() * (grad_a.row(r).array() - dot)).matrix();
      }
      return out;
    }
  }
  throw ContractViolation("unknown activation");
}

}  // namespace twofold::nn
