#pragma once

#include "twofold/error.hpp"
#include "twofold/nn/types.hpp"

#include <cmath>

namespace twofold::nn {

enum class Loss { bce, softmax_xent, squared_error };

/// The loss a head is trained with follows from its output activation.
inline Loss loss_for(Activation head_activation) {
  switch (head_activation) {
    case Activation::sigmoid: return Loss::bce;
    case Activation::softmax: return Loss::softmax_xent;
    case Activation::linear: return Loss::squared_error;
    case Activation::relu: break;
  }
  throw ContractViolation("no loss is defined for a relu head");
}

template <typename Scalar>
struct LossResult {
  Scalar value;
  MatrixX<Scalar> grad;  // d value / d logits, same shape as the logits
};

/// Batch-mean loss over rows (summed over output columns) computed from a
/// head's pre-activation logits; the gradient is taken with respect to those
/// logits so sigmoid/softmax saturation never enters the backward pass.
///   bce:           max(z,0) - z*y + log1p(exp(-|z|))
///   softmax_xent:  logsumexp(z) - z_label
///   squared_error: (z - y)^2
template <typename Scalar>
LossResult<Scalar> loss_and_grad(const MatrixX<Scalar>& logits, const MatrixX<Scalar>& labels,
                                 Loss loss) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols())
    throw DimensionMismatch("logits and labels differ in shape");
  if (logits.rows() == 0) throw DimensionMismatch("empty batch");
  if (!logits.allFinite()) throw ContractViolation("non-finite logits");

  const Scalar n = static_cast<Scalar>(logits.rows());
  LossResult<Scalar> out{Scalar(0), MatrixX<Scalar>(logits.rows(), logits.cols())};
  switch (loss) {
    case Loss::bce:
      for (Index r = 0; r < logits.rows(); ++r)
        for (Index c = 0; c < logits.cols(); ++c) {
          const Scalar z = logits(r, c);
          const Scalar y = labels(r, c);
          if (y != Scalar(0) && y != Scalar(1)) throw ContractViolation("bce label outside {0,1}");
          out.value += std::max(z, Scalar(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
          out.grad(r, c) = (Scalar(1) / (Scalar(1) + std::exp(-z)) - y) / n;
        }
      break;
    case Loss::softmax_xent:
      for (Index r = 0; r < logits.rows(); ++r) {
        Index hot = -1;
        for (Index c = 0; c < labels.cols(); ++c) {
          const Scalar y = labels(r, c);
          if (y == Scalar(1) && hot < 0) hot = c;
          else if (y != Scalar(0)) throw ContractViolation("softmax_xent labels must be one-hot");
        }
        if (hot < 0) throw ContractViolation("softmax_xent labels must be one-hot");
        const Scalar peak = logits.row(r).maxCoeff();
        auto shifted = (logits.row(r).array() - peak).exp();
        const Scalar total = shifted.sum();
        out.value += peak + std::log(total) - logits(r, hot);
        out.grad.row(r) = ((shifted / total).matrix() - labels.row(r)) / n;
      }
      break;
    case Loss::squared_error: {
      const MatrixX<Scalar> diff = logits - labels;
      out.value = diff.squaredNorm();
      out.grad = Scalar(2) * diff / n;
      break;
    }
  }
  out.value /= n;
  return out;
}

}  // namespace twofold::nn
