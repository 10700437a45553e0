#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string_view>

namespace twofold::nn {

using Index = Eigen::Index;

// Batches are row-major: one example per row.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

enum class Activation : std::uint8_t { linear = 0, relu = 1, sigmoid = 2, softmax = 3 };

// What a node of the graph is for. Heads are terminal: no other node may
// consume a head's output.
enum class NodeRole : std::uint8_t {
  hidden = 0,
  demographic_head = 1,
  attribute_head = 2,
  proxy_head = 3,
};

constexpr bool is_head(NodeRole role) noexcept { return role != NodeRole::hidden; }

constexpr std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

constexpr std::string_view to_string(NodeRole r) noexcept {
  switch (r) {
    case NodeRole::hidden: return "hidden";
    case NodeRole::demographic_head: return "demographic-head";
    case NodeRole::attribute_head: return "attribute-head";
    case NodeRole::proxy_head: return "proxy-head";
  }
  return "?";
}

}  // namespace twofold::nn
