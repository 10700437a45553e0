#pragma once

#include "twofold/error.hpp"
#include "twofold/nn/layer.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace twofold::nn {

/// A named chain of dense layers whose input is the column-wise concatenation
/// of its `inputs` (earlier nodes or the graph input).
template <typename Scalar>
struct Node {
  std::string name;
  std::vector<std::string> inputs;
  std::vector<DenseLayer<Scalar>> layers;
  NodeRole role = NodeRole::hidden;

  Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  bool has_trainable() const {
    return std::any_of(layers.begin(), layers.end(), [](const auto& l) { return l.trainable; });
  }

  template <typename Other>
  Node<Other> cast() const {
    Node<Other> out{name, inputs, {}, role};
    for (const auto& l : layers) out.layers.push_back(l.template cast<Other>());
    return out;
  }
};

/// A directed acyclic graph of dense nodes with named heads. Nodes are stored
/// in insertion order, which is always a topological order because a node may
/// only consume nodes added before it.
template <typename Scalar>
class NetworkGraph {
 public:
  static constexpr std::string_view kInput = "input";

  NetworkGraph() = default;
  explicit NetworkGraph(Index input_dim) : input_dim_(input_dim) {
    if (input_dim <= 0) throw DimensionMismatch("network input width must be positive");
  }

  Index input_dim() const noexcept { return input_dim_; }
  std::span<const Node<Scalar>> nodes() const noexcept { return nodes_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw UnknownName("unknown node '" + std::string(name) + "'");
    return it->second;
  }

  const Node<Scalar>& node(std::string_view name) const { return nodes_[index_of(name)]; }

  /// Width of the concatenated input feeding `n`.
  Index input_width(const Node<Scalar>& n) const {
    Index w = 0;
    for (const auto& in : n.inputs) w += (in == kInput) ? input_dim_ : node(in).output_dim();
    return w;
  }

  void add_node(Node<Scalar> n) {
    if (n.name.empty() || n.name == kInput) throw ContractViolation("invalid node name");
    if (contains(n.name)) throw ContractViolation("duplicate node '" + n.name + "'");
    if (n.layers.empty()) throw ContractViolation("node '" + n.name + "' has no layers");
    if (n.inputs.empty()) throw ContractViolation("node '" + n.name + "' has no inputs");
    for (const auto& in : n.inputs) {
      if (in == kInput) continue;
      if (!contains(in))
        throw UnknownName("node '" + n.name + "' consumes unknown node '" + in + "'");
      if (is_head(node(in).role))
        throw ContractViolation("head '" + in + "' cannot feed node '" + n.name + "'");
    }
    Index width = input_width(n);
    for (const auto& l : n.layers) {
      if (l.in_dim() != width || l.bias.size() != l.out_dim())
        throw DimensionMismatch("layer dimensions inconsistent in node '" + n.name + "'");
      width = l.out_dim();
    }
    for (const auto& l : n.layers)
      if (l.activation == Activation::softmax && &l != &n.layers.back())
        throw ContractViolation("softmax is only allowed on the last layer of a node");
    if (is_head(n.role) && n.layers.back().activation == Activation::relu)
      throw ContractViolation("head '" + n.name + "' needs a linear, sigmoid or softmax output");
    index_.emplace(n.name, nodes_.size());
    nodes_.push_back(std::move(n));
  }

  DenseLayer<Scalar>& layer(std::string_view node_name, std::size_t layer_index) {
    auto& n = nodes_[index_of(node_name)];
    if (layer_index >= n.layers.size())
      throw UnknownName("node '" + n.name + "' has no layer " + std::to_string(layer_index));
    return n.layers[layer_index];
  }
  const DenseLayer<Scalar>& layer(std::string_view node_name, std::size_t layer_index) const {
    return const_cast<NetworkGraph*>(this)->layer(node_name, layer_index);
  }

  void set_trainable(std::string_view node_name, bool trainable) {
    for (auto& l : nodes_[index_of(node_name)].layers) l.trainable = trainable;
  }

  void freeze_all() {
    for (auto& n : nodes_)
      for (auto& l : n.layers) l.trainable = false;
  }

  std::vector<std::string> heads(NodeRole role) const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
      if (n.role == role) out.push_back(n.name);
    return out;
  }

  /// Every node `name` depends on, including itself.
  std::set<std::string> ancestors(std::string_view name) const {
    std::set<std::string> seen;
    std::vector<std::string> stack{std::string(name)};
    while (!stack.empty()) {
      std::string cur = std::move(stack.back());
      stack.pop_back();
      if (!seen.insert(cur).second) continue;
      for (const auto& in : node(cur).inputs)
        if (in != kInput) stack.push_back(in);
    }
    return seen;
  }

  Index parameter_count() const { return count_if_trainable(true, true); }
  Index trainable_parameter_count() const { return count_if_trainable(true, false); }
  Index frozen_parameter_count() const { return count_if_trainable(false, true); }

  template <typename Other>
  NetworkGraph<Other> cast() const {
    NetworkGraph<Other> out(input_dim_);
    for (const auto& n : nodes_) out.add_node(n.template cast<Other>());
    return out;
  }

 private:
  Index count_if_trainable(bool trainable, bool frozen) const {
    Index total = 0;
    for (const auto& n : nodes_)
      for (const auto& l : n.layers)
        if ((l.trainable && trainable) || (!l.trainable && frozen)) total += l.parameter_count();
    return total;
  }

  Index input_dim_ = 0;
  std::vector<Node<Scalar>> nodes_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

using Network = NetworkGraph<double>;

}  // namespace twofold::nn
