#pragma once

#include "twofold/nn.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace twofold::testing {

using nn::Activation;
using nn::Index;
using nn::Matrix;
using nn::Network;
using nn::NodeRole;

// Random graph with at most three layers on any path and at most 16 units per
// layer: one or two ReLU hidden nodes and up to three heads.
struct RandomNet {
  Network net{1};
  Matrix batch;
  nn::HeadOutputs<double> labels;
};

inline nn::Node<double> random_node(const std::string& name, std::vector<std::string> inputs, Index in,
                                    std::vector<std::pair<Index, Activation>> shape, NodeRole role,
                                    std::mt19937_64& engine) {
  nn::Node<double> n{name, std::move(inputs), {}, role};
  std::normal_distribution<double> bias(0.0, 0.3);
  for (auto [out, act] : shape) {
    auto layer = nn::glorot_uniform<double>(in, out, act, engine);
    for (Index i = 0; i < out; ++i) layer.bias[i] = bias(engine);
    n.layers.push_back(std::move(layer));
    in = out;
  }
  return n;
}

inline RandomNet random_net(std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine); };
  RandomNet r;
  const Index in = pick(2, 6);
  const Index rows = pick(3, 8);
  r.net = Network(in);
  const Index h1 = pick(2, 16);
  r.net.add_node(random_node("h1", {"input"}, in, {{h1, Activation::relu}}, NodeRole::hidden, engine));
  std::string trunk = "h1";
  Index trunk_width = h1;
  if (pick(0, 1)) {
    const Index h2 = pick(2, 16);
    r.net.add_node(random_node("h2", {"h1", "input"}, h1 + in, {{h2, Activation::relu}}, NodeRole::hidden,
                               engine));
    trunk = "h2";
    trunk_width = h2;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  r.batch = Matrix(rows, in);
  for (Index i = 0; i < r.batch.size(); ++i) r.batch.data()[i] = normal(engine);

  std::bernoulli_distribution coin(0.5);
  r.net.add_node(random_node("sig", {trunk}, trunk_width, {{1, Activation::sigmoid}}, NodeRole::attribute_head,
                             engine));
  Matrix y(rows, 1);
  for (Index i = 0; i < rows; ++i) y(i, 0) = coin(engine) ? 1.0 : 0.0;
  r.labels.emplace("sig", y);
  if (pick(0, 1)) {
    const Index k = pick(2, 4);
    r.net.add_node(random_node("soft", {"h1"}, h1, {{k, Activation::softmax}}, NodeRole::demographic_head,
                               engine));
    Matrix t = Matrix::Zero(rows, k);
    for (Index i = 0; i < rows; ++i) t(i, pick(0, static_cast<int>(k) - 1)) = 1.0;
    r.labels.emplace("soft", t);
  }
  if (pick(0, 1)) {
    r.net.add_node(random_node("lin", {trunk}, trunk_width, {{2, Activation::linear}}, NodeRole::proxy_head,
                               engine));
    Matrix t(rows, 2);
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = normal(engine);
    r.labels.emplace("lin", t);
  }
  return r;
}

inline nn::GradientSet<double> analytic_gradients(const Network& net, const Matrix& batch,
                                                  const nn::HeadOutputs<double>& labels) {
  const auto pass = nn::forward_pass(net, batch, nn::keys_of(labels));
  return nn::backward(net, pass, nn::objective(net, pass, labels).second);
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("twofold-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace twofold::testing
