#include "twofold/pipeline.hpp"

#include "twofold/error.hpp"
#include "twofold/hash.hpp"
#include "twofold/seed.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace twofold::pipeline {

namespace {

using datagen::IdentityPool;
using datagen::LabeledCorpus;
using nn::Activation;
using nn::DenseLayer;
using nn::NodeRole;

const std::string kBackboneName(kBackbone);

Matrix one_hot(const std::vector<int>& classes, Index width) {
  Matrix m = Matrix::Zero(static_cast<Index>(classes.size()), width);
  for (std::size_t i = 0; i < classes.size(); ++i) m(static_cast<Index>(i), classes[i]) = 1.0;
  return m;
}

Matrix rows_of(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

double argmax_accuracy(const Matrix& probs, const std::vector<int>& truth) {
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (Index r = 0; r < probs.rows(); ++r) {
    Index best = 0;
    probs.row(r).maxCoeff(&best);
    if (best == truth[static_cast<std::size_t>(r)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

template <std::size_t N>
std::array<double, N> one_vs_rest_auc(const Matrix& probs, const std::vector<int>& truth) {
  std::array<double, N> out{};
  for (std::size_t k = 0; k < N; ++k) {
    std::vector<double> scores(truth.size());
    std::vector<std::uint8_t> pos(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
      scores[i] = probs(static_cast<Index>(i), static_cast<Index>(k));
      pos[i] = truth[i] == static_cast<int>(k) ? 1 : 0;
    }
    out[k] = metrics::roc_auc(scores, pos);
  }
  return out;
}

nn::Node<double> dense_node(std::string name, std::vector<std::string> inputs, Index in, Index out,
                            Activation act, NodeRole role, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  return {std::move(name), std::move(inputs), {nn::glorot_uniform<double>(in, out, act, engine)}, role};
}

std::vector<std::string> fully_frozen_nodes(const Network& net) {
  std::vector<std::string> out;
  for (const auto& n : net.nodes())
    if (!n.has_trainable()) out.push_back(n.name);
  return out;
}

}  // namespace

std::string attribute_head_name(std::string_view attribute) {
  return "attr:" + std::string(attribute);
}

std::string_view to_string(FeatureMode m) {
  return m == FeatureMode::oracle_features ? "oracle-features" : "pretrained-encoder";
}

FeatureMode parse_feature_mode(std::string_view s) {
  if (s == "oracle-features") return FeatureMode::oracle_features;
  if (s == "pretrained-encoder") return FeatureMode::pretrained_encoder;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

std::string_view to_string(TransferVariant v) {
  switch (v) {
    case TransferVariant::vanilla: return "VANILLA";
    case TransferVariant::plus_g: return "PLUS_G";
    case TransferVariant::plus_r: return "PLUS_R";
    case TransferVariant::plus_rg: return "PLUS_RG";
    case TransferVariant::param_matched: return "PARAM_MATCHED";
  }
  return "?";
}

TransferVariant parse_variant(std::string_view s) {
  for (auto v : {TransferVariant::vanilla, TransferVariant::plus_g, TransferVariant::plus_r,
                 TransferVariant::plus_rg, TransferVariant::param_matched})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

std::vector<std::string> AttributeDetector::head_names() const {
  std::vector<std::string> out;
  for (const auto& a : attributes) out.push_back(attribute_head_name(a));
  return out;
}

TrainingLog train_heads(Network& net, const Matrix& features, const nn::HeadOutputs<double>& labels,
                        const TrainConfig& config) {
  if (config.epochs < 0) throw ContractViolation("epochs must be non-negative");
  if (config.batch_size < 1) throw ContractViolation("batch size must be positive");
  if (!(config.lr > 0.0)) throw ContractViolation("learning rate must be positive");
  for (const auto& [head, y] : labels)
    if (y.rows() != features.rows()) throw DimensionMismatch("labels for '" + head + "' misaligned");
  const auto heads = nn::keys_of(labels);

  TrainingLog log;
  log.push_back(nn::objective(net, nn::forward_pass(net, features, heads), labels).first);

  nn::Sgd<double> optimizer(config.lr, config.momentum);
  std::vector<Index> order(static_cast<std::size_t>(features.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 engine(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), engine);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
      const Matrix x = rows_of(features, rows);
      nn::HeadOutputs<double> y;
      for (const auto& [head, m] : labels) y.emplace(head, rows_of(m, rows));
      const auto pass = nn::forward_pass(net, x, heads);
      const auto [loss, grads] = nn::objective(net, pass, y);
      optimizer.step(net, nn::backward(net, pass, grads));
      total += loss;
      ++batches;
    }
    log.push_back(batches ? total / batches : 0.0);
  }
  return log;
}

Backbone pretrain_backbone(const datagen::IdentityCorpus& corpus, const BackboneConfig& config) {
  const Index dim = corpus.features.cols();
  if (dim <= 0) throw DimensionMismatch("identity corpus has no features");
  Backbone out;
  out.mode = config.mode;
  out.net = Network(dim);
  if (config.mode == FeatureMode::oracle_features) {
    out.net.add_node({kBackboneName, {"input"}, {nn::identity_layer<double>(dim)}, NodeRole::hidden});
    return out;
  }
  if (corpus.identity_count < 2) throw DataError("identity corpus needs at least two identities");
  if (static_cast<Index>(corpus.identity.size()) != corpus.features.rows())
    throw DataError("identity labels misaligned");

  // Hold back every fourth example of each identity for the proxy accuracy.
  std::vector<Index> train_rows, eval_rows;
  std::vector<int> train_ids, eval_ids;
  std::vector<int> seen(static_cast<std::size_t>(corpus.identity_count), 0);
  for (Index r = 0; r < corpus.features.rows(); ++r) {
    const int id = corpus.identity[static_cast<std::size_t>(r)];
    if (id < 0 || id >= corpus.identity_count) throw DataError("identity label out of range");
    if (seen[static_cast<std::size_t>(id)]++ % 4 == 3) {
      eval_rows.push_back(r);
      eval_ids.push_back(id);
    } else {
      train_rows.push_back(r);
      train_ids.push_back(id);
    }
  }

  Network net(dim);
  net.add_node(dense_node(kBackboneName, {"input"}, dim, config.width, Activation::relu,
                          NodeRole::hidden, derive_seed(config.train.seed, "init/backbone")));
  net.add_node(dense_node(std::string(kIdentityHead), {kBackboneName}, config.width,
                          corpus.identity_count, Activation::softmax, NodeRole::proxy_head,
                          derive_seed(config.train.seed, "init/identity_head")));
  const std::string head(kIdentityHead);
  out.log = train_heads(net, rows_of(corpus.features, train_rows),
                        {{head, one_hot(train_ids, corpus.identity_count)}}, config.train);
  if (!eval_rows.empty()) {
    const auto probs = nn::forward(net, rows_of(corpus.features, eval_rows), {head}).at(head);
    out.proxy_accuracy = argmax_accuracy(probs, eval_ids);
  }
  nn::Node<double> encoder = net.node(kBackbone);
  for (auto& l : encoder.layers) l.trainable = false;
  out.net.add_node(std::move(encoder));
  return out;
}

std::vector<std::string> branch_node_names() {
  return {std::string(kRaceHidden), std::string(kRaceHead), std::string(kGenderHidden),
          std::string(kGenderHead)};
}

DemographicBranch train_demographic_heads(const Backbone& backbone, const LabeledCorpus& held_out,
                                          const DemographicConfig& config) {
  held_out.validate();
  if (held_out.pool != IdentityPool::HeldOut)
    throw ContractViolation("demographic heads must be trained on the HELD_OUT pool");
  if (held_out.features.cols() != backbone.net.input_dim())
    throw DimensionMismatch("held-out features do not match the backbone input");
  const Index n = held_out.size();
  std::array<Index, datagen::kKnownRaces * datagen::kKnownGenders> cells{};
  for (const auto& s : held_out.subgroups) {
    if (s.race == datagen::Race::Other || s.gender == datagen::Gender::Other)
      throw DataError("held-out corpus has missing demographic labels");
    cells[static_cast<std::size_t>(s.race) * 2 + static_cast<std::size_t>(s.gender)]++;
  }
  for (Index c : cells)
    if (c < n / 8 || c > n / 8 + 1)
      throw DataError("held-out corpus is not uniform across race x gender");
  if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0))
    throw ConfigError("validation_fraction must lie in [0, 1)");

  const Index n_valid = static_cast<Index>(static_cast<double>(n) * config.validation_fraction);
  const Index n_train = n - n_valid;
  std::vector<int> race(static_cast<std::size_t>(n)), gender(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    race[static_cast<std::size_t>(i)] = static_cast<int>(held_out.subgroups[static_cast<std::size_t>(i)].race);
    gender[static_cast<std::size_t>(i)] = static_cast<int>(held_out.subgroups[static_cast<std::size_t>(i)].gender);
  }
  const std::vector<int> race_train(race.begin(), race.begin() + n_train);
  const std::vector<int> gender_train(gender.begin(), gender.begin() + n_train);
  const std::vector<int> race_valid(race.begin() + n_train, race.end());
  const std::vector<int> gender_valid(gender.begin() + n_train, gender.end());

  const Index bdim = backbone.output_dim();
  DemographicBranch out;
  out.rep_dim = config.rep_dim;
  out.net = backbone.net;
  const std::string race_hidden(kRaceHidden), race_head(kRaceHead);
  const std::string gender_hidden(kGenderHidden), gender_head(kGenderHead);
  out.net.add_node(dense_node(race_hidden, {kBackboneName}, bdim, config.rep_dim, Activation::relu,
                              NodeRole::hidden, derive_seed(config.race.seed, "init/race_hidden")));
  out.net.add_node(dense_node(race_head, {race_hidden}, config.rep_dim, 4, Activation::softmax,
                              NodeRole::demographic_head, derive_seed(config.race.seed, "init/race_head")));
  out.net.add_node(dense_node(gender_hidden, {kBackboneName}, bdim, config.rep_dim, Activation::relu,
                              NodeRole::hidden, derive_seed(config.gender.seed, "init/gender_hidden")));
  out.net.add_node(dense_node(gender_head, {gender_hidden}, config.rep_dim, 2, Activation::softmax,
                              NodeRole::demographic_head,
                              derive_seed(config.gender.seed, "init/gender_head")));

  const std::string before = parameter_checksum(out.net, {kBackboneName});
  const Matrix x_train = held_out.features.topRows(n_train);
  // Separate objectives, separate passes. The gender layers receive no
  // gradient during the race pass (and vice versa) since only one head is fed.
  out.race_log = train_heads(out.net, x_train, {{race_head, one_hot(race_train, 4)}}, config.race);
  out.gender_log = train_heads(out.net, x_train, {{gender_head, one_hot(gender_train, 2)}}, config.gender);
  if (parameter_checksum(out.net, {kBackboneName}) != before)
    throw ContractViolation("backbone changed during demographic training");
  out.net.freeze_all();

  const Matrix x_valid = n_valid > 0 ? Matrix(held_out.features.bottomRows(n_valid)) : x_train;
  const auto& rv = n_valid > 0 ? race_valid : race_train;
  const auto& gv = n_valid > 0 ? gender_valid : gender_train;
  const auto outputs = nn::forward(out.net, x_valid, {race_head, gender_head});
  out.race_accuracy = argmax_accuracy(outputs.at(race_head), rv);
  out.gender_accuracy = argmax_accuracy(outputs.at(gender_head), gv);
  out.race_auc = one_vs_rest_auc<datagen::kKnownRaces>(outputs.at(race_head), rv);
  out.gender_auc = one_vs_rest_auc<datagen::kKnownGenders>(outputs.at(gender_head), gv);
  return out;
}

std::vector<std::string> frozen_demographic_nodes(TransferVariant v) {
  switch (v) {
    case TransferVariant::plus_r: return {std::string(kRaceHidden)};
    case TransferVariant::plus_g: return {std::string(kGenderHidden)};
    case TransferVariant::plus_rg: return {std::string(kRaceHidden), std::string(kGenderHidden)};
    case TransferVariant::vanilla:
    case TransferVariant::param_matched: return {};
  }
  return {};
}

AttributeDetector assemble(TransferVariant variant, const Backbone& backbone,
                           const DemographicBranch* branch, const std::vector<std::string>& attributes,
                           const AssembleConfig& config) {
  if (attributes.empty()) throw ContractViolation("detector needs at least one attribute");
  const auto demographic = frozen_demographic_nodes(variant);
  if (!demographic.empty() && branch == nullptr)
    throw ContractViolation(std::string(to_string(variant)) + " needs a demographic branch");
  if (branch != nullptr &&
      parameter_checksum(branch->net, {kBackboneName}) != parameter_checksum(backbone.net, {kBackboneName}))
    throw ContractViolation("demographic branch was trained on a different backbone");

  AttributeDetector d;
  d.variant = variant;
  d.attributes = attributes;
  d.net = Network(backbone.net.input_dim());
  d.net.add_node(backbone.net.node(kBackbone));
  d.net.set_trainable(kBackbone, false);

  std::vector<std::string> trunk_inputs{kBackboneName};
  for (const auto& name : demographic) {
    nn::Node<double> rep = branch->net.node(name);
    for (auto& l : rep.layers) l.trainable = false;
    d.net.add_node(std::move(rep));
    trunk_inputs.push_back(name);
  }
  if (variant == TransferVariant::param_matched) {
    const Index bdim = backbone.output_dim();
    const Index width = branch ? branch->net.node(kRaceHidden).output_dim() : config.trunk_dim;
    d.net.add_node(dense_node(std::string(kMatchedHidden), {kBackboneName}, bdim, width,
                              Activation::relu, NodeRole::hidden,
                              derive_seed(config.seed, "init/matched_hidden")));
    trunk_inputs.push_back(std::string(kMatchedHidden));
  }
  nn::Node<double> trunk{std::string(kTrunk), trunk_inputs, {}, NodeRole::hidden};
  const Index trunk_in = d.net.input_width(trunk);
  {
    // Backbone columns are drawn the same way for every variant; columns fed
    // by added representations start at zero.
    const Index bdim = backbone.output_dim();
    std::mt19937_64 engine(derive_seed(config.seed, "init/trunk"));
    auto shared = nn::glorot_uniform<double>(bdim, config.trunk_dim, Activation::relu, engine);
    nn::DenseLayer<double> layer = shared;
    layer.weights = Matrix::Zero(config.trunk_dim, trunk_in);
    layer.weights.leftCols(bdim) = shared.weights;
    trunk.layers.push_back(std::move(layer));
  }
  d.net.add_node(std::move(trunk));
  for (const auto& a : attributes) {
    const std::string head = attribute_head_name(a);
    d.net.add_node(dense_node(head, {std::string(kTrunk)}, config.trunk_dim, 1, Activation::sigmoid,
                              NodeRole::attribute_head, derive_seed(config.seed, "init/" + head)));
  }
  d.provenance.backbone_id = nn::checkpoint_id(nn::serialize_checkpoint(backbone.net));
  if (branch) d.provenance.branch_id = nn::checkpoint_id(nn::serialize_checkpoint(branch->net));
  if (!attribute_path_is_private(d.net))
    throw ContractViolation("assembled detector exposes a demographic head");
  return d;
}

void train_attribute_heads(AttributeDetector& detector, const LabeledCorpus& target,
                           const TrainConfig& config) {
  target.validate();
  if (target.pool != IdentityPool::Target)
    throw ContractViolation("attribute heads must be trained on the TARGET pool");
  nn::HeadOutputs<double> labels;
  for (const auto& a : detector.attributes) {
    const auto it = std::find(target.attribute_names.begin(), target.attribute_names.end(), a);
    if (it == target.attribute_names.end()) throw DataError("target corpus lacks attribute '" + a + "'");
    const auto col = static_cast<Index>(it - target.attribute_names.begin());
    labels.emplace(attribute_head_name(a), target.attribute_labels.col(col).cast<double>());
  }
  const auto frozen = fully_frozen_nodes(detector.net);
  const std::string before = parameter_checksum(detector.net, frozen);
  detector.log = train_heads(detector.net, target.features, labels, config);
  if (parameter_checksum(detector.net, frozen) != before)
    throw ContractViolation("frozen parameters changed during attribute training");
}

AttributePredictions predict_attributes(const AttributeDetector& detector, const Matrix& features,
                                        double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractViolation("threshold must lie in (0,1)");
  const auto heads = detector.head_names();
  const auto outputs = nn::forward(detector.net, features, heads);
  AttributePredictions p;
  p.attributes = detector.attributes;
  p.probabilities.resize(features.rows(), static_cast<Index>(heads.size()));
  p.decisions.resize(features.rows(), static_cast<Index>(heads.size()));
  for (std::size_t a = 0; a < heads.size(); ++a) {
    const auto col = static_cast<Index>(a);
    p.probabilities.col(col) = outputs.at(heads[a]).col(0);
    for (Index r = 0; r < features.rows(); ++r)
      p.decisions(r, col) = p.probabilities(r, col) >= threshold ? 1 : 0;
  }
  return p;
}

datagen::Race classify_race_from_probabilities(std::span<const double> probs,
                                               double confidence_threshold) {
  if (!(confidence_threshold > 0.0 && confidence_threshold < 1.0))
    throw ContractViolation("confidence threshold must lie in (0,1)");
  if (probs.size() != datagen::kKnownRaces) throw DimensionMismatch("race head has 4 outputs");
  const auto best = std::max_element(probs.begin(), probs.end());
  if (*best < confidence_threshold) return datagen::Race::Other;
  return static_cast<datagen::Race>(best - probs.begin());
}

std::vector<datagen::Race> classify_race_for_analysis(const DemographicBranch& branch,
                                                      const Matrix& features,
                                                      double confidence_threshold) {
  const std::string head(kRaceHead);
  const Matrix probs = nn::forward(branch.net, features, {head}).at(head);
  std::vector<datagen::Race> out;
  out.reserve(static_cast<std::size_t>(probs.rows()));
  for (Index r = 0; r < probs.rows(); ++r) {
    const std::array<double, 4> row{probs(r, 0), probs(r, 1), probs(r, 2), probs(r, 3)};
    out.push_back(classify_race_from_probabilities(row, confidence_threshold));
  }
  return out;
}

std::array<double, datagen::kRaceCount> estimate_race_distribution(const DemographicBranch& branch,
                                                                    const Matrix& features,
                                                                    double confidence_threshold) {
  std::array<double, datagen::kRaceCount> out{};
  const auto races = classify_race_for_analysis(branch, features, confidence_threshold);
  for (auto r : races) out[static_cast<std::size_t>(r)] += 1.0;
  if (!races.empty())
    for (auto& v : out) v /= static_cast<double>(races.size());
  return out;
}

bool attribute_path_is_private(const Network& net) {
  if (!net.heads(NodeRole::demographic_head).empty()) return false;
  for (const auto& head : net.heads(NodeRole::attribute_head))
    for (const auto& name : net.ancestors(head))
      if (net.node(name).role == NodeRole::demographic_head) return false;
  return true;
}

std::string parameter_checksum(const Network& net, const std::vector<std::string>& nodes) {
  return sha256_hex(nn::parameter_bytes(net, nodes));
}

void require_disjoint(const LabeledCorpus& held_out, const LabeledCorpus& target) {
  if (held_out.pool != IdentityPool::HeldOut || target.pool != IdentityPool::Target)
    throw ContractViolation("fold corpora come from the wrong identity pools");
  if (!datagen::identities_disjoint(held_out.identity_seeds, target.identity_seeds))
    throw ContractViolation("held-out and target corpora share identities");
}

}  // namespace twofold::pipeline
