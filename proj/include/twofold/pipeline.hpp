#pragma once

#include "twofold/datagen.hpp"
#include "twofold/metrics.hpp"
#include "twofold/nn.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace twofold::pipeline {

using nn::Index;
using nn::Matrix;
using nn::Network;

// Node names shared by every assembled graph.
inline constexpr std::string_view kBackbone = "backbone";
inline constexpr std::string_view kIdentityHead = "identity_head";
inline constexpr std::string_view kRaceHidden = "race_hidden";
inline constexpr std::string_view kRaceHead = "race_head";
inline constexpr std::string_view kGenderHidden = "gender_hidden";
inline constexpr std::string_view kGenderHead = "gender_head";
inline constexpr std::string_view kMatchedHidden = "matched_hidden";
inline constexpr std::string_view kTrunk = "trunk";
std::string attribute_head_name(std::string_view attribute);

enum class FeatureMode { oracle_features, pretrained_encoder };
std::string_view to_string(FeatureMode m);
FeatureMode parse_feature_mode(std::string_view s);

enum class TransferVariant { vanilla, plus_g, plus_r, plus_rg, param_matched };
std::string_view to_string(TransferVariant v);
TransferVariant parse_variant(std::string_view s);

struct TrainConfig {
  int epochs = 10;
  double lr = 0.05;
  Index batch_size = 32;
  double momentum = 0.0;
  std::uint64_t seed = 0;
};

// Per-epoch mean minibatch loss; entry 0 is the loss before any update.
using TrainingLog = std::vector<double>;

struct BackboneConfig {
  FeatureMode mode = FeatureMode::pretrained_encoder;
  Index width = 32;
  TrainConfig train;
};

struct Backbone {
  Network net;  // a single frozen node named "backbone"
  FeatureMode mode = FeatureMode::oracle_features;
  double proxy_accuracy = 0.0;  // identity classification on held-back examples
  TrainingLog log;

  Index output_dim() const { return net.node(kBackbone).output_dim(); }
};

/// Fold 0: trains a ReLU encoder on identity classification, drops the proxy
/// head and freezes the encoder. In oracle-features mode the encoder is a
/// frozen identity map and `corpus` is only checked for shape.
Backbone pretrain_backbone(const datagen::IdentityCorpus& corpus, const BackboneConfig& config);

struct DemographicConfig {
  Index rep_dim = 32;
  TrainConfig race;
  TrainConfig gender;
  double validation_fraction = 0.2;
};

struct DemographicBranch {
  // backbone + race_hidden -> race_head and gender_hidden -> gender_head
  Network net;
  Index rep_dim = 0;
  double race_accuracy = 0.0;    // on the validation split
  double gender_accuracy = 0.0;
  std::array<double, datagen::kKnownRaces> race_auc{};
  std::array<double, datagen::kKnownGenders> gender_auc{};
  TrainingLog race_log;
  TrainingLog gender_log;
};

/// Fold 1: trains the race and gender heads, each with its own hidden layer
/// and its own loss, over the frozen backbone, then freezes both.
/// Requires a HELD_OUT corpus with uniform race x gender cells.
DemographicBranch train_demographic_heads(const Backbone& backbone,
                                          const datagen::LabeledCorpus& held_out,
                                          const DemographicConfig& config);

struct AssembleConfig {
  Index trunk_dim = 32;
  std::uint64_t seed = 0;
};

struct Provenance {
  std::string backbone_id;
  std::string branch_id;
};

struct AttributeDetector {
  Network net;
  TransferVariant variant = TransferVariant::vanilla;
  std::vector<std::string> attributes;
  Provenance provenance;
  TrainingLog log;

  std::vector<std::string> head_names() const;
};

/// Builds the variant's graph: frozen backbone, the frozen demographic hidden
/// layers it consumes (never the demographic heads), a trainable trunk and one
/// sigmoid head per attribute. `branch` may be null for VANILLA and
/// PARAM_MATCHED.
AttributeDetector assemble(TransferVariant variant, const Backbone& backbone,
                           const DemographicBranch* branch, const std::vector<std::string>& attributes,
                           const AssembleConfig& config);

/// Fold 2: fits the attribute path on a TARGET corpus. Frozen parameters are
/// checked bit-for-bit before and after.
void train_attribute_heads(AttributeDetector& detector, const datagen::LabeledCorpus& target,
                           const TrainConfig& config);

/// Output of the attribute inference entry point. Holds attribute outputs only.
struct AttributePredictions {
  std::vector<std::string> attributes;
  Matrix probabilities;              // n x attributes
  metrics::DecisionMatrix decisions;  // n x attributes, probability >= threshold
};

AttributePredictions predict_attributes(const AttributeDetector& detector, const Matrix& features,
                                        double threshold = 0.5);

/// Dataset-composition analysis only: argmax race when its softmax probability
/// reaches `confidence_threshold`, otherwise OTHER.
datagen::Race classify_race_from_probabilities(std::span<const double> probs,
                                               double confidence_threshold);
std::vector<datagen::Race> classify_race_for_analysis(const DemographicBranch& branch,
                                                      const Matrix& features,
                                                      double confidence_threshold = 0.5);

/// Fraction of rows estimated in each race category (S1..S4, OTHER).
std::array<double, datagen::kRaceCount> estimate_race_distribution(const DemographicBranch& branch,
                                                                    const Matrix& features,
                                                                    double confidence_threshold = 0.5);

/// True when no node reachable from an attribute head is a demographic head,
/// and the graph contains no demographic head at all.
bool attribute_path_is_private(const Network& net);

/// Checksum (SHA-256 hex) of the parameters of the named nodes.
std::string parameter_checksum(const Network& net, const std::vector<std::string>& nodes);

std::vector<std::string> branch_node_names();

/// Names of frozen layers' nodes shared with the branch (for freeze checks).
std::vector<std::string> frozen_demographic_nodes(TransferVariant v);

/// Runs `epochs` of shuffled minibatch SGD on the given heads. Labels are
/// keyed by head name and aligned with `features` rows.
TrainingLog train_heads(Network& net, const Matrix& features, const nn::HeadOutputs<double>& labels,
                        const TrainConfig& config);

/// Rejects fold pairs that share identity seeds.
void require_disjoint(const datagen::LabeledCorpus& held_out, const datagen::LabeledCorpus& target);

}  // namespace twofold::pipeline
