#include "twofold/datagen.hpp"
#include "twofold/error.hpp"
#include "twofold/pipeline.hpp"

#include <gtest/gtest.h>

#include <type_traits>

using namespace twofold;
using namespace twofold::pipeline;
using datagen::Race;

namespace {

datagen::GeneratorParams separated_world(std::uint64_t seed = 7) {
  auto p = datagen::make_generator_params(8, {"smiling"}, 6.0, 4.0, 2.0, seed);
  p.noise_scale = 0.3;
  p.identity_scale = 0.3;
  return p;
}

TrainConfig quick(int epochs, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = epochs;
  t.lr = 0.05;
  t.batch_size = 32;
  t.seed = seed;
  return t;
}

Backbone oracle_backbone(const datagen::GeneratorParams& p) {
  BackboneConfig bc;
  bc.mode = FeatureMode::oracle_features;
  return pretrain_backbone(datagen::sample_identity_corpus(p, 2, 1, 1), bc);
}

DemographicConfig demographic(int epochs, Index rep_dim = 16, std::uint64_t seed = 3) {
  DemographicConfig dc;
  dc.rep_dim = rep_dim;
  dc.race = quick(epochs, seed);
  dc.gender = quick(epochs, seed + 1);
  return dc;
}

// Backbone, branch and both corpora for one small world, built once.
struct Fixture {
  datagen::GeneratorParams world = separated_world();
  Backbone backbone;
  DemographicBranch branch;
  datagen::LabeledCorpus held_out;
  datagen::LabeledCorpus target;

  Fixture() {
    BackboneConfig bc;
    bc.width = 16;
    bc.train = quick(10, 1);
    backbone = pretrain_backbone(datagen::sample_identity_corpus(world, 16, 32, 2), bc);
    held_out = datagen::sample_demographic_corpus(world, 1600, 4);
    target = datagen::sample_attribute_corpus(world, 1200, datagen::builtin_skew("fotw-train"), {"smiling"}, 5);
    branch = train_demographic_heads(backbone, held_out, demographic(10));
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

AssembleConfig assembly(std::uint64_t seed = 9) { return {16, seed}; }

}  // namespace

TEST(Backbone, ProxyAccuracyAboveChance) {
  const auto p = datagen::make_generator_params(8, {"smiling"}, 2.5, 1.5, 2.0, 13);
  const auto corpus = datagen::sample_identity_corpus(p, 16, 64, 1);
  BackboneConfig bc;
  bc.width = 32;
  bc.train = quick(20, 2);
  const auto b = pretrain_backbone(corpus, bc);
  EXPECT_GT(b.proxy_accuracy, 1.0 / 16.0);
  EXPECT_EQ(b.mode, FeatureMode::pretrained_encoder);
  EXPECT_EQ(b.net.trainable_parameter_count(), 0);
  EXPECT_FALSE(b.net.contains(kIdentityHead));
  EXPECT_LT(b.log.back(), b.log.front());
}

TEST(Backbone, SameSeedGivesIdenticalCheckpoint) {
  const auto p = datagen::make_generator_params(6, {"smiling"}, 2.5, 1.5, 2.0, 13);
  const auto corpus = datagen::sample_identity_corpus(p, 8, 16, 1);
  BackboneConfig bc;
  bc.width = 8;
  bc.train = quick(3, 4);
  EXPECT_EQ(nn::serialize_checkpoint(pretrain_backbone(corpus, bc).net),
            nn::serialize_checkpoint(pretrain_backbone(corpus, bc).net));
  bc.train.seed = 5;
  EXPECT_NE(nn::serialize_checkpoint(pretrain_backbone(corpus, bc).net),
            nn::serialize_checkpoint(pretrain_backbone(corpus, {bc.mode, bc.width, quick(3, 4)}).net));
}

TEST(Backbone, OracleModeIsIdentity) {
  const auto p = separated_world();
  const auto b = oracle_backbone(p);
  EXPECT_EQ(b.mode, FeatureMode::oracle_features);
  EXPECT_EQ(to_string(b.mode), "oracle-features");
  EXPECT_EQ(b.output_dim(), p.feature_dim);
  const auto& layers = b.net.node(kBackbone).layers;
  ASSERT_EQ(layers.size(), 1u);
  EXPECT_EQ(layers[0].weights, Matrix::Identity(p.feature_dim, p.feature_dim));
  EXPECT_TRUE(layers[0].bias.isZero());
  EXPECT_EQ(layers[0].activation, nn::Activation::linear);
  EXPECT_FALSE(layers[0].trainable);
}

TEST(Backbone, SingleIdentityRejected) {
  const auto p = separated_world();
  BackboneConfig bc;
  EXPECT_THROW(pretrain_backbone(datagen::sample_identity_corpus(p, 1, 8, 1), bc), DataError);
}

TEST(Demographic, SeparatedClustersAreLearned) {
  const auto& f = fixture();
  EXPECT_GT(f.branch.race_accuracy, 0.95);
  EXPECT_GT(f.branch.gender_accuracy, 0.95);
  for (double auc : f.branch.race_auc) EXPECT_GT(auc, 0.95);
  EXPECT_EQ(parameter_checksum(f.branch.net, {std::string(kBackbone)}),
            parameter_checksum(f.backbone.net, {std::string(kBackbone)}));
  EXPECT_EQ(f.branch.net.trainable_parameter_count(), 0);
  EXPECT_LT(f.branch.race_log.back(), f.branch.race_log.front());
}

TEST(Demographic, ZeroEpochsStaysNearChance) {
  const auto p = separated_world();
  const auto b = oracle_backbone(p);
  const auto held = datagen::sample_demographic_corpus(p, 800, 4);
  double mean = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) mean += train_demographic_heads(b, held, demographic(0, 16, seed)).race_accuracy;
  mean /= 10.0;
  EXPECT_NEAR(mean, 0.25, 0.12);
}

TEST(Demographic, RejectsTargetPoolAndMissingLabels) {
  const auto& f = fixture();
  EXPECT_THROW(train_demographic_heads(f.backbone, f.target, demographic(1)), ContractViolation);
  auto broken = f.held_out;
  broken.subgroups[0].race = Race::Other;
  EXPECT_THROW(train_demographic_heads(f.backbone, broken, demographic(1)), DataError);
  EXPECT_THROW(train_demographic_heads(f.backbone, f.held_out.slice(0, 100), demographic(1)), DataError);
}

TEST(Assemble, ParameterAccounting) {
  const auto& f = fixture();
  const auto cfg = assembly();
  const auto vanilla = assemble(TransferVariant::vanilla, f.backbone, &f.branch, {"smiling"}, cfg);
  const auto plus_r = assemble(TransferVariant::plus_r, f.backbone, &f.branch, {"smiling"}, cfg);
  const auto plus_g = assemble(TransferVariant::plus_g, f.backbone, &f.branch, {"smiling"}, cfg);
  const auto plus_rg = assemble(TransferVariant::plus_rg, f.backbone, &f.branch, {"smiling"}, cfg);
  const auto matched = assemble(TransferVariant::param_matched, f.backbone, &f.branch, {"smiling"}, cfg);

  EXPECT_EQ(matched.net.parameter_count(), plus_r.net.parameter_count());
  EXPECT_EQ(plus_g.net.parameter_count(), plus_r.net.parameter_count());
  EXPECT_EQ(vanilla.net.frozen_parameter_count(), f.backbone.net.parameter_count());
  EXPECT_FALSE(vanilla.net.contains(kRaceHidden));
  EXPECT_FALSE(vanilla.net.contains(kGenderHidden));

  const Index bdim = f.backbone.output_dim();
  const Index rep = f.branch.rep_dim;
  const auto& rg = plus_rg.net;
  EXPECT_EQ(rg.input_width(rg.node(kTrunk)), bdim + rep + rep);
  EXPECT_EQ(vanilla.net.input_width(vanilla.net.node(kTrunk)), bdim);
  const Index race_hidden = bdim * rep + rep;
  EXPECT_EQ(plus_r.net.frozen_parameter_count(), f.backbone.net.parameter_count() + race_hidden);
  EXPECT_EQ(matched.net.trainable_parameter_count(), plus_r.net.trainable_parameter_count() + race_hidden);
}

TEST(Assemble, VariantsNeedBranch) {
  const auto& f = fixture();
  EXPECT_THROW(assemble(TransferVariant::plus_r, f.backbone, nullptr, {"smiling"}, assembly()), ContractViolation);
  EXPECT_THROW(assemble(TransferVariant::vanilla, f.backbone, nullptr, {}, assembly()), ContractViolation);
  EXPECT_NO_THROW(assemble(TransferVariant::vanilla, f.backbone, nullptr, {"smiling"}, assembly()));
  const auto other = oracle_backbone(f.world);
  EXPECT_THROW(assemble(TransferVariant::plus_r, other, &f.branch, {"smiling"}, assembly()), ContractViolation);
}

TEST(Assemble, VariantsStartAsTheSameFunction) {
  const auto& f = fixture();
  const auto vanilla = assemble(TransferVariant::vanilla, f.backbone, &f.branch, {"smiling"}, assembly());
  const auto plus_r = assemble(TransferVariant::plus_r, f.backbone, &f.branch, {"smiling"}, assembly());
  EXPECT_EQ(predict_attributes(vanilla, f.target.features).probabilities,
            predict_attributes(plus_r, f.target.features).probabilities);
}

TEST(Assemble, ProvenanceIds) {
  const auto& f = fixture();
  const auto d = assemble(TransferVariant::plus_r, f.backbone, &f.branch, {"smiling"}, assembly());
  EXPECT_EQ(d.provenance.backbone_id, nn::checkpoint_id(nn::serialize_checkpoint(f.backbone.net)));
  EXPECT_EQ(d.provenance.branch_id, nn::checkpoint_id(nn::serialize_checkpoint(f.branch.net)));
}

TEST(AttributeTraining, FreezesBackboneAndBranch) {
  const auto& f = fixture();
  for (auto v : {TransferVariant::vanilla, TransferVariant::plus_g, TransferVariant::plus_r,
                 TransferVariant::plus_rg, TransferVariant::param_matched}) {
    SCOPED_TRACE(std::string(to_string(v)));
    auto d = assemble(v, f.backbone, &f.branch, {"smiling"}, assembly());
    auto nodes = frozen_demographic_nodes(v);
    nodes.insert(nodes.begin(), std::string(kBackbone));
    const std::string before = nn::parameter_bytes(d.net, nodes);
    const std::string trunk_before = nn::parameter_bytes(d.net, {std::string(kTrunk)});
    train_attribute_heads(d, f.target, quick(3, 11));
    EXPECT_EQ(nn::parameter_bytes(d.net, nodes), before);
    EXPECT_EQ(nn::parameter_bytes(f.branch.net, nodes), before);
    EXPECT_NE(nn::parameter_bytes(d.net, {std::string(kTrunk)}), trunk_before);
    EXPECT_LT(d.log.back(), d.log.front());
    EXPECT_EQ(d.log.size(), 4u);
  }
}

TEST(AttributeTraining, RejectsHeldOutCorpusAndMissingAttribute) {
  const auto& f = fixture();
  auto d = assemble(TransferVariant::plus_r, f.backbone, &f.branch, {"smiling"}, assembly());
  EXPECT_THROW(train_attribute_heads(d, f.held_out, quick(1, 1)), ContractViolation);
  auto other = assemble(TransferVariant::vanilla, f.backbone, nullptr, {"glasses"}, assembly());
  EXPECT_THROW(train_attribute_heads(other, f.target, quick(1, 1)), DataError);
}

TEST(Disjointness, SharedIdentitiesRejected) {
  const auto& f = fixture();
  EXPECT_NO_THROW(require_disjoint(f.held_out, f.target));
  auto leaked = f.target;
  leaked.identity_seeds[10] = f.held_out.identity_seeds[3];
  EXPECT_THROW(require_disjoint(f.held_out, leaked), ContractViolation);
  EXPECT_THROW(require_disjoint(f.target, f.held_out), ContractViolation);
}

TEST(Predict, ThresholdAndDeterminism) {
  const auto& f = fixture();
  auto d = assemble(TransferVariant::plus_r, f.backbone, &f.branch, {"smiling"}, assembly());
  train_attribute_heads(d, f.target, quick(2, 3));
  const auto a = predict_attributes(d, f.target.features);
  const auto b = predict_attributes(d, f.target.features);
  EXPECT_EQ(a.probabilities, b.probabilities);
  EXPECT_EQ(a.decisions, b.decisions);
  for (Index r = 0; r < a.probabilities.rows(); ++r)
    EXPECT_EQ(a.decisions(r, 0), a.probabilities(r, 0) >= 0.5 ? 1 : 0);

  const auto restored = nn::deserialize_checkpoint(nn::serialize_checkpoint(d.net));
  AttributeDetector copy = d;
  copy.net = restored.network;
  EXPECT_EQ(predict_attributes(copy, f.target.features).probabilities, a.probabilities);

  EXPECT_THROW(predict_attributes(d, f.target.features, 1.0), ContractViolation);
  EXPECT_THROW(predict_attributes(d, Matrix::Zero(2, 3)), DimensionMismatch);
}

TEST(Predict, ProbabilityAboveThresholdIsPositive) {
  // Bias-only sigmoid head: logit ln(0.7/0.3) gives probability 0.7.
  Network net(1);
  nn::DenseLayer<double> enc = nn::identity_layer<double>(1);
  net.add_node({std::string(kBackbone), {"input"}, {enc}, nn::NodeRole::hidden});
  net.add_node({std::string(kTrunk), {std::string(kBackbone)}, {enc}, nn::NodeRole::hidden});
  nn::DenseLayer<double> head = nn::identity_layer<double>(1);
  head.weights.setZero();
  head.bias[0] = std::log(0.7 / 0.3);
  head.activation = nn::Activation::sigmoid;
  net.add_node({attribute_head_name("smiling"), {std::string(kTrunk)}, {head}, nn::NodeRole::attribute_head});
  AttributeDetector d;
  d.net = net;
  d.attributes = {"smiling"};
  const auto p = predict_attributes(d, Matrix::Zero(1, 1));
  EXPECT_NEAR(p.probabilities(0, 0), 0.7, 1e-12);
  EXPECT_EQ(p.decisions(0, 0), 1);
  EXPECT_EQ(predict_attributes(d, Matrix::Zero(1, 1), 0.75).decisions(0, 0), 0);
}

TEST(Privacy, ResultHoldsAttributeOutputsOnly) {
  // Exactly three members: names, probabilities, decisions.
  const AttributePredictions p{};
  const auto& [names, probabilities, decisions] = p;
  static_assert(std::is_same_v<std::remove_cvref_t<decltype(names)>, std::vector<std::string>>);
  static_assert(std::is_same_v<std::remove_cvref_t<decltype(probabilities)>, Matrix>);
  static_assert(std::is_same_v<std::remove_cvref_t<decltype(decisions)>, metrics::DecisionMatrix>);

  const auto& f = fixture();
  for (auto v : {TransferVariant::vanilla, TransferVariant::plus_g, TransferVariant::plus_r,
                 TransferVariant::plus_rg, TransferVariant::param_matched}) {
    const auto d = assemble(v, f.backbone, &f.branch, {"smiling"}, assembly());
    EXPECT_TRUE(attribute_path_is_private(d.net));
    EXPECT_TRUE(d.net.heads(nn::NodeRole::demographic_head).empty());
    EXPECT_FALSE(d.net.contains(kRaceHead));
    EXPECT_FALSE(d.net.contains(kGenderHead));
    const auto out = predict_attributes(d, f.target.features.topRows(4));
    EXPECT_EQ(out.attributes, std::vector<std::string>{"smiling"});
    EXPECT_EQ(out.probabilities.cols(), 1);
  }
  EXPECT_FALSE(attribute_path_is_private(f.branch.net));
}

TEST(RaceAnalysis, ConfidenceThreshold) {
  const std::array<double, 4> confident{0.97, 0.01, 0.01, 0.01};
  const std::array<double, 4> unsure{0.3, 0.3, 0.2, 0.2};
  EXPECT_EQ(classify_race_from_probabilities(confident, 0.9), Race::S1);
  EXPECT_EQ(classify_race_from_probabilities(unsure, 0.9), Race::Other);
  EXPECT_EQ(classify_race_from_probabilities(unsure, 0.25), Race::S1);
  EXPECT_THROW(classify_race_from_probabilities(unsure, 0.0), ContractViolation);
}

TEST(RaceAnalysis, AgreesWithKnownRace) {
  const auto& f = fixture();
  const auto corpus =
      datagen::sample_attribute_corpus(f.world, 1000, datagen::builtin_skew("uniform"), {"smiling"}, 41);
  const auto races = classify_race_for_analysis(f.branch, corpus.features, 0.5);
  int agree = 0;
  for (std::size_t i = 0; i < races.size(); ++i) agree += races[i] == corpus.subgroups[i].race;
  EXPECT_GT(agree, 900);
  const auto dist = estimate_race_distribution(f.branch, corpus.features, 0.5);
  double total = 0.0;
  for (double v : dist) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Names, RoundTrip) {
  for (auto v : {TransferVariant::vanilla, TransferVariant::plus_g, TransferVariant::plus_r,
                 TransferVariant::plus_rg, TransferVariant::param_matched})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("PLUS_X"), ConfigError);
  EXPECT_EQ(parse_feature_mode("pretrained-encoder"), FeatureMode::pretrained_encoder);
}
