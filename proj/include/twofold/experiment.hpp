#pragma once

#include "twofold/datagen.hpp"
#include "twofold/pipeline.hpp"
#include "twofold/stats.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace twofold::experiment {

namespace fs = std::filesystem;
using nn::Index;

inline constexpr int kManifestVersion = 1;
std::string_view tool_version();

struct BiasEntry {
  std::string attribute;
  std::optional<datagen::Race> race;      // nullopt = every race
  std::optional<datagen::Gender> gender;  // nullopt = every gender
  double value = 0.0;
};

struct GeneratorConfig {
  Index feature_dim = 32;
  std::vector<std::string> attributes{"smiling"};
  double race_radius = 2.5;
  double gender_radius = 1.5;
  double weight_scale = 1.0;
  double noise_scale = 0.5;
  double identity_scale = 1.0;
  double other_race_rate = 0.1;
  std::map<std::string, double> intercepts;
  std::vector<BiasEntry> subgroup_bias;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  GeneratorConfig generator;
  std::string skew = "fotw-train";       // builtin name or path to a JSON profile
  std::string eval_skew = "fotw-valid";
  Index held_out_size = 8000;
  Index train_size = 8000;
  Index eval_size = 8000;
  int identities = 64;
  int examples_per_identity = 16;
  std::vector<pipeline::TransferVariant> variants{pipeline::TransferVariant::vanilla,
                                                  pipeline::TransferVariant::plus_r,
                                                  pipeline::TransferVariant::param_matched};
  std::vector<std::uint64_t> seeds{1};
  int epochs = 5;
  double lr = 0.05;
  Index batch_size = 128;
  double momentum = 0.0;
  int demographic_epochs = 60;
  double demographic_lr = 0.05;
  int backbone_epochs = 20;
  double backbone_lr = 0.05;
  Index rep_dim = 32;
  Index backbone_dim = 32;
  Index trunk_dim = 16;
  double threshold = 0.5;
  double race_confidence_threshold = 0.5;
  pipeline::FeatureMode mode = pipeline::FeatureMode::pretrained_encoder;
  std::uint64_t exact_test_threshold = stats::kDefaultExactThreshold;
  int workers = 1;
};

/// Parses and validates a config. Unknown keys and bad values raise
/// ConfigError naming the offending field.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const fs::path& path);  // also accepts a manifest
nlohmann::json config_to_json(const ExperimentConfig& c);

/// "1..10" or "1,2,5".
std::vector<std::uint64_t> parse_seed_list(std::string_view text);
std::vector<pipeline::TransferVariant> parse_variant_list(std::string_view text);

datagen::GeneratorParams make_generator(const ExperimentConfig& c);
datagen::SkewProfile resolve_skew(const std::string& name_or_path);

/// Smallest known race subgroup (S1..S4) of a profile by fraction.
datagen::Race smallest_race(const datagen::SkewProfile& skew);

struct ReplicateCorpora {
  datagen::IdentityCorpus identity;
  datagen::LabeledCorpus held_out;
  datagen::LabeledCorpus target_train;
  datagen::LabeledCorpus target_eval;
};

/// Per-purpose seed of replicate `seed` under `master`.
std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t seed, std::string_view purpose);

ReplicateCorpora generate_corpora(const ExperimentConfig& c, const datagen::GeneratorParams& params,
                                  std::uint64_t seed);

struct GenerateResult {
  std::map<std::string, std::string> hashes;  // relative path -> sha256
};
GenerateResult cmd_generate(const ExperimentConfig& c, const fs::path& out_dir);

struct RunResult {
  fs::path manifest;
  bool previous_run_incomplete = false;
  std::size_t reports = 0;
  std::size_t checkpoints = 0;
};

/// Trains every (seed, variant) job, writes checkpoints, reports, prediction
/// logs, and finally manifest.json.
RunResult cmd_run(const ExperimentConfig& c, const fs::path& out_dir);

/// True when `out_dir` holds run artifacts but no manifest.
bool run_is_incomplete(const fs::path& out_dir);

struct PredictionRow {
  std::uint64_t example_id = 0;
  std::string attribute;
  double probability = 0.0;
  std::uint8_t decision = 0;
  std::uint8_t label = 0;
  datagen::SubgroupLabel subgroup;
};

std::string predictions_to_csv(const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> read_predictions(const fs::path& path);

struct AttributeComparison {
  std::uint64_t seed = 0;
  std::string attribute;
  stats::PairedComparison result;
};

struct CompareResult {
  std::string variant_a;
  std::string variant_b;
  std::vector<AttributeComparison> comparisons;
  nlohmann::json table;  // variant x variant matrix per seed and attribute
  std::string csv;
};

/// Paired comparison from stored prediction logs under `report_dir/runs`.
/// Writes compare_<a>_<b>.json and .csv into `report_dir`.
CompareResult cmd_compare(const fs::path& report_dir, std::string_view variant_a,
                          std::string_view variant_b,
                          std::uint64_t exact_threshold = stats::kDefaultExactThreshold);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;  // seeds where defined
};

struct AggregateRow {
  std::string variant;
  std::string attribute;
  std::size_t seeds = 0;
  std::array<MetricSummary, datagen::kRaceCount> race_acc, race_afr;
  std::array<MetricSummary, datagen::kKnownGenders> gender_acc, gender_afr;
  MetricSummary total_acc;
  std::optional<double> race_mafr;    // mafr() of the mean race AFRs
  std::optional<double> gender_mafr;  // mafr() of the mean gender AFRs
  MetricSummary race_mafr_seeds;      // spread of per-seed values
  MetricSummary gender_mafr_seeds;
};

struct ReportResult {
  std::vector<AggregateRow> rows;
  std::string csv;
  nlohmann::json json;
};

/// Cross-seed mean and sample standard deviation (0 for one seed).
MetricSummary summarize(const std::vector<double>& values);

/// Aggregates every per-seed report listed in a manifest after hash
/// verification; writes summary.csv and summary.json next to it.
ReportResult cmd_report(const fs::path& manifest_path);

/// Per-seed subgroup accuracy of one variant, read from a manifest's reports.
std::map<std::uint64_t, double> subgroup_accuracy_by_seed(const fs::path& manifest_path,
                                                          std::string_view variant,
                                                          std::string_view attribute,
                                                          datagen::Race race);

}  // namespace twofold::experiment
