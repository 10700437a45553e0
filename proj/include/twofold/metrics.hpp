#pragma once

#include "twofold/datagen.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace twofold::metrics {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  void add(bool predicted, bool actual) noexcept {
    if (predicted) (actual ? tp : fp) += 1;
    else (actual ? fn : tn) += 1;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

/// (tp + tn) / total. Throws ContractViolation on an empty cell.
double accuracy(const ConfusionCounts& c);

/// Mean of the false positive rate fp/(fp+tn) and false negative rate
/// fn/(fn+tp); nullopt when either denominator is zero.
std::optional<double> afr(const ConfusionCounts& c);

/// Arithmetic mean of the defined values. Throws when none is defined.
double mafr(std::span<const std::optional<double>> values);

struct CellMetrics {
  ConfusionCounts counts;
  std::optional<double> accuracy;  // nullopt for an empty cell
  std::optional<double> afr;
};

struct AttributeReport {
  std::string attribute;
  std::array<CellMetrics, datagen::kRaceCount> race;      // S1..S4, Other
  std::array<CellMetrics, datagen::kKnownGenders> gender;  // G1, G2
  ConfusionCounts overall;
  double overall_accuracy = 0.0;
  std::optional<double> race_mafr;
  std::optional<double> gender_mafr;
};

struct SubgroupReport {
  std::string variant;
  std::string corpus_hash;
  std::uint64_t example_count = 0;
  std::uint64_t excluded_gender_count = 0;  // gender Other rows, left out of gender cells
  std::vector<AttributeReport> attributes;

  const AttributeReport& attribute(std::string_view name) const;
};

using DecisionMatrix = nn::MatrixX<std::uint8_t>;

/// Partitions examples by race and, separately, by gender for every attribute.
/// `predictions` and `labels` are n x attributes.
SubgroupReport subgroup_report(const DecisionMatrix& predictions, const DecisionMatrix& labels,
                               std::span<const datagen::SubgroupLabel> subgroups,
                               const std::vector<std::string>& attributes,
                               std::string variant = {}, std::string corpus_hash = {});

/// Full-precision JSON.
std::string report_to_json(const SubgroupReport& report);
SubgroupReport report_from_json(std::string_view text);

/// One row per attribute, percentages at one decimal:
/// attribute, S1_acc, S1_afr, ..., OTHER_acc, OTHER_afr, G1_acc, G1_afr,
/// G2_acc, G2_afr, total_acc, race_mafr, gender_mafr. Undefined cells print "-".
std::string report_to_csv(const SubgroupReport& report);

/// Percent with one decimal, or "-".
std::string format_percent(std::optional<double> fraction);

/// One-vs-rest ROC AUC from scores, with ties counted as half.
/// Throws when either class is empty.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positives);

}  // namespace twofold::metrics
