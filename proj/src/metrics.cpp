#include "twofold/metrics.hpp"

#include "twofold/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace twofold::metrics {

using nlohmann::json;

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw ContractViolation("accuracy of an empty cell");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

std::optional<double> afr(const ConfusionCounts& c) {
  const std::uint64_t negatives = c.fp + c.tn;
  const std::uint64_t positives = c.fn + c.tp;
  if (negatives == 0 || positives == 0) return std::nullopt;
  const double fpr = static_cast<double>(c.fp) / static_cast<double>(negatives);
  const double fnr = static_cast<double>(c.fn) / static_cast<double>(positives);
  return (fpr + fnr) / 2.0;
}

double mafr(std::span<const std::optional<double>> values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v) {
      sum += *v;
      ++n;
    }
  if (n == 0) throw ContractViolation("mAFR needs at least one defined AFR");
  return sum / static_cast<double>(n);
}

const AttributeReport& SubgroupReport::attribute(std::string_view name) const {
  for (const auto& a : attributes)
    if (a.attribute == name) return a;
  throw UnknownName("report has no attribute '" + std::string(name) + "'");
}

namespace {

CellMetrics finish(const ConfusionCounts& c) {
  return {c, c.total() ? std::optional(accuracy(c)) : std::nullopt, afr(c)};
}

template <std::size_t N>
std::optional<double> mean_of_defined(const std::array<CellMetrics, N>& cells) {
  std::array<std::optional<double>, N> v;
  for (std::size_t i = 0; i < N; ++i) v[i] = cells[i].afr;
  if (std::none_of(v.begin(), v.end(), [](const auto& x) { return x.has_value(); }))
    return std::nullopt;
  return mafr(v);
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional(j.get<double>());
}

json counts_json(const ConfusionCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}
ConfusionCounts counts_from(const json& j) {
  return {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(),
          j.at("tn").get<std::uint64_t>(), j.at("fn").get<std::uint64_t>()};
}

json cell_json(const CellMetrics& c) {
  return {{"counts", counts_json(c.counts)}, {"accuracy", opt(c.accuracy)}, {"afr", opt(c.afr)}};
}
CellMetrics cell_from(const json& j) {
  return {counts_from(j.at("counts")), opt_from(j.at("accuracy")), opt_from(j.at("afr"))};
}

}  // namespace

SubgroupReport subgroup_report(const DecisionMatrix& predictions, const DecisionMatrix& labels,
                               std::span<const datagen::SubgroupLabel> subgroups,
                               const std::vector<std::string>& attributes, std::string variant,
                               std::string corpus_hash) {
  const auto n = static_cast<std::size_t>(predictions.rows());
  if (static_cast<std::size_t>(labels.rows()) != n || subgroups.size() != n)
    throw DimensionMismatch("predictions, labels and subgroups differ in length");
  if (static_cast<std::size_t>(predictions.cols()) != attributes.size() ||
      labels.cols() != predictions.cols())
    throw DimensionMismatch("attribute columns differ");
  for (const auto& s : subgroups)
    if (static_cast<std::size_t>(s.race) >= datagen::kRaceCount ||
        static_cast<std::size_t>(s.gender) >= datagen::kGenderCount)
      throw DataError("unknown subgroup tag");

  SubgroupReport report;
  report.variant = std::move(variant);
  report.corpus_hash = std::move(corpus_hash);
  report.example_count = n;
  report.excluded_gender_count = static_cast<std::uint64_t>(
      std::count_if(subgroups.begin(), subgroups.end(),
                    [](const auto& s) { return s.gender == datagen::Gender::Other; }));

  for (std::size_t a = 0; a < attributes.size(); ++a) {
    std::array<ConfusionCounts, datagen::kRaceCount> race{};
    std::array<ConfusionCounts, datagen::kKnownGenders> gender{};
    ConfusionCounts overall;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = predictions(static_cast<nn::Index>(i), static_cast<nn::Index>(a)) != 0;
      const bool y = labels(static_cast<nn::Index>(i), static_cast<nn::Index>(a)) != 0;
      overall.add(p, y);
      race[static_cast<std::size_t>(subgroups[i].race)].add(p, y);
      if (subgroups[i].gender != datagen::Gender::Other)
        gender[static_cast<std::size_t>(subgroups[i].gender)].add(p, y);
    }
    AttributeReport r;
    r.attribute = attributes[a];
    for (std::size_t k = 0; k < race.size(); ++k) r.race[k] = finish(race[k]);
    for (std::size_t k = 0; k < gender.size(); ++k) r.gender[k] = finish(gender[k]);
    r.overall = overall;
    r.overall_accuracy = n ? accuracy(overall) : 0.0;
    r.race_mafr = mean_of_defined(r.race);
    r.gender_mafr = mean_of_defined(r.gender);
    report.attributes.push_back(std::move(r));
  }
  return report;
}

std::string report_to_json(const SubgroupReport& report) {
  json attrs = json::array();
  for (const auto& a : report.attributes) {
    json race = json::object(), gender = json::object();
    for (std::size_t k = 0; k < a.race.size(); ++k)
      race[std::string(datagen::to_string(static_cast<datagen::Race>(k)))] = cell_json(a.race[k]);
    for (std::size_t k = 0; k < a.gender.size(); ++k)
      gender[std::string(datagen::to_string(static_cast<datagen::Gender>(k)))] = cell_json(a.gender[k]);
    attrs.push_back({{"attribute", a.attribute},
                     {"race", race},
                     {"gender", gender},
                     {"overall", counts_json(a.overall)},
                     {"overall_accuracy", a.overall_accuracy},
                     {"race_mafr", opt(a.race_mafr)},
                     {"gender_mafr", opt(a.gender_mafr)}});
  }
  json j = {{"variant", report.variant},
            {"corpus_hash", report.corpus_hash},
            {"example_count", report.example_count},
            {"excluded_gender_count", report.excluded_gender_count},
            {"attributes", attrs}};
  return j.dump(2) + "\n";
}

SubgroupReport report_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    SubgroupReport r;
    r.variant = j.at("variant").get<std::string>();
    r.corpus_hash = j.at("corpus_hash").get<std::string>();
    r.example_count = j.at("example_count").get<std::uint64_t>();
    r.excluded_gender_count = j.at("excluded_gender_count").get<std::uint64_t>();
    for (const auto& ja : j.at("attributes")) {
      AttributeReport a;
      a.attribute = ja.at("attribute").get<std::string>();
      for (std::size_t k = 0; k < a.race.size(); ++k)
        a.race[k] = cell_from(ja.at("race").at(std::string(datagen::to_string(static_cast<datagen::Race>(k)))));
      for (std::size_t k = 0; k < a.gender.size(); ++k)
        a.gender[k] = cell_from(ja.at("gender").at(std::string(datagen::to_string(static_cast<datagen::Gender>(k)))));
      a.overall = counts_from(ja.at("overall"));
      a.overall_accuracy = ja.at("overall_accuracy").get<double>();
      a.race_mafr = opt_from(ja.at("race_mafr"));
      a.gender_mafr = opt_from(ja.at("gender_mafr"));
      r.attributes.push_back(std::move(a));
    }
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report JSON: ") + e.what());
  }
}

std::string format_percent(std::optional<double> fraction) {
  if (!fraction) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *fraction);
  return buf;
}

std::string report_to_csv(const SubgroupReport& report) {
  std::string out = "attribute";
  for (std::size_t k = 0; k < datagen::kRaceCount; ++k) {
    const std::string tag(datagen::to_string(static_cast<datagen::Race>(k)));
    out += "," + tag + "_acc," + tag + "_afr";
  }
  out += ",G1_acc,G1_afr,G2_acc,G2_afr,total_acc,race_mafr,gender_mafr\n";
  for (const auto& a : report.attributes) {
    out += a.attribute;
    for (const auto& c : a.race) out += "," + format_percent(c.accuracy) + "," + format_percent(c.afr);
    for (const auto& c : a.gender) out += "," + format_percent(c.accuracy) + "," + format_percent(c.afr);
    char total[32];
    std::snprintf(total, sizeof total, "%.2f", 100.0 * a.overall_accuracy);
    out += std::string(",") + total + "," + format_percent(a.race_mafr) + "," +
           format_percent(a.gender_mafr) + "\n";
  }
  return out;
}

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> positives) {
  if (scores.size() != positives.size()) throw DimensionMismatch("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with midranks for ties.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (positives[order[k]]) {
        rank_sum += midrank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw ContractViolation("AUC needs both classes");
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

}  // namespace twofold::metrics
