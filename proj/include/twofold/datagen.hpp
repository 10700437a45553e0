#pragma once

#include "twofold/nn/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace twofold::datagen {

using nn::Index;
using nn::Matrix;
using nn::Vector;

enum class Race : std::uint8_t { S1 = 0, S2 = 1, S3 = 2, S4 = 3, Other = 4 };
enum class Gender : std::uint8_t { G1 = 0, G2 = 1, Other = 2 };

inline constexpr std::size_t kRaceCount = 5;     // including Other
inline constexpr std::size_t kKnownRaces = 4;
inline constexpr std::size_t kGenderCount = 3;   // including Other
inline constexpr std::size_t kKnownGenders = 2;

std::string_view to_string(Race r);
std::string_view to_string(Gender g);
Race parse_race(std::string_view s);
Gender parse_gender(std::string_view s);

struct SubgroupLabel {
  Race race = Race::S1;
  Gender gender = Gender::G1;
  bool operator==(const SubgroupLabel&) const = default;
};

enum class IdentityPool : std::uint8_t { HeldOut = 0, Target = 1 };
std::string_view to_string(IdentityPool p);
IdentityPool parse_pool(std::string_view s);

struct AttributeSpec {
  std::string name;
  Vector weights;          // feature_dim
  double intercept = 0.0;
  // Additive logit shift indexed [race][gender]; gender Other rows use the
  // average of the G1 and G2 entries.
  std::array<std::array<double, kGenderCount>, kRaceCount> subgroup_bias{};
};

/// The declared generative model:
///   x = race_offset[r] + gender_offset[g] + identity + noise
///   P(attr = 1 | x, r, g) = sigmoid(w . x + intercept + bias[r][g])
/// with identity ~ N(0, identity_scale^2 I), noise ~ N(0, noise_scale^2 I).
/// Other-race identities sit at `other_race_radius` from the mean of the
/// four race offsets along a random direction; gender Other adds no offset.
struct GeneratorParams {
  Index feature_dim = 0;
  std::array<Vector, kKnownRaces> race_offsets;
  std::array<Vector, kKnownGenders> gender_offsets;
  std::vector<AttributeSpec> attributes;
  double noise_scale = 0.5;
  double identity_scale = 1.0;
  double other_race_radius = 3.0;
  // Fraction of Other-race identities in the backbone identity corpus.
  double other_race_rate = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  const AttributeSpec& attribute(std::string_view name) const;
  Vector race_mean() const;
};

/// Random world: offsets of the given radii, unit-norm attribute directions
/// scaled by `weight_scale`, zero subgroup bias.
GeneratorParams make_generator_params(Index feature_dim, const std::vector<std::string>& attributes,
                                      double race_radius, double gender_radius,
                                      double weight_scale, std::uint64_t seed);

struct LabeledCorpus {
  Matrix features;                           // n x feature_dim
  std::vector<std::string> attribute_names;  // may be empty (demographic corpus)
  nn::MatrixX<std::uint8_t> attribute_labels;  // n x attributes
  std::vector<SubgroupLabel> subgroups;
  std::vector<std::uint64_t> identity_seeds;   // not serialized
  IdentityPool pool = IdentityPool::Target;

  Index size() const { return features.rows(); }
  void validate() const;
  /// Rows `[begin, end)` as a new corpus.
  LabeledCorpus slice(Index begin, Index end) const;
};

/// Identity-classification corpus for backbone pretraining.
struct IdentityCorpus {
  Matrix features;
  std::vector<int> identity;  // class index per row, 0..identity_count-1
  int identity_count = 0;
  std::vector<std::uint64_t> identity_seeds;  // one per class
};

struct SkewProfile {
  std::string name;
  std::array<double, kRaceCount> race_fractions{};
  std::array<double, kGenderCount> gender_fractions{};
  // Source percentages before renormalization and the corpus size they were
  // tabulated for (0 when not applicable).
  std::array<double, kRaceCount> raw_race_percent{};
  std::array<double, kGenderCount> raw_gender_percent{};
  std::size_t reference_total = 0;

  void validate() const;
};

std::vector<std::string> builtin_skew_names();
SkewProfile builtin_skew(std::string_view name);
/// Reads {name, race_fractions[5], gender_fractions[3]} from JSON.
SkewProfile load_skew(const std::filesystem::path& path);
SkewProfile skew_from_json_text(std::string_view json_text);

/// Uniform race x gender corpus (no Other) from the HELD_OUT identity pool.
/// Each of the 8 cells receives n/8 rows; the remainder goes one row each to
/// the first cells in (race, gender) order. Row order is shuffled.
LabeledCorpus sample_demographic_corpus(const GeneratorParams& params, Index n,
                                        std::uint64_t seed);

/// Skewed attribute corpus from the TARGET pool; race and gender are drawn
/// independently from the profile marginals.
LabeledCorpus sample_attribute_corpus(const GeneratorParams& params, Index n,
                                      const SkewProfile& skew,
                                      const std::vector<std::string>& attributes,
                                      std::uint64_t seed);

IdentityCorpus sample_identity_corpus(const GeneratorParams& params, int identity_count,
                                      int examples_per_identity, std::uint64_t seed);

/// True when no identity seed is shared.
bool identities_disjoint(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b);

/// Column order: f0..f{D-1}, one column per attribute, race, gender, pool.
std::string corpus_to_csv(const LabeledCorpus& corpus);
LabeledCorpus corpus_from_csv(std::string_view text);
void write_corpus_csv(const std::filesystem::path& path, const LabeledCorpus& corpus);
LabeledCorpus read_corpus_csv(const std::filesystem::path& path);

}  // namespace twofold::datagen
