#include "twofold/datagen.hpp"

#include "twofold/error.hpp"
#include "twofold/seed.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace twofold::datagen {

namespace {

constexpr std::array<std::string_view, kRaceCount> kRaceNames{"S1", "S2", "S3", "S4", "OTHER"};
constexpr std::array<std::string_view, kGenderCount> kGenderNames{"G1", "G2", "OTHER"};

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Vector gaussian_vector(Index dim, double scale, std::mt19937_64& engine) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (Index i = 0; i < dim; ++i) v[i] = scale * normal(engine);
  return v;
}

Vector random_direction(Index dim, std::mt19937_64& engine) {
  Vector v = gaussian_vector(dim, 1.0, engine);
  return v / v.norm();
}

// Identity-specific part of a feature vector: the per-identity deviation plus,
// for Other race, the identity's own cluster centre.
Vector identity_component(const GeneratorParams& p, Race race, std::uint64_t identity_seed) {
  std::mt19937_64 engine(identity_seed);
  Vector v = gaussian_vector(p.feature_dim, p.identity_scale, engine);
  if (race == Race::Other) v += p.race_mean() + p.other_race_radius * random_direction(p.feature_dim, engine);
  return v;
}

Vector demographic_offset(const GeneratorParams& p, SubgroupLabel s) {
  Vector v = Vector::Zero(p.feature_dim);
  if (s.race != Race::Other) v += p.race_offsets[static_cast<std::size_t>(s.race)];
  if (s.gender != Gender::Other) v += p.gender_offsets[static_cast<std::size_t>(s.gender)];
  return v;
}

double bias_for(const AttributeSpec& a, SubgroupLabel s) {
  const auto& row = a.subgroup_bias[static_cast<std::size_t>(s.race)];
  if (s.gender == Gender::Other) return 0.5 * (row[0] + row[1]);
  return row[static_cast<std::size_t>(s.gender)];
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void fill_row(const GeneratorParams& p, LabeledCorpus& c, Index row, SubgroupLabel s,
              std::uint64_t identity_seed, std::mt19937_64& engine,
              const std::vector<const AttributeSpec*>& specs) {
  Vector x = demographic_offset(p, s) + identity_component(p, s.race, identity_seed) +
             gaussian_vector(p.feature_dim, p.noise_scale, engine);
  c.features.row(row) = x.transpose();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t a = 0; a < specs.size(); ++a) {
    const double prob = sigmoid(specs[a]->weights.dot(x) + specs[a]->intercept + bias_for(*specs[a], s));
    c.attribute_labels(row, static_cast<Index>(a)) = unit(engine) < prob ? 1 : 0;
  }
  c.subgroups[static_cast<std::size_t>(row)] = s;
  c.identity_seeds[static_cast<std::size_t>(row)] = identity_seed;
}

LabeledCorpus empty_corpus(const GeneratorParams& p, Index n, std::vector<std::string> attributes,
                           IdentityPool pool) {
  LabeledCorpus c;
  c.features.resize(n, p.feature_dim);
  c.attribute_labels.resize(n, static_cast<Index>(attributes.size()));
  c.attribute_names = std::move(attributes);
  c.subgroups.resize(static_cast<std::size_t>(n));
  c.identity_seeds.resize(static_cast<std::size_t>(n));
  c.pool = pool;
  return c;
}

std::uint64_t pool_base(std::uint64_t seed, IdentityPool pool) {
  return derive_seed(seed, pool == IdentityPool::HeldOut ? "identities/held-out" : "identities/target");
}

SkewProfile make_profile(std::string name, std::array<double, kRaceCount> race,
                         std::array<double, kGenderCount> gender, std::size_t total) {
  SkewProfile s;
  s.name = std::move(name);
  s.raw_race_percent = race;
  s.raw_gender_percent = gender;
  s.reference_total = total;
  const double rs = std::accumulate(race.begin(), race.end(), 0.0);
  const double gs = std::accumulate(gender.begin(), gender.end(), 0.0);
  for (std::size_t i = 0; i < kRaceCount; ++i) s.race_fractions[i] = race[i] / rs;
  for (std::size_t i = 0; i < kGenderCount; ++i) s.gender_fractions[i] = gender[i] / gs;
  return s;
}

template <std::size_t N>
void check_fractions(const std::array<double, N>& f, const char* what) {
  double sum = 0.0;
  for (double v : f) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0,1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(std::string(what) + " must sum to 1");
}

}  // namespace

std::string_view to_string(Race r) { return kRaceNames.at(static_cast<std::size_t>(r)); }
std::string_view to_string(Gender g) { return kGenderNames.at(static_cast<std::size_t>(g)); }

Race parse_race(std::string_view s) {
  for (std::size_t i = 0; i < kRaceCount; ++i)
    if (kRaceNames[i] == s) return static_cast<Race>(i);
  throw DataError("unknown race tag '" + std::string(s) + "'");
}

Gender parse_gender(std::string_view s) {
  for (std::size_t i = 0; i < kGenderCount; ++i)
    if (kGenderNames[i] == s) return static_cast<Gender>(i);
  throw DataError("unknown gender tag '" + std::string(s) + "'");
}

std::string_view to_string(IdentityPool p) { return p == IdentityPool::HeldOut ? "HELD_OUT" : "TARGET"; }

IdentityPool parse_pool(std::string_view s) {
  if (s == "HELD_OUT") return IdentityPool::HeldOut;
  if (s == "TARGET") return IdentityPool::Target;
  throw DataError("unknown identity pool '" + std::string(s) + "'");
}

void GeneratorParams::validate() const {
  if (feature_dim <= 0) throw ConfigError("feature_dim must be positive");
  if (!(noise_scale > 0.0)) throw ConfigError("noise_scale must be > 0");
  if (!(identity_scale >= 0.0)) throw ConfigError("identity_scale must be >= 0");
  if (!(other_race_rate >= 0.0 && other_race_rate <= 1.0))
    throw ConfigError("other_race_rate must lie in [0,1]");
  for (const auto& o : race_offsets)
    if (o.size() != feature_dim) throw ConfigError("race offset has wrong dimension");
  for (const auto& o : gender_offsets)
    if (o.size() != feature_dim) throw ConfigError("gender offset has wrong dimension");
  for (std::size_t i = 0; i < kKnownRaces; ++i)
    for (std::size_t j = i + 1; j < kKnownRaces; ++j)
      if (race_offsets[i] == race_offsets[j]) throw ConfigError("race offsets must be distinct");
  if (gender_offsets[0] == gender_offsets[1]) throw ConfigError("gender offsets must be distinct");
  for (const auto& a : attributes)
    if (a.weights.size() != feature_dim)
      throw ConfigError("attribute '" + a.name + "' weights have wrong dimension");
}

const AttributeSpec& GeneratorParams::attribute(std::string_view name) const {
  for (const auto& a : attributes)
    if (a.name == name) return a;
  throw UnknownName("generator has no attribute '" + std::string(name) + "'");
}

Vector GeneratorParams::race_mean() const {
  Vector m = Vector::Zero(feature_dim);
  for (const auto& o : race_offsets) m += o;
  return m / static_cast<double>(kKnownRaces);
}

GeneratorParams make_generator_params(Index feature_dim, const std::vector<std::string>& attributes,
                                      double race_radius, double gender_radius,
                                      double weight_scale, std::uint64_t seed) {
  GeneratorParams p;
  p.feature_dim = feature_dim;
  p.seed = seed;
  std::mt19937_64 engine(derive_seed(seed, "generator/world"));
  for (auto& o : p.race_offsets) o = race_radius * random_direction(feature_dim, engine);
  for (auto& o : p.gender_offsets) o = gender_radius * random_direction(feature_dim, engine);
  p.other_race_radius = race_radius;
  for (const auto& name : attributes) {
    AttributeSpec a;
    a.name = name;
    a.weights = weight_scale * random_direction(feature_dim, engine);
    p.attributes.push_back(std::move(a));
  }
  p.validate();
  return p;
}

void LabeledCorpus::validate() const {
  const auto n = static_cast<std::size_t>(features.rows());
  if (subgroups.size() != n || identity_seeds.size() != n ||
      static_cast<std::size_t>(attribute_labels.rows()) != n)
    throw DataError("corpus fields disagree on row count");
  if (static_cast<std::size_t>(attribute_labels.cols()) != attribute_names.size())
    throw DataError("corpus attribute columns disagree with names");
  if (!features.allFinite()) throw DataError("corpus has non-finite features");
}

LabeledCorpus LabeledCorpus::slice(Index begin, Index end) const {
  if (begin < 0 || end > size() || begin > end) throw DimensionMismatch("bad corpus slice");
  LabeledCorpus c;
  c.features = features.middleRows(begin, end - begin);
  c.attribute_names = attribute_names;
  c.attribute_labels = attribute_labels.middleRows(begin, end - begin);
  c.subgroups.assign(subgroups.begin() + begin, subgroups.begin() + end);
  c.identity_seeds.assign(identity_seeds.begin() + begin, identity_seeds.begin() + end);
  c.pool = pool;
  return c;
}

void SkewProfile::validate() const {
  check_fractions(race_fractions, "race_fractions");
  check_fractions(gender_fractions, "gender_fractions");
}

std::vector<std::string> builtin_skew_names() {
  return {"fotw-train", "fotw-valid", "celeba-train", "celeba-valid", "celeba-test", "uniform"};
}

SkewProfile builtin_skew(std::string_view name) {
  // Percentages as tabulated (race S1..S4, Other; gender G1, G2, Other).
  // Rows that do not sum to 100 are renormalized.
  if (name == "fotw-train") return make_profile("fotw-train", {8, 48, 11, 15, 19}, {54, 48, 2}, 6171);
  if (name == "fotw-valid") return make_profile("fotw-valid", {8, 53, 11, 17, 11}, {44, 55, 1}, 3086);
  if (name == "celeba-train")
    return make_profile("celeba-train", {7, 75, 7, 8, 4}, {58, 42, 0}, 162687);
  if (name == "celeba-valid")
    return make_profile("celeba-valid", {7, 76, 6, 6, 6}, {58, 42, 0}, 19863);
  if (name == "celeba-test") return make_profile("celeba-test", {9, 69, 9, 9, 6}, {61, 39, 0}, 19955);
  if (name == "uniform") return make_profile("uniform", {25, 25, 25, 25, 0}, {50, 50, 0}, 0);
  throw UnknownName("unknown skew profile '" + std::string(name) + "'");
}

SkewProfile skew_from_json_text(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("skew profile: ") + e.what());
  }
  SkewProfile s;
  try {
    s.name = j.at("name").get<std::string>();
    const auto race = j.at("race_fractions").get<std::vector<double>>();
    const auto gender = j.at("gender_fractions").get<std::vector<double>>();
    if (race.size() != kRaceCount) throw ConfigError("race_fractions needs 5 entries");
    if (gender.size() != kGenderCount) throw ConfigError("gender_fractions needs 3 entries");
    std::copy(race.begin(), race.end(), s.race_fractions.begin());
    std::copy(gender.begin(), gender.end(), s.gender_fractions.begin());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("skew profile: ") + e.what());
  }
  for (std::size_t i = 0; i < kRaceCount; ++i) s.raw_race_percent[i] = 100.0 * s.race_fractions[i];
  for (std::size_t i = 0; i < kGenderCount; ++i)
    s.raw_gender_percent[i] = 100.0 * s.gender_fractions[i];
  s.validate();
  return s;
}

SkewProfile load_skew(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read skew profile " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return skew_from_json_text(text);
}

LabeledCorpus sample_demographic_corpus(const GeneratorParams& params, Index n, std::uint64_t seed) {
  params.validate();
  constexpr Index cells = static_cast<Index>(kKnownRaces * kKnownGenders);
  if (n < cells) throw ContractViolation("demographic corpus needs at least 8 rows");

  std::vector<SubgroupLabel> labels;
  labels.reserve(static_cast<std::size_t>(n));
  for (Index cell = 0; cell < cells; ++cell) {
    const Index count = n / cells + (cell < n % cells ? 1 : 0);
    const SubgroupLabel s{static_cast<Race>(cell / 2), static_cast<Gender>(cell % 2)};
    labels.insert(labels.end(), static_cast<std::size_t>(count), s);
  }
  std::mt19937_64 engine(derive_seed(seed, "corpus/demographic"));
  std::shuffle(labels.begin(), labels.end(), engine);

  LabeledCorpus c = empty_corpus(params, n, {}, IdentityPool::HeldOut);
  const std::uint64_t base = pool_base(seed, IdentityPool::HeldOut);
  for (Index row = 0; row < n; ++row)
    fill_row(params, c, row, labels[static_cast<std::size_t>(row)],
             derive_seed(base, static_cast<std::uint64_t>(row)), engine, {});
  return c;
}

LabeledCorpus sample_attribute_corpus(const GeneratorParams& params, Index n,
                                      const SkewProfile& skew,
                                      const std::vector<std::string>& attributes,
                                      std::uint64_t seed) {
  params.validate();
  skew.validate();
  if (attributes.empty()) throw ContractViolation("attribute list is empty");
  if (n < 1) throw ContractViolation("attribute corpus needs at least one row");
  std::vector<const AttributeSpec*> specs;
  for (const auto& name : attributes) specs.push_back(&params.attribute(name));

  std::mt19937_64 engine(derive_seed(seed, "corpus/attribute"));
  std::discrete_distribution<int> race_dist(skew.race_fractions.begin(), skew.race_fractions.end());
  std::discrete_distribution<int> gender_dist(skew.gender_fractions.begin(),
                                              skew.gender_fractions.end());
  LabeledCorpus c = empty_corpus(params, n, attributes, IdentityPool::Target);
  const std::uint64_t base = pool_base(seed, IdentityPool::Target);
  for (Index row = 0; row < n; ++row) {
    const SubgroupLabel s{static_cast<Race>(race_dist(engine)), static_cast<Gender>(gender_dist(engine))};
    fill_row(params, c, row, s, derive_seed(base, static_cast<std::uint64_t>(row)), engine, specs);
  }
  return c;
}

IdentityCorpus sample_identity_corpus(const GeneratorParams& params, int identity_count,
                                      int examples_per_identity, std::uint64_t seed) {
  params.validate();
  if (identity_count < 1 || examples_per_identity < 1)
    throw ContractViolation("identity corpus needs identities and examples");
  std::mt19937_64 engine(derive_seed(seed, "corpus/identity"));
  std::uniform_int_distribution<int> race_pick(0, static_cast<int>(kKnownRaces) - 1);
  std::uniform_int_distribution<int> gender_pick(0, static_cast<int>(kKnownGenders) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::uint64_t base = derive_seed(seed, "identities/backbone");

  IdentityCorpus c;
  c.identity_count = identity_count;
  c.features.resize(static_cast<Index>(identity_count) * examples_per_identity, params.feature_dim);
  Index row = 0;
  for (int id = 0; id < identity_count; ++id) {
    const std::uint64_t id_seed = derive_seed(base, static_cast<std::uint64_t>(id));
    c.identity_seeds.push_back(id_seed);
    SubgroupLabel s{static_cast<Race>(race_pick(engine)), static_cast<Gender>(gender_pick(engine))};
    if (unit(engine) < params.other_race_rate) s.race = Race::Other;
    const Vector centre = demographic_offset(params, s) + identity_component(params, s.race, id_seed);
    for (int k = 0; k < examples_per_identity; ++k, ++row) {
      c.features.row(row) = (centre + gaussian_vector(params.feature_dim, params.noise_scale, engine)).transpose();
      c.identity.push_back(id);
    }
  }
  return c;
}

bool identities_disjoint(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  const std::unordered_set<std::uint64_t> seen(a.begin(), a.end());
  return std::none_of(b.begin(), b.end(), [&](std::uint64_t s) { return seen.count(s) != 0; });
}

std::string corpus_to_csv(const LabeledCorpus& c) {
  c.validate();
  std::string out;
  for (Index j = 0; j < c.features.cols(); ++j) out += "f" + std::to_string(j) + ",";
  for (const auto& a : c.attribute_names) out += a + ",";
  out += "race,gender,pool\n";
  for (Index i = 0; i < c.size(); ++i) {
    for (Index j = 0; j < c.features.cols(); ++j) out += format_double(c.features(i, j)) + ",";
    for (Index a = 0; a < c.attribute_labels.cols(); ++a)
      out += c.attribute_labels(i, a) ? "1," : "0,";
    const auto& s = c.subgroups[static_cast<std::size_t>(i)];
    out += std::string(to_string(s.race)) + "," + std::string(to_string(s.gender)) + "," +
           std::string(to_string(c.pool)) + "\n";
  }
  return out;
}

LabeledCorpus corpus_from_csv(std::string_view text) {
  auto split = [](std::string_view line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cells.emplace_back(line.substr(start, comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    return cells;
  };
  std::vector<std::string_view> lines;
  for (std::size_t pos = 0; pos < text.size();) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    if (nl > pos) lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  if (lines.empty()) throw DataError("corpus CSV is empty");
  const auto header = split(lines[0]);
  if (header.size() < 3 || header[header.size() - 3] != "race" ||
      header[header.size() - 2] != "gender" || header.back() != "pool")
    throw DataError("corpus CSV header must end with race,gender,pool");
  Index dim = 0;
  while (static_cast<std::size_t>(dim) < header.size() && header[static_cast<std::size_t>(dim)] == "f" + std::to_string(dim)) ++dim;
  const std::size_t attr_count = header.size() - 3 - static_cast<std::size_t>(dim);

  LabeledCorpus c;
  const auto n = static_cast<Index>(lines.size() - 1);
  c.features.resize(n, dim);
  c.attribute_labels.resize(n, static_cast<Index>(attr_count));
  c.attribute_names.assign(header.begin() + dim, header.begin() + dim + static_cast<Index>(attr_count));
  c.subgroups.resize(static_cast<std::size_t>(n));
  c.identity_seeds.assign(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    const auto cells = split(lines[static_cast<std::size_t>(i + 1)]);
    if (cells.size() != header.size())
      throw DataError("corpus CSV row " + std::to_string(i + 1) + " has the wrong column count");
    for (Index j = 0; j < dim; ++j) {
      try {
        c.features(i, j) = std::stod(cells[static_cast<std::size_t>(j)]);
      } catch (const std::exception&) {
        throw DataError("corpus CSV row " + std::to_string(i + 1) + ": bad number");
      }
    }
    for (std::size_t a = 0; a < attr_count; ++a) {
      const auto& v = cells[static_cast<std::size_t>(dim) + a];
      if (v != "0" && v != "1") throw DataError("attribute label must be 0 or 1");
      c.attribute_labels(i, static_cast<Index>(a)) = v == "1" ? 1 : 0;
    }
    c.subgroups[static_cast<std::size_t>(i)] = {parse_race(cells[cells.size() - 3]),
                                                parse_gender(cells[cells.size() - 2])};
    const IdentityPool pool = parse_pool(cells.back());
    if (i == 0) c.pool = pool;
    else if (pool != c.pool) throw DataError("corpus mixes identity pools");
  }
  return c;
}

void write_corpus_csv(const std::filesystem::path& path, const LabeledCorpus& corpus) {
  const std::string text = corpus_to_csv(corpus);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

LabeledCorpus read_corpus_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return corpus_from_csv(text);
}

}  // namespace twofold::datagen
