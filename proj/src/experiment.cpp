#include "twofold/experiment.hpp"

#include "twofold/error.hpp"
#include "twofold/hash.hpp"
#include "twofold/metrics.hpp"
#include "twofold/seed.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#ifndef TWOFOLD_VERSION
#define TWOFOLD_VERSION "0.0.0"
#endif

namespace twofold::experiment {

using nlohmann::json;
using pipeline::TransferVariant;

std::string_view tool_version() { return TWOFOLD_VERSION; }

namespace {

// ---------------------------------------------------------------------------
// small helpers

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("short write on " + path.string());
}

std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Re-throws with the stage name prepended, keeping the error category.
template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(name + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(name + ": " + e.what());
  }
}

void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first;
  std::size_t first_index = count;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(count)); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (i < first_index) {
            first_index = i;
            first = std::current_exception();
          }
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

json file_entry(const fs::path& root, const fs::path& rel) {
  return {{"path", rel.generic_string()}, {"sha256", sha256_file(root / rel)}};
}

// ---------------------------------------------------------------------------
// config parsing

template <typename T>
T field(const json& j, const std::string& key, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("field '" + where + key + "': " + e.what());
  }
}

void check(bool ok, const std::string& field_name, const std::string& what) {
  if (!ok) throw ConfigError("field '" + field_name + "': " + what);
}

std::vector<std::uint64_t> seeds_from(const json& v) {
  if (v.is_string()) return parse_seed_list(v.get<std::string>());
  if (v.is_number_unsigned()) {
    std::vector<std::uint64_t> out;
    for (std::uint64_t s = 1; s <= v.get<std::uint64_t>(); ++s) out.push_back(s);
    return out;
  }
  return field<std::vector<std::uint64_t>>(v, "seeds", "");
}

GeneratorConfig parse_generator(const json& j) {
  if (!j.is_object()) throw ConfigError("field 'generator': expected an object");
  GeneratorConfig g;
  const std::string w = "generator.";
  for (const auto& [key, v] : j.items()) {
    if (key == "feature_dim") g.feature_dim = field<Index>(v, key, w);
    else if (key == "attributes") g.attributes = field<std::vector<std::string>>(v, key, w);
    else if (key == "race_radius") g.race_radius = field<double>(v, key, w);
    else if (key == "gender_radius") g.gender_radius = field<double>(v, key, w);
    else if (key == "weight_scale") g.weight_scale = field<double>(v, key, w);
    else if (key == "noise_scale") g.noise_scale = field<double>(v, key, w);
    else if (key == "identity_scale") g.identity_scale = field<double>(v, key, w);
    else if (key == "other_race_rate") g.other_race_rate = field<double>(v, key, w);
    else if (key == "intercepts") g.intercepts = field<std::map<std::string, double>>(v, key, w);
    else if (key == "subgroup_bias") {
      if (!v.is_array()) throw ConfigError("field 'generator.subgroup_bias': expected an array");
      for (const auto& e : v) {
        BiasEntry b;
        try {
          b.attribute = e.at("attribute").get<std::string>();
          b.value = e.at("value").get<double>();
          const auto race = e.value("race", std::string("*"));
          const auto gender = e.value("gender", std::string("*"));
          if (race != "*") b.race = datagen::parse_race(race);
          if (gender != "*") b.gender = datagen::parse_gender(gender);
        } catch (const json::exception& ex) {
          throw ConfigError(std::string("field 'generator.subgroup_bias': ") + ex.what());
        } catch (const DataError& ex) {
          throw ConfigError(std::string("field 'generator.subgroup_bias': ") + ex.what());
        }
        g.subgroup_bias.push_back(std::move(b));
      }
    } else {
      throw ConfigError("unknown field 'generator." + key + "'");
    }
  }
  check(g.feature_dim > 0, "generator.feature_dim", "must be positive");
  check(!g.attributes.empty(), "generator.attributes", "must not be empty");
  check(std::set<std::string>(g.attributes.begin(), g.attributes.end()).size() == g.attributes.size(),
        "generator.attributes", "names must be unique");
  check(g.race_radius > 0, "generator.race_radius", "must be positive");
  check(g.gender_radius > 0, "generator.gender_radius", "must be positive");
  check(g.noise_scale > 0, "generator.noise_scale", "must be positive");
  check(g.identity_scale >= 0, "generator.identity_scale", "must be non-negative");
  check(g.other_race_rate >= 0 && g.other_race_rate <= 1, "generator.other_race_rate", "must lie in [0,1]");
  for (const auto& b : g.subgroup_bias)
    check(std::find(g.attributes.begin(), g.attributes.end(), b.attribute) != g.attributes.end(),
          "generator.subgroup_bias", "unknown attribute '" + b.attribute + "'");
  for (const auto& [name, v] : g.intercepts)
    check(std::find(g.attributes.begin(), g.attributes.end(), name) != g.attributes.end(),
          "generator.intercepts", "unknown attribute '" + name + "'");
  return g;
}

json generator_to_json(const GeneratorConfig& g) {
  json bias = json::array();
  for (const auto& b : g.subgroup_bias)
    bias.push_back({{"attribute", b.attribute},
                    {"race", b.race ? std::string(datagen::to_string(*b.race)) : "*"},
                    {"gender", b.gender ? std::string(datagen::to_string(*b.gender)) : "*"},
                    {"value", b.value}});
  return {{"feature_dim", g.feature_dim},     {"attributes", g.attributes},
          {"race_radius", g.race_radius},     {"gender_radius", g.gender_radius},
          {"weight_scale", g.weight_scale},   {"noise_scale", g.noise_scale},
          {"identity_scale", g.identity_scale}, {"other_race_rate", g.other_race_rate},
          {"intercepts", g.intercepts},       {"subgroup_bias", bias}};
}

// ---------------------------------------------------------------------------
// prediction logs and reports

struct SeedArtifacts {
  std::uint64_t seed = 0;
  ReplicateCorpora corpora;
  pipeline::Backbone backbone;
  pipeline::DemographicBranch branch;
  std::string eval_hash;
  json entry;
};

std::vector<PredictionRow> prediction_rows(const pipeline::AttributePredictions& p,
                                           const datagen::LabeledCorpus& eval) {
  std::vector<PredictionRow> rows;
  for (Index i = 0; i < eval.size(); ++i)
    for (std::size_t a = 0; a < p.attributes.size(); ++a) {
      const auto col = static_cast<Index>(a);
      rows.push_back({static_cast<std::uint64_t>(i), p.attributes[a], p.probabilities(i, col),
                      p.decisions(i, col), eval.attribute_labels(i, col),
                      eval.subgroups[static_cast<std::size_t>(i)]});
    }
  return rows;
}

metrics::DecisionMatrix label_columns(const datagen::LabeledCorpus& c,
                                      const std::vector<std::string>& attributes) {
  metrics::DecisionMatrix m(c.size(), static_cast<Index>(attributes.size()));
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    const auto it = std::find(c.attribute_names.begin(), c.attribute_names.end(), attributes[a]);
    if (it == c.attribute_names.end()) throw DataError("corpus lacks attribute " + attributes[a]);
    m.col(static_cast<Index>(a)) = c.attribute_labels.col(it - c.attribute_names.begin());
  }
  return m;
}

std::string log_to_csv(const pipeline::TrainingLog& log) {
  std::string out = "epoch,loss\n";
  for (std::size_t e = 0; e < log.size(); ++e) out += std::to_string(e) + "," + fmt_g17(log[e]) + "\n";
  return out;
}

std::string identity_corpus_csv(const datagen::IdentityCorpus& c) {
  std::string out = "identity";
  for (Index j = 0; j < c.features.cols(); ++j) out += ",f" + std::to_string(j);
  out += "\n";
  for (Index i = 0; i < c.features.rows(); ++i) {
    out += std::to_string(c.identity[static_cast<std::size_t>(i)]);
    for (Index j = 0; j < c.features.cols(); ++j) out += "," + fmt_g17(c.features(i, j));
    out += "\n";
  }
  return out;
}

std::string seed_dir(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

json compare_cell(const stats::PairedComparison& r) {
  json cell = {{"n00", r.n00}, {"b", r.n01}, {"c", r.n10}, {"n11", r.n11}, {"degenerate", r.degenerate}};
  if (r.degenerate) {
    cell["test"] = nullptr;
    cell["statistic"] = nullptr;
    cell["p_value"] = nullptr;
    cell["flag"] = "";
  } else {
    cell["test"] = std::string(stats::to_string(r.chosen_test));
    cell["statistic"] = r.chi2;
    cell["p_value"] = r.p_value;
    cell["chi2_p"] = r.chi2_p;
    cell["exact_p"] = r.exact_p;
    cell["flag"] = r.chosen_test == stats::TestKind::exact_binomial ? "*" : "";
  }
  return cell;
}

stats::PairedComparison swapped(stats::PairedComparison r) {
  std::swap(r.n01, r.n10);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  auto number = [&](std::string_view s) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw ConfigError("field 'seeds': bad seed '" + std::string(s) + "'");
    return v;
  };
  std::vector<std::uint64_t> out;
  if (const auto dots = text.find(".."); dots != std::string_view::npos) {
    const auto lo = number(text.substr(0, dots));
    const auto hi = number(text.substr(dots + 2));
    if (hi < lo) throw ConfigError("field 'seeds': empty range");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    out.push_back(number(text.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<TransferVariant> parse_variant_list(std::string_view text) {
  std::vector<TransferVariant> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    out.push_back(pipeline::parse_variant(text.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") c.seed = field<std::uint64_t>(v, key, "");
    else if (key == "generator") c.generator = parse_generator(v);
    else if (key == "skew") c.skew = field<std::string>(v, key, "");
    else if (key == "eval_skew") c.eval_skew = field<std::string>(v, key, "");
    else if (key == "held_out_size") c.held_out_size = field<Index>(v, key, "");
    else if (key == "train_size") c.train_size = field<Index>(v, key, "");
    else if (key == "eval_size") c.eval_size = field<Index>(v, key, "");
    else if (key == "identities") c.identities = field<int>(v, key, "");
    else if (key == "examples_per_identity") c.examples_per_identity = field<int>(v, key, "");
    else if (key == "variants") {
      c.variants.clear();
      for (const auto& name : field<std::vector<std::string>>(v, key, ""))
        c.variants.push_back(pipeline::parse_variant(name));
    } else if (key == "seeds") c.seeds = seeds_from(v);
    else if (key == "epochs") c.epochs = field<int>(v, key, "");
    else if (key == "lr") c.lr = field<double>(v, key, "");
    else if (key == "batch_size") c.batch_size = field<Index>(v, key, "");
    else if (key == "momentum") c.momentum = field<double>(v, key, "");
    else if (key == "demographic_epochs") c.demographic_epochs = field<int>(v, key, "");
    else if (key == "demographic_lr") c.demographic_lr = field<double>(v, key, "");
    else if (key == "backbone_epochs") c.backbone_epochs = field<int>(v, key, "");
    else if (key == "backbone_lr") c.backbone_lr = field<double>(v, key, "");
    else if (key == "rep_dim") c.rep_dim = field<Index>(v, key, "");
    else if (key == "backbone_dim") c.backbone_dim = field<Index>(v, key, "");
    else if (key == "trunk_dim") c.trunk_dim = field<Index>(v, key, "");
    else if (key == "threshold") c.threshold = field<double>(v, key, "");
    else if (key == "race_confidence_threshold") c.race_confidence_threshold = field<double>(v, key, "");
    else if (key == "mode") c.mode = pipeline::parse_feature_mode(field<std::string>(v, key, ""));
    else if (key == "exact_test_threshold") c.exact_test_threshold = field<std::uint64_t>(v, key, "");
    else if (key == "workers") c.workers = field<int>(v, key, "");
    else throw ConfigError("unknown field '" + key + "'");
  }
  check(c.held_out_size >= 8, "held_out_size", "must be at least 8");
  check(c.train_size >= 1, "train_size", "must be positive");
  check(c.eval_size >= 1, "eval_size", "must be positive");
  check(c.identities >= 2, "identities", "must be at least 2");
  check(c.examples_per_identity >= 1, "examples_per_identity", "must be positive");
  check(!c.variants.empty(), "variants", "must not be empty");
  check(!c.seeds.empty(), "seeds", "must not be empty");
  check(std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() == c.seeds.size(), "seeds",
        "must be unique");
  check(std::set<TransferVariant>(c.variants.begin(), c.variants.end()).size() == c.variants.size(),
        "variants", "must be unique");
  check(c.epochs >= 0, "epochs", "must be non-negative");
  check(c.demographic_epochs >= 0, "demographic_epochs", "must be non-negative");
  check(c.backbone_epochs >= 0, "backbone_epochs", "must be non-negative");
  check(c.lr > 0, "lr", "must be positive");
  check(c.demographic_lr > 0, "demographic_lr", "must be positive");
  check(c.backbone_lr > 0, "backbone_lr", "must be positive");
  check(c.batch_size >= 1, "batch_size", "must be positive");
  check(c.momentum >= 0 && c.momentum < 1, "momentum", "must lie in [0,1)");
  check(c.rep_dim >= 1, "rep_dim", "must be positive");
  check(c.backbone_dim >= 1, "backbone_dim", "must be positive");
  check(c.trunk_dim >= 1, "trunk_dim", "must be positive");
  check(c.threshold > 0 && c.threshold < 1, "threshold", "must lie in (0,1)");
  check(c.race_confidence_threshold > 0 && c.race_confidence_threshold < 1,
        "race_confidence_threshold", "must lie in (0,1)");
  check(c.workers >= 1, "workers", "must be positive");
  resolve_skew(c.skew);
  resolve_skew(c.eval_skew);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
  if (j.is_object() && j.contains("manifest_version")) {
    if (!j.contains("config")) throw ConfigError("manifest has no config snapshot");
    return parse_config(j.at("config"));
  }
  return parse_config(j);
}

json config_to_json(const ExperimentConfig& c) {
  std::vector<std::string> variants;
  for (auto v : c.variants) variants.emplace_back(pipeline::to_string(v));
  return {{"seed", c.seed},
          {"generator", generator_to_json(c.generator)},
          {"skew", c.skew},
          {"eval_skew", c.eval_skew},
          {"held_out_size", c.held_out_size},
          {"train_size", c.train_size},
          {"eval_size", c.eval_size},
          {"identities", c.identities},
          {"examples_per_identity", c.examples_per_identity},
          {"variants", variants},
          {"seeds", c.seeds},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"momentum", c.momentum},
          {"demographic_epochs", c.demographic_epochs},
          {"demographic_lr", c.demographic_lr},
          {"backbone_epochs", c.backbone_epochs},
          {"backbone_lr", c.backbone_lr},
          {"rep_dim", c.rep_dim},
          {"backbone_dim", c.backbone_dim},
          {"trunk_dim", c.trunk_dim},
          {"threshold", c.threshold},
          {"race_confidence_threshold", c.race_confidence_threshold},
          {"mode", std::string(pipeline::to_string(c.mode))},
          {"exact_test_threshold", c.exact_test_threshold},
          {"workers", c.workers}};
}

datagen::SkewProfile resolve_skew(const std::string& name_or_path) {
  const auto names = datagen::builtin_skew_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end())
    return datagen::builtin_skew(name_or_path);
  if (fs::exists(name_or_path)) return datagen::load_skew(name_or_path);
  throw ConfigError("field 'skew': '" + name_or_path + "' is neither a builtin profile nor a file");
}

datagen::Race smallest_race(const datagen::SkewProfile& skew) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < datagen::kKnownRaces; ++k)
    if (skew.race_fractions[k] < skew.race_fractions[best]) best = k;
  return static_cast<datagen::Race>(best);
}

datagen::GeneratorParams make_generator(const ExperimentConfig& c) {
  const auto& g = c.generator;
  auto p = datagen::make_generator_params(g.feature_dim, g.attributes, g.race_radius, g.gender_radius,
                                          g.weight_scale, derive_seed(c.seed, "world"));
  p.noise_scale = g.noise_scale;
  p.identity_scale = g.identity_scale;
  p.other_race_rate = g.other_race_rate;
  for (auto& a : p.attributes) {
    if (auto it = g.intercepts.find(a.name); it != g.intercepts.end()) a.intercept = it->second;
    for (const auto& b : g.subgroup_bias) {
      if (b.attribute != a.name) continue;
      for (std::size_t r = 0; r < datagen::kRaceCount; ++r)
        for (std::size_t s = 0; s < datagen::kKnownGenders; ++s)
          if ((!b.race || static_cast<std::size_t>(*b.race) == r) &&
              (!b.gender || static_cast<std::size_t>(*b.gender) == s))
            a.subgroup_bias[r][s] += b.value;
    }
  }
  p.validate();
  return p;
}

std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t seed, std::string_view purpose) {
  return derive_seed(derive_seed(master, seed), purpose);
}

ReplicateCorpora generate_corpora(const ExperimentConfig& c, const datagen::GeneratorParams& params,
                                  std::uint64_t seed) {
  ReplicateCorpora r;
  r.identity = datagen::sample_identity_corpus(params, c.identities, c.examples_per_identity,
                                               replicate_seed(c.seed, seed, "corpus/identity"));
  r.held_out = datagen::sample_demographic_corpus(params, c.held_out_size,
                                                  replicate_seed(c.seed, seed, "corpus/held-out"));
  const auto& attrs = c.generator.attributes;
  r.target_train = datagen::sample_attribute_corpus(params, c.train_size, resolve_skew(c.skew), attrs,
                                                    replicate_seed(c.seed, seed, "corpus/target-train"));
  r.target_eval = datagen::sample_attribute_corpus(params, c.eval_size, resolve_skew(c.eval_skew), attrs,
                                                   replicate_seed(c.seed, seed, "corpus/target-eval"));
  // Target train and eval share the TARGET pool but must not share people.
  if (!datagen::identities_disjoint(r.target_train.identity_seeds, r.target_eval.identity_seeds))
    throw DataError("target train and eval corpora share identities");
  pipeline::require_disjoint(r.held_out, r.target_train);
  pipeline::require_disjoint(r.held_out, r.target_eval);
  if (!datagen::identities_disjoint(r.identity.identity_seeds, r.held_out.identity_seeds) ||
      !datagen::identities_disjoint(r.identity.identity_seeds, r.target_train.identity_seeds) ||
      !datagen::identities_disjoint(r.identity.identity_seeds, r.target_eval.identity_seeds))
    throw DataError("backbone identities overlap a fold corpus");
  return r;
}

namespace {

std::map<std::string, std::string> write_corpora(const fs::path& out, std::uint64_t seed,
                                                 const ReplicateCorpora& r) {
  const fs::path rel = fs::path("corpora") / seed_dir(seed);
  fs::create_directories(out / rel);
  std::map<std::string, std::string> hashes;
  const std::pair<const char*, std::string> files[] = {
      {"identity.csv", identity_corpus_csv(r.identity)},
      {"held_out.csv", datagen::corpus_to_csv(r.held_out)},
      {"target_train.csv", datagen::corpus_to_csv(r.target_train)},
      {"target_eval.csv", datagen::corpus_to_csv(r.target_eval)},
  };
  for (const auto& [name, text] : files) {
    const fs::path p = rel / name;
    // Existing corpora must match what the config regenerates.
    if (fs::exists(out / p) && sha256_file(out / p) != sha256_hex(text))
      throw DataError(p.generic_string() + " does not match the configured generator");
    write_text(out / p, text);
    hashes[p.generic_string()] = sha256_hex(text);
  }
  return hashes;
}

pipeline::TrainConfig train_config(int epochs, double lr, const ExperimentConfig& c, std::uint64_t seed) {
  return {epochs, lr, c.batch_size, c.momentum, seed};
}

}  // namespace

GenerateResult cmd_generate(const ExperimentConfig& c, const fs::path& out_dir) {
  const auto params = stage("generate", [&] { return make_generator(c); });
  GenerateResult result;
  stage("generate", [&] {
    fs::create_directories(out_dir);
    for (auto seed : c.seeds) {
      const auto corpora = generate_corpora(c, params, seed);
      for (auto& [k, v] : write_corpora(out_dir, seed, corpora)) result.hashes[k] = v;
    }
    write_text(out_dir / "corpora" / "hashes.json", json(result.hashes).dump(2) + "\n");
  });
  return result;
}

bool run_is_incomplete(const fs::path& out_dir) {
  return fs::exists(out_dir / "runs") && !fs::exists(out_dir / "manifest.json");
}

RunResult cmd_run(const ExperimentConfig& c, const fs::path& out_dir) {
  RunResult result;
  result.previous_run_incomplete = run_is_incomplete(out_dir);
  if (result.previous_run_incomplete)
    std::cerr << "warning: " << out_dir.string() << " holds an incomplete run; restarting it\n";
  stage("setup", [&] {
    fs::create_directories(out_dir);
    fs::remove(out_dir / "manifest.json");
    fs::remove_all(out_dir / "runs");
  });
  const auto params = stage("generator", [&] { return make_generator(c); });

  std::vector<SeedArtifacts> seeds(c.seeds.size());
  parallel_for(seeds.size(), c.workers, [&](std::size_t i) {
    auto& s = seeds[i];
    s.seed = c.seeds[i];
    const std::string tag = " (seed " + std::to_string(s.seed) + ")";
    const fs::path rel = fs::path("runs") / seed_dir(s.seed);
    stage("generate" + tag, [&] {
      s.corpora = generate_corpora(c, params, s.seed);
      fs::create_directories(out_dir / rel);
      const auto hashes = write_corpora(out_dir, s.seed, s.corpora);
      json corpora = json::object();
      for (const auto& [path, h] : hashes)
        corpora[fs::path(path).stem().string()] = {{"path", path}, {"sha256", h}};
      s.entry["seed"] = s.seed;
      s.entry["corpora"] = corpora;
      s.eval_hash = corpora.at("target_eval").at("sha256").get<std::string>();
    });
    stage("pretrain_backbone" + tag, [&] {
      pipeline::BackboneConfig bc{c.mode, c.backbone_dim,
                                  train_config(c.backbone_epochs, c.backbone_lr, c,
                                               replicate_seed(c.seed, s.seed, "train/backbone"))};
      s.backbone = pipeline::pretrain_backbone(s.corpora.identity, bc);
      const fs::path p = rel / "backbone.ckpt";
      const std::string bytes = nn::serialize_checkpoint(
          s.backbone.net, {{"kind", "backbone"},
                           {"mode", std::string(pipeline::to_string(c.mode))},
                           {"proxy_accuracy", fmt_g17(s.backbone.proxy_accuracy)}});
      write_text(out_dir / p, bytes);
      s.entry["backbone"] = file_entry(out_dir, p);
      s.entry["backbone"]["id"] = nn::checkpoint_id(nn::serialize_checkpoint(s.backbone.net));
      s.entry["backbone"]["proxy_accuracy"] = s.backbone.proxy_accuracy;
    });
    stage("train_demographic_heads" + tag, [&] {
      pipeline::DemographicConfig dc;
      dc.rep_dim = c.rep_dim;
      dc.race = train_config(c.demographic_epochs, c.demographic_lr, c,
                             replicate_seed(c.seed, s.seed, "train/race"));
      dc.gender = train_config(c.demographic_epochs, c.demographic_lr, c,
                               replicate_seed(c.seed, s.seed, "train/gender"));
      s.branch = pipeline::train_demographic_heads(s.backbone, s.corpora.held_out, dc);
      const fs::path p = rel / "branch.ckpt";
      write_text(out_dir / p, nn::serialize_checkpoint(s.branch.net, {{"kind", "demographic-branch"}}));
      auto& e = s.entry["branch"] = file_entry(out_dir, p);
      e["id"] = nn::checkpoint_id(nn::serialize_checkpoint(s.branch.net));
      e["race_accuracy"] = s.branch.race_accuracy;
      e["gender_accuracy"] = s.branch.gender_accuracy;
      e["race_auc"] = s.branch.race_auc;
      e["gender_auc"] = s.branch.gender_auc;
      const auto est = pipeline::estimate_race_distribution(s.branch, s.corpora.target_eval.features,
                                                            c.race_confidence_threshold);
      json dist = json::object();
      for (std::size_t k = 0; k < datagen::kRaceCount; ++k)
        dist[std::string(datagen::to_string(static_cast<datagen::Race>(k)))] = est[k];
      s.entry["estimated_race_distribution"] = dist;
    });
  });

  struct Job {
    std::size_t seed_index;
    TransferVariant variant;
    json entry;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < seeds.size(); ++i)
    for (auto v : c.variants) jobs.push_back({i, v, {}});

  parallel_for(jobs.size(), c.workers, [&](std::size_t j) {
    auto& job = jobs[j];
    const auto& s = seeds[job.seed_index];
    const std::string vname(pipeline::to_string(job.variant));
    const std::string tag = " (seed " + std::to_string(s.seed) + ", " + vname + ")";
    const fs::path rel = fs::path("runs") / seed_dir(s.seed) / vname;
    pipeline::AttributeDetector det = stage("assemble" + tag, [&] {
      pipeline::AssembleConfig ac{c.trunk_dim, replicate_seed(c.seed, s.seed, "init/detector")};
      return pipeline::assemble(job.variant, s.backbone, &s.branch, c.generator.attributes, ac);
    });
    stage("train_attribute_heads" + tag, [&] {
      // Minibatch order is shared by every variant of a replicate.
      pipeline::train_attribute_heads(
          det, s.corpora.target_train,
          train_config(c.epochs, c.lr, c, replicate_seed(c.seed, s.seed, "train/attributes")));
    });
    stage("evaluate" + tag, [&] {
      fs::create_directories(out_dir / rel);
      const auto preds = pipeline::predict_attributes(det, s.corpora.target_eval.features, c.threshold);
      const auto report = metrics::subgroup_report(
          preds.decisions, label_columns(s.corpora.target_eval, det.attributes),
          s.corpora.target_eval.subgroups, det.attributes, vname, s.eval_hash);
      const std::string ckpt = nn::serialize_checkpoint(
          det.net, {{"kind", "attribute-detector"},
                    {"variant", vname},
                    {"backbone_id", det.provenance.backbone_id},
                    {"branch_id", det.provenance.branch_id}});
      write_text(out_dir / rel / "detector.ckpt", ckpt);
      write_text(out_dir / rel / "report.json", metrics::report_to_json(report));
      write_text(out_dir / rel / "report.csv", metrics::report_to_csv(report));
      write_text(out_dir / rel / "predictions.csv",
                 predictions_to_csv(prediction_rows(preds, s.corpora.target_eval)));
      write_text(out_dir / rel / "train_log.csv", log_to_csv(det.log));
      job.entry = {{"variant", vname},
                   {"detector", file_entry(out_dir, rel / "detector.ckpt")},
                   {"report_json", file_entry(out_dir, rel / "report.json")},
                   {"report_csv", file_entry(out_dir, rel / "report.csv")},
                   {"predictions", file_entry(out_dir, rel / "predictions.csv")},
                   {"train_log", file_entry(out_dir, rel / "train_log.csv")},
                   {"parameters",
                    {{"total", det.net.parameter_count()},
                     {"trainable", det.net.trainable_parameter_count()},
                     {"frozen", det.net.frozen_parameter_count()}}}};
      job.entry["detector"]["id"] = nn::checkpoint_id(ckpt);
      job.entry["provenance"] = {{"backbone_id", det.provenance.backbone_id},
                                 {"branch_id", det.provenance.branch_id}};
    });
  });

  json seed_entries = json::array();
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    json e = seeds[i].entry;
    e["variants"] = json::array();
    for (const auto& job : jobs)
      if (job.seed_index == i) e["variants"].push_back(job.entry);
    seed_entries.push_back(std::move(e));
  }
  const json manifest = {{"manifest_version", kManifestVersion},
                         {"tool_version", std::string(tool_version())},
                         {"master_seed", c.seed},
                         {"config", config_to_json(c)},
                         {"seeds", seed_entries},
                         {"complete", true}};
  stage("manifest", [&] {
    const fs::path tmp = out_dir / "manifest.json.tmp";
    write_text(tmp, manifest.dump(2) + "\n");
    fs::rename(tmp, out_dir / "manifest.json");
  });
  result.manifest = out_dir / "manifest.json";
  result.reports = jobs.size();
  result.checkpoints = jobs.size();
  return result;
}

std::string predictions_to_csv(const std::vector<PredictionRow>& rows) {
  std::string out = "example_id,attribute,probability,decision,label,race,gender\n";
  for (const auto& r : rows)
    out += std::to_string(r.example_id) + "," + r.attribute + "," + fmt_g17(r.probability) + "," +
           (r.decision ? "1" : "0") + "," + (r.label ? "1" : "0") + "," +
           std::string(datagen::to_string(r.subgroup.race)) + "," +
           std::string(datagen::to_string(r.subgroup.gender)) + "\n";
  return out;
}

std::vector<PredictionRow> read_predictions(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != "example_id,attribute,probability,decision,label,race,gender")
    throw DataError("bad prediction log header in " + path.string());
  std::vector<PredictionRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != 7) throw DataError("bad prediction log row in " + path.string());
    try {
      PredictionRow r;
      r.example_id = std::stoull(cells[0]);
      r.attribute = cells[1];
      r.probability = std::stod(cells[2]);
      r.decision = cells[3] == "1";
      r.label = cells[4] == "1";
      r.subgroup = {datagen::parse_race(cells[5]), datagen::parse_gender(cells[6])};
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw DataError("bad number in prediction log " + path.string());
    }
  }
  return rows;
}

CompareResult cmd_compare(const fs::path& report_dir, std::string_view variant_a,
                          std::string_view variant_b, std::uint64_t exact_threshold) {
  pipeline::parse_variant(variant_a);
  pipeline::parse_variant(variant_b);
  CompareResult out;
  out.variant_a = variant_a;
  out.variant_b = variant_b;
  const fs::path runs = report_dir / "runs";
  if (!fs::is_directory(runs)) throw DataError("no runs under " + report_dir.string());

  std::vector<std::pair<std::uint64_t, fs::path>> seed_dirs;
  for (const auto& e : fs::directory_iterator(runs)) {
    const std::string name = e.path().filename().string();
    if (e.is_directory() && name.rfind("seed-", 0) == 0)
      seed_dirs.emplace_back(std::stoull(name.substr(5)), e.path());
  }
  std::sort(seed_dirs.begin(), seed_dirs.end());

  json results = json::array();
  std::string csv = "seed,attribute,variant_a,variant_b,n00,n01,n10,n11,test,chi2,p_value,flag\n";
  for (const auto& [seed, dir] : seed_dirs) {
    const fs::path da = dir / std::string(variant_a), db = dir / std::string(variant_b);
    const bool has_a = fs::exists(da / "predictions.csv"), has_b = fs::exists(db / "predictions.csv");
    if (!has_a && !has_b) continue;
    if (!has_a || !has_b)
      throw DataError("missing prediction log for seed " + std::to_string(seed));
    const auto ra = metrics::report_from_json(read_text(da / "report.json"));
    const auto rb = metrics::report_from_json(read_text(db / "report.json"));
    if (ra.corpus_hash != rb.corpus_hash)
      throw DataError("corpus hash mismatch for seed " + std::to_string(seed) + ": " + ra.corpus_hash +
                      " vs " + rb.corpus_hash);
    const auto pa = read_predictions(da / "predictions.csv");
    const auto pb = read_predictions(db / "predictions.csv");
    if (pa.size() != pb.size()) throw DataError("prediction logs differ in length");

    std::vector<std::string> attrs;
    std::map<std::string, std::array<std::vector<std::uint8_t>, 3>> cols;  // a, b, label
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (pa[i].example_id != pb[i].example_id || pa[i].attribute != pb[i].attribute ||
          pa[i].label != pb[i].label)
        throw DataError("prediction logs are not aligned on the same examples");
      if (!cols.count(pa[i].attribute)) attrs.push_back(pa[i].attribute);
      auto& c = cols[pa[i].attribute];
      c[0].push_back(pa[i].decision);
      c[1].push_back(pb[i].decision);
      c[2].push_back(pa[i].label);
    }
    for (const auto& attr : attrs) {
      const auto& c = cols.at(attr);
      const auto r = stats::compare_models(c[0], c[1], c[2], exact_threshold);
      out.comparisons.push_back({seed, attr, r});
      json matrix = json::object();
      const std::string a(variant_a), b(variant_b);
      if (a == b) {
        matrix[a][a] = compare_cell(r);
      } else {
        matrix[a][a] = nullptr;
        matrix[a][b] = compare_cell(r);
        matrix[b][a] = compare_cell(swapped(r));
        matrix[b][b] = nullptr;
      }
      results.push_back({{"seed", seed}, {"attribute", attr}, {"corpus_hash", ra.corpus_hash},
                         {"matrix", matrix}});
      csv += std::to_string(seed) + "," + attr + "," + a + "," + b + "," + std::to_string(r.n00) + "," +
             std::to_string(r.n01) + "," + std::to_string(r.n10) + "," + std::to_string(r.n11) + ",";
      if (r.degenerate) csv += "degenerate,-,-,\n";
      else
        csv += std::string(stats::to_string(r.chosen_test)) + "," + fmt_g17(r.chi2) + "," +
               fmt_g17(r.p_value) + "," + (r.chosen_test == stats::TestKind::exact_binomial ? "*" : "") +
               "\n";
    }
  }
  if (out.comparisons.empty())
    throw DataError("no prediction logs for " + out.variant_a + " / " + out.variant_b);
  out.table = {{"variants", {out.variant_a, out.variant_b}},
               {"exact_test_threshold", exact_threshold},
               {"results", results}};
  out.csv = std::move(csv);
  const std::string stem = "compare_" + out.variant_a + "_" + out.variant_b;
  write_text(report_dir / (stem + ".json"), out.table.dump(2) + "\n");
  write_text(report_dir / (stem + ".csv"), out.csv);
  return out;
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

json manifest_json(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path))
    throw DataError("incomplete run: " + manifest_path.string() + " is missing");
  try {
    json m = json::parse(read_text(manifest_path));
    if (!m.value("complete", false) || !m.contains("seeds"))
      throw DataError("incomplete manifest " + manifest_path.string());
    return m;
  } catch (const json::exception& e) {
    throw DataError("incomplete manifest " + manifest_path.string() + ": " + e.what());
  }
}

fs::path verified(const fs::path& root, const json& entry) {
  const fs::path p = root / entry.at("path").get<std::string>();
  if (!fs::exists(p)) throw DataError("incomplete manifest: missing " + p.string());
  if (sha256_file(p) != entry.at("sha256").get<std::string>())
    throw DataError("hash mismatch for " + p.string());
  return p;
}

json summary_json(const MetricSummary& s) { return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; }

std::string pct(const MetricSummary& s, int digits, bool std_value) {
  if (s.n == 0) return "-";
  return fmt_fixed(100.0 * (std_value ? s.std : s.mean), digits);
}

}  // namespace

ReportResult cmd_report(const fs::path& manifest_path) {
  const json m = manifest_json(manifest_path);
  const fs::path root = manifest_path.parent_path();

  // variant -> attribute -> per-seed reports
  std::vector<std::string> variant_order;
  std::map<std::string, std::vector<metrics::SubgroupReport>> reports;
  for (const auto& s : m.at("seeds")) {
    for (const auto& key : {"backbone", "branch"}) verified(root, s.at(key));
    for (const auto& [k, v] : s.at("corpora").items()) verified(root, v);
    for (const auto& v : s.at("variants")) {
      for (const auto& key : {"detector", "report_csv", "predictions", "train_log"}) verified(root, v.at(key));
      const auto name = v.at("variant").get<std::string>();
      if (!reports.count(name)) variant_order.push_back(name);
      reports[name].push_back(metrics::report_from_json(read_text(verified(root, v.at("report_json")))));
    }
  }

  ReportResult out;
  std::string csv = "variant,attribute,seeds";
  auto add_group = [&](const std::string& tag) {
    csv += "," + tag + "_acc," + tag + "_acc_std," + tag + "_afr," + tag + "_afr_std";
  };
  for (std::size_t k = 0; k < datagen::kRaceCount; ++k)
    add_group(std::string(datagen::to_string(static_cast<datagen::Race>(k))));
  add_group("G1");
  add_group("G2");
  csv += ",total_acc,total_acc_std,race_mafr,race_mafr_std,gender_mafr,gender_mafr_std\n";

  json rows = json::array();
  for (const auto& variant : variant_order) {
    const auto& per_seed = reports.at(variant);
    for (const auto& attr_report : per_seed.front().attributes) {
      const std::string& attr = attr_report.attribute;
      AggregateRow row;
      row.variant = variant;
      row.attribute = attr;
      row.seeds = per_seed.size();
      auto collect = [&](auto pick) {
        std::vector<double> v;
        for (const auto& r : per_seed)
          if (auto x = pick(r.attribute(attr))) v.push_back(*x);
        return summarize(v);
      };
      for (std::size_t k = 0; k < datagen::kRaceCount; ++k) {
        row.race_acc[k] = collect([&](const auto& a) { return a.race[k].accuracy; });
        row.race_afr[k] = collect([&](const auto& a) { return a.race[k].afr; });
      }
      for (std::size_t k = 0; k < datagen::kKnownGenders; ++k) {
        row.gender_acc[k] = collect([&](const auto& a) { return a.gender[k].accuracy; });
        row.gender_afr[k] = collect([&](const auto& a) { return a.gender[k].afr; });
      }
      row.total_acc = collect([](const auto& a) { return std::optional(a.overall_accuracy); });
      row.race_mafr_seeds = collect([](const auto& a) { return a.race_mafr; });
      row.gender_mafr_seeds = collect([](const auto& a) { return a.gender_mafr; });
      auto mean_afrs = [](const auto& cells) {
        std::vector<std::optional<double>> v;
        for (const auto& s : cells) v.push_back(s.n ? std::optional(s.mean) : std::nullopt);
        return v;
      };
      const auto race_means = mean_afrs(row.race_afr);
      const auto gender_means = mean_afrs(row.gender_afr);
      auto any = [](const auto& v) { return std::any_of(v.begin(), v.end(), [](auto x) { return x.has_value(); }); };
      if (any(race_means)) row.race_mafr = metrics::mafr(race_means);
      if (any(gender_means)) row.gender_mafr = metrics::mafr(gender_means);

      csv += variant + "," + attr + "," + std::to_string(row.seeds);
      auto add = [&](const MetricSummary& acc, const MetricSummary& afr) {
        csv += "," + pct(acc, 1, false) + "," + pct(acc, 2, true) + "," + pct(afr, 1, false) + "," +
               pct(afr, 2, true);
      };
      for (std::size_t k = 0; k < datagen::kRaceCount; ++k) add(row.race_acc[k], row.race_afr[k]);
      for (std::size_t k = 0; k < datagen::kKnownGenders; ++k) add(row.gender_acc[k], row.gender_afr[k]);
      csv += "," + fmt_fixed(100.0 * row.total_acc.mean, 2) + "," + pct(row.total_acc, 2, true) + "," +
             metrics::format_percent(row.race_mafr) + "," + pct(row.race_mafr_seeds, 2, true) + "," +
             metrics::format_percent(row.gender_mafr) + "," + pct(row.gender_mafr_seeds, 2, true) + "\n";

      json race = json::object(), gender = json::object();
      for (std::size_t k = 0; k < datagen::kRaceCount; ++k)
        race[std::string(datagen::to_string(static_cast<datagen::Race>(k)))] = {
            {"accuracy", summary_json(row.race_acc[k])}, {"afr", summary_json(row.race_afr[k])}};
      for (std::size_t k = 0; k < datagen::kKnownGenders; ++k)
        gender[std::string(datagen::to_string(static_cast<datagen::Gender>(k)))] = {
            {"accuracy", summary_json(row.gender_acc[k])}, {"afr", summary_json(row.gender_afr[k])}};
      rows.push_back({{"variant", variant},
                      {"attribute", attr},
                      {"seeds", row.seeds},
                      {"race", race},
                      {"gender", gender},
                      {"total_accuracy", summary_json(row.total_acc)},
                      {"race_mafr", row.race_mafr ? json(*row.race_mafr) : json(nullptr)},
                      {"gender_mafr", row.gender_mafr ? json(*row.gender_mafr) : json(nullptr)},
                      {"race_mafr_per_seed", summary_json(row.race_mafr_seeds)},
                      {"gender_mafr_per_seed", summary_json(row.gender_mafr_seeds)}});
      out.rows.push_back(std::move(row));
    }
  }
  out.csv = std::move(csv);
  out.json = {{"master_seed", m.at("master_seed")}, {"rows", rows}};
  write_text(root / "summary.csv", out.csv);
  write_text(root / "summary.json", out.json.dump(2) + "\n");
  return out;
}

std::map<std::uint64_t, double> subgroup_accuracy_by_seed(const fs::path& manifest_path,
                                                          std::string_view variant,
                                                          std::string_view attribute,
                                                          datagen::Race race) {
  const json m = manifest_json(manifest_path);
  const fs::path root = manifest_path.parent_path();
  std::map<std::uint64_t, double> out;
  for (const auto& s : m.at("seeds"))
    for (const auto& v : s.at("variants")) {
      if (v.at("variant").get<std::string>() != variant) continue;
      const auto report = metrics::report_from_json(read_text(verified(root, v.at("report_json"))));
      const auto& cell = report.attribute(attribute).race[static_cast<std::size_t>(race)];
      if (!cell.accuracy) throw DataError("subgroup has no evaluation examples");
      out[s.at("seed").get<std::uint64_t>()] = *cell.accuracy;
    }
  return out;
}

}  // namespace twofold::experiment
