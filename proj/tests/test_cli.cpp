#include "support.hpp"

#include "twofold/error.hpp"
#include "twofold/experiment.hpp"
#include "twofold/hash.hpp"
#include "twofold/metrics.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

namespace fs = std::filesystem;
namespace ex = twofold::experiment;
using twofold::testing::scratch_dir;
using nlohmann::json;

namespace {

json small_config_json() {
  return json::parse(R"({
    "seed": 3,
    "seeds": "1..2",
    "generator": {"feature_dim": 6, "attributes": ["smiling"],
                  "subgroup_bias": [{"attribute": "smiling", "race": "S1", "value": 2.0}]},
    "held_out_size": 160, "train_size": 120, "eval_size": 100,
    "identities": 6, "examples_per_identity": 8,
    "epochs": 2, "batch_size": 32, "demographic_epochs": 2, "backbone_epochs": 2,
    "rep_dim": 4, "backbone_dim": 6, "trunk_dim": 4
  })");
}

ex::ExperimentConfig small_config() { return ex::parse_config(small_config_json()); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

struct Exec {
  int code;
  std::string err;
};

// Runs the installed binary with stderr captured.
Exec run_cli(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(TWOFOLD_CLI) + " " + args + " >" + (dir / "stdout.txt").string() +
                          " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::size_t count_files(const fs::path& root, const std::string& name) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == name) ++n;
  return n;
}

// One completed small run shared by the read-only tests.
const fs::path& shared_run() {
  static const fs::path dir = [] {
    auto d = scratch_dir("cli-shared-" + std::to_string(::getpid()));
    ex::cmd_run(small_config(), d);
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Config, SeedListsAndVariants) {
  EXPECT_EQ(ex::parse_seed_list("1..4"), (std::vector<std::uint64_t>{1, 2, 3, 4}));
  EXPECT_EQ(ex::parse_seed_list("2,5,9"), (std::vector<std::uint64_t>{2, 5, 9}));
  EXPECT_THROW(ex::parse_seed_list("4..1"), twofold::ConfigError);
  EXPECT_THROW(ex::parse_seed_list("x"), twofold::ConfigError);
  EXPECT_EQ(ex::parse_variant_list("VANILLA,PLUS_R").size(), 2u);
  EXPECT_THROW(ex::parse_variant_list("VANILLA,NOPE"), twofold::ConfigError);
}

TEST(Config, RoundTripsThroughJson) {
  const auto c = small_config();
  EXPECT_EQ(ex::config_to_json(ex::parse_config(ex::config_to_json(c))), ex::config_to_json(c));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(c.generator.subgroup_bias.at(0).race, twofold::datagen::Race::S1);
  EXPECT_FALSE(c.generator.subgroup_bias.at(0).gender.has_value());
}

TEST(Config, UnknownAndBadFieldsAreNamed) {
  auto j = small_config_json();
  j["epoch"] = 3;
  try {
    ex::parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const twofold::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
  j = small_config_json();
  j["lr"] = "fast";
  try {
    ex::parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const twofold::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lr"), std::string::npos);
  }
  j = small_config_json();
  j["generator"]["noise"] = 1.0;
  EXPECT_THROW(ex::parse_config(j), twofold::ConfigError);
  j = small_config_json();
  j["skew"] = "no-such-skew";
  EXPECT_THROW(ex::parse_config(j), twofold::Error);
}

TEST(Generate, WritesConfiguredSizesWithStableHashes) {
  auto j = small_config_json();
  j["train_size"] = 6171;
  j["seeds"] = json::array({1});
  const auto c = ex::parse_config(j);
  const auto a = scratch_dir("gen-a"), b = scratch_dir("gen-b");
  const auto ra = ex::cmd_generate(c, a);
  const auto rb = ex::cmd_generate(c, b);
  EXPECT_EQ(ra.hashes, rb.hashes);
  ASSERT_EQ(ra.hashes.size(), 4u);
  for (const auto& [rel, hash] : ra.hashes) EXPECT_EQ(twofold::sha256_file(a / rel), hash);
  const auto train = twofold::datagen::read_corpus_csv(a / "corpora" / "seed-1" / "target_train.csv");
  EXPECT_EQ(train.size(), 6171);
  EXPECT_EQ(train.pool, twofold::datagen::IdentityPool::Target);
  EXPECT_TRUE(fs::exists(a / "corpora" / "hashes.json"));
  // Regenerating into a populated directory keeps the files.
  EXPECT_EQ(ex::cmd_generate(c, a).hashes, ra.hashes);
}

TEST(Generate, ConflictingCorpusIsDataError) {
  const auto c = small_config();
  const auto dir = scratch_dir("gen-conflict");
  ex::cmd_generate(c, dir);
  auto other = small_config_json();
  other["generator"]["race_radius"] = 4.0;
  EXPECT_THROW(ex::cmd_generate(ex::parse_config(other), dir), twofold::DataError);
}

TEST(Cli, GenerateMatchesLibraryHashes) {
  const auto dir = scratch_dir("cli-gen");
  write(dir / "config.json", small_config_json().dump());
  const auto r = run_cli("generate --config " + (dir / "config.json").string() + " --out " + (dir / "out").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lib = ex::cmd_generate(small_config(), scratch_dir("cli-gen-lib"));
  for (const auto& [rel, hash] : lib.hashes) EXPECT_EQ(twofold::sha256_file(dir / "out" / rel), hash);
}

TEST(Cli, MalformedJsonExitsTwoNamingTheProblem) {
  const auto dir = scratch_dir("cli-bad");
  write(dir / "broken.json", R"({"seed": 1, "epochs": })");
  auto r = run_cli("run --config " + (dir / "broken.json").string() + " --out " + (dir / "out").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("malformed JSON"), std::string::npos) << r.err;

  auto j = small_config_json();
  j["learning_rate"] = 0.1;
  write(dir / "unknown.json", j.dump());
  r = run_cli("run --config " + (dir / "unknown.json").string() + " --out " + (dir / "out").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos) << r.err;

  j = small_config_json();
  j["batch_size"] = 0;
  write(dir / "bad.json", j.dump());
  r = run_cli("generate --config " + (dir / "bad.json").string() + " --out " + (dir / "out").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("batch_size"), std::string::npos) << r.err;

  EXPECT_EQ(run_cli("run --variants PLUS_Q --out " + (dir / "out").string(), dir).code, 2);
  EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
  EXPECT_EQ(run_cli("report --out " + (dir / "nowhere").string(), dir).code, 3);
}

TEST(Run, TenSeedsThreeVariantsGiveThirtyReports) {
  auto j = small_config_json();
  j["seeds"] = "1..10";
  j["workers"] = 2;
  const auto dir = scratch_dir("run-30");
  const auto r = ex::cmd_run(ex::parse_config(j), dir);
  EXPECT_EQ(r.reports, 30u);
  EXPECT_EQ(r.checkpoints, 30u);
  EXPECT_FALSE(r.previous_run_incomplete);
  EXPECT_EQ(count_files(dir / "runs", "report.json"), 30u);
  EXPECT_EQ(count_files(dir / "runs", "detector.ckpt"), 30u);
  EXPECT_EQ(count_files(dir / "runs", "backbone.ckpt"), 10u);
  const json m = json::parse(slurp(r.manifest));
  EXPECT_TRUE(m.at("complete").get<bool>());
  EXPECT_EQ(m.at("seeds").size(), 10u);
  for (const auto& s : m.at("seeds")) EXPECT_EQ(s.at("variants").size(), 3u);
}

TEST(Run, RerunFromManifestIsByteIdentical) {
  const auto& first = shared_run();
  const auto second = scratch_dir("cli-rerun");
  ex::cmd_run(ex::load_config(first / "manifest.json"), second);
  EXPECT_EQ(slurp(first / "manifest.json"), slurp(second / "manifest.json"));
  for (const auto& e : fs::recursive_directory_iterator(first / "runs")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), first);
    EXPECT_EQ(slurp(e.path()), slurp(second / rel)) << rel;
  }
}

TEST(Run, MissingManifestMarksIncompleteRun) {
  const auto dir = scratch_dir("cli-incomplete");
  const auto c = small_config();
  ex::cmd_run(c, dir);
  EXPECT_FALSE(ex::run_is_incomplete(dir));
  fs::remove(dir / "manifest.json");
  EXPECT_TRUE(ex::run_is_incomplete(dir));
  EXPECT_THROW(ex::cmd_report(dir / "manifest.json"), twofold::DataError);
  const auto r = ex::cmd_run(c, dir);
  EXPECT_TRUE(r.previous_run_incomplete);
  EXPECT_FALSE(ex::run_is_incomplete(dir));
  EXPECT_NO_THROW(ex::cmd_report(dir / "manifest.json"));
}

TEST(Run, CheckpointsRecordModeAndProvenance) {
  const auto& dir = shared_run();
  const auto backbone = twofold::nn::load_checkpoint(dir / "runs" / "seed-1" / "backbone.ckpt");
  EXPECT_EQ(backbone.metadata.at("mode"), "pretrained-encoder");
  const json m = json::parse(slurp(dir / "manifest.json"));
  const auto& s = m.at("seeds").at(0);
  for (const auto& v : s.at("variants")) {
    EXPECT_EQ(v.at("provenance").at("backbone_id"), s.at("backbone").at("id"));
    EXPECT_EQ(v.at("provenance").at("branch_id"), s.at("branch").at("id"));
  }

  auto j = small_config_json();
  j["mode"] = "oracle-features";
  j["seeds"] = json::array({1});
  const auto odir = scratch_dir("cli-oracle");
  ex::cmd_run(ex::parse_config(j), odir);
  EXPECT_EQ(twofold::nn::load_checkpoint(odir / "runs" / "seed-1" / "backbone.ckpt").metadata.at("mode"),
            "oracle-features");
}

TEST(Compare, SelfComparisonIsDegenerate) {
  const auto r = ex::cmd_compare(shared_run(), "PLUS_R", "PLUS_R");
  ASSERT_EQ(r.comparisons.size(), 2u);
  for (const auto& c : r.comparisons) {
    EXPECT_TRUE(c.result.degenerate);
    EXPECT_EQ(c.result.b() + c.result.c(), 0u);
  }
  for (const auto& row : r.table.at("results"))
    EXPECT_TRUE(row.at("matrix").at("PLUS_R").at("PLUS_R").at("p_value").is_null());
}

TEST(Compare, DiscordantCountsMatchHandTally) {
  const auto& dir = shared_run();
  const auto r = ex::cmd_compare(dir, "VANILLA", "PLUS_R");
  ASSERT_EQ(r.comparisons.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "compare_VANILLA_PLUS_R.json"));
  EXPECT_TRUE(fs::exists(dir / "compare_VANILLA_PLUS_R.csv"));
  for (const auto& c : r.comparisons) {
    const auto seed = "seed-" + std::to_string(c.seed);
    const auto a = ex::read_predictions(dir / "runs" / seed / "VANILLA" / "predictions.csv");
    const auto b = ex::read_predictions(dir / "runs" / seed / "PLUS_R" / "predictions.csv");
    std::uint64_t n01 = 0, n10 = 0, n00 = 0, n11 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const bool ok_a = a[i].decision == a[i].label, ok_b = b[i].decision == b[i].label;
      n01 += !ok_a && ok_b;
      n10 += ok_a && !ok_b;
      n00 += !ok_a && !ok_b;
      n11 += ok_a && ok_b;
    }
    EXPECT_EQ(c.result.b(), n01);
    EXPECT_EQ(c.result.c(), n10);
    EXPECT_EQ(c.result.n00, n00);
    EXPECT_EQ(c.result.n11, n11);
  }
}

TEST(Compare, DifferentCorporaAreRejected) {
  const auto dir = scratch_dir("cli-mismatch");
  fs::copy(shared_run(), dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  const fs::path report = dir / "runs" / "seed-2" / "PLUS_R" / "report.json";
  auto parsed = twofold::metrics::report_from_json(slurp(report));
  parsed.corpus_hash = std::string(64, '0');
  write(report, twofold::metrics::report_to_json(parsed));
  EXPECT_THROW(ex::cmd_compare(dir, "VANILLA", "PLUS_R"), twofold::DataError);
  const auto r = run_cli("compare --out " + dir.string() + " VANILLA PLUS_R", dir);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("hash mismatch"), std::string::npos) << r.err;
}

TEST(Report, MeansAndStdsMatchPerSeedValues) {
  auto j = small_config_json();
  j["seeds"] = "1..10";
  const auto dir = scratch_dir("cli-report10");
  ex::cmd_run(ex::parse_config(j), dir);
  const auto r = ex::cmd_report(dir / "manifest.json");
  EXPECT_TRUE(fs::exists(dir / "summary.csv"));
  ASSERT_EQ(r.rows.size(), 3u);
  const json m = json::parse(slurp(dir / "manifest.json"));
  for (const auto& row : r.rows) {
    std::vector<double> totals;
    std::array<std::vector<double>, 5> race_afr;
    for (const auto& s : m.at("seeds"))
      for (const auto& v : s.at("variants"))
        if (v.at("variant") == row.variant) {
          const auto rep = twofold::metrics::report_from_json(slurp(dir / v.at("report_json").at("path").get<std::string>()));
          const auto& a = rep.attribute(row.attribute);
          totals.push_back(a.overall_accuracy);
          for (std::size_t k = 0; k < 5; ++k)
            if (a.race[k].afr) race_afr[k].push_back(*a.race[k].afr);
        }
    ASSERT_EQ(totals.size(), 10u);
    double sum = 0;
    for (double t : totals) sum += t;
    const double mean = sum / 10.0;
    double ss = 0;
    for (double t : totals) ss += (t - mean) * (t - mean);
    EXPECT_NEAR(row.total_acc.mean, mean, 1e-12);
    EXPECT_NEAR(row.total_acc.std, std::sqrt(ss / 9.0), 1e-12);

    // Aggregate mAFR is mafr() of the per-subgroup mean AFRs.
    std::vector<std::optional<double>> means;
    for (const auto& v : race_afr) {
      if (v.empty()) {
        means.emplace_back();
        continue;
      }
      double s = 0;
      for (double x : v) s += x;
      means.emplace_back(s / static_cast<double>(v.size()));
    }
    EXPECT_NEAR(row.race_mafr.value(), twofold::metrics::mafr(means), 1e-12);
  }
}

TEST(Report, SingleSeedHasZeroStd) {
  auto j = small_config_json();
  j["seeds"] = json::array({4});
  const auto dir = scratch_dir("cli-report1");
  ex::cmd_run(ex::parse_config(j), dir);
  const auto r = ex::cmd_report(dir / "manifest.json");
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.seeds, 1u);
    EXPECT_EQ(row.total_acc.std, 0.0);
    for (const auto& s : row.race_acc) EXPECT_EQ(s.std, 0.0);
  }
}

TEST(Report, TamperedFileIsDataError) {
  const auto dir = scratch_dir("cli-tamper");
  fs::copy(shared_run(), dir, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  std::ofstream(dir / "runs" / "seed-1" / "VANILLA" / "report.csv", std::ios::app) << "x";
  EXPECT_THROW(ex::cmd_report(dir / "manifest.json"), twofold::DataError);
  const auto r = run_cli("report --manifest " + (dir / "manifest.json").string(), dir);
  EXPECT_EQ(r.code, 3);
}

TEST(Summaries, SampleStandardDeviation) {
  const auto s = ex::summarize({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(ex::summarize({0.7}).std, 0.0);
  EXPECT_EQ(ex::summarize({}).n, 0u);
}
