// twofold: generate corpora, run the twofold pipeline, compare variants and
// aggregate reports.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 pipeline error.

#include "twofold/error.hpp"
#include "twofold/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
namespace ex = twofold::experiment;

namespace {

fs::path default_out() {
  if (const char* root = std::getenv("TWOFOLD_OUT_ROOT"); root && *root) return root;
  return "twofold-out";
}

struct RunOptions {
  std::string config;
  std::string out;
  std::string seeds;
  std::string variants;
  std::string mode;
  int workers = 0;
};

ex::ExperimentConfig resolve(const RunOptions& o) {
  ex::ExperimentConfig c = o.config.empty() ? ex::ExperimentConfig{} : ex::load_config(o.config);
  if (!o.seeds.empty()) c.seeds = ex::parse_seed_list(o.seeds);
  if (!o.variants.empty()) c.variants = ex::parse_variant_list(o.variants);
  if (!o.mode.empty()) c.mode = twofold::pipeline::parse_feature_mode(o.mode);
  if (o.workers > 0) c.workers = o.workers;
  // Round-trip through the validator so flag overrides are checked too.
  return ex::parse_config(ex::config_to_json(c));
}

void add_run_flags(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config, "experiment config JSON (or a manifest to re-run)");
  cmd->add_option("--out", o.out, "output directory (default $TWOFOLD_OUT_ROOT or ./twofold-out)");
  cmd->add_option("--seeds", o.seeds, "seed list, e.g. 1..10 or 1,2,5");
  cmd->add_option("--variants", o.variants, "comma separated, e.g. VANILLA,PLUS_R,PARAM_MATCHED");
  cmd->add_option("--workers", o.workers, "parallel jobs")->check(CLI::PositiveNumber);
  cmd->add_option("--mode", o.mode, "feature mode")
      ->check(CLI::IsMember({"oracle-features", "pretrained-encoder"}));
}

int run(int argc, char** argv) {
  CLI::App app{"twofold experiment driver"};
  app.set_version_flag("--version", std::string(ex::tool_version()));
  app.require_subcommand(1);

  RunOptions gen_opts, run_opts;
  auto* gen = app.add_subcommand("generate", "write HELD_OUT and TARGET corpora with hashes");
  add_run_flags(gen, gen_opts);
  auto* runc = app.add_subcommand("run", "train every variant and seed, write reports and manifest");
  add_run_flags(runc, run_opts);

  std::string cmp_dir, variant_a, variant_b;
  std::uint64_t exact_threshold = twofold::stats::kDefaultExactThreshold;
  auto* cmp = app.add_subcommand("compare", "paired comparison of two variants from prediction logs");
  cmp->add_option("--out", cmp_dir, "run directory holding runs/");
  cmp->add_option("variant_a", variant_a)->required();
  cmp->add_option("variant_b", variant_b)->required();
  cmp->add_option("--exact-threshold", exact_threshold, "use the exact test when b+c is below this");

  std::string manifest, report_dir;
  auto* rep = app.add_subcommand("report", "aggregate per-seed reports listed in a manifest");
  rep->add_option("--manifest", manifest, "manifest.json (default <out>/manifest.json)");
  rep->add_option("--out", report_dir, "run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const auto c = resolve(gen_opts);
      const fs::path out = gen_opts.out.empty() ? default_out() : fs::path(gen_opts.out);
      const auto r = ex::cmd_generate(c, out);
      for (const auto& [path, hash] : r.hashes) std::cout << hash << "  " << path << "\n";
    } else if (*runc) {
      const auto c = resolve(run_opts);
      const fs::path out = run_opts.out.empty() ? default_out() : fs::path(run_opts.out);
      const auto r = ex::cmd_run(c, out);
      std::cout << "wrote " << r.reports << " reports and " << r.checkpoints << " checkpoints; manifest "
                << r.manifest.string() << "\n";
    } else if (*cmp) {
      const fs::path dir = cmp_dir.empty() ? default_out() : fs::path(cmp_dir);
      const auto r = ex::cmd_compare(dir, variant_a, variant_b, exact_threshold);
      std::cout << r.csv;
    } else if (*rep) {
      fs::path m = manifest;
      if (m.empty()) m = (report_dir.empty() ? default_out() : fs::path(report_dir)) / "manifest.json";
      std::cout << ex::cmd_report(m).csv;
    }
  } catch (const twofold::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const twofold::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "pipeline error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
