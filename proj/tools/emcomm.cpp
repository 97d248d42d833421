#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "emcomm/runner.hpp"

using namespace emcomm;

namespace {

int cmd_train(const std::string& config_path, std::size_t workers) {
  ExperimentConfig c = load_config(config_path);
  if (workers > 0) c.workers = workers;
  std::cerr << "config " << config_hash(c) << " -> " << c.output_dir << "\n";
  const auto results = run_experiment(c);
  std::printf("alpha,seed,status,train_acc,gen_acc,topsim,dir\n");
  int failed = 0;
  for (const auto& r : results) {
    std::printf("%s,%llu,%s,%.4f,%.4f,%.4f%s,%s\n", alpha_label(r.alpha).c_str(),
                static_cast<unsigned long long>(r.seed), r.failed ? "failed" : "ok", r.train_acc, r.gen_acc, r.topsim,
                r.topsim_degenerate ? "(degenerate)" : "", r.dir.c_str());
    failed += r.failed ? 1 : 0;
  }
  return failed == 0 ? 0 : 3;
}

int cmd_eval(const std::string& dir, std::size_t rounds) {
  const LoadedRun run = load_run(dir);
  const auto& c = run.config;
  const double tr = evaluate(run.agents, run.world, Split::train, rounds, c.train.candidates, run.seed, c.train.distractors);
  const double ge = evaluate(run.agents, run.world, Split::eval, rounds, c.train.candidates, run.seed, c.train.distractors);
  std::printf("train_acc,%.6f\ngen_acc,%.6f\nrounds,%zu\n", tr, ge, rounds);
  return 0;
}

int cmd_analyze(const std::string& dir) {
  const LoadedRun run = load_run(dir);
  AnalysisResult analysis;
  LanguageTable table;
  const RunResult r = score_agents(run.config, run.world, run.agents, run.seed, &analysis, &table);
  const fs::path d(dir);
  write_text(d / "language.txt", format_language(table, run.world));
  write_text(d / "discrepancy.csv", format_discrepancy(analysis.discrepancy));
  std::printf("topsim,%.6f%s\n", r.topsim, r.topsim_degenerate ? ",degenerate" : "");
  std::printf("train_acc,%.6f\ngen_acc,%.6f\n", r.train_acc, r.gen_acc);
  if (analysis.discrepancy.empty()) {
    std::printf("discrepancy,n/a (speaker and listener attend over different sets)\n");
  } else {
    std::vector<double> ok, bad;
    for (const auto& s : analysis.discrepancy) (s.success ? ok : bad).push_back(s.discrepancy);
    std::printf("discrepancy_success,%.6f,n=%zu\ndiscrepancy_failure,%.6f,n=%zu\n", r.discrepancy_success, ok.size(),
                r.discrepancy_failure, bad.size());
    if (!ok.empty() && !bad.empty()) {
      const KsResult ks = ks_statistic(ok, bad);
      std::printf("ks_d,%.6f\nks_p,%.3g\n", ks.d, ks.p);
    }
  }
  if (analysis.association) {
    write_text(d / "association.csv", format_association(*analysis.association));
    std::printf("association,%s\n", (d / "association.csv").string().c_str());
  } else {
    std::printf("association,n/a (speaker has no patch attention)\n");
  }
  return 0;
}

int cmd_report(const std::string& sweep, std::size_t top_k) {
  const auto runs = collect_runs(sweep);
  if (runs.empty()) throw ConfigError("no completed runs under '" + sweep + "'");
  const fs::path out = fs::path(sweep) / "report";
  const ReportSummary rep = emit_plots(group_runs(runs), top_k, out);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  std::printf("setting,n,mean_train_acc,mean_gen_acc,mean_topsim\n");
  for (const auto& g : rep.selected) {
    double tr = 0, ge = 0, ts = 0;
    for (const auto& r : g.runs) {
      tr += r.train_acc;
      ge += r.gen_acc;
      ts += r.topsim;
    }
    const double n = static_cast<double>(g.runs.size());
    std::printf("%s,%zu,%.4f,%.4f,%.4f\n", g.label.c_str(), g.runs.size(), tr / n, ge / n, ts / n);
  }
  std::cerr << "plot data written to " << out.string() << "\n";
  return 0;
}

int cmd_gen_features(const std::string& spec_path, const std::string& out) {
  const ExperimentConfig c = load_config(spec_path);
  if (c.world.kind == WorldKind::feature_file) throw ConfigError("gen-features: world must be synthetic");
  const World world = build_world(c);
  Rng rng(derive_seed(c.world_seed, 40));
  const FeatureDataset ds = synthesize_dataset(world, c.instances_per_type, rng);
  save_feature_file(out, ds);
  std::printf("wrote %zu instances (%ux%u patches, dim %u) to %s\n", ds.records.size(), ds.grid_h, ds.grid_w, ds.dim,
              out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referential game training and analysis"};
  app.require_subcommand(1);

  std::string config_path, run, sweep, spec, out;
  std::size_t workers = 0, rounds = 15000, top_k = 10;

  auto* train = app.add_subcommand("train", "Train every (alpha, seed) run of a config");
  train->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  train->add_option("--workers", workers, "concurrent runs (overrides the config)");

  auto* eval = app.add_subcommand("eval", "Re-evaluate a trained run");
  eval->add_option("--run", run, "run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--rounds", rounds, "episodes per split")->required();

  auto* analyze = app.add_subcommand("analyze", "TopSim, symbol-concept association and attention discrepancy");
  analyze->add_option("--run", run, "run directory")->required()->check(CLI::ExistingDirectory);

  auto* report = app.add_subcommand("report", "Plot data for a sweep");
  report->add_option("--sweep", sweep, "sweep output directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--top-k", top_k, "runs kept per setting, by GenAcc (0 keeps all)")->required();

  auto* gen = app.add_subcommand("gen-features", "Write a synthetic feature file");
  gen->add_option("--spec", spec, "world config")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(config_path, workers);
    if (*eval) return cmd_eval(run, rounds);
    if (*analyze) return cmd_analyze(run);
    if (*report) return cmd_report(sweep, top_k);
    if (*gen) return cmd_gen_features(spec, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
