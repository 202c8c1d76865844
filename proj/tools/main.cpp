#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wsc/bayes_meta.hpp"
#include "wsc/csv.hpp"
#include "wsc/dataset.hpp"
#include "wsc/errors.hpp"
#include "wsc/freq_meta.hpp"
#include "wsc/reports.hpp"
#include "wsc/simgen.hpp"

namespace {

using namespace wsc;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading " + path);
  return ss.str();
}

// --out writes atomically; no --out streams to stdout
void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::fwrite(text.data(), 1, text.size(), stdout);
    return;
  }
  write_file_atomic(out_path, text);
}

std::vector<Level> levels_from_flag(const std::string& s) {
  if (s == "all") return {Level::kStudy, Level::kHypothesis, Level::kContrast};
  const auto lv = level_from_string(s);
  if (!lv) throw ConfigError("unknown level '" + s + "'");
  return {*lv};
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const SingularDesign& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const TooFewClusters& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const NonConvergence& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  } catch (const NotConverged& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 4;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wscbias: design-induced bias in observational studies, quantified from "
               "within-study comparisons"};
  app.require_subcommand(1);

  std::string contrasts_path, studies_path, out_path, format = "csv";
  int digits = 0;

  auto add_data_options = [&](CLI::App* sub) {
    sub->add_option("--contrasts", contrasts_path, "contrast-level CSV")->required();
    sub->add_option("--studies", studies_path, "study-level CSV")->required();
  };
  auto add_output_options = [&](CLI::App* sub, bool with_format) {
    sub->add_option("--out", out_path, "output path (stdout when omitted; written atomically)");
    if (with_format)
      sub->add_option("--format", format, "output format")
          ->check(CLI::IsMember({"csv", "json"}))
          ->capture_default_str();
    sub->add_option("--digits", digits, "significant digits for display (0 = full precision)")
        ->check(CLI::Range(0, 17))
        ->capture_default_str();
  };

  // ingest
  auto* c_ingest = app.add_subcommand("ingest", "validate a contrasts/studies file pair");
  add_data_options(c_ingest);

  // describe
  std::string describe_level = "all";
  double rope = 0.10;
  auto* c_describe = app.add_subcommand("describe", "descriptive bias tables per design cell");
  add_data_options(c_describe);
  c_describe->add_option("--level", describe_level, "aggregation level")
      ->check(CLI::IsMember({"contrast", "hypothesis", "study", "all"}))
      ->capture_default_str();
  c_describe->add_option("--rope", rope, "half-width of the negligible-bias region")
      ->capture_default_str();
  add_output_options(c_describe, true);

  // fit
  std::string engine;
  double rho = 0.8, pi_level = 0.95;
  bool covariates = false;
  int chains = 4, iters = 2000, warmup = 1000;
  double rhat_max = 1.01, ess_min = 400.0;
  bool no_gate = false;
  std::uint64_t seed = 0;
  auto* c_fit = app.add_subcommand("fit", "meta-regression estimates of bias per design cell");
  add_data_options(c_fit);
  c_fit->add_option("--engine", engine, "estimation engine")
      ->check(CLI::IsMember({"freq", "bayes"}))
      ->required();
  c_fit->add_option("--rho", rho, "sampling-error correlation within study")
      ->capture_default_str();
  c_fit->add_option("--rope", rope, "half-width of the negligible-bias region")
      ->capture_default_str();
  c_fit->add_flag("--covariates", covariates,
                  "adjust the mean model for study characteristics (freq engine; the bayes "
                  "model always carries them)");
  c_fit->add_option("--pi-level", pi_level, "coverage of prediction intervals")
      ->capture_default_str();
  c_fit->add_option("--chains", chains, "MCMC chains (bayes)")->capture_default_str();
  c_fit->add_option("--iters", iters, "iterations per chain, warmup included (bayes)")
      ->capture_default_str();
  c_fit->add_option("--warmup", warmup, "warmup iterations per chain (bayes)")
      ->capture_default_str();
  c_fit->add_option("--seed", seed, "RNG seed (required for bayes)");
  c_fit->add_option("--rhat-max", rhat_max, "split R-hat ceiling of the convergence gate (bayes)")
      ->capture_default_str();
  c_fit->add_option("--ess-min", ess_min, "bulk ESS floor of the convergence gate (bayes)")
      ->capture_default_str();
  c_fit->add_flag("--no-convergence-check", no_gate,
                  "emit results and diagnostics even when the convergence gate fails (bayes)");
  add_output_options(c_fit, true);

  // simulate
  std::string config_path, sim_engine = "freq";
  int replications = 100;
  bool sbc_flag = false;
  auto* c_sim = app.add_subcommand("simulate", "recovery or calibration study from a generator config");
  c_sim->add_option("--config", config_path, "generator config JSON")->required();
  c_sim->add_option("--engine", sim_engine, "engine fitted to each replicate")
      ->check(CLI::IsMember({"freq", "bayes"}))
      ->capture_default_str();
  c_sim->add_flag("--sbc", sbc_flag,
                  "rank-calibration study instead of recovery (hyperdrawn truth, bayes engine)");
  c_sim->add_option("--replications", replications, "number of replicates")
      ->check(CLI::Range(1, 1000000))
      ->capture_default_str();
  c_sim->add_option("--seed", seed, "master RNG seed (required; overrides the config)");
  add_output_options(c_sim, false);

  // report
  std::vector<std::string> inputs;
  std::string report_level = "hypothesis";
  auto* c_report = app.add_subcommand("report", "long-format figure rows from describe/fit outputs");
  c_report->add_option("--inputs", inputs, "describe/fit output files (either format)")
      ->required()
      ->expected(-1);
  c_report->add_option("--level", report_level, "level to extract")
      ->check(CLI::IsMember({"contrast", "hypothesis", "study"}))
      ->capture_default_str();
  c_report->add_option("--out", out_path, "output path (stdout when omitted; written atomically)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (app.got_subcommand(c_ingest)) {
    return guarded([&] {
      const Dataset ds = ingest(contrasts_path, studies_path);
      const CellCensus census = cell_census(ds);
      std::size_t hypotheses = 0;
      for (std::size_t h : census.hypotheses) hypotheses += h;
      std::printf("ok: %zu studies, %zu contrasts, %zu hypotheses\n", ds.studies.size(),
                  ds.contrasts.size(), hypotheses);
      for (int d = 0; d < kNumDesigns; ++d) {
        const auto dd = std::size_t(d);
        if (census.contrasts[dd] == 0) continue;
        std::printf("  %-4s %zu studies, %zu hypotheses, %zu contrasts\n",
                    design_label(DesignCell::from_index(d)).c_str(), census.studies[dd],
                    census.hypotheses[dd], census.contrasts[dd]);
      }
      return 0;
    });
  }

  if (app.got_subcommand(c_describe)) {
    return guarded([&] {
      const Dataset ds = ingest(contrasts_path, studies_path);
      emit(out_path, describe_report(ds, levels_from_flag(describe_level), rope,
                                     ReportOptions{format, digits}));
      return 0;
    });
  }

  if (app.got_subcommand(c_fit)) {
    return guarded([&] {
      const Dataset ds = ingest(contrasts_path, studies_path);
      const ReportOptions opt{format, digits};
      if (engine == "freq") {
        FreqSpec spec;
        spec.rho = rho;
        spec.rope = rope;
        spec.pi_level = pi_level;
        spec.use_covariates = covariates;
        FreqFit fit = fit_freq(ds, spec);
        robust_vcov(fit, ds, spec);
        emit(out_path, freq_report(fit, spec, opt));
      } else {
        if (c_fit->count("--seed") == 0)
          throw ConfigError("--seed is required for the bayes engine");
        BayesSpec spec;
        spec.rho = rho;
        spec.rope = rope;
        spec.chains = chains;
        spec.iterations = iters;
        spec.warmup = warmup;
        spec.seed = seed;
        spec.rhat_max = rhat_max;
        spec.ess_min = ess_min;
        spec.check_convergence = !no_gate;
        const PosteriorDraws draws = sample(ds, spec);
        const auto rows = design_summaries(draws, ds, pi_level);
        const DiagnosticsReport diag = diagnostics(draws);
        if (opt.format == "csv") {
          double worst_rhat = 0.0, min_ess = std::numeric_limits<double>::infinity();
          std::string rhat_name, ess_name;
          for (const auto& p : diag.params) {
            if (!p.structural) continue;
            if (p.rhat > worst_rhat) {
              worst_rhat = p.rhat;
              rhat_name = p.name;
            }
            if (p.ess_bulk < min_ess) {
              min_ess = p.ess_bulk;
              ess_name = p.name;
            }
          }
          std::fprintf(stderr,
                       "diagnostics: %d divergences, %d depth hits, max rhat %.4f (%s), min bulk "
                       "ess %.0f (%s); --format json carries the full table\n",
                       diag.divergences, diag.max_depth_hits, worst_rhat, rhat_name.c_str(),
                       min_ess, ess_name.c_str());
        }
        emit(out_path, bayes_report(rows, diag, spec, opt));
      }
      return 0;
    });
  }

  if (app.got_subcommand(c_sim)) {
    return guarded([&] {
      if (c_sim->count("--seed") == 0) throw ConfigError("--seed is required for simulate");
      GenConfig cfg = parse_gen_config(read_text(config_path));
      cfg.seed = seed;
      std::string text;
      if (sbc_flag) {
        text = sbc_report(sbc(cfg.sampler, cfg, replications), digits);
      } else {
        const Engine eng = sim_engine == "bayes" ? Engine::kBayes : Engine::kFreq;
        text = recovery_report(recovery_study(cfg, eng, replications), digits);
      }
      emit(out_path, text);
      return 0;
    });
  }

  // report
  return guarded([&] {
    const Level level = *level_from_string(report_level);
    std::vector<TidyRow> rows;
    std::set<std::string> seen;
    for (const auto& path : inputs) {
      TidyParse parsed = tidy_from_output(read_text(path), level);
      seen.insert(parsed.analysis);
      for (const auto& note : parsed.notes)
        std::fprintf(stderr, "warning: %s: %s\n", path.c_str(), note.c_str());
      rows.insert(rows.end(), parsed.rows.begin(), parsed.rows.end());
    }
    for (const char* analysis : {"descriptive", "bayesian", "non-bayesian"})
      if (!seen.count(analysis)) std::fprintf(stderr, "warning: no %s input supplied\n", analysis);
    emit(out_path, tidy_csv(rows));
    return 0;
  });
}
