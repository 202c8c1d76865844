#include "wsc/reports.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "json.hpp"
#include "wsc/csv.hpp"
#include "wsc/errors.hpp"

namespace wsc {

using ordered_json = nlohmann::ordered_json;

std::string design_label(DesignCell design) {
  std::string s;
  if (design.pretest) s += 'P';
  if (design.local) s += 'L';
  if (design.rich) s += 'R';
  return s.empty() ? "none" : s;
}

std::optional<DesignCell> design_from_label(const std::string& s) {
  for (int d = 0; d < kNumDesigns; ++d) {
    const DesignCell cell = DesignCell::from_index(d);
    if (design_label(cell) == s) return cell;
  }
  return std::nullopt;
}

std::string format_number(double v, int digits) {
  if (std::isnan(v)) return "";
  return digits > 0 ? format_double(v, digits) : format_double(v);
}

namespace {

// value for a JSON field: null for NaN, rounded when digits > 0
ordered_json jnum(double v, int digits) {
  if (std::isnan(v)) return nullptr;
  if (digits > 0) return std::strtod(format_double(v, digits).c_str(), nullptr);
  return v;
}

int level_order(Level level) {
  switch (level) {
    case Level::kStudy: return 0;
    case Level::kHypothesis: return 1;
    default: return 2;
  }
}

const char* engine_label(Engine e) { return e == Engine::kFreq ? "freq" : "bayes"; }

struct DescriptiveRow {
  CellDescriptives cell;
  double rope_share = 0.0;
};

std::vector<DescriptiveRow> describe_rows(const Dataset& ds, const std::vector<Level>& levels,
                                          double rope) {
  std::vector<DescriptiveRow> out;
  for (Level level : levels) {
    const auto values = level_values(ds, level);
    for (const CellDescriptives& cell : aggregate(ds, level)) {
      DescriptiveRow row;
      row.cell = cell;
      const auto& vs = values[std::size_t(cell.design.index())];
      std::size_t inside = 0;
      for (double v : vs)
        if (std::abs(v) < rope) ++inside;
      row.rope_share = double(inside) / double(vs.size());
      out.push_back(row);
    }
  }
  return out;
}

}  // namespace

std::string describe_report(const Dataset& ds, const std::vector<Level>& levels, double rope,
                            const ReportOptions& opt) {
  const auto rows = describe_rows(ds, levels, rope);
  if (opt.format == "json") {
    ordered_json j;
    j["analysis"] = "descriptive";
    j["rope"] = rope;
    j["rows"] = ordered_json::array();
    for (const auto& row : rows) {
      ordered_json r;
      r["design"] = design_label(row.cell.design);
      r["level"] = to_string(row.cell.level);
      r["n"] = row.cell.n;
      r["mean"] = jnum(row.cell.mean, opt.digits);
      r["sd"] = row.cell.sd ? jnum(*row.cell.sd, opt.digits) : ordered_json(nullptr);
      r["min"] = jnum(row.cell.min, opt.digits);
      r["max"] = jnum(row.cell.max, opt.digits);
      r["rope_prob"] = jnum(row.rope_share, opt.digits);
      j["rows"].push_back(std::move(r));
    }
    return j.dump(2) + "\n";
  }
  std::string out = "analysis,design,level,n,mean,sd,min,max,rope_prob\n";
  for (const auto& row : rows) {
    out += "descriptive,";
    out += design_label(row.cell.design);
    out += ',';
    out += to_string(row.cell.level);
    out += ',';
    out += std::to_string(row.cell.n);
    out += ',';
    out += format_number(row.cell.mean, opt.digits);
    out += ',';
    if (row.cell.sd) out += format_number(*row.cell.sd, opt.digits);
    out += ',';
    out += format_number(row.cell.min, opt.digits);
    out += ',';
    out += format_number(row.cell.max, opt.digits);
    out += ',';
    out += format_number(row.rope_share, opt.digits);
    out += '\n';
  }
  return out;
}

std::string freq_report(const FreqFit& fit, const FreqSpec& spec, const ReportOptions& opt) {
  const auto rows = level_summaries(fit, spec.rope, spec.pi_level);
  if (opt.format == "json") {
    ordered_json j;
    j["analysis"] = "non-bayesian";
    j["spec"] = {{"rho", spec.rho},
                 {"rope", spec.rope},
                 {"pi_level", spec.pi_level},
                 {"covariates", spec.use_covariates}};
    j["rows"] = ordered_json::array();
    for (const auto& row : rows) {
      ordered_json r;
      r["design"] = design_label(row.design);
      r["level"] = to_string(row.level);
      r["mean"] = jnum(row.mean, opt.digits);
      r["sd"] = jnum(row.sd, opt.digits);
      r["pi_lo"] = jnum(row.pi_lo, opt.digits);
      r["pi_hi"] = jnum(row.pi_hi, opt.digits);
      r["rope_prob"] = jnum(row.rope_prob, opt.digits);
      r["available"] = row.available;
      j["rows"].push_back(std::move(r));
    }
    j["components"] = ordered_json::array();
    for (int d = 0; d < kNumDesigns; ++d) {
      const auto dd = std::size_t(d);
      if (!fit.design_present[dd]) continue;
      ordered_json c;
      c["design"] = design_label(DesignCell::from_index(d));
      c["n_studies"] = fit.n_studies[dd];
      c["tau"] = jnum(std::sqrt(fit.tau2[dd]), opt.digits);
      c["omega"] = jnum(std::sqrt(fit.omega2[dd]), opt.digits);
      c["phi"] = jnum(std::sqrt(fit.phi2[dd]), opt.digits);
      c["tau_active"] = fit.tau_active[dd];
      c["omega_active"] = fit.omega_active[dd];
      c["phi_active"] = fit.phi_active[dd];
      c["inference_available"] = !fit.inference_unavailable[dd];
      j["components"].push_back(std::move(c));
    }
    j["reml_loglik"] = jnum(fit.reml_loglik, opt.digits);
    j["iterations"] = fit.iterations;
    if (!fit.beta_hat.empty()) {
      j["beta_hat"] = ordered_json::array();
      for (double b : fit.beta_hat) j["beta_hat"].push_back(jnum(b, opt.digits));
    }
    return j.dump(2) + "\n";
  }
  std::string out = "analysis,design,level,mean,sd,pi_lo,pi_hi,rope_prob,tau,omega,phi,n_studies,available\n";
  for (const auto& row : rows) {
    const auto dd = std::size_t(row.design.index());
    out += "non-bayesian,";
    out += design_label(row.design);
    out += ',';
    out += to_string(row.level);
    out += ',';
    out += format_number(row.mean, opt.digits);
    out += ',';
    out += format_number(row.sd, opt.digits);
    out += ',';
    out += format_number(row.pi_lo, opt.digits);
    out += ',';
    out += format_number(row.pi_hi, opt.digits);
    out += ',';
    out += format_number(row.rope_prob, opt.digits);
    out += ',';
    out += format_number(std::sqrt(fit.tau2[dd]), opt.digits);
    out += ',';
    out += format_number(std::sqrt(fit.omega2[dd]), opt.digits);
    out += ',';
    out += format_number(std::sqrt(fit.phi2[dd]), opt.digits);
    out += ',';
    out += std::to_string(fit.n_studies[dd]);
    out += ',';
    out += row.available ? "true" : "false";
    out += '\n';
  }
  return out;
}

std::string bayes_report(const std::vector<DesignSummary>& rows_in, const DiagnosticsReport& diag,
                         const BayesSpec& spec, const ReportOptions& opt) {
  std::vector<DesignSummary> rows = rows_in;
  std::stable_sort(rows.begin(), rows.end(), [](const DesignSummary& a, const DesignSummary& b) {
    if (a.design.index() != b.design.index()) return a.design.index() < b.design.index();
    return level_order(a.level) < level_order(b.level);
  });
  if (opt.format == "json") {
    ordered_json j;
    j["analysis"] = "bayesian";
    j["spec"] = {{"rho", spec.rho},
                 {"rope", spec.rope},
                 {"chains", spec.chains},
                 {"iterations", spec.iterations},
                 {"warmup", spec.warmup},
                 {"seed", spec.seed},
                 {"target_accept", spec.target_accept},
                 {"max_treedepth", spec.max_treedepth},
                 {"predictive_sims", spec.predictive_sims}};
    j["rows"] = ordered_json::array();
    for (const auto& row : rows) {
      ordered_json r;
      r["design"] = design_label(row.design);
      r["level"] = to_string(row.level);
      r["mean"] = jnum(row.mean, opt.digits);
      r["sd"] = jnum(row.sd, opt.digits);
      r["pi_lo"] = jnum(row.pi_lo, opt.digits);
      r["pi_hi"] = jnum(row.pi_hi, opt.digits);
      r["rope_prob"] = jnum(row.rope_prob, opt.digits);
      j["rows"].push_back(std::move(r));
    }
    ordered_json d;
    d["divergences"] = diag.divergences;
    d["max_depth_hits"] = diag.max_depth_hits;
    d["step_sizes"] = diag.step_sizes;
    d["mean_accepts"] = diag.mean_accepts;
    d["params"] = ordered_json::array();
    for (const auto& p : diag.params) {
      ordered_json r;
      r["name"] = p.name;
      r["mean"] = jnum(p.mean, opt.digits);
      r["sd"] = jnum(p.sd, opt.digits);
      r["q05"] = jnum(p.q05, opt.digits);
      r["q50"] = jnum(p.q50, opt.digits);
      r["q95"] = jnum(p.q95, opt.digits);
      r["rhat"] = jnum(p.rhat, opt.digits);
      r["ess_bulk"] = jnum(p.ess_bulk, opt.digits);
      r["ess_tail"] = jnum(p.ess_tail, opt.digits);
      r["structural"] = p.structural;
      d["params"].push_back(std::move(r));
    }
    j["diagnostics"] = std::move(d);
    return j.dump(2) + "\n";
  }
  std::string out = "analysis,design,level,mean,sd,pi_lo,pi_hi,rope_prob\n";
  for (const auto& row : rows) {
    out += "bayesian,";
    out += design_label(row.design);
    out += ',';
    out += to_string(row.level);
    out += ',';
    out += format_number(row.mean, opt.digits);
    out += ',';
    out += format_number(row.sd, opt.digits);
    out += ',';
    out += format_number(row.pi_lo, opt.digits);
    out += ',';
    out += format_number(row.pi_hi, opt.digits);
    out += ',';
    out += format_number(row.rope_prob, opt.digits);
    out += '\n';
  }
  return out;
}

std::string recovery_report(const RecoveryReport& rep, int digits) {
  ordered_json j;
  j["kind"] = "recovery";
  j["engine"] = engine_label(rep.engine);
  j["replications"] = rep.replications;
  j["usable"] = rep.usable;
  j["designs"] = ordered_json::array();
  for (int d = 0; d < kNumDesigns; ++d) {
    std::size_t n_cells = 0;
    for (const auto& c : rep.cells)
      if (c.design == d) ++n_cells;
    if (n_cells == 0) continue;
    ordered_json e;
    e["design"] = design_label(DesignCell::from_index(d));
    e["cells"] = n_cells;
    ordered_json med;
    med["mu_true"] = jnum(rep.median(d, &RecoveryCell::mu_true), digits);
    med["mu_hat"] = jnum(rep.median(d, &RecoveryCell::mu_hat), digits);
    med["tau_true"] = jnum(rep.median(d, &RecoveryCell::tau_true), digits);
    med["tau_hat"] = jnum(rep.median(d, &RecoveryCell::tau_hat), digits);
    med["omega_true"] = jnum(rep.median(d, &RecoveryCell::omega_true), digits);
    med["omega_hat"] = jnum(rep.median(d, &RecoveryCell::omega_hat), digits);
    med["phi_true"] = jnum(rep.median(d, &RecoveryCell::phi_true), digits);
    med["phi_hat"] = jnum(rep.median(d, &RecoveryCell::phi_hat), digits);
    e["median"] = std::move(med);
    e["coverage"] = jnum(rep.coverage(d), digits);
    e["share_at_zero"] = {{"tau", jnum(rep.share_at_zero(d, &RecoveryCell::tau_hat), digits)},
                          {"omega", jnum(rep.share_at_zero(d, &RecoveryCell::omega_hat), digits)},
                          {"phi", jnum(rep.share_at_zero(d, &RecoveryCell::phi_hat), digits)}};
    j["designs"].push_back(std::move(e));
  }
  j["cells"] = ordered_json::array();
  for (const auto& c : rep.cells) {
    ordered_json e;
    e["rep"] = c.rep;
    e["design"] = design_label(DesignCell::from_index(c.design));
    e["mu_true"] = jnum(c.mu_true, digits);
    e["mu_hat"] = jnum(c.mu_hat, digits);
    e["tau_true"] = jnum(c.tau_true, digits);
    e["tau_hat"] = jnum(c.tau_hat, digits);
    e["omega_true"] = jnum(c.omega_true, digits);
    e["omega_hat"] = jnum(c.omega_hat, digits);
    e["phi_true"] = jnum(c.phi_true, digits);
    e["phi_hat"] = jnum(c.phi_hat, digits);
    e["lo"] = jnum(c.lo, digits);
    e["hi"] = jnum(c.hi, digits);
    e["covered"] = c.covered;
    e["inference_ok"] = c.inference_ok;
    j["cells"].push_back(std::move(e));
  }
  j["failures"] = rep.failures;
  return j.dump(2) + "\n";
}

std::string sbc_report(const SbcReport& rep, int digits) {
  ordered_json j;
  j["kind"] = "sbc";
  j["replications"] = rep.replications;
  j["usable"] = rep.usable;
  j["max_rank"] = rep.max_rank;
  j["bins"] = rep.bins;
  j["chi2"] = jnum(rep.chi2, digits);
  j["df"] = rep.df;
  j["p_value"] = jnum(rep.p_value, digits);
  j["uniformity_rejected_at_0_01"] = rep.p_value < 0.01;
  j["parameters"] = ordered_json::array();
  for (std::size_t p = 0; p < rep.names.size(); ++p) {
    ordered_json e;
    e["name"] = rep.names[p];
    e["histogram"] = rep.histogram[p];
    j["parameters"].push_back(std::move(e));
  }
  j["failures"] = rep.failures;
  return j.dump(2) + "\n";
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (true) {
    const std::size_t comma = line.find(',', at);
    if (comma == std::string::npos) {
      out.push_back(line.substr(at));
      break;
    }
    out.push_back(line.substr(at, comma - at));
    at = comma + 1;
  }
  return out;
}

constexpr const char* kMetrics[] = {"mean", "sd", "rope_prob"};

TidyParse tidy_from_json(const std::string& text, Level level) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("input is not a valid report: ") + e.what());
  }
  if (!j.is_object() || !j.contains("analysis") || !j.contains("rows"))
    throw ConfigError("input is not a describe or fit output (no analysis/rows)");
  TidyParse out;
  out.analysis = j["analysis"].get<std::string>();
  for (const auto& row : j["rows"]) {
    if (!row.contains("level") || !row.contains("design"))
      throw ConfigError("report row lacks design/level");
    if (row["level"].get<std::string>() != to_string(level)) continue;
    const std::string design = row["design"].get<std::string>();
    for (const char* metric : kMetrics) {
      if (row.contains(metric) && !row[metric].is_null()) {
        out.rows.push_back({design, out.analysis, metric, row[metric].dump()});
      } else {
        out.notes.push_back(out.analysis + "/" + design + ": no " + metric + " at " +
                            to_string(level) + " level");
      }
    }
  }
  return out;
}

TidyParse tidy_from_csv(const std::string& text, Level level) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("input report is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_fields(line);
  auto col = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  };
  const int c_analysis = col("analysis"), c_design = col("design"), c_level = col("level");
  if (c_analysis < 0 || c_design < 0 || c_level < 0)
    throw ConfigError("input is not a describe or fit output (missing analysis/design/level)");
  int c_metric[3];
  for (int m = 0; m < 3; ++m) c_metric[m] = col(kMetrics[m]);

  TidyParse out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    if (fields.size() != header.size())
      throw ConfigError("report row has " + std::to_string(fields.size()) + " fields, header has " +
                        std::to_string(header.size()));
    if (out.analysis.empty()) out.analysis = fields[std::size_t(c_analysis)];
    if (fields[std::size_t(c_level)] != to_string(level)) continue;
    const std::string& design = fields[std::size_t(c_design)];
    for (int m = 0; m < 3; ++m) {
      if (c_metric[m] >= 0 && !fields[std::size_t(c_metric[m])].empty()) {
        out.rows.push_back(
            {design, fields[std::size_t(c_analysis)], kMetrics[m], fields[std::size_t(c_metric[m])]});
      } else {
        out.notes.push_back(fields[std::size_t(c_analysis)] + "/" + design + ": no " + kMetrics[m] +
                            " at " + to_string(level) + " level");
      }
    }
  }
  return out;
}

}  // namespace

TidyParse tidy_from_output(const std::string& text, Level level) {
  const std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) throw ConfigError("input report is empty");
  TidyParse out = text[first] == '{' ? tidy_from_json(text, level) : tidy_from_csv(text, level);
  if (out.rows.empty())
    out.notes.push_back(out.analysis + ": no rows at the " + std::string(to_string(level)) +
                        " level");
  return out;
}

std::string tidy_csv(const std::vector<TidyRow>& rows) {
  std::string out = "design,analysis,metric,value\n";
  for (const auto& r : rows) {
    out += r.design;
    out += ',';
    out += r.analysis;
    out += ',';
    out += r.metric;
    out += ',';
    out += r.value;
    out += '\n';
  }
  return out;
}

}  // namespace wsc
