#ifndef WSC_REPORTS_HPP
#define WSC_REPORTS_HPP

#include <optional>
#include <string>
#include <vector>

#include "wsc/bayes_meta.hpp"
#include "wsc/dataset.hpp"
#include "wsc/freq_meta.hpp"
#include "wsc/simgen.hpp"

// Text emission shared by the command-line front end: descriptive tables,
// per-engine summary tables, simulation reports, and the long-format rows
// behind the risk-of-bias figure. Everything here is deterministic string
// building; no I/O.

namespace wsc {

// design elements in P, L, R order; the empty cell is "none"
std::string design_label(DesignCell design);
std::optional<DesignCell> design_from_label(const std::string& s);

// shortest round-trip form, or `digits` significant digits when > 0;
// NaN renders as the empty string
std::string format_number(double v, int digits = 0);

struct ReportOptions {
  std::string format = "csv";  // "csv" or "json"
  int digits = 0;              // 0 = full precision
};

// one row per (design, level): n, mean, sd, min, max plus the share of the
// level's bias values inside the rope
std::string describe_report(const Dataset& ds, const std::vector<Level>& levels, double rope,
                            const ReportOptions& opt);

// per-(design, level) mean / SD of bias / prediction interval / rope
// probability plus the per-design variance components (reported as SDs)
std::string freq_report(const FreqFit& fit, const FreqSpec& spec, const ReportOptions& opt);

std::string bayes_report(const std::vector<DesignSummary>& rows, const DiagnosticsReport& diag,
                         const BayesSpec& spec, const ReportOptions& opt);

// simulation study reports; always JSON
std::string recovery_report(const RecoveryReport& rep, int digits = 0);
std::string sbc_report(const SbcReport& rep, int digits = 0);

// long-format figure rows harvested from describe/fit outputs
struct TidyRow {
  std::string design, analysis, metric, value;
};
struct TidyParse {
  std::string analysis;
  std::vector<TidyRow> rows;       // at the requested level, input order
  std::vector<std::string> notes;  // omissions worth surfacing
};

// `text` is the content of a describe or fit output in either format; values
// pass through as the exact token the input carried
TidyParse tidy_from_output(const std::string& text, Level level);
std::string tidy_csv(const std::vector<TidyRow>& rows);

}  // namespace wsc

#endif
