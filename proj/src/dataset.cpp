#include "wsc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>
#include <utility>

#include "wsc/csv.hpp"
#include "wsc/errors.hpp"

namespace wsc {

const char* to_string(Level level) {
  switch (level) {
    case Level::kContrast: return "contrast";
    case Level::kHypothesis: return "hypothesis";
    case Level::kStudy: return "study";
  }
  return "contrast";
}

std::optional<Level> level_from_string(const std::string& s) {
  if (s == "contrast") return Level::kContrast;
  if (s == "hypothesis") return Level::kHypothesis;
  if (s == "study") return Level::kStudy;
  return std::nullopt;
}

int Dataset::study_index(const std::string& study_id) const {
  for (std::size_t k = 0; k < studies.size(); ++k) {
    if (studies[k].study_id == study_id) return int(k);
  }
  return -1;
}

namespace {

const std::vector<std::string> kStudyColumns = {
    "study_id", "x_education", "x_multicell", "x_n_contrasts", "x_nu_team"};

// contrast columns other than the richness column, in schema order
const std::vector<std::string> kContrastHead = {"study_id", "contrast_id", "outcome_domain",
                                                "pretest", "local"};
const std::vector<std::string> kContrastTail = {
    "y",      "theta_obs", "theta_rct", "se_obs", "se_rct", "sd_trt",           "sd_contr",
    "f_stat", "p_value",   "n_trt",     "n_contr", "n_comp", "desired_direction"};

void check_schema(const CsvTable& t, const std::vector<std::string>& expected,
                  const char* what) {
  std::set<std::string> seen;
  for (const auto& h : t.header) {
    if (!seen.insert(h).second)
      throw SchemaError(std::string(what) + ": duplicate column '" + h + "'");
  }
  std::vector<std::string> missing, extra;
  for (const auto& c : expected)
    if (!seen.count(c)) missing.push_back(c);
  std::set<std::string> allowed(expected.begin(), expected.end());
  for (const auto& h : t.header)
    if (!allowed.count(h)) extra.push_back(h);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = std::string(what) + ": schema mismatch";
    if (!missing.empty()) {
      msg += "; missing:";
      for (const auto& c : missing) msg += " " + c;
    }
    if (!extra.empty()) {
      msg += "; unexpected:";
      for (const auto& c : extra) msg += " " + c;
    }
    throw SchemaError(msg);
  }
}

const std::string& field(const std::vector<std::string>& row, int col) { return row[std::size_t(col)]; }

std::optional<double> opt_double(const std::vector<std::string>& row, int col, std::size_t rowno,
                                 const std::string& name) {
  try {
    return parse_double_field(field(row, col));
  } catch (const SchemaError&) {
    throw RowError(rowno, name + ": not a number: '" + field(row, col) + "'");
  }
}

std::optional<long> opt_long(const std::vector<std::string>& row, int col, std::size_t rowno,
                             const std::string& name) {
  try {
    return parse_long_field(field(row, col));
  } catch (const SchemaError&) {
    throw RowError(rowno, name + ": not an integer: '" + field(row, col) + "'");
  }
}

bool require_flag(const std::vector<std::string>& row, int col, std::size_t rowno,
                  const std::string& name) {
  const std::string& s = field(row, col);
  if (s == "0") return false;
  if (s == "1") return true;
  throw RowError(rowno, name + ": expected 0 or 1, got '" + s + "'");
}

std::string require_id(const std::vector<std::string>& row, int col, std::size_t rowno,
                       const std::string& name) {
  const std::string& s = field(row, col);
  if (s.empty()) throw RowError(rowno, name + " must not be empty");
  return s;
}

void check_row_width(const CsvTable& t, const std::vector<std::string>& row, std::size_t rowno) {
  if (row.size() != t.header.size())
    throw RowError(rowno, "expected " + std::to_string(t.header.size()) + " fields, got " +
                              std::to_string(row.size()));
}

std::vector<StudyRecord> parse_studies(const CsvTable& t) {
  check_schema(t, kStudyColumns, "studies");
  const int c_id = t.column("study_id");
  const int c_edu = t.column("x_education");
  const int c_multi = t.column("x_multicell");
  const int c_ncon = t.column("x_n_contrasts");
  const int c_team = t.column("x_nu_team");

  std::vector<StudyRecord> out;
  std::set<std::string> ids;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t rowno = r + 1;
    check_row_width(t, row, rowno);
    StudyRecord s;
    s.study_id = require_id(row, c_id, rowno, "study_id");
    if (!ids.insert(s.study_id).second)
      throw RowError(rowno, "duplicate study_id '" + s.study_id + "'");
    s.x_education = require_flag(row, c_edu, rowno, "x_education");
    s.x_multicell = require_flag(row, c_multi, rowno, "x_multicell");
    s.x_nu_team = require_flag(row, c_team, rowno, "x_nu_team");
    auto n = opt_long(row, c_ncon, rowno, "x_n_contrasts");
    if (!n) throw RowError(rowno, "x_n_contrasts must not be empty");
    if (*n < 1) throw RowError(rowno, "x_n_contrasts must be >= 1");
    s.x_n_contrasts = *n;
    out.push_back(std::move(s));
  }
  return out;
}

// Builds y/s_y for one contrast row. Reported y is used as-is; otherwise the
// bias kernel computes both from the raw summaries. s_y always comes from the
// kernel since the schema carries no direct column for it.
void finish_contrast(ContrastRecord& c, std::size_t rowno) {
  const RawContrastInputs& raw = c.raw;
  auto need = [&](const char* name, bool ok) {
    if (!ok)
      throw RowError(rowno, std::string(name) + " required " +
                                (c.y_reported ? "to compute s_y" : "when y is not reported"));
  };
  need("se_obs", raw.se_obs.has_value());
  need("se_rct", raw.se_rct.has_value());
  need("n_trt", raw.n_trt.has_value());
  need("n_contr", raw.n_contr.has_value());
  need("n_comp", raw.n_comp.has_value());

  RctSummary rct;
  rct.theta_rct = raw.theta_rct.value_or(0.0);
  rct.se_rct = raw.se_rct;
  rct.sd_trt = raw.sd_trt;
  rct.sd_contr = raw.sd_contr;
  rct.n_trt = *raw.n_trt;
  rct.n_contr = *raw.n_contr;
  // F/p back-calculation needs the RCT effect; without it those fields are
  // only carried as provenance.
  if (raw.theta_rct) {
    rct.f_stat = raw.f_stat;
    rct.p_value = raw.p_value;
  }

  try {
    // validate whatever was provided even if a higher-priority source wins
    if (raw.f_stat && !(*raw.f_stat >= 0.0)) throw DegenerateStatistic("f_stat must be >= 0");
    if (raw.p_value && !(*raw.p_value > 0.0 && *raw.p_value < 1.0))
      throw ValidationError("p_value must lie in the open interval (0,1)");
    const double s_pooled = pooled_sd(rct);
    if (!c.y_reported) {
      need("theta_obs", raw.theta_obs.has_value());
      need("theta_rct", raw.theta_rct.has_value());
      if (!raw.desired_direction)
        throw RowError(rowno, "desired_direction required when y is not reported");
      ObsSummary obs;
      obs.theta_obs = *raw.theta_obs;
      obs.se_obs = *raw.se_obs;
      obs.n_comp = *raw.n_comp;
      obs.validate();
      c.y = standardize_bias(*raw.theta_obs, *raw.theta_rct, s_pooled, *raw.desired_direction);
    }
    c.s_y = bias_se(*raw.se_obs, *raw.se_rct, s_pooled, *raw.n_trt, *raw.n_contr, *raw.n_comp);
  } catch (const RowError&) {
    throw;
  } catch (const Error& e) {
    throw RowError(rowno, e.what());
  }
}

std::vector<ContrastRecord> parse_contrasts(const CsvTable& t, bool* rich_given_as_count) {
  const bool has_count = t.column("n_cov_domains") >= 0;
  const bool has_rich = t.column("rich") >= 0;
  if (has_count && has_rich)
    throw SchemaError("contrasts: provide either n_cov_domains or rich, not both");
  std::vector<std::string> expected = kContrastHead;
  expected.push_back(has_count ? "n_cov_domains" : "rich");
  expected.insert(expected.end(), kContrastTail.begin(), kContrastTail.end());
  check_schema(t, expected, "contrasts");
  *rich_given_as_count = has_count;

  const int c_study = t.column("study_id");
  const int c_id = t.column("contrast_id");
  const int c_dom = t.column("outcome_domain");
  const int c_pre = t.column("pretest");
  const int c_loc = t.column("local");
  const int c_rich = has_count ? t.column("n_cov_domains") : t.column("rich");
  const int c_y = t.column("y");
  const int c_tobs = t.column("theta_obs");
  const int c_trct = t.column("theta_rct");
  const int c_seobs = t.column("se_obs");
  const int c_serct = t.column("se_rct");
  const int c_sdtrt = t.column("sd_trt");
  const int c_sdcon = t.column("sd_contr");
  const int c_f = t.column("f_stat");
  const int c_p = t.column("p_value");
  const int c_ntrt = t.column("n_trt");
  const int c_ncon = t.column("n_contr");
  const int c_ncomp = t.column("n_comp");
  const int c_dir = t.column("desired_direction");

  std::vector<ContrastRecord> out;
  std::set<std::pair<std::string, std::string>> ids;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t rowno = r + 1;
    check_row_width(t, row, rowno);
    ContrastRecord c;
    c.study_id = require_id(row, c_study, rowno, "study_id");
    c.contrast_id = require_id(row, c_id, rowno, "contrast_id");
    if (!ids.insert({c.study_id, c.contrast_id}).second)
      throw RowError(rowno, "duplicate contrast '" + c.contrast_id + "' in study '" +
                                c.study_id + "'");
    c.outcome_domain = require_id(row, c_dom, rowno, "outcome_domain");
    c.design.pretest = require_flag(row, c_pre, rowno, "pretest");
    c.design.local = require_flag(row, c_loc, rowno, "local");
    if (has_count) {
      auto n = opt_long(row, c_rich, rowno, "n_cov_domains");
      if (!n) throw RowError(rowno, "n_cov_domains must not be empty");
      if (*n < 0 || *n > 10)
        throw RowError(rowno, "n_cov_domains must lie in [0, 10]");
      c.raw.n_cov_domains = *n;
      c.design.rich = *n >= 4;
    } else {
      c.design.rich = require_flag(row, c_rich, rowno, "rich");
    }

    c.raw.reported_y = opt_double(row, c_y, rowno, "y");
    c.raw.theta_obs = opt_double(row, c_tobs, rowno, "theta_obs");
    c.raw.theta_rct = opt_double(row, c_trct, rowno, "theta_rct");
    c.raw.se_obs = opt_double(row, c_seobs, rowno, "se_obs");
    c.raw.se_rct = opt_double(row, c_serct, rowno, "se_rct");
    c.raw.sd_trt = opt_double(row, c_sdtrt, rowno, "sd_trt");
    c.raw.sd_contr = opt_double(row, c_sdcon, rowno, "sd_contr");
    c.raw.f_stat = opt_double(row, c_f, rowno, "f_stat");
    c.raw.p_value = opt_double(row, c_p, rowno, "p_value");
    c.raw.n_trt = opt_long(row, c_ntrt, rowno, "n_trt");
    c.raw.n_contr = opt_long(row, c_ncon, rowno, "n_contr");
    c.raw.n_comp = opt_long(row, c_ncomp, rowno, "n_comp");
    if (auto dir = opt_long(row, c_dir, rowno, "desired_direction")) {
      if (*dir != 1 && *dir != -1)
        throw RowError(rowno, "desired_direction must be +1 or -1");
      c.raw.desired_direction = int(*dir);
    }

    if (c.raw.reported_y) {
      c.y_reported = true;
      c.y = *c.raw.reported_y;
    }
    finish_contrast(c, rowno);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

namespace {

Dataset build_dataset(const CsvTable& contrasts, const CsvTable& studies) {
  Dataset ds;
  ds.studies = parse_studies(studies);
  ds.contrasts = parse_contrasts(contrasts, &ds.rich_given_as_count);

  std::unordered_map<std::string, std::size_t> n_by_study;
  for (const auto& s : ds.studies) n_by_study[s.study_id] = 0;
  for (const auto& c : ds.contrasts) {
    auto it = n_by_study.find(c.study_id);
    if (it == n_by_study.end())
      throw ReferentialError("contrast '" + c.contrast_id + "' references unknown study '" +
                             c.study_id + "'");
    ++it->second;
  }
  for (const auto& s : ds.studies) {
    if (n_by_study[s.study_id] == 0)
      throw ReferentialError("study '" + s.study_id + "' has no contrasts");
  }
  return ds;
}

}  // namespace

Dataset ingest_strings(const std::string& contrasts_csv, const std::string& studies_csv) {
  return build_dataset(parse_csv(contrasts_csv), parse_csv(studies_csv));
}

Dataset ingest(const std::string& contrasts_path, const std::string& studies_path) {
  return build_dataset(read_csv(contrasts_path), read_csv(studies_path));
}

std::vector<double> derive_weights(const Dataset& ds) {
  std::vector<double> w;
  w.reserve(ds.contrasts.size());
  for (const auto& c : ds.contrasts) {
    if (!(c.s_y > 0.0)) throw NonPositiveSd("s_y must be strictly positive");
    w.push_back(1.0 / c.s_y);
  }
  return w;
}

std::array<std::vector<double>, kNumDesigns> level_values(const Dataset& ds, Level level) {
  std::array<std::vector<double>, kNumDesigns> out;
  if (level == Level::kContrast) {
    for (const auto& c : ds.contrasts) out[std::size_t(c.design.index())].push_back(c.y);
    return out;
  }
  // group means within (study, design[, domain]); std::map keeps the group
  // order deterministic
  std::map<std::tuple<std::string, int, std::string>, std::pair<double, std::size_t>> groups;
  for (const auto& c : ds.contrasts) {
    std::string dom = level == Level::kHypothesis ? c.outcome_domain : std::string();
    auto& acc = groups[{c.study_id, c.design.index(), dom}];
    acc.first += c.y;
    acc.second += 1;
  }
  for (const auto& [key, acc] : groups)
    out[std::size_t(std::get<1>(key))].push_back(acc.first / double(acc.second));
  return out;
}

std::vector<CellDescriptives> aggregate(const Dataset& ds, Level level) {
  auto values = level_values(ds, level);
  std::vector<CellDescriptives> out;
  for (int d = 0; d < kNumDesigns; ++d) {
    const auto& v = values[std::size_t(d)];
    if (v.empty()) continue;
    CellDescriptives cd;
    cd.design = DesignCell::from_index(d);
    cd.level = level;
    cd.n = v.size();
    double sum = 0.0;
    cd.min = v.front();
    cd.max = v.front();
    for (double x : v) {
      sum += x;
      cd.min = std::min(cd.min, x);
      cd.max = std::max(cd.max, x);
    }
    cd.mean = sum / double(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - cd.mean) * (x - cd.mean);
      cd.sd = std::sqrt(ss / double(v.size() - 1));
    }
    out.push_back(cd);
  }
  return out;
}

CellCensus cell_census(const Dataset& ds) {
  CellCensus out;
  std::set<std::tuple<std::string, int, std::string>> hypo;
  std::set<std::tuple<std::string, int>> study;
  for (const auto& c : ds.contrasts) {
    const auto d = std::size_t(c.design.index());
    out.contrasts[d] += 1;
    hypo.insert({c.study_id, c.design.index(), c.outcome_domain});
    study.insert({c.study_id, c.design.index()});
  }
  for (const auto& h : hypo) out.hypotheses[std::size_t(std::get<1>(h))] += 1;
  for (const auto& s : study) out.studies[std::size_t(std::get<1>(s))] += 1;
  return out;
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

std::string fmt_opt(const std::optional<long>& v) {
  return v ? std::to_string(*v) : std::string();
}

}  // namespace

std::string save_contrasts_csv(const Dataset& ds) {
  std::string out;
  out += "study_id,contrast_id,outcome_domain,pretest,local,";
  out += ds.rich_given_as_count ? "n_cov_domains" : "rich";
  out += ",y,theta_obs,theta_rct,se_obs,se_rct,sd_trt,sd_contr,f_stat,p_value,"
         "n_trt,n_contr,n_comp,desired_direction\n";
  for (const auto& c : ds.contrasts) {
    std::vector<std::string> f;
    f.push_back(csv_quote(c.study_id));
    f.push_back(csv_quote(c.contrast_id));
    f.push_back(csv_quote(c.outcome_domain));
    f.push_back(c.design.pretest ? "1" : "0");
    f.push_back(c.design.local ? "1" : "0");
    if (ds.rich_given_as_count) {
      long n = c.raw.n_cov_domains ? *c.raw.n_cov_domains : (c.design.rich ? 4 : 0);
      f.push_back(std::to_string(n));
    } else {
      f.push_back(c.design.rich ? "1" : "0");
    }
    f.push_back(c.y_reported ? format_double(c.y) : std::string());
    f.push_back(fmt_opt(c.raw.theta_obs));
    f.push_back(fmt_opt(c.raw.theta_rct));
    f.push_back(fmt_opt(c.raw.se_obs));
    f.push_back(fmt_opt(c.raw.se_rct));
    f.push_back(fmt_opt(c.raw.sd_trt));
    f.push_back(fmt_opt(c.raw.sd_contr));
    f.push_back(fmt_opt(c.raw.f_stat));
    f.push_back(fmt_opt(c.raw.p_value));
    f.push_back(fmt_opt(c.raw.n_trt));
    f.push_back(fmt_opt(c.raw.n_contr));
    f.push_back(fmt_opt(c.raw.n_comp));
    f.push_back(c.raw.desired_direction ? std::to_string(*c.raw.desired_direction)
                                        : std::string());
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (i) out += ',';
      out += f[i];
    }
    out += '\n';
  }
  return out;
}

std::string save_studies_csv(const Dataset& ds) {
  std::string out = "study_id,x_education,x_multicell,x_n_contrasts,x_nu_team\n";
  for (const auto& s : ds.studies) {
    out += csv_quote(s.study_id);
    out += ',';
    out += s.x_education ? "1" : "0";
    out += ',';
    out += s.x_multicell ? "1" : "0";
    out += ',';
    out += std::to_string(s.x_n_contrasts);
    out += ',';
    out += s.x_nu_team ? "1" : "0";
    out += '\n';
  }
  return out;
}

}  // namespace wsc
