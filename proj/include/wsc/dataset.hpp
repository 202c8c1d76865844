#ifndef WSC_DATASET_HPP
#define WSC_DATASET_HPP

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wsc/bias_core.hpp"

// Contrast-level dataset: ingestion + validation of the crossed hierarchy
// (study x design x outcome domain x contrast), descriptive aggregation at
// three levels, and lossless round-trip serialization.

namespace wsc {

enum class Level { kContrast, kHypothesis, kStudy };

const char* to_string(Level level);
std::optional<Level> level_from_string(const std::string& s);

// Study characteristics used as covariates X_k.
struct StudyRecord {
  std::string study_id;
  bool x_education = false;
  bool x_multicell = false;
  long x_n_contrasts = 1;
  bool x_nu_team = false;
};

// Everything a contrast row carried in the input file, kept for provenance
// and lossless re-serialization.
struct RawContrastInputs {
  std::optional<double> reported_y;
  std::optional<double> theta_obs;
  std::optional<double> theta_rct;
  std::optional<double> se_obs;
  std::optional<double> se_rct;
  std::optional<double> sd_trt;
  std::optional<double> sd_contr;
  std::optional<double> f_stat;
  std::optional<double> p_value;
  std::optional<long> n_trt;
  std::optional<long> n_contr;
  std::optional<long> n_comp;
  std::optional<int> desired_direction;
  std::optional<long> n_cov_domains;  // set when the file used the count form
};

struct ContrastRecord {
  std::string contrast_id;
  std::string study_id;
  std::string outcome_domain;
  DesignCell design;
  double y = 0.0;
  double s_y = 0.0;
  bool y_reported = false;  // true when y came straight from the file
  RawContrastInputs raw;
};

struct Dataset {
  std::vector<StudyRecord> studies;
  std::vector<ContrastRecord> contrasts;
  bool rich_given_as_count = false;  // contrasts file used n_cov_domains

  int study_index(const std::string& study_id) const;  // -1 if unknown
};

// Per-design descriptive summary at one aggregation level (a Table-1 row).
struct CellDescriptives {
  DesignCell design;
  Level level = Level::kContrast;
  std::size_t n = 0;
  double mean = 0.0;
  std::optional<double> sd;  // absent when n == 1
  double min = 0.0;
  double max = 0.0;
};

struct CellCensus {
  std::array<std::size_t, kNumDesigns> contrasts{};
  std::array<std::size_t, kNumDesigns> hypotheses{};
  std::array<std::size_t, kNumDesigns> studies{};
};

// Parse + validate the two CSV files. Throws SchemaError / RowError /
// ReferentialError; see the schema in save_contrasts_csv/save_studies_csv.
Dataset ingest(const std::string& contrasts_path, const std::string& studies_path);
Dataset ingest_strings(const std::string& contrasts_csv, const std::string& studies_csv);

// 1 / s_y per contrast, in contrast order.
std::vector<double> derive_weights(const Dataset& ds);

// The bias values that enter descriptives at a level, grouped by design:
// contrast level = raw y; hypothesis level = mean y per (study, design,
// domain); study level = mean y per (study, design).
std::array<std::vector<double>, kNumDesigns> level_values(const Dataset& ds, Level level);

// Table-1-style descriptives for every non-empty design cell at the level,
// ordered by design index. Sample SD uses the n-1 denominator.
std::vector<CellDescriptives> aggregate(const Dataset& ds, Level level);

CellCensus cell_census(const Dataset& ds);

// Lossless serialization of the ingest schema.
std::string save_contrasts_csv(const Dataset& ds);
std::string save_studies_csv(const Dataset& ds);

}  // namespace wsc

#endif
