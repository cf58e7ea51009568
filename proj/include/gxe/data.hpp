#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "gxe/csv.hpp"
#include "gxe/error.hpp"

namespace gxe {

struct TrialRecord {
  std::string genotype_id;
  std::string environment_id;
  int year = 0;
  int replicate = 1;  // >= 1
  double yield = 0.0; // Mg/ha; NaN = missing before filtering
};

struct GenotypeTable {
  std::vector<std::string> ids;
  Eigen::MatrixXd markers;  // n_g x d_g, entries in {-1,0,1}, NaN = missing

  std::unordered_map<std::string, int> index;
  void rebuild_index();
  int find(const std::string& id) const;
  int n() const { return static_cast<int>(ids.size()); }
  int n_markers() const { return static_cast<int>(markers.cols()); }
};

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
};

struct EnvironmentTable {
  std::vector<std::string> ids;
  // daily weather per environment: (day_index, feature vector) sorted by day
  int n_weather_features = 0;
  std::vector<std::vector<std::pair<int, Eigen::VectorXd>>> weather;
  Eigen::MatrixXd soil;        // n_e x n_soil; all-NaN row = missing record
  Eigen::MatrixXd management;  // n_e x n_mgmt
  std::vector<std::optional<LatLon>> coords;
  Eigen::MatrixXd env_vector;  // n_e x d_e, populated by build_env_vectors

  std::unordered_map<std::string, int> index;
  void rebuild_index();
  int find(const std::string& id) const;
  int n() const { return static_cast<int>(ids.size()); }
  bool has_weather(int e) const { return !weather[e].empty(); }
  bool has_soil(int e) const;
};

struct Dataset {
  std::vector<TrialRecord> records;
  GenotypeTable genotypes;
  EnvironmentTable environments;

  std::size_t n_s() const { return records.size(); }
  // strict invariant check used after filtering: every record resolves
  void validate_resolved() const;
  // drop table rows not referenced by any record; reindexes tables
  Dataset compacted() const;
};

struct FoldSpec {
  struct Fold {
    int holdout_year = 0;
    std::set<std::string> holdout_genotype_ids;
  };
  std::vector<Fold> folds;   // exactly 8
  int tuning_fold_index = -1;
};

struct ScenarioPartition {
  std::vector<std::size_t> nE;   // known genotype, new environment
  std::vector<std::size_t> nGE;  // new genotype, new environment
};

struct EnvPaths {
  std::string weather;
  std::string soil;
  std::string management;
};

// ---- operations ------------------------------------------------------------

Dataset load_dataset(const std::string& trials_path, const std::string& markers_path,
                     const EnvPaths& env_paths);

GenotypeTable load_markers_csv(const std::string& path);
EnvironmentTable load_environment_files(const EnvPaths& env_paths);

struct FilterReport {
  std::size_t dropped_missing_yield = 0;
  std::size_t dropped_no_marker_row = 0;
  std::size_t dropped_no_weather = 0;
  Dataset dataset;
};

FilterReport filter_dataset(const Dataset& d);

GenotypeTable filter_markers(const GenotypeTable& g, double maf_min = 0.01,
                             double max_missing = 0.10, int target_count = 20000,
                             std::uint64_t seed = 0);

GenotypeTable impute_markers(const GenotypeTable& g);

// coords: overrides/extends per-environment coordinates from the soil file.
EnvironmentTable impute_environment(const EnvironmentTable& e,
                                    const std::map<std::string, LatLon>& coords = {});

struct StandardizeStats {
  Eigen::VectorXd means;
  Eigen::VectorXd sds;  // 0 marks a zero-variance column (mapped to zeros)
  std::vector<std::string> zero_variance_columns;
};

// Averages weather over the day window, concatenates weather/soil/management,
// standardizes columns. When `stats` is given (test environments) it is applied
// as-is and never recomputed.
StandardizeStats build_env_vectors(EnvironmentTable& e,
                                   const StandardizeStats* stats = nullptr);

FoldSpec make_cv_folds(const Dataset& d, std::uint64_t seed);

ScenarioPartition split_test_scenarios(const Dataset& train, const Dataset& test);

// Utility split for synthetic experiments: a fraction of environments become
// test-only ("new environments"), a fraction of genotypes become test-only
// ("new genotypes"). Train keeps the remaining genotypes in train environments;
// test keeps all genotypes observed in test environments.
struct HoldoutSplit {
  Dataset train;
  Dataset test;
};
HoldoutSplit holdout_split(const Dataset& d, double new_genotype_fraction,
                           double new_environment_fraction, std::uint64_t seed);

// ---- I/O -------------------------------------------------------------------

void write_trials_csv(const std::string& path, const std::vector<TrialRecord>& records);
void write_markers_csv(const std::string& path, const GenotypeTable& g);
void write_weather_csv(const std::string& path, const EnvironmentTable& e);
void write_soil_csv(const std::string& path, const EnvironmentTable& e);
void write_management_csv(const std::string& path, const EnvironmentTable& e);
void write_env_vectors_csv(const std::string& path, const EnvironmentTable& e);
// env_vector matrix from a previously written env_vectors.csv
void read_env_vectors_csv(const std::string& path, EnvironmentTable& e);

std::vector<TrialRecord> read_trials_csv(const std::string& path);

}  // namespace gxe
