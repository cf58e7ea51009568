#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gxe/data.hpp"

namespace gxe {

struct PredRow {
  std::string genotype_id;
  std::string environment_id;
  double y_pred = 0.0;
  double y_true = 0.0;
};

struct PredictionSet {
  std::vector<PredRow> rows;

  void validate() const;  // no duplicate pairs, finite values
};

struct RegressionMetrics {
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> pearson_r;  // undefined on zero variance, never 0 by fiat
};

RegressionMetrics regression_metrics(const PredictionSet& p);

struct RankingMetrics {
  double r_j = 0.0;    // within-environment Pearson, averaged unweighted
  double rho_j = 0.0;  // within-environment Spearman, averaged unweighted
  struct PerEnv {
    std::string environment_id;
    int n_genotypes = 0;
    std::optional<double> r;
    std::optional<double> rho;
  };
  std::vector<PerEnv> per_environment;
  std::vector<std::string> excluded_environments;  // fewer than 3 genotypes or degenerate
};

RankingMetrics ranking_metrics(const PredictionSet& p, int min_genotypes = 3);

struct SelectionReport {
  std::string strategy;  // "global" or "per_environment"
  double fraction = 0.0;
  std::vector<std::string> selected_ids;  // genotypes (global), "g@e" cells (per env)
  double mean_yield_selected = 0.0;
  double mean_yield_all = 0.0;
  double gain = 0.0;
  long eligible_count = 0;
};

// Global ranking via the Eq.-8 style mixed model on the predictions; genotypes
// covering fewer than coverage_min of the test environments are excluded first.
SelectionReport select_global(const PredictionSet& p, double fraction,
                              double coverage_min = 0.90);

SelectionReport select_per_environment(const PredictionSet& p, double fraction);

struct GainCurveRow {
  std::string strategy;
  double fraction = 0.0;
  double gain = 0.0;
  std::optional<double> ci95_low;
  std::optional<double> ci95_high;
};

// both strategies over a fraction grid, aggregated across replicate sets
std::vector<GainCurveRow> gain_curve(const std::vector<PredictionSet>& replicates,
                                     const std::vector<double>& fractions);

struct ModelComparison {
  struct Summary {
    std::string model;
    std::string metric;
    double mean = 0.0;
    double sd = 0.0;
    bool best = false;
  };
  struct PairTest {
    std::string metric;
    std::string model_a;
    std::string model_b;
    double t = 0.0, df = 0.0, p = 1.0;
  };
  struct LiteratureTest {
    std::string metric;
    std::string model;
    double reference = 0.0;
    double t = 0.0, df = 0.0, p = 1.0;
  };
  std::vector<Summary> summaries;
  std::vector<PairTest> pairwise;
  std::vector<LiteratureTest> literature;
};

// metric -> model -> replicate values; higher_is_better drives the best flag
ModelComparison compare_models(
    const std::map<std::string, std::map<std::string, std::vector<double>>>& replicate_metrics,
    const std::map<std::string, bool>& higher_is_better,
    const std::map<std::string, std::map<std::string, double>>& literature_values = {});

// ---- I/O -------------------------------------------------------------------

void write_predictions_csv(const std::string& path, const PredictionSet& p,
                           bool with_truth = true);
PredictionSet read_predictions_csv(const std::string& path);

void write_metrics_csv(const std::string& path, const RegressionMetrics& rm,
                       const RankingMetrics& km);
void write_selection_csv(const std::string& path, const std::vector<SelectionReport>& reports);
void write_gain_curve_csv(const std::string& path, const std::vector<GainCurveRow>& rows);

}  // namespace gxe
