#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gxe/data.hpp"
#include "gxe/eval.hpp"
#include "gxe/fa.hpp"
#include "gxe/kernels.hpp"
#include "gxe/manifest.hpp"
#include "gxe/nn.hpp"

namespace gxe {

struct IngestOptions {
  double maf_min = 0.01;
  double max_missing = 0.10;
  int target_markers = 20000;
  std::uint64_t seed = 0;
};

struct ProcessedData {
  Dataset data;  // filtered records, imputed markers, imputed environments + vectors
  StandardizeStats env_stats;
};

// raw CSVs -> filtered/imputed dataset with environment vectors; artifacts in out_dir
ProcessedData run_ingest(const std::string& raw_dir, const std::string& out_dir,
                         const IngestOptions& opts, Manifest* manifest = nullptr);
ProcessedData load_processed(const std::string& dir, Manifest* manifest = nullptr);

// Test-year data: new environments imputed against the training environments
// (soil donors and management modes come from training only) and vectorized
// with the training statistics. Markers for unseen test genotypes must already
// be part of the processed marker table.
Dataset run_ingest_test(const std::string& test_raw_dir, const ProcessedData& train,
                        const std::string& out_dir, Manifest* manifest = nullptr);
Dataset load_processed_test(const std::string& dir, const ProcessedData& train,
                            Manifest* manifest = nullptr);

// Writes an already-clean dataset as a processed directory. Standardization
// statistics come from the environments observed in the records and are
// applied to the whole table, so feature rows for held-out environments and
// genotypes may ride along for the predict stage.
ProcessedData write_processed_dir(const std::string& dir, const Dataset& d,
                                  Manifest* manifest = nullptr);

// naive fixed-effects decomposition from raw cell means (the SINN-style labels)
LabelSets anova_labels(const Dataset& d);

enum class ModelKind { Mixinn, SinnStyle, Gblup, Gxeblup };
ModelKind model_kind_from_string(const std::string& name);
std::string to_string(ModelKind kind);

struct EvalCell {
  std::string genotype_id;
  std::string environment_id;
  double y_true = 0.0;
};

struct ModelHyper {
  std::string nn_profile = "desk";
  FaOptions fa;
  KernelOptions kernels;
  bool center_kernels = true;
  // when set, overrides the profile-derived network configuration
  std::optional<StructuredConfig> custom_nn;
};

// Fits one model on `train` and predicts the evaluation cells. Feature tables
// must cover every id in the cells; environment vectors must already be built
// with training statistics.
PredictionSet fit_predict_model(ModelKind kind, const Dataset& train,
                                const GenotypeTable& all_genotypes,
                                const EnvironmentTable& all_envs,
                                const std::vector<EvalCell>& cells, const ModelHyper& hyper,
                                std::uint64_t seed);

// unique (genotype, environment) cells of a record list, y_true = cell mean
std::vector<EvalCell> cells_from_records(const std::vector<TrialRecord>& records);

struct ExperimentPlan {
  std::vector<ModelKind> models;
  int n_folds = 8;  // first n_folds folds of the 8-fold spec
  int replicates = 1;
  ModelHyper hyper;
  std::uint64_t master_seed = 0;
  // when set, every fold model predicts this fixed test set and the fold
  // predictions are averaged; otherwise folds evaluate their own holdout cells
  std::optional<std::string> test_trials_path;
};

struct ExperimentResult {
  // model -> metric -> replicate values (fold-averaged)
  std::map<std::string, std::map<std::string, std::vector<double>>> metrics;
};

ExperimentResult run_experiment(const ProcessedData& processed, const ExperimentPlan& plan,
                                const std::string& out_dir, Manifest* manifest = nullptr);

struct TuneSpec {
  std::string target = "y_ge";  // y_g | y_e | y_ge | yield
  std::vector<int> nodes;
  std::vector<int> layers;  // y_e target only
  std::vector<double> learning_rates;
  std::vector<double> weight_decays;
  int budget = 25;
  std::string criterion = "mse";  // mse | mse_minus_5r
  int replicates_per_setting = 1;
  std::uint64_t seed = 0;

  static TuneSpec defaults_for(const std::string& target);
};

struct TuneResult {
  struct Row {
    int nodes = 0;
    int layers = 0;
    double learning_rate = 0.0;
    double weight_decay = 0.0;
    double criterion_value = 0.0;
  };
  std::vector<Row> leaderboard;  // sorted ascending by criterion value
  Row best;
};

TuneResult run_tune(const ProcessedData& processed, const TuneSpec& spec,
                    const std::string& out_dir, Manifest* manifest = nullptr);

// model checkpoints + metadata for the predict stage
void save_mixinn(const std::string& dir, const MixinnModel& model);
MixinnModel load_mixinn(const std::string& dir);

}  // namespace gxe
