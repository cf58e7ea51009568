#include "gxe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "gxe/config.hpp"
#include "gxe/rng.hpp"
#include "gxe/stats.hpp"

namespace fs = std::filesystem;

namespace gxe {

namespace {

void record_write(Manifest* m, const std::string& path) {
  if (m) m->record_write(path);
}
void record_read(Manifest* m, const std::string& path) {
  if (m) m->record_read(path);
}

void write_env_stats_csv(const std::string& path, const StandardizeStats& stats) {
  CsvWriter w(path);
  w.write_row({"column", "mean", "sd"});
  for (Eigen::Index c = 0; c < stats.means.size(); ++c)
    w.write_row({std::to_string(c + 1), format_double(stats.means[c]),
                 format_double(stats.sds[c])});
}

StandardizeStats read_env_stats_csv(const std::string& path) {
  CsvReader reader(path);
  std::vector<std::string> row;
  if (!reader.next_row(row)) reader.fail("empty stats file");
  std::vector<double> means, sds;
  while (reader.next_row(row)) {
    if (row.size() != 3) reader.fail("expected 3 fields");
    means.push_back(reader.parse_double(row[1], "mean"));
    sds.push_back(reader.parse_double(row[2], "sd"));
  }
  StandardizeStats stats;
  stats.means = Eigen::Map<Eigen::VectorXd>(means.data(), static_cast<Eigen::Index>(means.size()));
  stats.sds = Eigen::Map<Eigen::VectorXd>(sds.data(), static_cast<Eigen::Index>(sds.size()));
  return stats;
}

// soil from the nearest training environment, management from the training
// mode; weather gaps are local to each environment
void impute_test_environments(const EnvironmentTable& train, EnvironmentTable& test) {
  for (int i = 0; i < test.n(); ++i) {
    if (!test.has_weather(i))
      throw ValidationError("test environment " + test.ids[i] + " has no weather data");
  }
  for (int i = 0; i < test.n(); ++i) {
    // reuse the interior-linear / edge-nearest rule via a single-env table
    EnvironmentTable one;
    one.n_weather_features = test.n_weather_features;
    one.ids = {test.ids[i]};
    one.weather = {test.weather[i]};
    one.coords = {test.coords[i]};
    one.soil.resize(1, 0);
    one.management.resize(1, 0);
    one.rebuild_index();
    test.weather[i] = impute_environment(one).weather[0];
  }
  for (Eigen::Index c = 0; c < test.soil.cols(); ++c) {
    for (int i = 0; i < test.n(); ++i) {
      if (!is_missing(test.soil(i, c))) continue;
      if (!test.coords[i])
        throw ValidationError("test environment " + test.ids[i] +
                              ": soil imputation needs coordinates");
      int donor = -1;
      double best = 0.0;
      for (int j = 0; j < train.n(); ++j) {
        if (is_missing(train.soil(j, c)) || !train.coords[j]) continue;
        const double dx = test.coords[i]->lat - train.coords[j]->lat;
        const double dy = test.coords[i]->lon - train.coords[j]->lon;
        const double dist = std::sqrt(dx * dx + dy * dy);
        if (donor < 0 || dist < best || (dist == best && train.ids[j] < train.ids[donor])) {
          donor = j;
          best = dist;
        }
      }
      if (donor < 0)
        throw ValidationError("no training donor for test soil imputation");
      test.soil(i, c) = train.soil(donor, c);
    }
  }
  for (Eigen::Index c = 0; c < test.management.cols(); ++c) {
    std::map<double, int> counts;
    for (int j = 0; j < train.n(); ++j)
      if (!is_missing(train.management(j, c))) ++counts[train.management(j, c)];
    for (int i = 0; i < test.n(); ++i) {
      if (!is_missing(test.management(i, c))) continue;
      if (counts.empty())
        throw ValidationError("no training values for test management imputation");
      double fill = counts.begin()->first;
      int best = counts.begin()->second;
      for (const auto& [v, n] : counts)
        if (n > best) { best = n; fill = v; }
      test.management(i, c) = fill;
    }
  }
}

}  // namespace

ProcessedData run_ingest(const std::string& raw_dir, const std::string& out_dir,
                         const IngestOptions& opts, Manifest* manifest) {
  fs::create_directories(out_dir);
  const std::string trials = raw_dir + "/trials.csv";
  const std::string markers = raw_dir + "/markers.csv";
  const EnvPaths env_paths{raw_dir + "/weather.csv", raw_dir + "/soil.csv",
                           raw_dir + "/management.csv"};
  for (const auto& p : {trials, markers, env_paths.weather, env_paths.soil,
                        env_paths.management})
    record_read(manifest, p);

  Dataset raw = load_dataset(trials, markers, env_paths);
  FilterReport filtered = filter_dataset(raw);
  ProcessedData out;
  out.data = std::move(filtered.dataset);
  out.data.genotypes =
      filter_markers(out.data.genotypes, opts.maf_min, opts.max_missing, opts.target_markers,
                     derive_seed(opts.seed, "ingest.markers"));
  out.data.genotypes = impute_markers(out.data.genotypes);
  out.data.environments = impute_environment(out.data.environments);
  // imputation can remove environments; refilter records against the table
  {
    std::vector<TrialRecord> keep;
    for (auto& r : out.data.records)
      if (out.data.environments.find(r.environment_id) >= 0 &&
          out.data.genotypes.find(r.genotype_id) >= 0)
        keep.push_back(std::move(r));
    out.data.records = std::move(keep);
    if (out.data.records.empty()) throw ValidationError("no samples survive filtering");
  }
  out.env_stats = build_env_vectors(out.data.environments);
  out.data.validate_resolved();

  write_trials_csv(out_dir + "/trials.csv", out.data.records);
  write_markers_csv(out_dir + "/markers.csv", out.data.genotypes);
  write_weather_csv(out_dir + "/weather.csv", out.data.environments);
  write_soil_csv(out_dir + "/soil.csv", out.data.environments);
  write_management_csv(out_dir + "/management.csv", out.data.environments);
  write_env_vectors_csv(out_dir + "/env_vectors.csv", out.data.environments);
  write_env_stats_csv(out_dir + "/env_stats.csv", out.env_stats);
  {
    CsvWriter w(out_dir + "/ingest_report.csv");
    w.write_row({"what", "count"});
    w.write_row({"records", std::to_string(out.data.records.size())});
    w.write_row({"genotypes", std::to_string(out.data.genotypes.n())});
    w.write_row({"environments", std::to_string(out.data.environments.n())});
    w.write_row({"markers", std::to_string(out.data.genotypes.n_markers())});
    w.write_row({"dropped_missing_yield", std::to_string(filtered.dropped_missing_yield)});
    w.write_row({"dropped_no_marker_row", std::to_string(filtered.dropped_no_marker_row)});
    w.write_row({"dropped_no_weather", std::to_string(filtered.dropped_no_weather)});
  }
  for (const auto& name :
       {"trials.csv", "markers.csv", "weather.csv", "soil.csv", "management.csv",
        "env_vectors.csv", "env_stats.csv", "ingest_report.csv"})
    record_write(manifest, out_dir + "/" + name);
  return out;
}

ProcessedData load_processed(const std::string& dir, Manifest* manifest) {
  ProcessedData out;
  const EnvPaths env_paths{dir + "/weather.csv", dir + "/soil.csv", dir + "/management.csv"};
  out.data = load_dataset(dir + "/trials.csv", dir + "/markers.csv", env_paths);
  read_env_vectors_csv(dir + "/env_vectors.csv", out.data.environments);
  out.env_stats = read_env_stats_csv(dir + "/env_stats.csv");
  out.data.validate_resolved();
  for (const auto& name : {"trials.csv", "markers.csv", "weather.csv", "soil.csv",
                           "management.csv", "env_vectors.csv", "env_stats.csv"})
    record_read(manifest, dir + "/" + name);
  return out;
}

Dataset run_ingest_test(const std::string& test_raw_dir, const ProcessedData& train,
                        const std::string& out_dir, Manifest* manifest) {
  fs::create_directories(out_dir);
  const std::string trials = test_raw_dir + "/trials.csv";
  const EnvPaths env_paths{test_raw_dir + "/weather.csv", test_raw_dir + "/soil.csv",
                           test_raw_dir + "/management.csv"};
  for (const auto& p : {trials, env_paths.weather, env_paths.soil, env_paths.management})
    record_read(manifest, p);

  Dataset test;
  test.records = read_trials_csv(trials);
  test.genotypes = train.data.genotypes;  // shared marker table
  test.environments = load_environment_files(env_paths);
  // drop records with missing yield or unknown genotype/environment
  std::vector<TrialRecord> keep;
  for (auto& r : test.records) {
    if (is_missing(r.yield)) continue;
    if (test.genotypes.find(r.genotype_id) < 0) continue;
    if (test.environments.find(r.environment_id) < 0) continue;
    keep.push_back(std::move(r));
  }
  test.records = std::move(keep);
  if (test.records.empty()) throw ValidationError("no test samples survive filtering");

  impute_test_environments(train.data.environments, test.environments);
  build_env_vectors(test.environments, &train.env_stats);

  write_trials_csv(out_dir + "/test_trials.csv", test.records);
  write_weather_csv(out_dir + "/test_weather.csv", test.environments);
  write_soil_csv(out_dir + "/test_soil.csv", test.environments);
  write_management_csv(out_dir + "/test_management.csv", test.environments);
  write_env_vectors_csv(out_dir + "/test_env_vectors.csv", test.environments);
  for (const auto& name : {"test_trials.csv", "test_weather.csv", "test_soil.csv",
                           "test_management.csv", "test_env_vectors.csv"})
    record_write(manifest, out_dir + "/" + name);
  return test;
}

Dataset load_processed_test(const std::string& dir, const ProcessedData& train,
                            Manifest* manifest) {
  Dataset test;
  test.records = read_trials_csv(dir + "/test_trials.csv");
  test.genotypes = train.data.genotypes;
  const EnvPaths env_paths{dir + "/test_weather.csv", dir + "/test_soil.csv",
                           dir + "/test_management.csv"};
  test.environments = load_environment_files(env_paths);
  read_env_vectors_csv(dir + "/test_env_vectors.csv", test.environments);
  for (const auto& name : {"test_trials.csv", "test_weather.csv", "test_soil.csv",
                           "test_management.csv", "test_env_vectors.csv"})
    record_read(manifest, dir + "/" + name);
  return test;
}

ProcessedData write_processed_dir(const std::string& dir, const Dataset& d,
                                  Manifest* manifest) {
  fs::create_directories(dir);
  ProcessedData out;
  out.data = d;
  {
    Dataset observed = d.compacted();
    out.env_stats = build_env_vectors(observed.environments);
  }
  build_env_vectors(out.data.environments, &out.env_stats);
  out.data.validate_resolved();

  write_trials_csv(dir + "/trials.csv", out.data.records);
  write_markers_csv(dir + "/markers.csv", out.data.genotypes);
  write_weather_csv(dir + "/weather.csv", out.data.environments);
  write_soil_csv(dir + "/soil.csv", out.data.environments);
  write_management_csv(dir + "/management.csv", out.data.environments);
  write_env_vectors_csv(dir + "/env_vectors.csv", out.data.environments);
  write_env_stats_csv(dir + "/env_stats.csv", out.env_stats);
  for (const auto& name : {"trials.csv", "markers.csv", "weather.csv", "soil.csv",
                           "management.csv", "env_vectors.csv", "env_stats.csv"})
    record_write(manifest, dir + "/" + std::string(name));
  return out;
}

LabelSets anova_labels(const Dataset& d) {
  const int n_g = d.genotypes.n(), n_e = d.environments.n();
  if (d.n_s() == 0) throw ValidationError("empty dataset");
  LabelSets ls;
  double sum = 0.0;
  Eigen::VectorXd gsum = Eigen::VectorXd::Zero(n_g), gcnt = Eigen::VectorXd::Zero(n_g);
  Eigen::VectorXd esum = Eigen::VectorXd::Zero(n_e), ecnt = Eigen::VectorXd::Zero(n_e);
  Eigen::MatrixXd csum = Eigen::MatrixXd::Zero(n_g, n_e), ccnt = Eigen::MatrixXd::Zero(n_g, n_e);
  for (const auto& r : d.records) {
    const int i = d.genotypes.find(r.genotype_id);
    const int j = d.environments.find(r.environment_id);
    sum += r.yield;
    gsum[i] += r.yield;
    gcnt[i] += 1.0;
    esum[j] += r.yield;
    ecnt[j] += 1.0;
    csum(i, j) += r.yield;
    ccnt(i, j) += 1.0;
  }
  ls.mu_hat = sum / static_cast<double>(d.n_s());
  ls.y_g.resize(n_g);
  for (int i = 0; i < n_g; ++i)
    ls.y_g[i] = gcnt[i] > 0.0 ? gsum[i] / gcnt[i] - ls.mu_hat : 0.0;
  ls.y_e.resize(n_e);
  for (int j = 0; j < n_e; ++j)
    ls.y_e[j] = ecnt[j] > 0.0 ? esum[j] / ecnt[j] - ls.mu_hat : 0.0;
  ls.y_ge = Eigen::MatrixXd::Zero(n_g, n_e);
  for (int i = 0; i < n_g; ++i)
    for (int j = 0; j < n_e; ++j)
      if (ccnt(i, j) > 0.0)
        ls.y_ge(i, j) = csum(i, j) / ccnt(i, j) - ls.mu_hat - ls.y_g[i] - ls.y_e[j];
  return ls;
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "mixinn") return ModelKind::Mixinn;
  if (name == "sinn_style") return ModelKind::SinnStyle;
  if (name == "gblup") return ModelKind::Gblup;
  if (name == "gxeblup") return ModelKind::Gxeblup;
  throw ValidationError("unknown model: " + name);
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Mixinn: return "mixinn";
    case ModelKind::SinnStyle: return "sinn_style";
    case ModelKind::Gblup: return "gblup";
    case ModelKind::Gxeblup: return "gxeblup";
  }
  return "?";
}

std::vector<EvalCell> cells_from_records(const std::vector<TrialRecord>& records) {
  std::map<std::pair<std::string, std::string>, std::pair<double, long>> cells;
  for (const auto& r : records) {
    if (is_missing(r.yield)) continue;
    auto& [sum, cnt] = cells[{r.genotype_id, r.environment_id}];
    sum += r.yield;
    ++cnt;
  }
  std::vector<EvalCell> out;
  out.reserve(cells.size());
  for (const auto& [key, agg] : cells)
    out.push_back({key.first, key.second, agg.first / static_cast<double>(agg.second)});
  return out;
}

PredictionSet fit_predict_model(ModelKind kind, const Dataset& train,
                                const GenotypeTable& all_genotypes,
                                const EnvironmentTable& all_envs,
                                const std::vector<EvalCell>& cells, const ModelHyper& hyper,
                                std::uint64_t seed) {
  Dataset train_c = train.compacted();
  // standardization statistics come from the training environments only
  const StandardizeStats stats = build_env_vectors(train_c.environments);
  EnvironmentTable universe = all_envs;
  build_env_vectors(universe, &stats);

  PredictionSet out;
  out.rows.reserve(cells.size());

  if (kind == ModelKind::Gblup) {
    const RelationshipMatrix kg = genomic_relationship(all_genotypes, hyper.center_kernels);
    const GblupFit fit = fit_gblup(train_c, kg, hyper.kernels);
    for (const auto& c : cells)
      out.rows.push_back({c.genotype_id, c.environment_id, fit.predict(c.genotype_id), c.y_true});
    return out;
  }
  if (kind == ModelKind::Gxeblup) {
    const RelationshipMatrix kg = genomic_relationship(all_genotypes, hyper.center_kernels);
    const RelationshipMatrix ke = environmental_relationship(universe, hyper.center_kernels);
    const GxeblupFit fit = fit_gxeblup(train_c, kg, ke, hyper.kernels);
    for (const auto& c : cells)
      out.rows.push_back({c.genotype_id, c.environment_id,
                          fit.predict(c.genotype_id, c.environment_id), c.y_true});
    return out;
  }

  // neural pipelines
  LabelSets labels;
  if (kind == ModelKind::Mixinn) {
    FaOptions fa = hyper.fa;
    fa.seed = derive_seed(seed, "model.fa");
    const FAFit fit = fit_fa(train_c, fa);
    labels = generate_labels(fit, train_c);
  } else {
    labels = anova_labels(train_c);
  }
  StructuredConfig nn_cfg =
      hyper.custom_nn ? *hyper.custom_nn
                      : default_structured_config(train_c.genotypes.n_markers(),
                                                  static_cast<int>(
                                                      train_c.environments.env_vector.cols()),
                                                  hyper.nn_profile, 0);
  nn_cfg.seed = derive_seed(seed, "model.nn");
  nn_cfg.fg.seed = derive_seed(nn_cfg.seed, "nn.fg");
  nn_cfg.fe.seed = derive_seed(nn_cfg.seed, "nn.fe");
  nn_cfg.fge.seed = derive_seed(nn_cfg.seed, "nn.fge");
  const MixinnModel model = structured_fit(train_c, labels, nn_cfg);

  for (const auto& c : cells) {
    const int gi = all_genotypes.find(c.genotype_id);
    const int ej = universe.find(c.environment_id);
    if (gi < 0) throw ValidationError("no marker row for genotype " + c.genotype_id);
    if (ej < 0) throw ValidationError("no environment features for " + c.environment_id);
    const double pred = predict_yield(model, all_genotypes.markers.row(gi).transpose(),
                                      universe.env_vector.row(ej).transpose());
    out.rows.push_back({c.genotype_id, c.environment_id, pred, c.y_true});
  }
  return out;
}

// ---- experiment -------------------------------------------------------------

namespace {

struct FoldData {
  Dataset train;
  std::vector<EvalCell> cells;
};

FoldData make_fold(const Dataset& d, const FoldSpec::Fold& fold,
                   const std::optional<std::vector<EvalCell>>& fixed_cells) {
  FoldData fd;
  fd.train.genotypes = d.genotypes;
  fd.train.environments = d.environments;
  std::vector<TrialRecord> holdout;
  for (const auto& r : d.records) {
    const bool year_held = r.year == fold.holdout_year;
    const bool geno_held = fold.holdout_genotype_ids.count(r.genotype_id) > 0;
    if (!year_held && !geno_held)
      fd.train.records.push_back(r);
    else if (year_held && geno_held)
      holdout.push_back(r);
  }
  if (fd.train.records.empty()) throw ValidationError("fold has no training records");
  if (fixed_cells)
    fd.cells = *fixed_cells;
  else
    fd.cells = cells_from_records(holdout);
  if (fd.cells.empty())
    throw ValidationError("fold " + std::to_string(fold.holdout_year) +
                          " has no evaluation cells");
  return fd;
}

std::map<std::string, double> prediction_metrics(const PredictionSet& p) {
  std::map<std::string, double> m;
  const RegressionMetrics rm = regression_metrics(p);
  m["rmse"] = rm.rmse;
  m["mae"] = rm.mae;
  m["pearson_r"] = rm.pearson_r ? *rm.pearson_r : missing_value();
  const RankingMetrics km = ranking_metrics(p);
  m["r_j"] = km.r_j;
  m["rho_j"] = km.rho_j;
  return m;
}

}  // namespace

ExperimentResult run_experiment(const ProcessedData& processed, const ExperimentPlan& plan,
                                const std::string& out_dir, Manifest* manifest) {
  if (plan.models.empty()) throw ValidationError("experiment needs at least one model");
  if (plan.n_folds < 1 || plan.n_folds > 8)
    throw ValidationError("experiment needs 1..8 folds");
  if (plan.replicates < 1) throw ValidationError("experiment needs >= 1 replicates");
  fs::create_directories(out_dir);
  const Dataset& d = processed.data;

  std::optional<std::vector<EvalCell>> fixed_cells;
  if (plan.test_trials_path) {
    record_read(manifest, *plan.test_trials_path);
    fixed_cells = cells_from_records(read_trials_csv(*plan.test_trials_path));
  }

  ExperimentResult result;
  for (int rep = 0; rep < plan.replicates; ++rep) {
    const FoldSpec folds =
        make_cv_folds(d, derive_seed(plan.master_seed, "experiment.folds",
                                     static_cast<std::uint64_t>(rep)));
    // per model: fold prediction sets for this replicate
    std::map<std::string, std::vector<PredictionSet>> fold_preds;
    for (int f = 0; f < plan.n_folds; ++f) {
      const FoldData fd = make_fold(d, folds.folds[static_cast<std::size_t>(f)], fixed_cells);
      for (ModelKind kind : plan.models) {
        const std::string name = to_string(kind);
        const std::uint64_t cell_seed =
            derive_seed(plan.master_seed, "experiment." + name,
                        static_cast<std::uint64_t>(f), static_cast<std::uint64_t>(rep));
        PredictionSet preds = fit_predict_model(kind, fd.train, d.genotypes, d.environments,
                                                fd.cells, plan.hyper, cell_seed);
        const std::string pred_path = out_dir + "/predictions_" + name + "_f" +
                                      std::to_string(f + 1) + "_r" + std::to_string(rep + 1) +
                                      ".csv";
        write_predictions_csv(pred_path, preds);
        record_write(manifest, pred_path);
        fold_preds[name].push_back(std::move(preds));
      }
    }
    for (const auto& [name, preds] : fold_preds) {
      std::map<std::string, double> metrics;
      if (fixed_cells) {
        // paper protocol: average the fold predictions over the fixed test set
        PredictionSet avg = preds.front();
        for (std::size_t i = 1; i < preds.size(); ++i)
          for (std::size_t r = 0; r < avg.rows.size(); ++r)
            avg.rows[r].y_pred += preds[i].rows[r].y_pred;
        for (auto& r : avg.rows) r.y_pred /= static_cast<double>(preds.size());
        metrics = prediction_metrics(avg);
      } else {
        // holdout cells differ per fold: average the per-fold metric values
        std::map<std::string, double> acc;
        for (const auto& p : preds)
          for (const auto& [k, v] : prediction_metrics(p)) acc[k] += v;
        for (auto& [k, v] : acc) metrics[k] = v / static_cast<double>(preds.size());
      }
      for (const auto& [k, v] : metrics) result.metrics[name][k].push_back(v);
    }
  }

  // aggregated metrics; byte-identical across reruns with the same master seed
  {
    const std::string path = out_dir + "/metrics.csv";
    CsvWriter w(path);
    w.write_row({"model", "metric", "mean", "sd"});
    for (const auto& [model, metrics] : result.metrics) {
      for (const auto& [metric, values] : metrics) {
        const double m = mean(values);
        const double sd = values.size() > 1 ? std::sqrt(sample_variance(values)) : 0.0;
        w.write_row({model, metric, format_double(m), format_double(sd)});
      }
    }
    record_write(manifest, path);
  }
  {
    const std::string path = out_dir + "/metrics_replicates.csv";
    CsvWriter w(path);
    w.write_row({"model", "replicate", "metric", "value"});
    for (const auto& [model, metrics] : result.metrics)
      for (const auto& [metric, values] : metrics)
        for (std::size_t rep = 0; rep < values.size(); ++rep)
          w.write_row({model, std::to_string(rep + 1), metric, format_double(values[rep])});
    record_write(manifest, path);
  }
  return result;
}

// ---- tuning -----------------------------------------------------------------

TuneSpec TuneSpec::defaults_for(const std::string& target) {
  TuneSpec t;
  t.target = target;
  if (target == "y_g") {
    t.nodes = {64, 96, 128, 192, 256};
    t.learning_rates = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
    t.weight_decays = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
    t.budget = 125;
  } else if (target == "y_e") {
    t.layers = {3, 4, 5};
    t.nodes = {8, 16, 32, 48, 64};
    t.learning_rates = {1e-5, 3e-5, 1e-4, 3e-4, 1e-3};
    t.weight_decays = {1e-5, 5e-5, 1e-4, 3e-4, 1e-3};
    t.budget = 200;
    t.criterion = "mse_minus_5r";
    t.replicates_per_setting = 5;
  } else if (target == "y_ge") {
    t.nodes = {8, 16, 32, 64, 128};
    t.learning_rates = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
    t.weight_decays = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
    t.budget = 125;
  } else if (target == "yield") {
    t.nodes = {8};
    t.learning_rates = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
    t.weight_decays = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
    t.budget = 25;
  } else {
    throw ValidationError("unknown tune target: " + target);
  }
  return t;
}

TuneResult run_tune(const ProcessedData& processed, const TuneSpec& spec_in,
                    const std::string& out_dir, Manifest* manifest) {
  TuneSpec spec = spec_in;
  // environment-effect models are unstable on few validation samples; the
  // modified criterion and 5 replicates are mandatory for them
  if (spec.target == "y_e") {
    spec.criterion = "mse_minus_5r";
    spec.replicates_per_setting = 5;
  }
  if (spec.nodes.empty() || spec.learning_rates.empty() || spec.weight_decays.empty())
    throw ValidationError("tune: empty hyperparameter grid");
  if (spec.target != "y_e") spec.layers = {0};
  if (spec.budget < 1) throw ValidationError("tune: budget must be >= 1");
  fs::create_directories(out_dir);

  const Dataset& d = processed.data;
  const FoldSpec folds = make_cv_folds(d, derive_seed(spec.seed, "tune.folds"));
  const FoldSpec::Fold& tuning = folds.folds[static_cast<std::size_t>(folds.tuning_fold_index)];

  // label sets from the full training data
  FaOptions fa;
  fa.seed = derive_seed(spec.seed, "tune.fa");
  const FAFit fit = fit_fa(d, fa);
  const LabelSets labels = generate_labels(fit, d);

  // environment year (one year per environment by construction)
  std::map<std::string, int> env_year;
  for (const auto& r : d.records) env_year[r.environment_id] = r.year;

  const int d_g = d.genotypes.n_markers();
  const int d_e = static_cast<int>(d.environments.env_vector.cols());

  // full grid, then a seeded random draw of `budget` configurations
  std::vector<TuneResult::Row> grid;
  for (int layers : spec.layers)
    for (int nodes : spec.nodes)
      for (double lr : spec.learning_rates)
        for (double wd : spec.weight_decays) grid.push_back({nodes, layers, lr, wd, 0.0});
  std::vector<std::size_t> chosen;
  if (static_cast<int>(grid.size()) <= spec.budget) {
    chosen.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) chosen[i] = i;
  } else {
    Rng rng(derive_seed(spec.seed, "tune.draw"));
    chosen = rng.sample_without_replacement(grid.size(),
                                            static_cast<std::size_t>(spec.budget));
  }

  // index partitions for the tuning fold
  std::vector<int> train_g, val_g;
  for (int i = 0; i < d.genotypes.n(); ++i) {
    if (tuning.holdout_genotype_ids.count(d.genotypes.ids[i]))
      val_g.push_back(i);
    else
      train_g.push_back(i);
  }
  std::vector<int> train_e, val_e;
  for (int j = 0; j < d.environments.n(); ++j) {
    if (env_year.count(d.environments.ids[j]) &&
        env_year[d.environments.ids[j]] == tuning.holdout_year)
      val_e.push_back(j);
    else
      train_e.push_back(j);
  }
  if (val_g.empty() || val_e.empty())
    throw ValidationError("tuning fold has no validation genotypes or environments");

  auto rows_of = [](const Eigen::MatrixXd& x, const std::vector<int>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
    return out;
  };
  auto entries_of = [](const Eigen::VectorXd& v, const std::vector<int>& idx) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[idx[i]];
    return out;
  };

  // observed cells split for interaction / yield targets
  std::set<std::string> holdout_g(tuning.holdout_genotype_ids.begin(),
                                  tuning.holdout_genotype_ids.end());
  std::vector<std::pair<int, int>> train_cells, val_cells;
  std::vector<double> val_cell_yield;
  {
    std::map<std::pair<int, int>, std::pair<double, long>> cell_means;
    for (const auto& r : d.records) {
      const int i = d.genotypes.find(r.genotype_id);
      const int j = d.environments.find(r.environment_id);
      auto& [sum, cnt] = cell_means[{i, j}];
      sum += r.yield;
      ++cnt;
    }
    for (const auto& [cell, agg] : cell_means) {
      const bool g_held = holdout_g.count(d.genotypes.ids[cell.first]) > 0;
      const bool e_held = env_year[d.environments.ids[cell.second]] == tuning.holdout_year;
      if (!g_held && !e_held) {
        train_cells.push_back(cell);
      } else if (g_held && e_held) {
        val_cells.push_back(cell);
        val_cell_yield.push_back(agg.first / static_cast<double>(agg.second));
      }
    }
  }
  if ((spec.target == "y_ge" || spec.target == "yield") && val_cells.empty())
    throw ValidationError("tuning fold has no intersection cells for this target");

  TuneResult result;
  for (std::size_t pick = 0; pick < chosen.size(); ++pick) {
    TuneResult::Row row = grid[chosen[pick]];
    std::vector<double> crit_values;
    for (int rep = 0; rep < spec.replicates_per_setting; ++rep) {
      const std::uint64_t fit_seed =
          derive_seed(spec.seed, "tune.fit", static_cast<std::uint64_t>(chosen[pick]),
                      static_cast<std::uint64_t>(rep));
      std::vector<double> pred, truth;
      if (spec.target == "y_g") {
        MLPSpec ms = genotype_encoder_spec(d_g, row.nodes);
        Mlp m = Mlp::build(ms, derive_seed(fit_seed, "init"));
        TrainConfig tc{250, 256, row.learning_rate, row.weight_decay, Optimizer::AdamW,
                       derive_seed(fit_seed, "train")};
        train_component(m, rows_of(d.genotypes.markers, train_g),
                        entries_of(labels.y_g, train_g), tc);
        for (int i : val_g) {
          pred.push_back(m.forward_scalar(d.genotypes.markers.row(i).transpose(), false, nullptr));
          truth.push_back(labels.y_g[i]);
        }
      } else if (spec.target == "y_e") {
        MLPSpec ms = env_encoder_spec(d_e, row.nodes, row.layers);
        Mlp m = Mlp::build(ms, derive_seed(fit_seed, "init"));
        TrainConfig tc{500, 32, row.learning_rate, row.weight_decay, Optimizer::AdamW,
                       derive_seed(fit_seed, "train")};
        train_component(m, rows_of(d.environments.env_vector, train_e),
                        entries_of(labels.y_e, train_e), tc);
        for (int j : val_e) {
          pred.push_back(
              m.forward_scalar(d.environments.env_vector.row(j).transpose(), false, nullptr));
          truth.push_back(labels.y_e[j]);
        }
      } else {
        StructuredConfig cfg = default_structured_config(d_g, d_e, "desk", fit_seed);
        cfg.fge.learning_rate = row.learning_rate;
        cfg.fge.weight_decay = row.weight_decay;
        if (spec.target == "y_ge") cfg.embedding_len = row.nodes;
        // the tuning-fold training portion only
        Dataset train_d;
        train_d.genotypes = d.genotypes;
        train_d.environments = d.environments;
        for (const auto& r : d.records) {
          if (holdout_g.count(r.genotype_id)) continue;
          if (env_year[r.environment_id] == tuning.holdout_year) continue;
          train_d.records.push_back(r);
        }
        Dataset train_c = train_d.compacted();
        const StandardizeStats stats = build_env_vectors(train_c.environments);
        EnvironmentTable universe = d.environments;
        build_env_vectors(universe, &stats);
        FaOptions ffa;
        ffa.seed = derive_seed(fit_seed, "fa");
        const LabelSets fold_labels = generate_labels(fit_fa(train_c, ffa), train_c);
        const MixinnModel model = structured_fit(train_c, fold_labels, cfg);
        for (std::size_t k = 0; k < val_cells.size(); ++k) {
          const auto& [i, j] = val_cells[k];
          const Eigen::VectorXd xg = d.genotypes.markers.row(i).transpose();
          const Eigen::VectorXd xe = universe.env_vector.row(j).transpose();
          if (spec.target == "y_ge") {
            pred.push_back(model.f_ge.forward(xg, xe, false, nullptr));
            truth.push_back(labels.y_ge(i, j));
          } else {
            pred.push_back(predict_yield(model, xg, xe));
            truth.push_back(val_cell_yield[k]);
          }
        }
      }
      double mse = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i)
        mse += (pred[i] - truth[i]) * (pred[i] - truth[i]);
      mse /= static_cast<double>(pred.size());
      if (spec.criterion == "mse_minus_5r") {
        const auto r = pearson(pred, truth);
        crit_values.push_back(mse - 5.0 * (r ? *r : 0.0));
      } else {
        crit_values.push_back(mse);
      }
    }
    row.criterion_value = mean(crit_values);
    result.leaderboard.push_back(row);
  }

  std::stable_sort(result.leaderboard.begin(), result.leaderboard.end(),
                   [](const auto& a, const auto& b) {
                     return a.criterion_value < b.criterion_value;
                   });
  result.best = result.leaderboard.front();

  {
    const std::string path = out_dir + "/leaderboard.csv";
    CsvWriter w(path);
    w.write_row({"rank", "nodes", "layers", "learning_rate", "weight_decay", spec.criterion});
    for (std::size_t i = 0; i < result.leaderboard.size(); ++i) {
      const auto& r = result.leaderboard[i];
      w.write_row({std::to_string(i + 1), std::to_string(r.nodes), std::to_string(r.layers),
                   format_double(r.learning_rate), format_double(r.weight_decay),
                   format_double(r.criterion_value)});
    }
    record_write(manifest, path);
  }
  {
    Ini best;
    best.set("tune", "target", spec.target);
    best.set("tune", "nodes", std::to_string(result.best.nodes));
    if (spec.target == "y_e") best.set("tune", "layers", std::to_string(result.best.layers));
    best.set("tune", "learning_rate", format_double(result.best.learning_rate));
    best.set("tune", "weight_decay", format_double(result.best.weight_decay));
    best.set("tune", "criterion_value", format_double(result.best.criterion_value));
    const std::string path = out_dir + "/best_config.ini";
    best.write_file(path);
    record_write(manifest, path);
  }
  return result;
}

void save_mixinn(const std::string& dir, const MixinnModel& model) {
  fs::create_directories(dir);
  save_mlp(dir + "/fg.bin", model.f_g);
  save_mlp(dir + "/fe.bin", model.f_e);
  save_two_tower(dir + "/fge.bin", model.f_ge);
  CsvWriter w(dir + "/mixinn_meta.csv");
  w.write_row({"key", "value"});
  w.write_row({"mu_hat", format_double(model.mu_hat)});
}

MixinnModel load_mixinn(const std::string& dir) {
  MixinnModel model;
  model.f_g = load_mlp(dir + "/fg.bin");
  model.f_e = load_mlp(dir + "/fe.bin");
  model.f_ge = load_two_tower(dir + "/fge.bin");
  CsvReader reader(dir + "/mixinn_meta.csv");
  std::vector<std::string> row;
  reader.next_row(row);
  bool found = false;
  while (reader.next_row(row)) {
    if (row.size() == 2 && row[0] == "mu_hat") {
      model.mu_hat = reader.parse_double(row[1], "mu_hat");
      found = true;
    }
  }
  if (!found) throw ValidationError("mixinn_meta.csv missing mu_hat");
  return model;
}

}  // namespace gxe
